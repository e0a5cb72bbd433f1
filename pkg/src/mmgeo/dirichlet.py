"""Dirichlet form, first-order operators, heat flow and test functions.

The stiffness operator is assembled from per-cell gradients, S = D^T W D,
so divergence is the exact negative adjoint of the gradient and the
measure-valued Laplacian of any function has zero total mass by construction.
"""

from __future__ import annotations

import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .space import (DiscreteSpace, ScalarField, VectorField, OneForm,
                    SignedMeasure, cell_inner, pointwise_inner, musical_flat,
                    musical_sharp)
from .verdict import VerdictReport, exact_verdict

DEFAULT_DT = 0.01


class DirichletAssembly:
    """Stiffness, mass and gradient operators of a space, built once."""

    def __init__(self, space):
        self.space = space
        self.D = space.gradient_matrix
        wc = np.repeat(space.m_c, space.dmax)
        # metric weights enter through the frame; keep the general form
        if not np.allclose(space.metric, np.eye(space.dmax)):
            blocks = [sp.csr_matrix(space.metric[c]) for c in range(space.n_cells)]
            G = sp.block_diag(blocks, format="csr")
            self.W = sp.diags(wc) @ G
        else:
            self.W = sp.diags(wc)
        self.M = sp.diags(space.m_v)
        self.S = (self.D.T @ self.W @ self.D).tocsc()
        self._heat_factors = {}

    def heat_factor(self, dt):
        key = round(float(dt), 14)
        if key not in self._heat_factors:
            self._heat_factors[key] = spl.splu((self.M + dt * self.S).tocsc())
        return self._heat_factors[key]


_ASSEMBLIES = {}


def assembly(space):
    key = space.space_hash
    if key not in _ASSEMBLIES:
        _ASSEMBLIES[key] = DirichletAssembly(space)
    return _ASSEMBLIES[key]


# ---------------------------------------------------------------------------
# first-order calculus


def gradient(f):
    return VectorField(f.space, f.space.gradients(f.values))


def differential(f):
    return musical_flat(gradient(f))


def df_of(f, X):
    """Per-cell value of df(X) as a raw array."""
    return cell_inner(gradient(f), X)


def carre_du_champ(f, g):
    """Pointwise product of gradients, transferred to vertices."""
    return pointwise_inner(gradient(f), gradient(g))


def divergence(X):
    """Exact negative adjoint of the gradient in the weighted inner products."""
    a = assembly(X.space)
    rhs = a.D.T @ (a.W @ X.values.reshape(-1))
    return ScalarField(X.space, -rhs / X.space.m_v)


def laplacian(f):
    a = assembly(f.space)
    return ScalarField(f.space, -(a.S @ f.values) / f.space.m_v)


def measure_laplacian(f):
    """Measure-valued Laplacian; carries weights -(S f), total mass zero."""
    a = assembly(f.space)
    return SignedMeasure(f.space, -(a.S @ f.values))


def heat_flow(f, t, dt=DEFAULT_DT):
    """Heat semigroup by implicit Euler with fixed step splitting of t."""
    if t < 0:
        raise ValueError("heat flow needs t >= 0")
    if t == 0:
        return ScalarField(f.space, f.values.copy())
    n = max(1, int(np.ceil(t / dt)))
    step = t / n
    a = assembly(f.space)
    lu = a.heat_factor(step)
    v = f.values.copy()
    for _ in range(n):
        v = lu.solve(a.M @ v)
    return ScalarField(f.space, v)


def dirichlet_energy(f):
    a = assembly(f.space)
    return 0.5 * float(f.values @ (a.S @ f.values))


def integrate(field):
    """Integral of a scalar field against the reference measure."""
    return float((field.space.m_v * field.values).sum())


def cell_integrate(space, values):
    return float((space.m_c * values).sum())


# ---------------------------------------------------------------------------
# test functions


class TestFunctionBank:
    """Seeded generating family of smooth scalar and vector fields.

    Scalars are heat-smoothed random low-frequency fields plus smoothed
    coordinate lifts; vector members are combinations g * grad(f) of bank
    pairs and remember their generators.
    """

    def __init__(self, space, scalars, vector_gens, seed, tau):
        self.space = space
        self.scalars = scalars
        self.vector_gens = vector_gens    # list of [(g_idx, f_idx), ...]
        self.seed = seed
        self.tau = tau
        self.metadata = [{"sup": float(np.abs(f.values).max()),
                          "lip": float(np.sqrt(np.maximum(
                              cell_inner(gradient(f), gradient(f)), 0)).max())}
                         for f in scalars]
        self._cache = {}

    def __len__(self):
        return len(self.scalars)

    @property
    def vectors(self):
        if "vectors" not in self._cache:
            out = []
            for gens in self.vector_gens:
                v = np.zeros((self.space.n_cells, self.space.dmax))
                for gi, fi in gens:
                    g = self.space.vertex_to_cell(self.scalars[gi].values)
                    v += g[:, None] * gradient(self.scalars[fi]).values
                out.append(VectorField(self.space, v))
            self._cache["vectors"] = out
        return self._cache["vectors"]

    def gradients(self):
        if "grads" not in self._cache:
            self._cache["grads"] = [gradient(f) for f in self.scalars]
        return self._cache["grads"]


def coordinate_fields(space):
    """Smooth coordinate lifts whose gradients span each cell frame."""
    p = space.points
    if space.chart == "torus":
        Lx, Ly = space.wrap
        return [np.sin(2 * np.pi * p[:, 0] / Lx), np.cos(2 * np.pi * p[:, 0] / Lx),
                np.sin(2 * np.pi * p[:, 1] / Ly), np.cos(2 * np.pi * p[:, 1] / Ly)]
    if space.chart == "interval":
        L = space.wrap[0]
        return [np.sin(2 * np.pi * p[:, 0] / L), np.cos(2 * np.pi * p[:, 0] / L)]
    # ambient coordinates for embedded surfaces
    return [p[:, i].copy() for i in range(p.shape[1])]


def test_functions(space, nf=12, seed=42, tau=0.1, n_vectors=None):
    """Bank of smoothed coordinate harmonics, their products, and seeded
    low-frequency mixtures of those; all members have bounded gradients."""
    if nf < 1:
        raise ValueError("need nf >= 1")
    if tau == 0:
        warnings.warn("tau=0: bank members are raw, unsmoothed fields")
    rng = np.random.default_rng(seed)
    coords = coordinate_fields(space)
    raw = list(coords)
    # products appended round-robin in the index offset so truncated banks
    # stay balanced across coordinate directions
    nc0 = len(coords)
    for k in range(nc0):
        for i in range(nc0):
            j = (i + k) % nc0
            if j < i:
                continue
            raw.append(coords[i] * coords[j])
    base = []
    for c in raw:
        c = c - (space.m_v * c).sum() / space.total_mass
        scale = max(np.abs(c).max(), 1e-30)
        base.append(c / scale)
    fields = list(base[:nf])
    while len(fields) < nf:
        w = rng.normal(size=len(base)) / np.sqrt(len(base))
        v = sum(wi * b for wi, b in zip(w, base))
        fields.append(v / max(np.abs(v).max(), 1e-30))
    scalars = []
    for v in fields:
        f = ScalarField(space, v)
        if tau > 0:
            f = heat_flow(f, tau)
        scale = max(np.abs(f.values).max(), 1e-30)
        scalars.append(ScalarField(space, f.values / scale))
    if n_vectors is None:
        n_vectors = min(nf, 8)
    vector_gens = []
    for i in range(n_vectors):
        a = int(rng.integers(len(scalars)))
        b = int(rng.integers(len(scalars)))
        c = int(rng.integers(len(scalars)))
        d = int(rng.integers(len(scalars)))
        vector_gens.append([(a, b), (c, d)])
    return TestFunctionBank(space, scalars, vector_gens, seed, tau)


# ---------------------------------------------------------------------------
# second-order objects carried by the Dirichlet form


def gamma2(f, g):
    """Measure-valued iterated carre du champ.

    One half the measure Laplacian of <grad f, grad g> minus the symmetric
    first-order correction term times the measure.
    """
    s = f.space
    gam = carre_du_champ(f, g)
    m1 = measure_laplacian(gam) * 0.5
    corr = 0.5 * (carre_du_champ(f, laplacian(g)).values
                  + carre_du_champ(g, laplacian(f)).values)
    return SignedMeasure(s, m1.weights - s.m_v * corr)


def gamma2_density(f, g):
    return gamma2(f, g).density()


def hessian_form_H(f, g, h):
    """Second-order form built from three gradients; symmetric in (g, h)."""
    t1 = carre_du_champ(carre_du_champ(f, g), h).values
    t2 = carre_du_champ(carre_du_champ(f, h), g).values
    t3 = carre_du_champ(f, carre_du_champ(g, h)).values
    return ScalarField(f.space, 0.5 * (t1 + t2 - t3))


def bakry_emery_check(f, t, K, dt=DEFAULT_DT, tol=None):
    """Gradient-contraction estimate along the heat flow, both powers.

    Reports the worst pointwise violation of
    |grad h_t f|^2 <= exp(-2Kt) h_t(|grad f|^2) and of the first-power
    variant; the gap is the larger of the two.
    """
    s = f.space
    ft = heat_flow(f, t, dt=dt)
    lhs2 = carre_du_champ(ft, ft).values
    g2 = carre_du_champ(f, f)
    rhs2 = np.exp(-2 * K * t) * heat_flow(g2, t, dt=dt).values
    viol2 = float(np.max(lhs2 - rhs2))
    g1 = ScalarField(s, np.sqrt(np.maximum(g2.values, 0.0)))
    rhs1 = np.exp(-K * t) * heat_flow(g1, t, dt=dt).values
    viol1 = float(np.max(np.sqrt(np.maximum(lhs2, 0.0)) - rhs1))
    scale = max(float(np.max(np.abs(rhs2))), 1e-30)
    gap = max(viol2 / scale, viol1 / np.sqrt(scale), 0.0)
    if tol is None:
        tol = np.inf   # callers wrap this in a refinement verdict
    return VerdictReport.from_gap(
        "bakry-emery-contraction", "bakry-emery", gap, tol,
        lhs=float(np.max(lhs2)), rhs=float(np.max(rhs2)),
        meta={"h": s.h_max, "dt": dt, "t": t, "K": K,
              "violation_sq": viol2, "violation_first": viol1})


def multivariate_gamma2(phi, flist):
    """Chain-rule decomposition of gamma2 along a smooth map.

    ``phi`` provides ``value``, ``partial(i)`` and ``partial2(i, j)``
    callables on stacked arguments; returns the decomposition pieces and a
    verdict bundle with the residuals of the two identities it satisfies.
    """
    s = flist[0].space
    n = len(flist)
    F = np.stack([f.values for f in flist], axis=-1)
    if abs(float(phi.value(np.zeros((1, n))))) > 1e-13:
        raise ValueError("the map must vanish at the origin")
    Phi = ScalarField(s, phi.value(F))
    Pi = [phi.partial(i)(F) for i in range(n)]
    Pij = [[phi.partial2(i, j)(F) for j in range(n)] for i in range(n)]

    gam = [[carre_du_champ(flist[i], flist[j]).values for j in range(n)]
           for i in range(n)]
    g2m = [[gamma2(flist[i], flist[j]).weights for j in range(n)]
           for i in range(n)]
    Hf = [[[hessian_form_H(flist[i], flist[j], flist[k]).values
            for k in range(n)] for j in range(n)] for i in range(n)]

    A = np.zeros(s.n_vertices)
    B = np.zeros(s.n_vertices)
    C = np.zeros(s.n_vertices)
    Dd = np.zeros(s.n_vertices)
    for i in range(n):
        for j in range(n):
            A += Pi[i] * Pi[j] * g2m[i][j]
            Dd += Pi[i] * Pi[j] * gam[i][j]
            for k in range(n):
                B += 2.0 * Pi[i] * Pij[j][k] * Hf[i][j][k]
                for l in range(n):
                    C += Pij[i][k] * Pij[j][l] * gam[i][j] * gam[k][l]
    A_measure = SignedMeasure(s, A)
    B_field = ScalarField(s, B)
    C_field = ScalarField(s, C)
    D_field = ScalarField(s, Dd)

    direct = gamma2(Phi, Phi)
    recon = SignedMeasure(s, A + s.m_v * (B + C))
    res_measure = (direct - recon).tv_norm() / max(direct.tv_norm(), 1e-30)
    g_phi = carre_du_champ(Phi, Phi).values
    scale = max(np.abs(g_phi).max(), 1e-30)
    res_grad = float(np.max(np.abs(g_phi - Dd))) / scale
    return {"A": A_measure, "B": B_field, "C": C_field, "D": D_field,
            "phi_of_f": Phi, "residual_measure": res_measure,
            "residual_gradient": res_grad}


class PolynomialMap:
    """Multivariate polynomial with explicit partial-derivative evaluators."""

    def __init__(self, value, partials, partials2):
        self._value = value
        self._partials = partials
        self._partials2 = partials2

    def value(self, F):
        return self._value(F)

    def partial(self, i):
        return self._partials[i]

    def partial2(self, i, j):
        return self._partials2[i][j]


def identity_map():
    return PolynomialMap(lambda F: F[..., 0],
                         [lambda F: np.ones(F.shape[:-1])],
                         [[lambda F: np.zeros(F.shape[:-1])]])


def square_map():
    return PolynomialMap(lambda F: F[..., 0] ** 2,
                         [lambda F: 2.0 * F[..., 0]],
                         [[lambda F: 2.0 * np.ones(F.shape[:-1])]])


def product_map():
    zero = lambda F: np.zeros(F.shape[:-1])
    one = lambda F: np.ones(F.shape[:-1])
    return PolynomialMap(lambda F: F[..., 0] * F[..., 1],
                         [lambda F: F[..., 1], lambda F: F[..., 0]],
                         [[zero, one], [one, zero]])
