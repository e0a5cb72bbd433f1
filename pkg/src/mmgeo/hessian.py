"""Weak Hessian: per-cell solver, global least squares, energy and duality.

The pointwise route evaluates the three-gradient identity
``2 Hf(grad g1, grad g2) = <grad g1, grad<grad f,grad g2>> + (1<->2)
- <grad f, grad<grad g1,grad g2>>`` over a well-conditioned set of bank
pairs and solves for the d(d+1)/2 symmetric unknowns in every cell.  The
weak route solves the integrated identity against vertex hat functions as
the localizing factor; the two agree up to discretization error.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spl

from .space import (ScalarField, VectorField, Tensor2Field, cell_inner,
                    cell_hs_inner, sym_asym_split, tensor_product)
from . import dirichlet as dr
from .verdict import VerdictReport


class HessianResult:
    def __init__(self, H, residual, method, flagged=()):
        self.H = H
        self.residual = float(residual)
        self.method = method
        self.flagged = tuple(flagged)


class HessianSolver:
    """Per-(space, bank) precomputation shared by all Hessian solves."""

    def __init__(self, space, bank, max_scalars=12, extra=2):
        self.space = space
        self.bank = bank
        d = space.dmax
        self.q = d * (d + 1) // 2
        self.comp = [(i, j) for i in range(d) for j in range(i, d)]
        ns = min(len(bank.scalars), max_scalars)
        self.pairs = [(i, j) for i in range(ns) for j in range(i, ns)]
        grads = bank.gradients()[:ns]
        self.grad_cells = np.stack([g.values for g in grads])    # (ns, Nc, d)
        # design rows a(T) with H:T = sum_comp factor * H_comp * T_comp
        nP, nc = len(self.pairs), space.n_cells
        A = np.zeros((nc, nP, self.q))
        self.gamma_pair_grad = np.zeros((nP, nc, d))
        for p, (i, j) in enumerate(self.pairs):
            gi, gj = self.grad_cells[i], self.grad_cells[j]
            T = 0.5 * (np.einsum("ca,cb->cab", gi, gj)
                       + np.einsum("ca,cb->cab", gj, gi))
            for k, (a, b) in enumerate(self.comp):
                A[:, p, k] = T[:, a, b] * (1.0 if a == b else 2.0)
            b_ij = space.cell_to_vertex(np.einsum("ca,ca->c", gi, gj))
            self.gamma_pair_grad[p] = space.gradients(b_ij)
        self.design = A
        self._select(extra)
        sel = self.selection                                      # (nc, q+extra)
        self.A_sel = np.take_along_axis(A, sel[:, :, None], axis=1)
        self.pinv_sel = np.linalg.pinv(self.A_sel, rcond=1e-10)
        conds = np.linalg.cond(self.A_sel)
        self.flagged = np.nonzero(~np.isfinite(conds) | (conds > 1e8))[0]
        self._weak_cache = {}

    def _select(self, extra):
        """Greedy well-conditioned pair subset per cell, bank-order ties."""
        nc, nP, q = self.design.shape
        take = min(nP, q + extra)
        sel = np.zeros((nc, take), dtype=int)
        norms = np.linalg.norm(self.design, axis=2)               # (nc, nP)
        for c in range(nc):
            if nP <= take:
                sel[c] = np.arange(nP)
                continue
            _, _, piv = scipy.linalg.qr(self.design[c].T, pivoting=True)
            lead = list(piv[:q])
            rest = [p for p in np.lexsort((np.arange(nP), -norms[c]))
                    if p not in lead]
            sel[c] = np.array(lead + rest[:take - q])
        self.selection = sel

    # -- right-hand sides ---------------------------------------------------

    def _pair_rhs(self, f_values):
        """Per-cell identity right-hand side for every pair, (nP, Nc)."""
        s = self.space
        fg = s.gradients(f_values)                                # (Nc, d)
        ns = int(self.grad_cells.shape[0])
        a_grad = np.zeros((ns, s.n_cells, s.dmax))
        for i in range(ns):
            a_i = s.cell_to_vertex(np.einsum("ca,ca->c", fg,
                                             self.grad_cells[i]))
            a_grad[i] = s.gradients(a_i)
        r = np.zeros((len(self.pairs), s.n_cells))
        for p, (i, j) in enumerate(self.pairs):
            t1 = np.einsum("ca,ca->c", self.grad_cells[i], a_grad[j])
            t2 = np.einsum("ca,ca->c", self.grad_cells[j], a_grad[i])
            t3 = np.einsum("ca,ca->c", fg, self.gamma_pair_grad[p])
            r[p] = 0.5 * (t1 + t2 - t3)
        return r

    def _unpack(self, hvec):
        nc, d = self.space.n_cells, self.space.dmax
        H = np.zeros((nc, d, d))
        for k, (a, b) in enumerate(self.comp):
            H[:, a, b] = hvec[:, k]
            if a != b:
                H[:, b, a] = hvec[:, k]
        return H

    def solve_local(self, f_values):
        r = self._pair_rhs(f_values)                              # (nP, Nc)
        r_sel = np.take_along_axis(r.T, self.selection, axis=1)   # (Nc, take)
        hvec = np.einsum("cqt,ct->cq", self.pinv_sel, r_sel)
        fit = np.einsum("ctq,cq->ct", self.A_sel, hvec)
        num = ((fit - r_sel) ** 2).sum(axis=1) * self.space.m_c
        den = (r_sel ** 2).sum(axis=1) * self.space.m_c
        residual = float(np.sqrt(num.sum() / max(den.sum(), 1e-300)))
        return HessianResult(Tensor2Field(self.space, self._unpack(hvec)),
                             residual, "local-formula", self.flagged)

    # -- weak global least squares ------------------------------------------

    def _weak_matrix(self, max_pairs=45):
        """Hat-localized weak equations over the per-cell unknowns.

        Hat test functions see the unknown only through vertex averages, so
        the least squares is solved with a small spectral damping (5% of the
        top singular value); the damping bias and the deconvolution noise
        both vanish under mesh refinement.
        """
        key = ("K", max_pairs)
        if key not in self._weak_cache:
            s = self.space
            Q = (s.vertex_to_cell_matrix.T @ sp.diags(s.m_c)).tocsr()
            nc, q = s.n_cells, self.q
            blocks = []
            used = range(min(len(self.pairs), max_pairs))
            for p in used:
                data = self.design[:, p, :].reshape(-1)
                indices = (np.arange(nc)[:, None] * q
                           + np.arange(q)[None, :]).reshape(-1)
                indptr = np.arange(nc + 1) * q
                Bp = sp.csr_matrix((data, indices, indptr), shape=(nc, nc * q))
                blocks.append((Q @ Bp).tocsr())
            K = sp.vstack(blocks).tocsr()
            smax = float(spl.svds(K, k=1,
                                  return_singular_vectors=False)[0])
            self._weak_cache[key] = (K, list(used), smax)
        return self._weak_cache[key]

    def solve_weak(self, f_values, max_pairs=45, damp=0.05):
        s = self.space
        K, used, smax = self._weak_matrix(max_pairs)
        Q = (s.vertex_to_cell_matrix.T @ sp.diags(s.m_c)).tocsr()
        r = self._pair_rhs(f_values)
        rhs = np.concatenate([Q @ r[p] for p in used])
        out = spl.lsmr(K, rhs, damp=damp * smax, atol=1e-12, btol=1e-12)
        x = out[0]
        hvec = x.reshape(s.n_cells, self.q)
        residual = float(np.linalg.norm(K @ x - rhs)
                         / max(np.linalg.norm(rhs), 1e-300))
        return HessianResult(Tensor2Field(s, self._unpack(hvec)),
                             residual, "weak-lsq", self.flagged)

    def _pack(self, H):
        return np.stack([H[:, a, b] for (a, b) in self.comp],
                        axis=1).reshape(-1)


_SOLVERS = {}


def solver(space, bank):
    key = (space.space_hash, id(bank))
    if key not in _SOLVERS:
        _SOLVERS[key] = HessianSolver(space, bank)
    return _SOLVERS[key]


def weak_hessian(f, bank, method="local-formula"):
    sv = solver(f.space, bank)
    if method == "local-formula":
        return sv.solve_local(f.values)
    if method == "weak-lsq":
        return sv.solve_weak(f.values)
    raise ValueError(f"unknown Hessian method {method!r}")


def hessian_energy(f, bank, method="local-formula"):
    """Half the squared Hilbert-Schmidt norm of the solved Hessian."""
    H = weak_hessian(f, bank, method).H
    return 0.5 * dr.cell_integrate(f.space, cell_hs_inner(H, H))


def e2_duality(f, bank, n_scalars=None, n_h=6, rcond=1e-8):
    """Best value of the integral duality expression over bank families.

    The family consists of tensors (h * grad g_i (x) grad g_j) with h drawn
    from {1} and bank scalars.  Along any fixed direction of the family span
    the expression is a concave parabola in the scaling, so its maximum is
    exact; the direction is chosen by projecting the solved Hessian onto the
    span, and the value itself uses only first-order data of f through the
    integral formula.  Lower bound for twice the Hessian energy.
    """
    s = f.space
    sv = solver(s, bank)
    if n_scalars is None:
        n_scalars = min(len(bank.scalars), 9)
    r = sv._pair_rhs(f.values)
    hs = [np.ones(s.n_cells)]
    for g in bank.scalars[:n_h]:
        hs.append(s.vertex_to_cell(g.values))
    hs = np.stack(hs)                                             # (nh, Nc)
    pair_idx = [p for p, (i, j) in enumerate(sv.pairs)
                if i < n_scalars and j < n_scalars]
    gc = sv.grad_cells
    # member tensors h * grad g_i (x) grad g_j, flattened over (pair, h)
    T = np.stack([np.einsum("c,ca,cb->cab", hs[hix], gc[i], gc[j])
                  for p in pair_idx for hix in range(len(hs))
                  for (i, j) in [sv.pairs[p]]])
    b = np.stack([2.0 * float((s.m_c * hs[hix] * r[p]).sum())
                  for p in pair_idx for hix in range(len(hs))])
    G = np.einsum("kcab,c,lcab->kl", T, s.m_c, T)
    H = sv.solve_local(f.values).H.values
    m = np.einsum("kcab,c,cab->k", T, s.m_c, H)
    w = scipy.linalg.lstsq(G, m, cond=rcond)[0]
    best = 0.0
    for x in [w] + [e for e in np.eye(len(b))[np.argsort(-np.abs(b))[:5]]]:
        den = float(x @ G @ x)
        if den > 1e-300:
            best = max(best, float(x @ b) ** 2 / (4.0 * den))
    return best


# ---------------------------------------------------------------------------
# inequality and identity checks


def hs_bound_check(f, bank, K, tol=np.inf):
    """Pointwise |Hf|^2 <= gamma2 density - K |grad f|^2, worst violation."""
    s = f.space
    H = weak_hessian(f, bank).H
    hs2 = s.cell_to_vertex(cell_hs_inner(H, H))
    dens = dr.gamma2(f, f).density().values
    bound = dens - K * dr.carre_du_champ(f, f).values
    viol = float(np.max(hs2 - bound))
    scale = max(float(np.max(np.abs(bound))), 1e-30)
    return VerdictReport.from_gap("hessian-hs-bound", "bochner-scalar",
                                  max(viol, 0.0) / scale, tol,
                                  lhs=float(np.max(hs2)),
                                  rhs=float(np.max(bound)),
                                  meta={"h": s.h_max, "K": K})


def e2_apriori(f, bank, K, tol=np.inf):
    """Integrated bound: Hessian energy vs Laplacian and gradient terms."""
    s = f.space
    e2 = hessian_energy(f, bank)
    lap = dr.laplacian(f)
    rhs = dr.integrate(ScalarField(s, lap.values ** 2)) \
        - K * dr.integrate(dr.carre_du_champ(f, f))
    gap = max(e2 - rhs, 0.0) / max(abs(rhs), 1e-30)
    return VerdictReport.from_gap("hessian-energy-apriori",
                                  "laplacian-energy-bound", gap, tol,
                                  lhs=e2, rhs=rhs, meta={"h": s.h_max, "K": K})


def key_inequality_check(flist, glist, hlist, K, bank, tol=np.inf):
    """Quadratic-form inequality binding the second-order form to gamma2.

    Builds the density of the associated nonnegative measure and checks the
    pointwise bound against the h-family Gram; the clamped negative part of
    the density is folded into the gap.
    """
    s = flist[0].space
    n = len(flist)
    rho = np.zeros(s.n_vertices)
    for i in range(n):
        for ip in range(n):
            gg = glist[i].values * glist[ip].values
            rho += gg * (dr.gamma2(flist[i], flist[ip]).density().values
                         - K * dr.carre_du_champ(flist[i], flist[ip]).values)
            rho += 2.0 * glist[i].values * dr.hessian_form_H(
                flist[i], flist[ip], glist[ip]).values
            rho += 0.5 * (dr.carre_du_champ(flist[i], flist[ip]).values
                          * dr.carre_du_champ(glist[i], glist[ip]).values
                          + dr.carre_du_champ(flist[i], glist[ip]).values
                          * dr.carre_du_champ(glist[i], flist[ip]).values)
    lhs = np.zeros(s.n_vertices)
    for i in range(n):
        for h in hlist:
            lhs += (dr.carre_du_champ(flist[i], h).values
                    * dr.carre_du_champ(glist[i], h).values
                    + glist[i].values
                    * dr.hessian_form_H(flist[i], h, h).values)
    gram = np.zeros(s.n_vertices)
    for h in hlist:
        for hp in hlist:
            gram += dr.carre_du_champ(h, hp).values ** 2
    rhs = np.maximum(rho, 0.0) * gram
    viol = lhs ** 2 - rhs
    scale = max(float(np.max(np.abs(rhs))), float(np.max(lhs ** 2)), 1e-30)
    gap = (max(float(np.max(viol)), 0.0)
           + float(np.max(np.maximum(-rho, 0.0)))) / scale
    return VerdictReport.from_gap("key-inequality", "gamma2-quadratic-form",
                                  gap, tol, lhs=float(np.max(lhs ** 2)),
                                  rhs=float(np.max(rhs)),
                                  meta={"h": s.h_max, "K": K, "n": n,
                                        "m": len(hlist)})


def hessian_leibniz(f1, f2, bank, tol=np.inf):
    """Product rule residual for the Hessian of f1*f2."""
    s = f1.space
    H12 = weak_hessian(ScalarField(s, f1.values * f2.values), bank).H.values
    H1 = weak_hessian(f1, bank).H.values
    H2 = weak_hessian(f2, bank).H.values
    d1, d2 = s.gradients(f1.values), s.gradients(f2.values)
    c1 = s.vertex_to_cell(f1.values)[:, None, None]
    c2 = s.vertex_to_cell(f2.values)[:, None, None]
    rhs = (c2 * H1 + c1 * H2 + np.einsum("ca,cb->cab", d1, d2)
           + np.einsum("ca,cb->cab", d2, d1))
    return _tensor_residual_verdict("hessian-leibniz", "hessian-product-rule",
                                    s, H12, rhs, tol)


def hessian_chain(f, phi, dphi, d2phi, bank, tol=np.inf):
    """Chain rule residual for the Hessian of phi(f)."""
    s = f.space
    Hchain = weak_hessian(ScalarField(s, phi(f.values)), bank).H.values
    Hf = weak_hessian(f, bank).H.values
    df = s.gradients(f.values)
    p1 = s.vertex_to_cell(dphi(f.values))[:, None, None]
    p2 = s.vertex_to_cell(d2phi(f.values))[:, None, None]
    rhs = p2 * np.einsum("ca,cb->cab", df, df) + p1 * Hf
    return _tensor_residual_verdict("hessian-chain", "hessian-chain-rule",
                                    s, Hchain, rhs, tol)


def grad_product_rule(f1, f2, bank, tol=np.inf):
    """d<grad f1, grad f2> against the two Hessian contractions."""
    s = f1.space
    lhs = s.gradients(dr.carre_du_champ(f1, f2).values)
    H1 = weak_hessian(f1, bank).H.values
    H2 = weak_hessian(f2, bank).H.values
    rhs = (np.einsum("cab,cb->ca", H1, s.gradients(f2.values))
           + np.einsum("cab,cb->ca", H2, s.gradients(f1.values)))
    return _vector_residual_verdict("grad-product-rule",
                                    "gradient-product-rule", s, lhs, rhs, tol)


def hessian_locality(f1, f2, region_cells, bank, tol=np.inf):
    """Hessians agree on the interior of a region where f1 = f2."""
    s = f1.space
    region_cells = np.asarray(region_cells, dtype=bool)
    if not region_cells.any():
        raise ValueError("empty region")
    inner = interior_cells(s, region_cells, rings=2)
    H1 = weak_hessian(f1, bank).H.values
    H2 = weak_hessian(f2, bank).H.values
    diff = np.sqrt(np.maximum(np.einsum("cab,cab->c",
                                        H1 - H2, H1 - H2), 0.0))
    scale = max(float(np.sqrt(np.einsum("cab,cab->c", H1, H1)).max()), 1e-30)
    gap = float(diff[inner].max() / scale) if inner.any() else 0.0
    return VerdictReport.from_gap("hessian-locality", "hessian-locality",
                                  gap, tol, meta={"h": s.h_max,
                                                  "interior": int(inner.sum())})


def interior_cells(space, region_cells, rings=2):
    """Cells whose full dependence stencil stays inside the region."""
    nv, nc = space.n_vertices, space.n_cells
    rows, cols = [], []
    for a in range(space.cells.shape[1]):
        idx = space.cells[:, a]
        ok = np.nonzero(idx >= 0)[0]
        rows.append(ok)
        cols.append(idx[ok])
    inc = sp.coo_matrix((np.ones(sum(map(len, rows))),
                         (np.concatenate(rows), np.concatenate(cols))),
                        shape=(nc, nv)).tocsr()
    adj = (inc @ inc.T) > 0                     # cells sharing a vertex
    bad = ~region_cells
    for _ in range(rings):
        bad = np.asarray((adj @ bad) > 0).reshape(-1)
    return ~bad


def _tensor_residual_verdict(name, anchor, space, lhs, rhs, tol):
    diff = lhs - rhs
    num = dr.cell_integrate(space, np.einsum("cab,cab->c", diff, diff))
    den = max(dr.cell_integrate(space, np.einsum("cab,cab->c", rhs, rhs)),
              1e-300)
    gap = float(np.sqrt(num / den))
    return VerdictReport.from_gap(name, anchor, gap, tol,
                                  lhs=float(np.sqrt(num)),
                                  rhs=float(np.sqrt(den)),
                                  meta={"h": space.h_max})


def _vector_residual_verdict(name, anchor, space, lhs, rhs, tol):
    diff = lhs - rhs
    num = dr.cell_integrate(space, np.einsum("ca,ca->c", diff, diff))
    den = max(dr.cell_integrate(space, np.einsum("ca,ca->c", rhs, rhs)),
              1e-300)
    gap = float(np.sqrt(num / den))
    return VerdictReport.from_gap(name, anchor, gap, tol,
                                  lhs=float(np.sqrt(num)),
                                  rhs=float(np.sqrt(den)),
                                  meta={"h": space.h_max})
