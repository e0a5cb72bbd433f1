"""Discrete metric measure spaces and their pointwise tensor algebra.

A space is a finite cell/vertex model: scalar functions live on vertices,
vector fields / one-forms / tensors / k-forms live on cells, expressed in a
per-cell orthonormal frame.  Measures are carried by positive vertex weights
``m_v`` and cell weights ``m_c`` with equal total mass; the two grades are
bridged by mass-weighted averaging, which is an exact adjoint pair.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings

import numpy as np
import scipy.sparse as sp


# ---------------------------------------------------------------------------
# space construction


class DiscreteSpace:
    """Finite weighted cell complex with per-cell orthonormal frames.

    Parameters are normally produced by :func:`build_space`; direct
    construction is for synthetic test spaces.  All arrays are frozen after
    construction (operators built from them are cached on first use).
    """

    def __init__(self, kind, points, cells, cell_coords, m_c=None,
                 density=None, chart="euclidean", wrap=None, kappa=0.0,
                 metric=None, meta=None):
        points = np.asarray(points, dtype=float)
        self.kind = kind
        self.points = points
        self.chart = chart
        self.wrap = wrap            # chart period per coordinate, or None
        self.kappa = float(kappa)
        self.meta = dict(meta or {})

        # cells: (Nc, arity_max) int array, -1 padding for lower arity
        cells = np.asarray(cells, dtype=int)
        if cells.ndim != 2:
            raise ValueError("cells must be a 2d index array")
        self.cells = cells
        self.arity = (cells >= 0).sum(axis=1)
        if np.any(self.arity < 2):
            raise ValueError("every cell needs at least two vertices")
        self.dim = self.arity - 1                      # rank of each cell
        self.dmax = int(self.dim.max())

        # unwrapped per-cell vertex coordinates (Nc, arity_max, D)
        self.cell_coords = np.asarray(cell_coords, dtype=float)

        self._build_frames()
        self._build_measure(m_c, density)
        if metric is None:
            metric = np.broadcast_to(np.eye(self.dmax),
                                     (self.n_cells, self.dmax, self.dmax))
        self.metric = np.ascontiguousarray(metric, dtype=float)
        self._validate()
        self._cache = {}

    # -- geometry -----------------------------------------------------------

    def _build_frames(self):
        nc, am, D = self.cell_coords.shape
        frames = np.zeros((nc, self.dmax, D))
        grads = np.zeros((nc, self.dmax, am))
        vols = np.zeros(nc)
        for c in range(nc):
            k = self.arity[c]
            p = self.cell_coords[c, :k]               # (k, D)
            E = p[1:] - p[0]                          # (k-1, D) edge vectors
            q, r = np.linalg.qr(E.T)                  # D x (k-1)
            # fix sign so the frame is deterministic
            s = np.sign(np.diag(r))
            s[s == 0] = 1.0
            q = q * s
            r = (r.T * s).T
            d = k - 1
            frames[c, :d] = q.T
            vol = abs(np.prod(np.diag(r))) / math.factorial(d)
            if vol <= 0:
                raise ValueError(f"degenerate cell {c}")
            vols[c] = vol
            # hat gradient of local vertex a>0 is row a-1 of inv(r);
            # vertex 0 closes the sum to zero (partition of unity).
            g = np.linalg.inv(r).T                    # (d, d): columns=verts
            grads[c, :d, 1:k] = g
            grads[c, :d, 0] = -g.sum(axis=1)
        self.frames = frames
        self.hat_grads = grads
        self.volumes = vols

    def _build_measure(self, m_c, density):
        if m_c is None:
            m_c = self.volumes.copy()
            if density is not None:
                m_c *= density(self.barycenters)
        m_c = np.asarray(m_c, dtype=float)
        if np.any(m_c <= 0):
            raise ValueError("cell weights must be strictly positive")
        self.m_c = m_c
        m_v = np.zeros(len(self.points))
        for a in range(self.cells.shape[1]):
            idx = self.cells[:, a]
            ok = idx >= 0
            np.add.at(m_v, idx[ok], m_c[ok] / self.arity[ok])
        if np.any(m_v <= 0):
            raise ValueError("isolated vertices are not allowed")
        self.m_v = m_v

    def _validate(self):
        if not np.isfinite(self.cell_coords).all():
            raise ValueError("non-finite geometry")
        rel = abs(self.m_c.sum() - self.m_v.sum()) / self.m_c.sum()
        if rel > 1e-12:
            raise AssertionError("cell/vertex mass mismatch")
        w = np.linalg.eigvalsh(self.metric)
        if w.min() <= 0:
            raise ValueError("metric must be positive definite on every cell")

    # -- basic quantities ----------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.points)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def barycenters(self):
        out = np.zeros((self.n_cells, self.cell_coords.shape[2]))
        for c in range(self.n_cells):
            out[c] = self.cell_coords[c, :self.arity[c]].mean(axis=0)
        return out

    @property
    def total_mass(self):
        return float(self.m_c.sum())

    @property
    def h_max(self):
        """Longest edge, the resolution parameter of asymptotic checks."""
        h = 0.0
        for c in range(self.n_cells):
            p = self.cell_coords[c, :self.arity[c]]
            for i in range(len(p)):
                for j in range(i + 1, len(p)):
                    h = max(h, float(np.linalg.norm(p[i] - p[j])))
        return h

    def components(self):
        """Vertex labels of connected components (via cell incidence)."""
        key = "components"
        if key not in self._cache:
            n = self.n_vertices
            rows, cols = [], []
            for a in range(self.cells.shape[1]):
                idx = self.cells[:, a]
                ok = idx >= 0
                rows.append(self.cells[ok, 0])
                cols.append(idx[ok])
            g = sp.coo_matrix((np.ones(sum(len(r) for r in rows)),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, n))
            ncomp, labels = sp.csgraph.connected_components(g + g.T)
            self._cache[key] = (ncomp, labels)
        return self._cache[key]

    @property
    def space_hash(self):
        key = "hash"
        if key not in self._cache:
            hsh = hashlib.sha256()
            for arr in (self.points, self.cells, self.m_c, self.m_v,
                        self.frames, self.metric):
                hsh.update(np.ascontiguousarray(arr).tobytes())
            self._cache[key] = hsh.hexdigest()[:16]
        return self._cache[key]

    # -- grade transfer and differential ------------------------------------

    @property
    def vertex_to_cell_matrix(self):
        """Plain vertex average per cell; adjoint of cell_to_vertex."""
        if "P_vc" not in self._cache:
            rows, cols, vals = [], [], []
            for a in range(self.cells.shape[1]):
                idx = self.cells[:, a]
                ok = np.nonzero(idx >= 0)[0]
                rows.append(ok)
                cols.append(idx[ok])
                vals.append(1.0 / self.arity[ok])
            P = sp.coo_matrix((np.concatenate(vals),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.n_cells, self.n_vertices)).tocsr()
            self._cache["P_vc"] = P
        return self._cache["P_vc"]

    @property
    def cell_to_vertex_matrix(self):
        """Mass-weighted average of cell values at each vertex."""
        if "P_cv" not in self._cache:
            P = self.vertex_to_cell_matrix
            T = sp.diags(1.0 / self.m_v) @ P.T @ sp.diags(self.m_c)
            self._cache["P_cv"] = T.tocsr()
        return self._cache["P_cv"]

    def vertex_to_cell(self, f):
        return self.vertex_to_cell_matrix @ np.asarray(f, dtype=float)

    def cell_to_vertex(self, u):
        return self.cell_to_vertex_matrix @ np.asarray(u, dtype=float)

    @property
    def gradient_matrix(self):
        """Sparse map from vertex values to stacked per-cell frame gradients."""
        if "D" not in self._cache:
            am = self.cells.shape[1]
            rows, cols, vals = [], [], []
            for a in range(am):
                idx = self.cells[:, a]
                ok = np.nonzero(idx >= 0)[0]
                for k in range(self.dmax):
                    rows.append(ok * self.dmax + k)
                    cols.append(idx[ok])
                    vals.append(self.hat_grads[ok, k, a])
            D = sp.coo_matrix((np.concatenate(vals),
                               (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.n_cells * self.dmax,
                                     self.n_vertices)).tocsr()
            self._cache["D"] = D
        return self._cache["D"]

    def gradients(self, f):
        """Per-cell frame gradient of a vertex function, shape (Nc, dmax)."""
        g = self.gradient_matrix @ np.asarray(f, dtype=float)
        return g.reshape(self.n_cells, self.dmax)


# ---------------------------------------------------------------------------
# fields


class _Field:
    grade = None

    def __init__(self, space, values):
        values = np.asarray(values, dtype=float)
        if not np.isfinite(values).all():
            raise ValueError("field has non-finite entries")
        self.space = space
        self.values = values

    def __add__(self, other):
        _same_space(self, other)
        return type(self)(self.space, self.values + other.values)

    def __sub__(self, other):
        _same_space(self, other)
        return type(self)(self.space, self.values - other.values)

    def __mul__(self, a):
        return type(self)(self.space, self.values * float(a))

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(self.space, -self.values)


class ScalarField(_Field):
    """Real function sampled on vertices."""

    kind = "scalar"

    def __init__(self, space, values):
        super().__init__(space, values)
        if self.values.shape != (space.n_vertices,):
            raise ValueError("scalar field needs one value per vertex")


class VectorField(_Field):
    """Per-cell coefficient vector in the cell frame."""

    kind = "vector"

    def __init__(self, space, values):
        super().__init__(space, values)
        if self.values.shape != (space.n_cells, space.dmax):
            raise ValueError("vector field needs (Nc, d) coefficients")


class OneForm(VectorField):
    kind = "oneform"


class Tensor2Field(_Field):
    """Per-cell d x d matrix in the cell frame."""

    kind = "tensor2"

    def __init__(self, space, values):
        super().__init__(space, values)
        d = space.dmax
        if self.values.shape != (space.n_cells, d, d):
            raise ValueError("tensor field needs (Nc, d, d) coefficients")


class KForm(_Field):
    """Per-cell antisymmetric coefficient tensor of degree k.

    Degree 0 stores one value per cell (a cell-averaged scalar); degree k
    stores a fully antisymmetric (d, ..., d) block per cell.
    """

    kind = "kform"

    def __init__(self, space, degree, values):
        self.degree = int(degree)
        super().__init__(space, values)
        d = space.dmax
        if self.degree < 0 or self.degree > d:
            raise ValueError("form degree out of range")
        want = (space.n_cells,) + (d,) * self.degree
        if self.values.shape != want:
            raise ValueError(f"degree-{self.degree} form needs shape {want}")
        if self.degree >= 2 and not _is_antisymmetric(self.values):
            raise ValueError("k-form coefficients must be antisymmetric")

    def __add__(self, other):
        _same_space(self, other)
        if self.degree != other.degree:
            raise ValueError("degree mismatch")
        return KForm(self.space, self.degree, self.values + other.values)

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, a):
        return KForm(self.space, self.degree, self.values * float(a))

    __rmul__ = __mul__

    def __neg__(self):
        return KForm(self.space, self.degree, -self.values)


class SignedMeasure:
    """Vertex-weighted signed measure; total variation is the weight l1 norm."""

    kind = "measure"

    def __init__(self, space, weights):
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (space.n_vertices,):
            raise ValueError("measure needs one weight per vertex")
        if not np.isfinite(weights).all():
            raise ValueError("measure has non-finite weights")
        self.space = space
        self.weights = weights

    @property
    def values(self):
        return self.weights

    def total(self):
        return float(self.weights.sum())

    def tv_norm(self):
        return float(np.abs(self.weights).sum())

    def density(self):
        """Density with respect to the reference vertex measure."""
        return ScalarField(self.space, self.weights / self.space.m_v)

    def __add__(self, other):
        _same_space(self, other)
        return SignedMeasure(self.space, self.weights + other.weights)

    def __sub__(self, other):
        _same_space(self, other)
        return SignedMeasure(self.space, self.weights - other.weights)

    def __mul__(self, a):
        return SignedMeasure(self.space, self.weights * float(a))

    __rmul__ = __mul__


def _same_space(a, b):
    if a.space is not b.space and a.space.space_hash != b.space.space_hash:
        raise ValueError("fields live on different spaces")


def _is_antisymmetric(v, tol=1e-12):
    k = v.ndim - 1
    for i in range(1, k):
        axes = list(range(1, v.ndim))
        axes[0], axes[i] = axes[i], axes[0]
        if not np.allclose(v, -v.transpose([0] + axes), atol=tol * max(1.0, np.abs(v).max())):
            return False
    return True


# ---------------------------------------------------------------------------
# pointwise algebra


def cell_inner(X, Y):
    """Per-cell metric inner product of two vector fields (raw array)."""
    _same_space(X, Y)
    return np.einsum("ca,cab,cb->c", X.values, X.space.metric, Y.values)


def pointwise_inner(X, Y):
    """Pointwise scalar product of vector fields, averaged to vertices."""
    s = X.space
    return ScalarField(s, s.cell_to_vertex(cell_inner(X, Y)))


def pointwise_norm(X):
    return ScalarField(X.space, X.space.cell_to_vertex(np.sqrt(np.maximum(cell_inner(X, X), 0.0))))


def musical_flat(X):
    """Lower an index with the cell metric."""
    w = np.einsum("cab,cb->ca", X.space.metric, X.values)
    return OneForm(X.space, w)


def musical_sharp(w):
    """Raise an index; exact inverse of :func:`musical_flat`."""
    ginv = np.linalg.inv(w.space.metric)
    return VectorField(w.space, np.einsum("cab,cb->ca", ginv, w.values))


def tensor_hs_inner(A, B):
    """Pointwise Hilbert-Schmidt product of 2-tensors, vertex-averaged."""
    _same_space(A, B)
    s = A.space
    v = np.einsum("cab,cij,cai,cbj->c", A.values, B.values, s.metric, s.metric)
    return ScalarField(s, s.cell_to_vertex(v))


def cell_hs_inner(A, B):
    _same_space(A, B)
    s = A.space
    return np.einsum("cab,cij,cai,cbj->c", A.values, B.values, s.metric, s.metric)


def sym_asym_split(A):
    """Symmetric/antisymmetric parts; they sum back exactly."""
    At = np.swapaxes(A.values, 1, 2)
    return (Tensor2Field(A.space, 0.5 * (A.values + At)),
            Tensor2Field(A.space, 0.5 * (A.values - At)))


def tensor_product(X, Y):
    _same_space(X, Y)
    return Tensor2Field(X.space, np.einsum("ca,cb->cab", X.values, Y.values))


def wedge(w, e):
    """Wedge product of k-forms with the determinant inner-product convention."""
    _same_space(w, e)
    s = w.space
    k, kp = w.degree, e.degree
    if k + kp > s.dmax:
        raise ValueError("wedge degree exceeds the cell dimension")
    if k == 0 or kp == 0:
        lo, hi = (w, e) if k == 0 else (e, w)
        shape = (s.n_cells,) + (1,) * (hi.values.ndim - 1)
        return KForm(s, hi.degree, lo.values.reshape(shape) * hi.values)
    spec = "z{0},z{1}->z{0}{1}".format("abcdefg"[:k], "hijklmn"[:kp])
    prod = np.einsum(spec, w.values, e.values)
    anti = _antisymmetrize(prod)
    coeff = math.factorial(k + kp) / (math.factorial(k) * math.factorial(kp))
    return KForm(s, k + kp, coeff * anti)


def _antisymmetrize(t):
    """Full antisymmetrization over all index axes after the cell axis."""
    import itertools

    k = t.ndim - 1
    out = np.zeros_like(t)
    for perm in itertools.permutations(range(k)):
        sign = _perm_sign(perm)
        out += sign * t.transpose((0,) + tuple(1 + p for p in perm))
    return out / math.factorial(k)


def _perm_sign(perm):
    sign = 1
    seen = [False] * len(perm)
    for i in range(len(perm)):
        if seen[i]:
            continue
        j, ln = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            ln += 1
        if ln % 2 == 0:
            sign = -sign
    return sign


def kform_inner(w, e):
    """Pointwise inner product det(<v_i, w_j>): full contraction over k!."""
    _same_space(w, e)
    if w.degree != e.degree:
        raise ValueError("degree mismatch")
    s = w.space
    if w.degree == 0:
        v = w.values * e.values
    else:
        axes = list(range(1, w.values.ndim))
        v = np.einsum(w.values, [0] + axes, e.values, [0] + axes, [0])
        v = v / math.factorial(w.degree)
    return ScalarField(s, s.cell_to_vertex(v))


def kform_norm_cells(w):
    if w.degree == 0:
        return np.abs(w.values)
    axes = list(range(1, w.values.ndim))
    v = np.einsum(w.values, [0] + axes, w.values, [0] + axes, [0])
    return np.sqrt(np.maximum(v / math.factorial(w.degree), 0.0))


def oneform_to_kform(w):
    return KForm(w.space, 1, w.values.copy())


def kform_to_oneform(w):
    if w.degree != 1:
        raise ValueError("need a degree-1 form")
    return OneForm(w.space, w.values.copy())


def local_dimension(space):
    """Partition of cells by frame rank, mirroring a dimensional decomposition.

    Returns {dimension: {"cells": count, "mass": total cell mass}} with no
    zero-mass classes.
    """
    report = {}
    for d in np.unique(space.dim):
        mask = space.dim == d
        mass = float(space.m_c[mask].sum())
        if mass > 0:
            report[int(d)] = {"cells": int(mask.sum()), "mass": mass}
    return report


def lp_norm(field, p):
    """Measure-weighted p-norm of the pointwise norm, p in [1, inf]."""
    if isinstance(p, str) and p in ("inf", "Inf"):
        p = np.inf
    if not (p == np.inf or p >= 1):
        raise ValueError("p must be in [1, inf]")
    s = field.space
    if isinstance(field, ScalarField):
        w, pt = s.m_v, np.abs(field.values)
    elif isinstance(field, SignedMeasure):
        raise TypeError("lp_norm is for fields; use tv_norm for measures")
    elif isinstance(field, Tensor2Field):
        w, pt = s.m_c, np.sqrt(np.maximum(cell_hs_inner(field, field), 0.0))
    elif isinstance(field, KForm):
        w, pt = s.m_c, kform_norm_cells(field)
    else:
        w, pt = s.m_c, np.sqrt(np.maximum(cell_inner(field, field), 0.0))
    if p == np.inf:
        return float(pt.max()) if len(pt) else 0.0
    return float((w * pt ** p).sum() ** (1.0 / p))


# ---------------------------------------------------------------------------
# serialization


def field_to_json(field):
    doc = {"space_hash": field.space.space_hash, "kind": field.kind,
           "degree": getattr(field, "degree", None),
           "values": np.asarray(field.values).tolist()}
    return json.dumps(doc, sort_keys=True)


def field_from_json(space, text):
    doc = json.loads(text)
    if doc["space_hash"] != space.space_hash:
        raise ValueError("field belongs to a different space")
    vals = np.asarray(doc["values"], dtype=float)
    kind = doc["kind"]
    if kind == "scalar":
        return ScalarField(space, vals)
    if kind == "vector":
        return VectorField(space, vals)
    if kind == "oneform":
        return OneForm(space, vals)
    if kind == "tensor2":
        return Tensor2Field(space, vals)
    if kind == "kform":
        return KForm(space, int(doc["degree"]), vals)
    if kind == "measure":
        return SignedMeasure(space, vals)
    raise ValueError(f"unknown field kind {kind!r}")


# ---------------------------------------------------------------------------
# generators


def build_space(spec, **overrides):
    """Build a space from a generator descriptor.

    Accepts either a descriptor string like ``"flat_torus:n=16,side=6.2832"``
    or a generator name plus keyword arguments.  Output is deterministic for
    a fixed descriptor.
    """
    if ":" in spec:
        name, _, tail = spec.partition(":")
        params = {}
        for item in tail.split(","):
            if not item:
                continue
            k, _, v = item.partition("=")
            params[k.strip()] = _coerce(v.strip())
    else:
        name, params = spec, {}
    params.update(overrides)
    name = name.strip()
    gens = {"flat_torus": flat_torus, "icosphere": icosphere, "cone": cone,
            "weighted_grid": weighted_grid, "mesh_file": mesh_file,
            "interval_circle": interval_circle}
    if name not in gens:
        raise ValueError(f"unknown space generator {name!r}")
    return gens[name](**params)


def _coerce(v):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def flat_torus(n=16, side=2.0 * math.pi, kappa=0.0):
    """Flat square torus, n x n grid, two triangles per grid square."""
    n = int(n)
    L = float(side)
    h = L / n
    xs = np.arange(n) * h
    pts = np.array([(x, y) for y in xs for x in xs])
    vid = lambda i, j: (j % n) * n + (i % n)
    cells, coords = [], []
    for j in range(n):
        for i in range(n):
            p00 = np.array([i * h, j * h])
            p10, p01, p11 = p00 + (h, 0), p00 + (0, h), p00 + (h, h)
            cells.append((vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)))
            coords.append((p00, p10, p11))
            cells.append((vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)))
            coords.append((p00, p11, p01))
    return DiscreteSpace("flat_torus", pts, np.array(cells),
                         np.array(coords), chart="torus", wrap=(L, L),
                         kappa=kappa, meta={"n": n, "side": L})


def weighted_grid(n=16, side=2.0 * math.pi, potential=None, kappa=0.0):
    """Flat torus grid carrying the measure density exp(-V)."""
    if potential is None:
        V = lambda p: np.zeros(len(p))
    elif callable(potential):
        V = potential
    elif potential == "cos2":
        V = lambda p: 0.5 * (np.cos(p[:, 0]) + np.cos(p[:, 1]))
    else:
        raise ValueError(f"unknown potential preset {potential!r}")
    base = flat_torus(n=n, side=side, kappa=kappa)
    dens = np.exp(-V(base.barycenters))
    return DiscreteSpace("weighted_grid", base.points, base.cells,
                         base.cell_coords, m_c=base.volumes * dens,
                         chart="torus", wrap=base.wrap, kappa=kappa,
                         meta=dict(base.meta, potential=str(potential)))


def icosphere(subdiv=3, radius=1.0, kappa=None):
    """Geodesic sphere by icosahedron subdivision, spherical cell areas."""
    subdiv, R = int(subdiv), float(radius)
    if kappa is None:
        kappa = 1.0 / R ** 2
    phi = (1 + 5 ** 0.5) / 2
    verts = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
             (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
             (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v) / np.linalg.norm(v) for v in verts]
    faces = [tuple(f) for f in faces]
    for _ in range(subdiv):
        cache = {}
        new_faces = []

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    pts = np.array(verts) * R
    cells = np.array(faces)
    coords = pts[cells]
    m_c = np.array([_spherical_area(pts[f[0]], pts[f[1]], pts[f[2]], R)
                    for f in faces])
    return DiscreteSpace("icosphere", pts, cells, coords, m_c=m_c,
                         chart="sphere", kappa=kappa,
                         meta={"subdiv": subdiv, "radius": R})


def _spherical_area(p0, p1, p2, R):
    """Spherical triangle area on radius-R sphere (l'Huilier)."""
    a = _arc(p1, p2, R)
    b = _arc(p0, p2, R)
    c = _arc(p0, p1, R)
    s = 0.5 * (a + b + c)
    t = math.tan(s / 2) * math.tan((s - a) / 2) * math.tan((s - b) / 2) * math.tan((s - c) / 2)
    return 4.0 * math.atan(math.sqrt(max(t, 0.0))) * R ** 2


def _arc(p, q, R):
    cosang = float(np.clip(np.dot(p, q) / R ** 2, -1.0, 1.0))
    return math.acos(cosang)


def cone(angle=math.pi, n=16, slant=1.0, kappa=0.0):
    """Cone surface of total apex angle < 2*pi, embedded in 3-space.

    Flat away from the apex; the apex carries no special treatment.
    """
    theta, n, R = float(angle), int(n), float(slant)
    if not 0 < theta < 2 * math.pi:
        raise ValueError("cone angle must lie in (0, 2*pi)")
    a = theta / (2 * math.pi)
    zfac = math.sqrt(max(1.0 - a * a, 0.0))

    def embed(r, phi):
        return np.array([a * r * math.cos(phi / a), a * r * math.sin(phi / a),
                         -zfac * r])

    pts = [embed(0.0, 0.0)]
    rings = n
    for i in range(1, rings + 1):
        r = R * i / rings
        for j in range(n):
            pts.append(embed(r, theta * j / n))
    pts = np.array(pts)
    rid = lambda i, j: 1 + (i - 1) * n + (j % n)
    cells = []
    for j in range(n):
        cells.append((0, rid(1, j), rid(1, j + 1)))
    for i in range(1, rings):
        for j in range(n):
            cells.append((rid(i, j), rid(i + 1, j), rid(i + 1, j + 1)))
            cells.append((rid(i, j), rid(i + 1, j + 1), rid(i, j + 1)))
    cells = np.array(cells)
    coords = pts[cells]
    return DiscreteSpace("cone", pts, cells, coords, chart="cone",
                         kappa=kappa, meta={"angle": theta, "n": n,
                                            "slant": R, "apex": 0})


def interval_circle(n=16, length=2.0 * math.pi, kappa=0.0):
    """One-dimensional circle graph; cells are edges."""
    n, L = int(n), float(length)
    h = L / n
    pts = np.stack([np.arange(n) * h, np.zeros(n)], axis=1)
    cells = np.array([(i, (i + 1) % n) for i in range(n)])
    coords = np.zeros((n, 2, 2))
    for i in range(n):
        coords[i, 0] = (i * h, 0.0)
        coords[i, 1] = ((i + 1) * h, 0.0)
    return DiscreteSpace("interval_circle", pts, cells, coords,
                         chart="interval", wrap=(L, 0.0), kappa=kappa,
                         meta={"n": n, "length": L})


def mesh_file(path):
    """Triangle mesh from an OFF or OBJ file."""
    text = open(path).read()
    if path.lower().endswith(".off") or text.lstrip().startswith("OFF"):
        pts, cells = _parse_off(text)
    elif path.lower().endswith(".obj"):
        pts, cells = _parse_obj(text)
    else:
        raise ValueError(f"cannot read mesh format of {path!r}")
    cells = np.asarray(cells, dtype=int)
    if cells.shape[1] != 3:
        raise ValueError("only triangle meshes are supported")
    _check_manifold(cells)
    pts = np.asarray(pts, dtype=float)
    return DiscreteSpace("mesh_file", pts, cells, pts[cells], chart="mesh",
                         meta={"path": str(path)})


def _parse_off(text):
    tokens = []
    for line in text.splitlines():
        line = line.split("#")[0].strip()
        if line and line != "OFF":
            tokens.extend(line.split())
    nv, nf = int(tokens[0]), int(tokens[1])
    pos = 3
    pts = []
    for _ in range(nv):
        pts.append([float(t) for t in tokens[pos:pos + 3]])
        pos += 3
    cells = []
    for _ in range(nf):
        k = int(tokens[pos])
        cells.append([int(t) for t in tokens[pos + 1:pos + 1 + k]])
        pos += 1 + k
    return pts, cells


def _parse_obj(text):
    pts, cells = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            pts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            cells.append(idx)
    return pts, cells


def _check_manifold(cells):
    from collections import Counter

    count = Counter()
    for tri in cells:
        for i in range(3):
            e = tuple(sorted((tri[i], tri[(i + 1) % 3])))
            count[e] += 1
    worst = max(count.values())
    if worst > 2:
        raise ValueError("non-manifold mesh: an edge belongs to >2 triangles")


def disjoint_union(a, b):
    """Disjoint union of two spaces (index blocks concatenated)."""
    nv = a.n_vertices
    am = max(a.cells.shape[1], b.cells.shape[1])

    def pad(cells, width):
        out = -np.ones((len(cells), width), dtype=int)
        out[:, :cells.shape[1]] = cells
        return out

    bc = b.cells.copy()
    bc[bc >= 0] += nv
    cells = np.vstack([pad(a.cells, am), pad(bc, am)])
    Da = a.cell_coords.shape[2]
    Db = b.cell_coords.shape[2]
    D = max(Da, Db)

    def padc(cc, width, D):
        out = np.zeros((cc.shape[0], width, D))
        out[:, :cc.shape[1], :cc.shape[2]] = cc
        return out

    # keep the two pieces apart in the ambient chart
    shift = np.zeros(D)
    shift[0] = a.points[:, 0].max() - min(0.0, b.points[:, 0].min()) + 10.0
    bpts = np.zeros((b.n_vertices, D))
    bpts[:, :b.points.shape[1]] = b.points
    bpts += shift
    apts = np.zeros((a.n_vertices, D))
    apts[:, :a.points.shape[1]] = a.points
    bcc = padc(b.cell_coords, am, D)
    bcc[:, :, :] += shift
    coords = np.vstack([padc(a.cell_coords, am, D), bcc])
    m_c = np.concatenate([a.m_c, b.m_c])
    return DiscreteSpace(f"union({a.kind},{b.kind})",
                         np.vstack([apts, bpts]), cells, coords, m_c=m_c,
                         chart="union", kappa=min(a.kappa, b.kappa),
                         meta={"parts": (a.kind, b.kind)})
