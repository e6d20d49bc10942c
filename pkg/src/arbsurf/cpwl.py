"""Continuous piecewise-linear functions on simplicial meshes and their exact
compilation to shallow ReLU networks.

The compiler realizes every nodal hat as ``relu(min of barycentric forms)``
over the vertex star, the min via a balanced comparator tree, and the final
truncation folded into the last rectifier level, so the network equals the
CPWL everywhere up to floating-point roundoff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

__all__ = [
    "CpwlFunction",
    "ReluNet",
    "triangulate_tensor_grid",
    "compile_to_relu",
]


@dataclass
class CpwlFunction:
    """CPWL interpolant: nodal values on a triangulated vertex set."""

    vertices: np.ndarray          # (V, 2)
    triangles: np.ndarray         # (M, 3) int
    nodal_values: np.ndarray      # (V,)
    axes: tuple[np.ndarray, np.ndarray] | None = None  # tensor-grid fast path
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.triangles = np.asarray(self.triangles, dtype=int)
        self.nodal_values = np.asarray(self.nodal_values, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError("vertices must be (V, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be (M, 3)")
        if self.nodal_values.shape != (self.vertices.shape[0],):
            raise ValueError("nodal_values must have one entry per vertex")
        _validate_mesh(self.vertices, self.triangles)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def __call__(self, points) -> np.ndarray:
        return self.evaluate(points)

    def evaluate(self, points) -> np.ndarray:
        """Barycentric evaluation at (N, 2) points (or a single (2,) point)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.axes is not None:
            out = _evaluate_tensor(self.axes, self.nodal_values, pts)
        else:
            out = _evaluate_generic(self.vertices, self.triangles,
                                    self.nodal_values, pts)
        return out if np.asarray(points).ndim > 1 else out[0]

    def lipschitz_constant(self) -> float:
        """Max gradient norm over triangles (exact CPWL Lipschitz constant)."""
        g = _triangle_gradients(self.vertices, self.triangles, self.nodal_values)
        return float(np.sqrt((g**2).sum(axis=1)).max())


def _validate_mesh(vertices: np.ndarray, triangles: np.ndarray) -> None:
    V = vertices.shape[0]
    if triangles.size and (triangles.min() < 0 or triangles.max() >= V):
        raise ValueError("triangle indices out of range")
    p = vertices[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(np.abs(area2) < 1e-14):
        raise ValueError("non-simplicial mesh: degenerate triangle")
    edges = {}
    for t, tri in enumerate(triangles):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            e = (min(tri[a], tri[b]), max(tri[a], tri[b]))
            edges.setdefault(e, []).append(t)
    for e, ts in edges.items():
        if len(ts) > 2:
            raise ValueError(f"non-simplicial mesh: edge {e} shared by {len(ts)} triangles")


def _triangle_gradients(vertices, triangles, values) -> np.ndarray:
    p = vertices[triangles]
    v = values[triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    d1 = v[:, 1] - v[:, 0]
    d2 = v[:, 2] - v[:, 0]
    gx = (d1 * e2[:, 1] - d2 * e1[:, 1]) / det
    gy = (d2 * e1[:, 0] - d1 * e2[:, 0]) / det
    return np.stack([gx, gy], axis=1)


def _evaluate_generic(vertices, triangles, values, pts) -> np.ndarray:
    """Point location by barycentric membership, first containing triangle."""
    out = np.full(pts.shape[0], np.nan)
    best = np.full(pts.shape[0], -np.inf)
    p0 = vertices[triangles[:, 0]]
    e1 = vertices[triangles[:, 1]] - p0
    e2 = vertices[triangles[:, 2]] - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    for t in range(triangles.shape[0]):
        d = pts - p0[t]
        l1 = (d[:, 0] * e2[t, 1] - d[:, 1] * e2[t, 0]) / det[t]
        l2 = (e1[t, 0] * d[:, 1] - e1[t, 1] * d[:, 0]) / det[t]
        l0 = 1.0 - l1 - l2
        m = np.minimum(np.minimum(l0, l1), l2)
        take = m > best
        if np.any(take):
            vt = values[triangles[t]]
            out[take] = l0[take] * vt[0] + l1[take] * vt[1] + l2[take] * vt[2]
            best[take] = m[take]
    if np.any(best < -1e-9):
        raise ValueError("evaluation point outside the mesh")
    return out


def _evaluate_tensor(axes, values, pts) -> np.ndarray:
    """Fast CPWL evaluation on a tensor grid split along ll->ur diagonals."""
    xs, ys = axes
    nx = xs.size
    vals = values.reshape(ys.size, nx)
    ix = np.clip(np.searchsorted(xs, pts[:, 0], side="right") - 1, 0, nx - 2)
    iy = np.clip(np.searchsorted(ys, pts[:, 1], side="right") - 1, 0, ys.size - 2)
    s = (pts[:, 0] - xs[ix]) / (xs[ix + 1] - xs[ix])
    t = (pts[:, 1] - ys[iy]) / (ys[iy + 1] - ys[iy])
    f00 = vals[iy, ix]
    f10 = vals[iy, ix + 1]
    f01 = vals[iy + 1, ix]
    f11 = vals[iy + 1, ix + 1]
    lower = s >= t
    out = np.where(lower,
                   f00 + s * (f10 - f00) + t * (f11 - f10),
                   f00 + s * (f11 - f01) + t * (f01 - f00))
    return out


def triangulate_tensor_grid(xs: np.ndarray, ys: np.ndarray, values: np.ndarray,
                            info: dict | None = None) -> CpwlFunction:
    """CPWL from values on a tensor grid (rows indexed by ys), ll->ur diagonals."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (ys.size, xs.size):
        raise ValueError("values shape must be (len(ys), len(xs))")
    nx, ny = xs.size, ys.size
    XX, YY = np.meshgrid(xs, ys)
    vertices = np.column_stack([XX.ravel(), YY.ravel()])

    def vid(i, j):
        return j * nx + i

    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return CpwlFunction(vertices, np.asarray(tris), values.ravel(),
                        axes=(xs, ys), info=info or {})


# ---------------------------------------------------------------------------
# ReLU compilation
# ---------------------------------------------------------------------------

@dataclass
class _Layer:
    W: sparse.csr_matrix
    b: np.ndarray
    relu: np.ndarray  # bool per output unit


@dataclass
class ReluNet:
    """Feedforward net with per-unit rectifier flags; exact CPWL compile target."""

    layers: list
    depth: int
    param_count: int
    constants: dict = field(default_factory=dict)

    def evaluate(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        z = pts
        for layer in self.layers:
            z = np.asarray((layer.W @ z.T).T) + layer.b
            if layer.relu.any():
                z[:, layer.relu] = np.maximum(z[:, layer.relu], 0.0)
        out = z[:, 0]
        return out if np.asarray(points).ndim > 1 else out[0]

    def __call__(self, points):
        return self.evaluate(points)

    def to_json(self) -> str:
        layers = []
        for layer in self.layers:
            W = layer.W.tocoo()
            layers.append({
                "shape": list(W.shape),
                "weights": {"rows": W.row.tolist(), "cols": W.col.tolist(),
                            "vals": W.data.tolist()},
                "bias": layer.b.tolist(),
                "relu": layer.relu.astype(bool).tolist(),
            })
        return json.dumps({"layers": layers, "depth": self.depth,
                           "param_count": self.param_count,
                           "constants": self.constants}, sort_keys=True)


def _barycentric_affine(p, q, r):
    """Affine (a, b, c) with a*x + b*y + c = 1 at p and 0 on the edge (q, r)."""
    A = np.array([[p[0], p[1], 1.0], [q[0], q[1], 1.0], [r[0], r[1], 1.0]])
    return np.linalg.solve(A, np.array([1.0, 0.0, 0.0]))


def compile_to_relu(f: CpwlFunction, d_max: int = 8, c3: float = 2.0) -> ReluNet:
    """Exact depth-<=4 ReLU realization of a CPWL function.

    Every vertex star must have valence <= d_max (raise otherwise); structured
    tensor meshes always satisfy this with valence <= 6.
    """
    V = f.n_vertices
    tris = f.triangles
    stars: list[list[int]] = [[] for _ in range(V)]
    for t, tri in enumerate(tris):
        for v in tri:
            stars[v].append(t)
    max_deg = max(len(s) for s in stars)
    if max_deg > d_max:
        raise ValueError(
            f"vertex valence {max_deg} exceeds d_max={d_max}; refine the mesh first")

    # Layer 1: all barycentric affine forms, grouped per vertex.
    rows_a, rows_b, bias1 = [], [], []
    lam_ids: list[list[int]] = [[] for _ in range(V)]
    for v in range(V):
        for t in stars[v]:
            tri = list(tris[t])
            others = [u for u in tri if u != v]
            sol = _barycentric_affine(f.vertices[v], f.vertices[others[0]],
                                      f.vertices[others[1]])
            lam_ids[v].append(len(bias1))
            rows_a.append(sol[0])
            rows_b.append(sol[1])
            bias1.append(sol[2])
    Q = len(bias1)
    W1 = sparse.csr_matrix(np.column_stack([rows_a, rows_b]))
    layers = [_Layer(W1, np.asarray(bias1), np.zeros(Q, dtype=bool))]

    # Comparator rounds: each virtual value is a sparse combo of current units.
    # min(u, v) = u - relu(u - v); the subtraction is deferred to the next
    # layer's affine rows so each round stays a single affine+relu block.
    virtual = [[{j: 1.0} for j in lam_ids[v]] for v in range(V)]
    n_rounds = max(1, int(np.ceil(np.log2(max_deg)))) if max_deg > 1 else 0
    for _ in range(n_rounds):
        coo_r, coo_c, coo_v, bias, relu = [], [], [], [], []
        new_virtual = []

        def emit(combo, is_relu):
            idx = len(bias)
            for c, w in combo.items():
                coo_r.append(idx)
                coo_c.append(c)
                coo_v.append(w)
            bias.append(0.0)
            relu.append(is_relu)
            return idx

        for v in range(V):
            vals = virtual[v]
            nxt = []
            for k in range(0, len(vals) - 1, 2):
                u_c, v_c = vals[k], vals[k + 1]
                diff = dict(u_c)
                for c, w in v_c.items():
                    diff[c] = diff.get(c, 0.0) - w
                d_id = emit(diff, True)
                c_id = emit(u_c, False)
                nxt.append({c_id: 1.0, d_id: -1.0})
            if len(vals) % 2 == 1:
                w_id = emit(vals[-1], False)
                nxt.append({w_id: 1.0})
            new_virtual.append(nxt)
        n_prev = layers[-1].W.shape[0]
        W = sparse.csr_matrix((coo_v, (coo_r, coo_c)), shape=(len(bias), n_prev))
        layers.append(_Layer(W, np.asarray(bias), np.asarray(relu, dtype=bool)))
        virtual = new_virtual

    # Hat layer: phi_v = relu(m_v); the zero comparison is this last level.
    coo_r, coo_c, coo_v = [], [], []
    for v in range(V):
        assert len(virtual[v]) == 1
        for c, w in virtual[v][0].items():
            coo_r.append(v)
            coo_c.append(c)
            coo_v.append(w)
    n_prev = layers[-1].W.shape[0]
    W_hat = sparse.csr_matrix((coo_v, (coo_r, coo_c)), shape=(V, n_prev))
    layers.append(_Layer(W_hat, np.zeros(V), np.ones(V, dtype=bool)))

    # Affine readout.
    W_out = sparse.csr_matrix(f.nodal_values[None, :])
    layers.append(_Layer(W_out, np.zeros(1), np.zeros(1, dtype=bool)))

    depth = sum(1 for layer in layers if layer.relu.any())
    param_count = int(sum(layer.W.nnz + np.count_nonzero(layer.b)
                          for layer in layers))
    M = f.n_triangles
    c1, c2 = 4.0, 30.0
    constants = {
        "V": V, "M": M, "c1": c1, "c2": c2, "c3": c3,
        "param_bound": c1 * V + c2 * M,
        "max_valence": max_deg,
    }
    if param_count > constants["param_bound"]:
        raise AssertionError("parameter count exceeded the compile-time bound")
    return ReluNet(layers=layers, depth=depth, param_count=param_count,
                   constants=constants)
