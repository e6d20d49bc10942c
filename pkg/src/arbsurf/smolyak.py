"""Anisotropic sparse-grid CPWL interpolation with a PCA head option.

The interpolant is the classical combination-technique sum of tensor bilinear
interpolants over a slanted dyadic index set.  It is materialized as a single
CPWL function on the overlay tensor mesh of the activated dyadic axes, which
keeps the anisotropic convergence rate of the abstract operator (a Delaunay
re-interpolation between sparse nodes alone would degrade it to first order).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cpwl import CpwlFunction, compile_to_relu, triangulate_tensor_grid

__all__ = [
    "AnisotropyConfig",
    "build_index_set",
    "combination_coefficients",
    "activated_nodes",
    "smolyak_fit",
    "pca_head",
    "error_frontier",
]


@dataclass(frozen=True)
class AnisotropyConfig:
    """Mixed-smoothness orders and the slanted index-set geometry."""

    beta_K: int = 1
    beta_tau: int = 1
    level_L: int = 0
    a_K: float | None = None
    a_tau: float | None = None

    def __post_init__(self):
        if self.beta_K < 1 or self.beta_tau < 1:
            raise ValueError("smoothness orders must be positive integers")
        if self.level_L < 0:
            raise ValueError("level_L must be nonnegative")
        beta_bar = min(self.beta_K, self.beta_tau)
        if self.a_K is None:
            object.__setattr__(self, "a_K", beta_bar / self.beta_K)
        if self.a_tau is None:
            object.__setattr__(self, "a_tau", beta_bar / self.beta_tau)
        if self.a_K <= 0 or self.a_tau <= 0:
            raise ValueError("index-set slopes must be positive")

    @property
    def beta_bar(self) -> int:
        return min(self.beta_K, self.beta_tau)


def build_index_set(cfg: AnisotropyConfig) -> list[tuple[int, int]]:
    """All lattice pairs (i, j) with a_K*i + a_tau*j <= L, lex-sorted."""
    L = cfg.level_L
    out = []
    i = 0
    while cfg.a_K * i <= L + 1e-12:
        j = 0
        while cfg.a_K * i + cfg.a_tau * j <= L + 1e-12:
            out.append((i, j))
            j += 1
        i += 1
    return out


def combination_coefficients(index_set) -> dict[tuple[int, int], int]:
    """Inclusion-exclusion coefficients of the sparse-grid combination."""
    members = set(index_set)
    coeffs = {}
    for (i, j) in members:
        c = 0
        for e1 in (0, 1):
            for e2 in (0, 1):
                if (i + e1, j + e2) in members:
                    c += (-1) ** (e1 + e2)
        if c != 0:
            coeffs[(i, j)] = c
    return coeffs


def _axis_points(level: int, lo: float, hi: float) -> np.ndarray:
    return np.linspace(lo, hi, 2**level + 1)


def activated_nodes(cfg: AnisotropyConfig, domain) -> np.ndarray:
    """Union of the hierarchical-increment tensor nodes over the index set."""
    (x0, x1), (y0, y1) = domain
    seen = set()
    pts = []
    for (i, j) in build_index_set(cfg):
        xs = _axis_points(i, x0, x1)
        ys = _axis_points(j, y0, y1)
        for x in xs:
            for y in ys:
                key = (round(float(x), 14), round(float(y), 14))
                if key not in seen:
                    seen.add(key)
                    pts.append((x, y))
    return np.asarray(pts)


def _bilinear_eval(xs, ys, vals, px, py):
    """Bilinear tensor interpolation; exact at the grid nodes."""
    if xs.size == 1:
        fx = np.zeros_like(px)
        ix = np.zeros(px.shape, dtype=int)
    else:
        ix = np.clip(np.searchsorted(xs, px, side="right") - 1, 0, xs.size - 2)
        fx = (px - xs[ix]) / (xs[ix + 1] - xs[ix])
    if ys.size == 1:
        fy = np.zeros_like(py)
        iy = np.zeros(py.shape, dtype=int)
    else:
        iy = np.clip(np.searchsorted(ys, py, side="right") - 1, 0, ys.size - 2)
        fy = (py - ys[iy]) / (ys[iy + 1] - ys[iy])
    ix1 = np.minimum(ix + 1, xs.size - 1)
    iy1 = np.minimum(iy + 1, ys.size - 1)
    v00 = vals[iy, ix]
    v10 = vals[iy, ix1]
    v01 = vals[iy1, ix]
    v11 = vals[iy1, ix1]
    return ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
            + (1 - fx) * fy * v01 + fx * fy * v11)


class _Combination:
    """Evaluable Smolyak combination over sampled dyadic tensor grids."""

    def __init__(self, target, cfg: AnisotropyConfig, domain):
        (x0, x1), (y0, y1) = domain
        self.terms = []
        coeffs = combination_coefficients(build_index_set(cfg))
        for (i, j), c in sorted(coeffs.items()):
            xs = _axis_points(i, x0, x1)
            ys = _axis_points(j, y0, y1)
            XX, YY = np.meshgrid(xs, ys)
            vals = np.asarray(target(XX, YY), dtype=float)
            if vals.shape != XX.shape:
                vals = np.broadcast_to(vals, XX.shape).astype(float)
            if not np.all(np.isfinite(vals)):
                raise ValueError("target evaluated to a non-finite value at a grid node")
            self.terms.append((c, xs, ys, vals))

    def __call__(self, px, py):
        px = np.asarray(px, dtype=float)
        py = np.asarray(py, dtype=float)
        out = np.zeros(np.broadcast(px, py).shape)
        for c, xs, ys, vals in self.terms:
            out += c * _bilinear_eval(xs, ys, vals, px, py)
        return out


def smolyak_fit(target, cfg: AnisotropyConfig, domain) -> CpwlFunction:
    """Sparse-grid CPWL interpolant of ``target`` on a rectangle.

    Parameters
    ----------
    target : callable(X, Y) -> array
        Vectorized target function.
    cfg : AnisotropyConfig
    domain : ((x_min, x_max), (y_min, y_max))

    Returns
    -------
    CpwlFunction on the overlay tensor mesh; interpolates the target exactly
    at every activated sparse-grid node.
    """
    (x0, x1), (y0, y1) = domain
    if not (np.isfinite([x0, x1, y0, y1]).all() and x0 < x1 and y0 < y1):
        raise ValueError("domain must be a nondegenerate finite rectangle")
    index_set = build_index_set(cfg)
    comb = _Combination(target, cfg, domain)
    i_max = max(i for i, _ in index_set)
    j_max = max(j for _, j in index_set)
    xs = _axis_points(i_max, x0, x1)
    ys = _axis_points(j_max, y0, y1)
    XX, YY = np.meshgrid(xs, ys)
    values = comb(XX, YY)
    info = {
        "index_set": index_set,
        "level_L": cfg.level_L,
        "activated_node_count": int(activated_nodes(cfg, domain).shape[0]),
        "combination": comb,
    }
    return triangulate_tensor_grid(xs, ys, values, info=info)


def pca_head(section_matrix: np.ndarray, k: int, weights: np.ndarray | None = None):
    """Leading weighted principal modes across strike sections.

    Parameters
    ----------
    section_matrix : (n_tau, n_K) array, maturities as rows.
    k : number of modes.
    weights : optional positive strike weights defining the inner product.

    Returns
    -------
    modes : (k, n_K) orthonormal in the weighted inner product, sign-fixed so
        the largest-magnitude entry of each mode is positive.
    coefficients : (k, n_tau) maturity series; sum_m coeff[m][t] * modes[m]
        reconstructs the matrix at full rank.
    """
    A = np.asarray(section_matrix, dtype=float)
    if A.ndim != 2:
        raise ValueError("section_matrix must be 2D")
    n_tau, n_K = A.shape
    if not (1 <= k <= min(n_tau, n_K)):
        raise ValueError(f"k={k} out of range for a {n_tau}x{n_K} matrix")
    if weights is None:
        weights = np.ones(n_K)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (n_K,) or np.any(weights <= 0):
        raise ValueError("weights must be positive with one entry per strike")
    ws = np.sqrt(weights)
    U, S, Vt = np.linalg.svd(A * ws[None, :], full_matrices=False)
    modes = Vt[:k] / ws[None, :]
    coeffs = U[:, :k].T * S[:k, None]
    for m in range(k):
        jmax = int(np.argmax(np.abs(modes[m])))
        if modes[m, jmax] < 0:
            modes[m] = -modes[m]
            coeffs[m] = -coeffs[m]
    return modes, coeffs


def error_frontier(target, levels, cfg: AnisotropyConfig, domain,
                   heldout_shape: tuple[int, int] = (97, 89),
                   weight=None, compile_nets: bool = True) -> list[dict]:
    """Error/parameter/time frontier across levels.

    One row per level: level, node_count (CPWL vertices), param_count,
    weighted_error on a held-out dense grid, wall_seconds.
    """
    levels = list(levels)
    if not levels or sorted(levels) != levels:
        raise ValueError("levels must be a nonempty ascending list")
    (x0, x1), (y0, y1) = domain
    hx = np.linspace(x0, x1, heldout_shape[0])
    hy = np.linspace(y0, y1, heldout_shape[1])
    HX, HY = np.meshgrid(hx, hy)
    ref = np.asarray(target(HX, HY), dtype=float)
    wq = np.outer(_trap(hy), _trap(hx))
    if weight is not None:
        wq = wq * np.asarray(weight(HX, HY), dtype=float)
    pts = np.column_stack([HX.ravel(), HY.ravel()])

    rows = []
    for L in levels:
        cfg_L = AnisotropyConfig(cfg.beta_K, cfg.beta_tau, L, cfg.a_K, cfg.a_tau)
        t0 = time.perf_counter()
        fit = smolyak_fit(target, cfg_L, domain)
        if compile_nets:
            net = compile_to_relu(fit)
            param_count = net.param_count
        else:
            param_count = 0
        wall = time.perf_counter() - t0
        approx = fit.evaluate(pts).reshape(ref.shape)
        err = float(np.sqrt(np.sum((approx - ref) ** 2 * wq)))
        rows.append({
            "level": L,
            "node_count": fit.n_vertices,
            "param_count": param_count,
            "weighted_error": err,
            "wall_seconds": wall,
        })
    errs = np.array([r["weighted_error"] for r in rows])
    env = np.minimum.accumulate(errs)
    for r, e in zip(rows, env):
        r["error_envelope"] = float(e)
    return rows


def _trap(x):
    out = np.zeros_like(x)
    d = np.diff(x)
    out[:-1] += d / 2
    out[1:] += d / 2
    return out
