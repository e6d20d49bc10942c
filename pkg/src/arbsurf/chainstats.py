"""Chain-consistency statistics: mixture-kernel MMD^2 U-statistics, chain
energy on the maturity path, alpha-mixing effective sample size, and the
Gate-V2 decision protocol (monotone envelope, degree-5 FIR smoothing,
tail-median slope, trapezoidal area drop, concentration tolerance bands).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projection import pav_isotonic

__all__ = [
    "KernelMixture",
    "ChainSeries",
    "GateThresholds",
    "GateDecision",
    "median_bandwidth_mixture",
    "mmd2",
    "chain_energy",
    "n_eff",
    "bartlett_alphas",
    "fir_smoother",
    "tail_diagnostics",
    "tolerance_band",
    "gate_v2",
]

SLOPE_PASS = 0.12        # 5! * 10^-3
AREA_PASS = -0.02
FIR_L1_BOUND = 120.0     # 5!


@dataclass(frozen=True)
class KernelMixture:
    """Convex mixture of bounded Gaussian / inverse-multiquadric kernels."""

    components: tuple     # ((kind, scale, shape), ...)
    weights: tuple
    fallback: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        for kind, scale, shape in self.components:
            if kind not in ("gaussian", "imq"):
                raise ValueError(f"unknown kernel kind {kind!r}")
            if scale <= 0:
                raise ValueError("kernel scales must be positive")

    def __call__(self, sq_dists: np.ndarray) -> np.ndarray:
        out = np.zeros_like(sq_dists, dtype=float)
        for (kind, scale, shape), wt in zip(self.components, self.weights):
            if kind == "gaussian":
                with np.errstate(over="ignore"):
                    out += wt * np.exp(-sq_dists / (2.0 * scale**2))
            else:
                out += wt * (1.0 + sq_dists / scale**2) ** (-shape)
        return out


def _sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = X[:, None, :] - Y[None, :, :]
    return np.sum(d * d, axis=-1)


def _as_samples(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def median_bandwidth_mixture(X, Y, octaves=(-1, 0, 1),
                             imq_shape: float = 0.5) -> KernelMixture:
    """Median-heuristic mixture: Gaussians at sigma*2^l plus one IMQ at sigma."""
    X, Y = _as_samples(X), _as_samples(Y)
    if X.size == 0 or Y.size == 0:
        raise ValueError("both samples must be nonempty")
    d = np.sqrt(_sq_dists(X, Y))
    sigma = float(np.median(d))
    fallback = False
    if sigma <= 0:
        sigma = 1.0
        fallback = True
    comps = tuple(("gaussian", sigma * 2.0**l, 0.0) for l in octaves)
    comps = comps + (("imq", sigma, imq_shape),)
    n = len(comps)
    return KernelMixture(components=comps, weights=(1.0 / n,) * n,
                         fallback=fallback)


def mmd2(X, Y, kernel: KernelMixture, mode: str = "full",
         M_xx: int | None = None, M_yy: int | None = None,
         M_xy: int | None = None, seed: int = 0) -> float:
    """Unbiased squared maximum mean discrepancy between two samples.

    ``full`` excludes diagonal pairs exactly; ``incomplete`` averages kernel
    values over index multisets drawn with replacement (deterministic under
    ``seed``); requesting at least as many pairs as exist switches to the
    complete enumeration, which reproduces the full estimator.
    """
    X, Y = _as_samples(X), _as_samples(Y)
    n, m = X.shape[0], Y.shape[0]
    if mode == "full":
        if n < 2 or m < 2:
            raise ValueError("full mode needs at least 2 samples on each side")
        Kxx = kernel(_sq_dists(X, X))
        Kyy = kernel(_sq_dists(Y, Y))
        Kxy = kernel(_sq_dists(X, Y))
        t_xx = (Kxx.sum() - np.trace(Kxx)) / (n * (n - 1))
        t_yy = (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
        t_xy = 2.0 * Kxy.mean()
        return float(t_xx + t_yy - t_xy)
    if mode != "incomplete":
        raise ValueError("mode must be 'full' or 'incomplete'")
    if not all(M and M >= 1 for M in (M_xx, M_yy, M_xy)):
        raise ValueError("incomplete mode needs M_xx, M_yy, M_xy >= 1")
    rng = np.random.default_rng(seed)

    def block(A, B, M, offdiag):
        na, nb = A.shape[0], B.shape[0]
        total = na * (na - 1) if offdiag else na * nb
        if M >= total:
            Kab = kernel(_sq_dists(A, B))
            if offdiag:
                return (Kab.sum() - np.trace(Kab)) / total
            return Kab.mean()
        if offdiag:
            i = rng.integers(0, na, size=M)
            j = rng.integers(0, na - 1, size=M)
            j = np.where(j >= i, j + 1, j)
        else:
            i = rng.integers(0, na, size=M)
            j = rng.integers(0, nb, size=M)
        d = A[i] - B[j]
        return float(kernel(np.sum(d * d, axis=-1)).mean())

    t_xx = block(X, X, M_xx, True)
    t_yy = block(Y, Y, M_yy, True)
    t_xy = block(X, Y, M_xy, False)
    return float(t_xx + t_yy - 2.0 * t_xy)


def chain_energy(slices, edge_weights, kernel_policy=None, mode: str = "full",
                 return_kernels: bool = False, threads: int = 1,
                 **mmd_kwargs):
    """Weighted sum of adjacent-pair MMD^2 along the maturity path.

    kernel_policy(X, Y) -> KernelMixture; defaults to the median-heuristic
    mixture per pair.  Returns (total, per_edge_values), plus the per-edge
    mixtures when ``return_kernels`` is set.  ``threads`` caps the workers
    for the per-edge statistics (results are order-deterministic).
    """
    slices = [_as_samples(s) for s in slices]
    if len(slices) < 2:
        raise ValueError("need at least 2 maturity slices")
    w = np.asarray(edge_weights, dtype=float)
    if w.shape != (len(slices) - 1,):
        raise ValueError("edge_weights length must be number of edges")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("edge weights must be nonnegative and sum to 1")
    if kernel_policy is None:
        kernel_policy = median_bandwidth_mixture
    pairs = list(zip(slices[:-1], slices[1:]))
    kernels = [kernel_policy(a, b) for a, b in pairs]

    def one(idx):
        a, b = pairs[idx]
        return mmd2(a, b, kernels[idx], mode=mode, **mmd_kwargs)

    if threads > 1 and len(pairs) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_edge = np.asarray(list(pool.map(one, range(len(pairs)))))
    else:
        per_edge = np.asarray([one(i) for i in range(len(pairs))])
    total = float(w @ per_edge)
    if return_kernels:
        return total, per_edge, kernels
    return total, per_edge


def n_eff(n: int, alpha_coeffs, gamma: float = 1.0, c_gamma: float = 1.0) -> float:
    """Effective sample size under alpha-mixing, Newey-West style."""
    if n < 1:
        raise ValueError("n must be >= 1")
    a = np.zeros(max(n - 1, 0))
    coeffs = np.asarray(alpha_coeffs, dtype=float)
    take = min(coeffs.size, a.size)
    a[:take] = coeffs[:take]
    if np.any(a < 0):
        raise ValueError("alpha coefficients must be nonnegative")
    expo = 1.0 if np.isinf(gamma) else gamma / (2.0 + gamma)
    k = np.arange(1, n)
    denom = 1.0 + 2.0 * np.sum((1.0 - k / n) * c_gamma * a**expo)
    return float(n / denom)


def bartlett_alphas(series, max_lag: int | None = None) -> np.ndarray:
    """Bartlett-windowed absolute autocorrelations; a plug-in mixing proxy."""
    z = np.asarray(series, dtype=float)
    z = z - z.mean()
    n = z.size
    if max_lag is None:
        max_lag = max(1, int(np.floor(4 * (n / 100.0) ** (2.0 / 9.0))))
    denom = float(z @ z)
    if denom <= 0:
        return np.zeros(max_lag)
    out = np.empty(max_lag)
    for k in range(1, max_lag + 1):
        out[k - 1] = abs(float(z[k:] @ z[:-k])) / denom * (1.0 - k / (max_lag + 1.0))
    return out


@dataclass
class ChainSeries:
    """Chain diagnostic tracked across sample sizes."""

    sizes: np.ndarray
    values: np.ndarray
    neff: np.ndarray

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.neff = np.asarray(self.neff, dtype=float)
        if np.any(np.diff(self.sizes) <= 0):
            raise ValueError("sizes must be strictly increasing")
        if not (self.sizes.shape == self.values.shape == self.neff.shape):
            raise ValueError("sizes, values and neff must share a length")


@dataclass(frozen=True)
class GateThresholds:
    slope_max: float = SLOPE_PASS
    area_min: float = AREA_PASS


@dataclass
class GateDecision:
    slope_tail: float
    area_drop: float
    band_slope: float
    band_area: float
    passed: bool
    tail_indices: tuple
    envelope_direction: str = "nonincreasing"
    fir_l1: float = 0.0


def fir_smoother(half_width: int = 6) -> np.ndarray:
    """Symmetric FIR stencil reproducing polynomials up to degree 5.

    Least-norm solution of the moment conditions; by symmetry the odd moments
    vanish automatically, leaving r in {0, 2, 4}.
    """
    q = half_width
    if q < 3:
        raise ValueError("half_width must be >= 3 for degree-5 exactness")
    j = np.arange(-q, q + 1)
    rows = [j**0, j**2, j**4]
    Vm = np.asarray(rows, dtype=float)
    target = np.array([1.0, 0.0, 0.0])
    h = np.linalg.pinv(Vm) @ target
    sym = 0.5 * (h + h[::-1])
    return sym


def _apply_fir(y: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Interior convolution with identity passthrough at the edges."""
    q = (h.size - 1) // 2
    out = y.copy()
    if y.size >= h.size:
        interior = np.convolve(y, h[::-1], mode="valid")
        out[q:y.size - q] = interior
    return out


def tail_diagnostics(series: ChainSeries, tail_fraction: float = 0.1,
                     window: int | None = None, fir_halfwidth: int = 6,
                     envelope_direction: str = "nonincreasing"):
    """Monotone envelope -> FIR smooth -> tail median slope and area drop.

    Returns (slope_tail, area_drop, smoothed, tail_indices, fir_l1).
    """
    S = series.sizes.size
    if window is None:
        window = max(2, int(np.floor(tail_fraction * S)))
    if S < max(4, window):
        raise ValueError("series too short for tail diagnostics")
    env = pav_isotonic(series.values, np.ones(S), direction=envelope_direction)
    h = fir_smoother(fir_halfwidth)
    fir_l1 = float(np.abs(h).sum())
    if fir_l1 > FIR_L1_BOUND:
        raise AssertionError("FIR amplification bound exceeded")
    smooth = _apply_fir(env, h)

    n_tail = max(window, int(np.ceil(tail_fraction * S)))
    tail = np.arange(S - n_tail, S)
    if tail.size < window:
        raise ValueError("tail shorter than the slope window")
    x = series.sizes
    slopes = []
    for s0 in range(tail[0], tail[-1] - window + 2):
        xs = x[s0:s0 + window]
        ys = smooth[s0:s0 + window]
        xc = xs - xs.mean()
        slopes.append(float(xc @ ys / (xc @ xc)))
    slope_tail = float(np.median(slopes))

    xt = x[tail]
    yt = smooth[tail]
    raw_area = float(np.trapezoid(yt, xt))
    baseline = float(yt[0] * (xt[-1] - xt[0]))
    if abs(baseline) < 1e-300:
        area_drop = 0.0
    else:
        area_drop = (baseline - raw_area) / abs(baseline)
    return slope_tail, area_drop, smooth, (int(tail[0]), int(tail[-1])), fir_l1


def tolerance_band(S: int, delta: float, neff_tail, C: float = 1.0,
                   x_tail=None):
    """Concentration bands: per-point, slope and area, from n_eff and the
    tail geometry."""
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    neff_tail = np.asarray(neff_tail, dtype=float)
    if np.any(neff_tail <= 0):
        raise ValueError("neff values must be positive")
    per_point = C * np.sqrt(np.log(2.0 * S / delta) / neff_tail)
    eps_max = float(per_point.max())
    if x_tail is None:
        x_tail = np.arange(1.0, neff_tail.size + 1)
    x_tail = np.asarray(x_tail, dtype=float)
    sigma_x = float(np.std(x_tail))
    if sigma_x <= 0:
        sigma_x = 1.0
    band_slope = eps_max / sigma_x
    band_area = eps_max * float(np.sum(np.abs(np.diff(x_tail))))
    return per_point, float(band_slope), float(band_area)


def gate_v2(series: ChainSeries, thresholds: GateThresholds = GateThresholds(),
            delta: float = 0.05, tail_fraction: float = 0.1,
            window: int | None = None, fir_halfwidth: int = 6,
            envelope_direction: str = "nonincreasing") -> GateDecision:
    """PASS iff |tail slope| and area drop clear their thresholds."""
    slope_tail, area_drop, smooth, tail_idx, fir_l1 = tail_diagnostics(
        series, tail_fraction=tail_fraction, window=window,
        fir_halfwidth=fir_halfwidth, envelope_direction=envelope_direction)
    lo, hi = tail_idx
    _, band_slope, band_area = tolerance_band(
        series.sizes.size, delta, series.neff[lo:hi + 1],
        x_tail=series.sizes[lo:hi + 1])
    passed = (abs(slope_tail) <= thresholds.slope_max
              and area_drop >= thresholds.area_min)
    return GateDecision(slope_tail=slope_tail, area_drop=area_drop,
                        band_slope=band_slope, band_area=band_area,
                        passed=bool(passed), tail_indices=tail_idx,
                        envelope_direction=envelope_direction, fir_l1=fir_l1)
