"""Tri-marginal entropic optimal transport with a martingale constraint.

Log-domain three-block Sinkhorn scaling with an epsilon-annealing path,
adaptive damping, a safeguarded 1D Newton step on the martingale multiplier,
and the audit certificates (KKT residual, geometric tail ratio, whitened-Gram
strong-convexity proxy).  The entropy is taken against the product of the
marginals, so the coupling has the Gibbs form m1*m2*m3 * K * u v w with
log-scalings kept finite; all marginalizations stream through O(n^2)
log-sum-exp reductions, never a full 3-tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "TriMarginalProblem",
    "BridgeKernels",
    "BridgeState",
    "CertificateSet",
    "build_bridge",
    "tri_sinkhorn",
    "kkt_residual",
    "certify",
    "dual_value",
    "primal_value",
    "coupling_pairwise",
]

MU_HAT_FLOOR = 1e-12
KKT_PASS = 0.24          # 4! * 10^-2
RGEO_PASS = 1.05
MUHAT_BAND = (1e-4, 1e-1)


@dataclass
class TriMarginalProblem:
    """Three marginals on a common coordinate grid plus the bridge cost."""

    x: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    m3: np.ndarray
    epsilon_schedule: tuple = (1.0, 0.3, 0.1, 0.03)
    cost: tuple | None = None          # (c12, c23) matrices; None = squared distance
    rank: int | None = None
    feature_kind: str = "dense"
    martingale_shift: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 1:
            raise ValueError("x must be a 1D coordinate grid")
        if self.x.size > 1 and np.any(np.diff(self.x) <= 0):
            raise ValueError("x must be strictly increasing")
        for name in ("m1", "m2", "m3"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.shape != self.x.shape:
                raise ValueError(f"{name} must match the grid size")
            if np.any(m < 0):
                raise ValueError(f"{name} must be nonnegative")
            if abs(m.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must sum to 1")
            setattr(self, name, m)
        eps = np.asarray(self.epsilon_schedule, dtype=float)
        if np.any(eps <= 0) or (eps.size > 1 and np.any(np.diff(eps) >= 0)):
            raise ValueError("epsilon_schedule must be strictly decreasing and positive")
        self.epsilon_schedule = tuple(eps.tolist())
        if self.feature_kind not in ("dense", "nystrom", "rff"):
            raise ValueError("feature_kind must be dense, nystrom or rff")
        if self.rank is not None and self.rank > self.x.size:
            raise ValueError("rank cannot exceed the grid size")

    @property
    def n(self) -> int:
        return self.x.size

    def cost_matrices(self):
        if self.cost is not None:
            c12, c23 = (np.asarray(c, dtype=float) for c in self.cost)
        else:
            d = self.x[:, None] - self.x[None, :]
            c12 = d**2
            c23 = d**2
        return c12, c23

    def martingale_rhs(self) -> float:
        return float(0.5 * (self.x @ self.m1 + self.x @ self.m3)
                     + self.martingale_shift)


@dataclass
class StageKernels:
    eps: float
    logK12: np.ndarray
    logK23: np.ndarray
    phi2: np.ndarray            # whitened middle factor (identity-diagonal Gram)
    factors: dict
    delta: float


@dataclass
class BridgeKernels:
    stages: list
    problem: TriMarginalProblem

    def stage(self, eps: float) -> StageKernels:
        for st in self.stages:
            if abs(st.eps - eps) <= 1e-15 * max(1.0, eps):
                return st
        raise KeyError(f"no kernels built for eps={eps}")

    @property
    def final(self) -> StageKernels:
        return self.stages[-1]


def _whiten_factor(phi: np.ndarray):
    """Scale by the top singular value's square root, clip the tiny spectrum.

    Returns (phi_hat, log_scale, phi_ortho) with
    phi_hat @ phi_hat.T * exp(log_scale) reconstructing phi @ phi.T after the
    1e-10 relative spectrum clip; phi_ortho has an identity-diagonal Gram.
    """
    U, s, Vt = np.linalg.svd(phi, full_matrices=False)
    keep = s >= 1e-10 * s[0] if s.size else slice(None)
    U, s, Vt = U[:, keep], s[keep], Vt[keep]
    phi_hat = (U * s) @ Vt / np.sqrt(s[0])
    return phi_hat, float(np.log(s[0])), U @ Vt


def _power_iteration_norm(M: np.ndarray, n_iter: int = 120, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(n_iter):
        u = M @ v
        v = M.T @ u
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
    return float(np.linalg.norm(M @ v))


def build_bridge(problem: TriMarginalProblem) -> BridgeKernels:
    """Gibbs kernels per annealing stage, with whitened factors and low-rank
    error proxies.

    Dense mode stores exact log-kernels -c/eps.  Nystrom (evenly spaced
    landmark columns) and RFF modes materialize the rank-limited kernel
    (memory stays O(n^2)), floor tiny or negative entries before the log, and
    record the operator-error proxy delta estimated by power iteration on the
    residual.
    """
    n = problem.n
    c12, c23 = problem.cost_matrices()
    rank = problem.rank or n
    stages = []
    for eps in problem.epsilon_schedule:
        K12 = np.exp(-c12 / eps)
        K23 = np.exp(-c23 / eps)
        if problem.feature_kind == "dense" or n == 1:
            logK12, logK23 = -c12 / eps, -c23 / eps
            U, s, Vt = np.linalg.svd(K12)
            keep = s >= 1e-10 * s[0]
            phi2 = (Vt[keep].T * np.sqrt(s[keep]))
            _, _, phi2_on = _whiten_factor(phi2)
            factors = {"kind": "dense"}
            delta = 0.0
        elif problem.feature_kind == "nystrom":
            idx = np.unique(np.linspace(0, n - 1, rank).round().astype(int))
            C12, W12 = K12[:, idx], K12[np.ix_(idx, idx)]
            C23, W23 = K23[:, idx], K23[np.ix_(idx, idx)]
            lam12, V12 = np.linalg.eigh(W12)
            lam23, V23 = np.linalg.eigh(W23)
            lam12 = np.maximum(lam12, 1e-12 * lam12.max())
            lam23 = np.maximum(lam23, 1e-12 * lam23.max())
            phi12 = C12 @ V12 / np.sqrt(lam12)[None, :]
            phi23 = C23 @ V23 / np.sqrt(lam23)[None, :]
            K12_hat = phi12 @ phi12.T
            K23_hat = phi23 @ phi23.T
            delta = max(_power_iteration_norm(K12 - K12_hat),
                        _power_iteration_norm(K23 - K23_hat))
            phi12_hat, ls12, phi12_on = _whiten_factor(phi12)
            _, _, _ = _whiten_factor(phi23)
            logK12 = np.log(np.maximum(K12_hat, 1e-300))
            logK23 = np.log(np.maximum(K23_hat, 1e-300))
            phi2_on = phi12_on
            factors = {"kind": "nystrom", "phi12": phi12_hat,
                       "log_scale12": ls12, "landmarks": idx}
        else:  # rff
            m = rank
            rng = np.random.default_rng(12345)
            sigma2 = eps / 2.0
            omegas = rng.standard_normal(m) / np.sqrt(sigma2)
            shifts = rng.uniform(0, 2 * np.pi, m)
            phi = np.sqrt(2.0 / m) * np.cos(problem.x[:, None] * omegas[None, :]
                                            + shifts[None, :])
            K_hat = phi @ phi.T
            delta = max(_power_iteration_norm(K12 - K_hat),
                        _power_iteration_norm(K23 - K_hat))
            phi_hat, ls, phi_on = _whiten_factor(phi)
            logK12 = np.log(np.maximum(K_hat, 1e-300))
            logK23 = logK12
            phi2_on = phi_on
            factors = {"kind": "rff", "phi": phi_hat, "log_scale": ls}
        stages.append(StageKernels(eps=eps, logK12=logK12, logK23=logK23,
                                   phi2=phi2_on, factors=factors,
                                   delta=float(delta)))
    return BridgeKernels(stages=stages, problem=problem)


@dataclass
class BridgeState:
    """Log-domain dual scalings; log_v excludes the eta*x/eps tilt."""

    log_u: np.ndarray
    log_v: np.ndarray
    log_w: np.ndarray
    eta: float
    epsilon: float
    residual_trace: list = field(default_factory=list)
    stage_traces: list = field(default_factory=list)
    dual_trace: list = field(default_factory=list)
    damping: float = 1.0
    fallbacks_taken: list = field(default_factory=list)
    converged: bool = True

    @property
    def cumulative_min(self) -> np.ndarray:
        res = np.asarray([r[4] for r in self.residual_trace])
        return np.minimum.accumulate(res) if res.size else res


@dataclass
class CertificateSet:
    kkt: float
    kkt_components: tuple
    r_geo: float
    mu_hat: float
    iterations: int
    epsilon_final: float
    ratio_iqr: tuple = (0.0, 0.0)
    delta_lowrank: float = 0.0
    fallbacks_taken: tuple = ()
    converged: bool = True

    @property
    def pass_kkt(self) -> bool:
        return self.kkt <= KKT_PASS

    @property
    def pass_rgeo(self) -> bool:
        return self.r_geo <= RGEO_PASS

    @property
    def pass_muhat(self) -> bool:
        return MUHAT_BAND[0] <= self.mu_hat <= MUHAT_BAND[1]


class _LogMarginals:
    """Streaming log-sum-exp marginalizations of the implied coupling."""

    def __init__(self, problem: TriMarginalProblem, st: StageKernels,
                 state: BridgeState):
        with np.errstate(divide="ignore"):
            lm1 = np.log(problem.m1)
            lm2 = np.log(problem.m2)
            lm3 = np.log(problem.m3)
        self.A = lm1 + state.log_u
        self.B = lm2 + state.log_v + state.eta * problem.x / st.eps
        self.C = lm3 + state.log_w
        self.logK12 = st.logK12
        self.logK23 = st.logK23

    def log_S(self):
        # S_j = sum_k K23[j,k] exp(C_k)
        return logsumexp(self.logK23 + self.C[None, :], axis=1)

    def log_R(self):
        # R_j = sum_i K12[i,j] exp(A_i)
        return logsumexp(self.logK12 + self.A[:, None], axis=0)

    def log_P1(self):
        return self.A + logsumexp(self.logK12 + (self.B + self.log_S())[None, :],
                                  axis=1)

    def log_P2(self):
        return self.B + self.log_R() + self.log_S()

    def log_P3(self):
        return self.C + logsumexp(self.logK23 + (self.B + self.log_R())[:, None],
                                  axis=0)


def _residual_tuple(problem, st, state, conv_components=(0, 1, 2, 3)):
    lm = _LogMarginals(problem, st, state)
    p1 = np.exp(lm.log_P1())
    p2 = np.exp(lm.log_P2())
    p3 = np.exp(lm.log_P3())
    mart = float(problem.x @ p2 - problem.martingale_rhs())
    r1 = float(np.max(np.abs(p1 - problem.m1)))
    r2 = float(np.max(np.abs(p2 - problem.m2)))
    r3 = float(np.max(np.abs(p3 - problem.m3)))
    comps = (r1, r2, r3, abs(mart))
    conv = max(comps[i] for i in conv_components)
    return comps + (conv,), p2


def _eta_newton(problem, st, state, max_iter: int = 40):
    """Safeguarded 1D Newton on the martingale violation, bisection fallback."""
    x = problem.x
    eps = st.eps
    b = problem.martingale_rhs()
    lm = _LogMarginals(problem, st, state)
    log_p2 = lm.log_P2()
    p2 = np.exp(log_p2)
    if p2.sum() <= 0:
        return 0.0

    def g(delta):
        z = p2 * np.exp(np.clip(delta * x / eps, -700, 700))
        return float(x @ z - b), z

    lo, hi = -50.0 * eps, 50.0 * eps
    glo, _ = g(lo)
    ghi, _ = g(hi)
    if glo > 0 or ghi < 0:
        # root not bracketed: fall back to the best endpoint
        return lo if abs(glo) < abs(ghi) else hi
    delta = 0.0
    for _ in range(max_iter):
        val, z = g(delta)
        if abs(val) <= 1e-14 * (1.0 + abs(b)):
            break
        if val > 0:
            hi = delta
        else:
            lo = delta
        slope = float((x**2 / eps) @ z)
        step = -val / slope if slope > 0 else 0.0
        cand = delta + step
        if not (lo < cand < hi):
            cand = 0.5 * (lo + hi)
        delta = cand
    return delta


def tri_sinkhorn(problem: TriMarginalProblem,
                 kernels: BridgeKernels | None = None,
                 tol: float = 0.24,
                 t_max: int = 400,
                 damping_bounds: tuple = (0.1, 1.0),
                 min_final_iters: int = 12,
                 ridge: float = 1e-8,
                 update_middle: bool = True):
    """Run the annealed, damped log-domain tri-Sinkhorn loop.

    Returns (BridgeState, CertificateSet).  A run that exhausts its budget
    after the fallback ladder reports ``converged=False`` on both outputs
    instead of raising; the caller gates on the certificates.

    ``update_middle=False`` freezes the middle potential so the middle
    marginal is carried only by the entropic reference.  That is the
    well-posed setting for martingale rhs sensitivities: with all three
    marginals hard, the rhs is pinned by m2 and a perturbed problem has no
    feasible point, so shadow prices are read off in this mode.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if kernels is None:
        kernels = build_bridge(problem)
    n = problem.n
    if n == 1:
        state = BridgeState(np.zeros(1), np.zeros(1), np.zeros(1), 0.0,
                            problem.epsilon_schedule[-1])
        state.residual_trace = [(0.0, 0.0, 0.0, 0.0, 0.0)]
        state.stage_traces = [[(0.0, 0.0, 0.0, 0.0, 0.0)]]
        certs = CertificateSet(kkt=0.0, kkt_components=(0.0,) * 4, r_geo=0.0,
                               mu_hat=max(2.0 + ridge, MU_HAT_FLOOR),
                               iterations=1,
                               epsilon_final=problem.epsilon_schedule[-1])
        return state, certs

    gamma_min, gamma_max = damping_bounds
    state = BridgeState(np.zeros(n), np.zeros(n), np.zeros(n), 0.0,
                        problem.epsilon_schedule[0])
    state.damping = gamma_max
    active1 = problem.m1 > 0
    active2 = (problem.m2 > 0) if update_middle else np.zeros(n, dtype=bool)
    active3 = problem.m3 > 0
    with np.errstate(divide="ignore"):
        lm1 = np.log(problem.m1)
        lm2 = np.log(problem.m2)
        lm3 = np.log(problem.m3)

    conv_components = (0, 1, 2, 3) if update_middle else (0, 2, 3)

    def run_stage(st, state, t_budget, stage_tol, min_iters=1):
        gamma = state.damping
        trace = []
        increases = 0
        for t in range(t_budget):
            lm = _LogMarginals(problem, st, state)
            state.log_u[active1] += gamma * (lm1[active1] - lm.log_P1()[active1])
            lm = _LogMarginals(problem, st, state)
            if active2.any():
                state.log_v[active2] += gamma * (lm2[active2] - lm.log_P2()[active2])
            lm = _LogMarginals(problem, st, state)
            state.log_w[active3] += gamma * (lm3[active3] - lm.log_P3()[active3])
            state.eta += _eta_newton(problem, st, state)
            comps, _ = _residual_tuple(problem, st, state, conv_components)
            trace.append(comps)
            state.dual_trace.append(dual_value(state, problem, kernels, st=st))
            res = comps[4]
            if len(trace) >= 2:
                if res > trace[-2][4]:
                    increases += 1
                    if increases >= 2:
                        gamma = max(gamma / 1.5, gamma_min)
                        increases = 0
                else:
                    increases = 0
            if len(trace) >= 6:
                prev = trace[-6][4]
                if prev > 0 and (prev - res) / prev < 1e-3:
                    if gamma < gamma_max:
                        gamma = min(1.5 * gamma, gamma_max)
                    elif res <= stage_tol:
                        break
                    elif len(trace) > 30 and (prev - res) / prev < 1e-9:
                        break  # hard stagnation
            if res <= stage_tol and len(trace) >= min_iters:
                break
        state.damping = gamma
        return trace

    schedule = list(problem.epsilon_schedule)
    for si, eps in enumerate(schedule):
        st = kernels.stage(eps)
        if si > 0:
            scale = schedule[si - 1] / eps
            state.log_u *= scale
            state.log_v *= scale
            state.log_w *= scale
        state.epsilon = eps
        final_stage = si == len(schedule) - 1
        trace = run_stage(st, state, t_max, tol,
                          min_iters=min_final_iters if final_stage else 1)
        state.stage_traces.append(trace)
        state.residual_trace.extend(trace)

    # fallback ladder if the final KKT misses the tolerance
    def final_kkt():
        comps, _ = _residual_tuple(problem, kernels.final, state, conv_components)
        return comps[4]

    if final_kkt() > tol:
        state.fallbacks_taken.append("marginal_rebalance")
        saved, state.damping = state.damping, 1.0
        trace = run_stage(kernels.final, state, 10, tol)
        state.stage_traces[-1].extend(trace)
        state.residual_trace.extend(trace)
        state.damping = saved
    if final_kkt() > tol:
        state.fallbacks_taken.append("damping_increase")
        state.damping = max(gamma_min, 0.5 * state.damping)
        trace = run_stage(kernels.final, state, t_max // 2, tol)
        state.stage_traces[-1].extend(trace)
        state.residual_trace.extend(trace)
    if final_kkt() > tol and len(schedule) >= 2:
        state.fallbacks_taken.append("eps_backtrack")
        prev_eps, last_eps = schedule[-2], schedule[-1]
        state.log_u *= last_eps / prev_eps
        state.log_v *= last_eps / prev_eps
        state.log_w *= last_eps / prev_eps
        run_stage(kernels.stage(prev_eps), state, t_max // 2, tol)
        state.log_u *= prev_eps / last_eps
        state.log_v *= prev_eps / last_eps
        state.log_w *= prev_eps / last_eps
        trace = run_stage(kernels.final, state, t_max // 2, tol)
        state.stage_traces[-1].extend(trace)
        state.residual_trace.extend(trace)

    state.converged = final_kkt() <= tol
    certs = certify(state, problem, kernels, ridge=ridge)
    return state, certs


def kkt_residual(state: BridgeState, problem: TriMarginalProblem,
                 kernels: BridgeKernels):
    """(kkt, components): three sup-norm marginal errors + |martingale violation|."""
    st = kernels.stage(state.epsilon)
    comps, _ = _residual_tuple(problem, st, state)
    return comps[4], comps[:4]


def certify(state: BridgeState, problem: TriMarginalProblem,
            kernels: BridgeKernels, ridge: float = 1e-8) -> CertificateSet:
    """Certificates from the final-stage residual trace and whitened Gram."""
    trace = state.stage_traces[-1] if state.stage_traces else []
    if len(trace) < 2:
        raise ValueError("residual trace too short for certification")
    res = np.asarray([r[4] for r in trace])
    ratios = res[1:] / np.maximum(res[:-1], 1e-300)
    window = max(10, int(np.ceil(0.1 * ratios.size)))
    tail = ratios[-window:]
    r_geo = float(np.median(tail))
    iqr = (float(np.quantile(tail, 0.10)), float(np.quantile(tail, 0.90)))

    st = kernels.final
    phi2 = st.phi2
    G = (phi2.T * problem.m1) @ phi2 + (phi2.T * problem.m3) @ phi2
    G = G + ridge * np.eye(G.shape[0])
    mu_hat = max(_min_eig(G), MU_HAT_FLOOR)

    kkt, comps = kkt_residual(state, problem, kernels)
    return CertificateSet(
        kkt=kkt,
        kkt_components=comps,
        r_geo=r_geo,
        mu_hat=float(mu_hat),
        iterations=len(state.residual_trace),
        epsilon_final=kernels.final.eps,
        ratio_iqr=iqr,
        delta_lowrank=st.delta,
        fallbacks_taken=tuple(state.fallbacks_taken),
        converged=state.converged,
    )


def _min_eig(G: np.ndarray) -> float:
    """Smallest eigenvalue by Lanczos for larger Grams, dense otherwise."""
    if G.shape[0] > 64:
        from scipy.sparse.linalg import eigsh
        try:
            return float(eigsh(G, k=1, which="SA",
                               return_eigenvectors=False)[0])
        except Exception:
            pass
    return float(np.linalg.eigvalsh(G)[0])


def dual_value(state: BridgeState, problem: TriMarginalProblem,
               kernels: BridgeKernels, st: StageKernels | None = None) -> float:
    """Entropic dual objective at the current potentials.

    sum_i phi_i . m_i + eta * b + eps * (1 - mass(theta)); tight against the
    primal (duality gap 0 at the optimum) and linear in the martingale rhs b
    with slope eta, which is what the shadow-price sensitivity reads off.
    """
    if st is None:
        st = kernels.stage(state.epsilon)
    eps = st.eps
    lm = _LogMarginals(problem, st, state)
    mass = float(np.exp(logsumexp(lm.log_P1())))
    act1, act2, act3 = problem.m1 > 0, problem.m2 > 0, problem.m3 > 0
    alpha = eps * state.log_u
    beta = eps * state.log_v
    gamma = eps * state.log_w
    val = (alpha[act1] @ problem.m1[act1]
           + beta[act2] @ problem.m2[act2]
           + gamma[act3] @ problem.m3[act3]
           + state.eta * problem.martingale_rhs()
           + eps * (1.0 - mass))
    return float(val)


def coupling_pairwise(state: BridgeState, problem: TriMarginalProblem,
                      kernels: BridgeKernels, st: StageKernels | None = None):
    """Pairwise marginals (P12, P23) of the implied coupling, O(n^2)."""
    if st is None:
        st = kernels.stage(state.epsilon)
    lm = _LogMarginals(problem, st, state)
    logS = lm.log_S()
    logR = lm.log_R()
    logP12 = lm.A[:, None] + st.logK12 + (lm.B + logS)[None, :]
    logP23 = (lm.B + logR)[:, None] + st.logK23 + lm.C[None, :]
    return np.exp(logP12), np.exp(logP23)


def primal_value(state: BridgeState, problem: TriMarginalProblem,
                 kernels: BridgeKernels, st: StageKernels | None = None) -> float:
    """Primal objective <C, Pi> + eps * KL(Pi || m1 x m2 x m3)."""
    if st is None:
        st = kernels.stage(state.epsilon)
    eps = st.eps
    c12, c23 = problem.cost_matrices()
    P12, P23 = coupling_pairwise(state, problem, kernels, st)
    lm = _LogMarginals(problem, st, state)
    p1 = np.exp(lm.log_P1())
    p2 = np.exp(lm.log_P2())
    p3 = np.exp(lm.log_P3())
    cost = float(np.sum(c12 * P12) + np.sum(c23 * P23))
    # KL against the product reference through the Gibbs form:
    # log(Pi/ref) = log u_i + (log v_j + eta x_j / eps) + log w_k + logK
    tilt = state.log_v + state.eta * problem.x / eps
    kl = (state.log_u @ p1 + tilt @ p2 + state.log_w @ p3
          + float(np.sum(st.logK12 * P12) + np.sum(st.logK23 * P23)))
    return cost + eps * float(kl)
