"""Batch pipeline: generate -> fit/compile -> bridge -> project -> chain ->
descend -> risk, with a machine-readable summary and per-stage artifacts.

Every stage reads and writes the shared JSON/CSV schemas under the output
directory, so stages are independently runnable and cacheable.  All
randomness descends from the single config seed; wall-clock data lives only
under the summary's "meta" key so two runs are byte-identical after
stripping it.
"""

from __future__ import annotations

import csv
import json
import time
import zlib
from pathlib import Path

import numpy as np

from . import bridge as bridge_mod
from . import chainstats as cs
from . import descent as descent_mod
from . import risk as risk_mod
from .cpwl import compile_to_relu
from .fd import FdConfig
from .grid import (Grid2D, Surface, WeightField, check_mesh_admissibility,
                   vega_bump_weight, weighted_norm)
from .projection import (ProjectionConfig, feasibility_violation,
                         project_to_cone, projection_certificates)
from .smolyak import AnisotropyConfig, error_frontier, smolyak_fit
from .synth import MarketParams, extract_density, generate_surface, sample_clouds

__all__ = ["DEFAULT_CONFIG", "RunConfig", "run_pipeline", "PipelineContext",
           "STAGES"]

STAGES = ("generate", "fit", "bridge", "project", "gate", "descend", "risk")

DEFAULT_CONFIG = {
    "seed": 7,
    "threads": 1,
    "grid": {
        "k_min": 80.0, "k_max": 120.0, "n_strikes": 31,
        "tau_min": 0.1, "tau_max": 1.1, "n_maturities": 11,
    },
    "market": {
        "spot": 100.0, "rate": 0.0, "dividend": 0.0,
        "vol_kind": "constant", "vol_level": 0.2, "smile_curvature": 0.0,
        "noise_sigma": 0.25,
    },
    "weight": {"width_frac": 0.25, "floor": 0.05},
    "mesh": {"c1": 2000.0, "c2": 50.0, "window": 5, "quantile": 0.10},
    "fd": {
        "window_K": 5, "window_tau": 3,
        "clip_lo": 1e-6, "clip_hi": 4.0, "denom_floor": 1e-8,
    },
    "smolyak": {
        "beta_K": 1, "beta_tau": 1, "level": 4,
        "frontier_levels": [2, 3, 4, 5],
    },
    "bridge": {
        "epsilon_schedule": [1.0, 0.3, 0.1, 0.03],
        "feature_kind": "nystrom", "rank": 8,
        "tol": 0.005, "t_max": 400, "triad_center": 5, "ridge": 1e-8,
    },
    "projection": {
        "tv2_lambda": 0.0, "dykstra_rounds": 0, "path_steps": 8,
        "lip_trials": 200,
    },
    "chain": {
        "sizes": [60, 90, 130, 190, 280, 410, 600, 880, 1290, 1900],
        "n_maturities_used": 6, "octaves": [-1, 0, 1],
        "delta": 0.05, "tail_fraction": 0.1, "band_C": 1.0,
    },
    "descent": {
        "alpha": 1.0, "eta0": 0.1, "noise_sigma": 0.005,
        "lambda_chain": 0.5, "steps": 200,
    },
    "risk": {
        "c_appr": 1.0, "c_erm": 1.0, "c_br1": 1.0, "c_br2": 1.0,
        "c3": 1.0, "c_ch": 1.0, "c_spec": 1.0,
    },
    "thresholds": {
        "kkt": 0.24, "r_geo": 1.05, "mu_hat_lo": 1e-4, "mu_hat_hi": 1e-1,
        "slope": 0.12, "area_drop": -0.02, "lip": 1.01, "relu_maxabs": 1e-8,
    },
}


def _merge_config(user: dict | None, defaults: dict = DEFAULT_CONFIG,
                  path: str = "") -> dict:
    """Fill missing keys from defaults; reject unknown keys."""
    out = {}
    user = user or {}
    unknown = set(user) - set(defaults)
    if unknown:
        raise ValueError(f"unknown config keys at '{path or '.'}': {sorted(unknown)}")
    for key, dval in defaults.items():
        uval = user.get(key, None)
        if isinstance(dval, dict):
            out[key] = _merge_config(uval, dval, f"{path}/{key}")
        elif uval is None:
            out[key] = dval
        else:
            out[key] = uval
    return out


class RunConfig(dict):
    """Validated pipeline configuration tree."""

    def __init__(self, user: dict | None = None):
        super().__init__(_merge_config(user))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls(json.load(fh))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


class PipelineContext:
    """Holds stage artifacts; stages execute lazily and cache to out_dir."""

    def __init__(self, config: RunConfig | dict | None = None,
                 out_dir=None):
        self.config = config if isinstance(config, RunConfig) else RunConfig(config)
        self.out = Path(out_dir) if out_dir else None
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)
        self.art: dict = {}
        self.summary: dict = {"meta": {}}
        self.gates: dict = {}

    # -- helpers ----------------------------------------------------------
    def _seed(self, label: str) -> int:
        base = int(self.config["seed"])
        tag = zlib.crc32(label.encode())
        return int(np.random.SeedSequence([base, tag]).generate_state(1)[0])

    def _gate(self, name: str, value, threshold, passed: bool):
        self.gates[name] = {"value": value, "threshold": threshold,
                            "pass": bool(passed)}

    def _timed(self, name: str, fn):
        t0 = time.perf_counter()
        fn()
        self.summary["meta"][f"wall_{name}"] = time.perf_counter() - t0

    # -- stages -----------------------------------------------------------
    def stage_generate(self):
        cfg = self.config
        gc, mc = cfg["grid"], cfg["market"]
        grid = Grid2D(np.linspace(gc["k_min"], gc["k_max"], gc["n_strikes"]),
                      np.linspace(gc["tau_min"], gc["tau_max"],
                                  gc["n_maturities"]))
        params = MarketParams(spot=mc["spot"], rate=mc["rate"],
                              dividend=mc["dividend"], vol_kind=mc["vol_kind"],
                              vol_level=mc["vol_level"],
                              smile_curvature=mc["smile_curvature"],
                              noise_sigma=mc["noise_sigma"],
                              seed=self._seed("market-noise"))
        clean, noisy = generate_surface(params, grid)
        w = vega_bump_weight(grid, mc["spot"],
                             width=cfg["weight"]["width_frac"]
                             * (gc["k_max"] - gc["k_min"]),
                             floor=cfg["weight"]["floor"])
        report = check_mesh_admissibility(clean, grid, cfg["mesh"]["c1"],
                                          cfg["mesh"]["c2"],
                                          window=cfg["mesh"]["window"],
                                          quantile=cfg["mesh"]["quantile"])
        self.art.update(grid=grid, weight=w, clean=clean, noisy=noisy,
                        params=params)
        self.summary["mesh"] = {
            "h_K": grid.h_K, "h_tau": grid.h_tau,
            "envelope_K": report.envelope_K, "envelope_tau": report.envelope_tau,
            "bound_K": report.bound_K, "bound_tau": report.bound_tau,
            "pass": report.passed, "reason": report.reason,
            "kappa_W": w.kappa_W,
        }
        self._gate("mesh", [grid.h_K, grid.h_tau],
                   [report.bound_K, report.bound_tau], report.passed)
        if self.out:
            doc = {
                "strikes": grid.strikes.tolist(),
                "maturities": grid.maturities.tolist(),
                "w": w.w.tolist(),
                "values": noisy.values.tolist(),
                "clean": clean.values.tolist(),
            }
            (self.out / "surfaces.json").write_text(
                json.dumps(doc, sort_keys=True, default=_json_default))

    def stage_fit(self):
        cfg = self.config
        grid: Grid2D = self.art["grid"]
        sm = cfg["smolyak"]
        domain = ((grid.strikes[0], grid.strikes[-1]),
                  (grid.maturities[0], grid.maturities[-1]))

        def interp_target(surface):
            vals = surface.values

            def target(X, Y):
                from .smolyak import _bilinear_eval
                return _bilinear_eval(grid.strikes, grid.maturities, vals,
                                      np.asarray(X, float), np.asarray(Y, float))
            return target

        acfg = AnisotropyConfig(sm["beta_K"], sm["beta_tau"], sm["level"])
        fit_noisy = smolyak_fit(interp_target(self.art["noisy"]), acfg, domain)
        fit_clean = smolyak_fit(interp_target(self.art["clean"]), acfg, domain)
        KK, TT = np.meshgrid(grid.strikes, grid.maturities)
        pts = np.column_stack([KK.ravel(), TT.ravel()])
        G_hat = Surface(np.maximum(fit_noisy.evaluate(pts).reshape(grid.shape), 0.0),
                        grid)
        G_clean = Surface(np.maximum(fit_clean.evaluate(pts).reshape(grid.shape), 0.0),
                          grid)

        net = compile_to_relu(fit_noisy)
        rng = np.random.default_rng(self._seed("relu-audit"))
        sample = np.column_stack([
            rng.uniform(grid.strikes[0], grid.strikes[-1], 2000),
            rng.uniform(grid.maturities[0], grid.maturities[-1], 2000),
        ])
        maxabs = float(np.max(np.abs(net.evaluate(sample)
                                     - fit_noisy.evaluate(sample))))

        frontier = error_frontier(interp_target(self.art["noisy"]),
                                  sm["frontier_levels"], acfg, domain,
                                  compile_nets=False)
        w = self.art["weight"]
        Z = weighted_norm(self.art["clean"], w, grid)
        self.art.update(fit_noisy=fit_noisy, fit_clean=fit_clean, G_hat=G_hat,
                        G_clean=G_clean, relu_net=net, Z=Z)
        self.summary["C1"] = {
            "level": sm["level"],
            "node_count": fit_noisy.n_vertices,
            "param_count": net.param_count,
            "depth": net.depth,
            "relu_maxabs": maxabs,
            "c1_error": weighted_norm(G_clean.values - self.art["clean"].values,
                                      w, grid) / Z,
            "erm_heldout": weighted_norm(G_hat.values - self.art["noisy"].values,
                                         w, grid) / Z,
            "frontier": [{k: v for k, v in r.items() if k != "wall_seconds"}
                         for r in frontier],
        }
        thr = cfg["thresholds"]["relu_maxabs"]
        self._gate("C1_relu", maxabs, thr, maxabs <= thr)
        if self.out:
            _write_csv(self.out / "frontier.csv",
                       ["level", "node_count", "param_count", "weighted_error",
                        "wall_seconds"],
                       [[r["level"], r["node_count"], r["param_count"],
                         r["weighted_error"], r["wall_seconds"]]
                        for r in frontier])

    def stage_bridge(self):
        cfg = self.config
        bc = cfg["bridge"]
        grid: Grid2D = self.art["grid"]
        spot = cfg["market"]["spot"]
        center = int(bc["triad_center"])
        fd = FdConfig(**cfg["fd"])
        marginals = [extract_density(self.art["G_hat"], grid, center + k, fd)[0]
                     for k in (-1, 0, 1)]
        x = grid.strikes / spot
        problem = bridge_mod.TriMarginalProblem(
            x, *marginals, epsilon_schedule=tuple(bc["epsilon_schedule"]),
            feature_kind=bc["feature_kind"], rank=bc["rank"])
        kernels = bridge_mod.build_bridge(problem)
        state, certs = bridge_mod.tri_sinkhorn(problem, kernels, tol=bc["tol"],
                                               t_max=bc["t_max"],
                                               ridge=bc["ridge"])
        self.art.update(bridge_problem=problem, bridge_kernels=kernels,
                        bridge_state=state, bridge_certs=certs)
        thr = cfg["thresholds"]
        self.summary["C2"] = {
            "KKT": certs.kkt,
            "KKT_components": list(certs.kkt_components),
            "rgeo": certs.r_geo,
            "rgeo_iqr": list(certs.ratio_iqr),
            "muhat": certs.mu_hat,
            "eta": state.eta,
            "iterations": certs.iterations,
            "epsilon_final": certs.epsilon_final,
            "delta_lowrank": certs.delta_lowrank,
            "fallbacks_taken": list(certs.fallbacks_taken),
            "converged": certs.converged,
            "trace": [list(r) for r in state.residual_trace],
        }
        self._gate("C2_kkt", certs.kkt, thr["kkt"], certs.kkt <= thr["kkt"])
        self._gate("C2_rgeo", certs.r_geo, thr["r_geo"],
                   certs.r_geo <= thr["r_geo"])
        self._gate("C2_muhat", certs.mu_hat,
                   [thr["mu_hat_lo"], thr["mu_hat_hi"]],
                   thr["mu_hat_lo"] <= certs.mu_hat <= thr["mu_hat_hi"])
        if self.out:
            _write_csv(self.out / "residual_trace.csv",
                       ["iteration", "r1", "r2", "r3", "martingale", "max"],
                       [[i] + list(r) for i, r in
                        enumerate(state.residual_trace)])

    def stage_project(self):
        cfg = self.config
        pc = cfg["projection"]
        grid: Grid2D = self.art["grid"]
        w: WeightField = self.art["weight"]
        pcfg = ProjectionConfig(tv2_lambda=pc["tv2_lambda"],
                                dykstra_rounds=pc["dykstra_rounds"],
                                path_steps=pc["path_steps"])
        fd = FdConfig(**cfg["fd"])
        certs = projection_certificates(self.art["noisy"], w, pcfg, fd,
                                        trials=pc["lip_trials"],
                                        rng_seed=self._seed("lip-pairs"))
        proj = project_to_cone(self.art["G_hat"], w, pcfg)
        self.art.update(proj_certs=certs, C_proj=proj, proj_cfg=pcfg)
        thr = cfg["thresholds"]
        self.summary["C3"] = {
            "lip_emp": certs.lip_emp,
            "dup_ok": certs.dup_ok,
            "dup_tv_path": certs.dup_tv_path.tolist(),
            "feasibility_violation": feasibility_violation(proj.values, grid),
        }
        self._gate("C3_lip", certs.lip_emp, thr["lip"],
                   certs.lip_emp <= thr["lip"])
        self._gate("C3_dup", bool(certs.dup_ok), True, certs.dup_ok)

    def stage_gate(self):
        cfg = self.config
        cc = cfg["chain"]
        grid: Grid2D = self.art["grid"]
        fd = FdConfig(**cfg["fd"])
        n_mat = min(cc["n_maturities_used"], grid.maturities.size)
        tau_idx = np.linspace(0, grid.maturities.size - 1, n_mat).round().astype(int)
        densities = [extract_density(self.art["C_proj"], grid, int(i), fd)[0]
                     for i in tau_idx]
        sizes = list(cc["sizes"])
        edge_w = np.full(n_mat - 1, 1.0 / (n_mat - 1))
        values = []
        kernel_scales = []
        for s_i, n_s in enumerate(sizes):
            clouds = [sample_clouds(d, grid.strikes / cfg["market"]["spot"],
                                    [n_s],
                                    seed=self._seed(f"cloud-{s_i}-{m}"))[0]
                      for m, d in enumerate(densities)]
            total, _, kernels = cs.chain_energy(
                clouds, edge_w,
                kernel_policy=lambda a, b: cs.median_bandwidth_mixture(
                    a, b, octaves=tuple(cc["octaves"])),
                return_kernels=True, threads=int(cfg["threads"]))
            values.append(total)
            kernel_scales = [k.components[-1][1] for k in kernels]
        values = np.asarray(values)
        alphas = cs.bartlett_alphas(values - np.minimum.accumulate(values))
        neff = np.asarray([cs.n_eff(n, alphas) for n in sizes])
        series = cs.ChainSeries(np.asarray(sizes, float), values, neff)
        decision = cs.gate_v2(series, cs.GateThresholds(
            slope_max=cfg["thresholds"]["slope"],
            area_min=cfg["thresholds"]["area_drop"]),
            delta=cc["delta"], tail_fraction=cc["tail_fraction"])
        self.art.update(chain_series=series, gate_decision=decision)
        self.summary["R2"] = {
            "sizes": sizes,
            "values": values.tolist(),
            "neff_tail": neff[decision.tail_indices[0]:].tolist(),
            "slope": decision.slope_tail,
            "area_drop": decision.area_drop,
            "bands": {"slope": decision.band_slope, "area": decision.band_area},
            "pass": decision.passed,
            "envelope_direction": decision.envelope_direction,
            "fir_l1": decision.fir_l1,
            "pair_kernel_scales": kernel_scales,
        }
        self._gate("R2_gate", [decision.slope_tail, decision.area_drop],
                   [cfg["thresholds"]["slope"], cfg["thresholds"]["area_drop"]],
                   decision.passed)
        if self.out:
            _write_csv(self.out / "chain_series.csv",
                       ["size", "chain_mmd2", "neff"],
                       list(zip(sizes, values.tolist(), neff.tolist())))

    def stage_descend(self):
        cfg = self.config
        dc = cfg["descent"]
        grid: Grid2D = self.art["grid"]
        w: WeightField = self.art["weight"]
        T = grid.maturities.size
        graph = descent_mod.path_laplacian(T, np.ones(T - 1))
        dcfg = descent_mod.DescentConfig(alpha=dc["alpha"], eta0=dc["eta0"],
                                         noise_sigma=dc["noise_sigma"],
                                         lambda_chain=dc["lambda_chain"],
                                         steps=dc["steps"])
        pcfg: ProjectionConfig = self.art["proj_cfg"]

        def projector(states):
            return project_to_cone(states, w, pcfg, grid=grid).values

        traj, final = descent_mod.projected_descent(
            self.art["C_proj"].values, self.art["G_hat"].values, graph,
            projector, dcfg, seed=self._seed("descent"))
        C_hat = Surface(np.maximum(final, 0.0), grid)
        self.art.update(descent_traj=traj, C_hat=C_hat, graph=graph)
        energies = [r["chain_energy"] for r in traj]
        log_e = np.log(np.asarray(energies) + 1e-300)
        slope = float(np.polyfit(np.arange(log_e.size), log_e, 1)[0])
        passed = energies[-1] <= energies[0] * (1 + 1e-9)
        self.summary["C4"] = {
            "lambda2": graph.lambda2,
            "initial_energy": energies[0],
            "final_energy": energies[-1],
            "log_slope": slope,
            "accept_rate": float(np.mean([r["accepted"] for r in traj])),
            "pass": bool(passed),
        }
        self._gate("C4_decay", [energies[0], energies[-1]], "nonincrease",
                   passed)
        if self.out:
            _write_csv(self.out / "descent_trajectory.csv",
                       ["step", "chain_energy", "data_fit", "accepted"],
                       [[r["step"], r["chain_energy"], r["data_fit"],
                         int(r["accepted"])] for r in traj])

    def stage_risk(self):
        cfg = self.config
        grid: Grid2D = self.art["grid"]
        w: WeightField = self.art["weight"]
        Z = self.art["Z"]
        C_hat: Surface = self.art["C_hat"]
        C_out = project_to_cone(C_hat, w, self.art["proj_cfg"])
        clean: Surface = self.art["clean"]
        certs: bridge_mod.CertificateSet = self.art["bridge_certs"]
        decision: cs.GateDecision = self.art["gate_decision"]
        graph = self.art["graph"]

        e_prox = risk_mod.eps_prox(C_hat, C_out, clean, w, grid=grid)
        lo = decision.tail_indices[0]
        series: cs.ChainSeries = self.art["chain_series"]
        _, band_slope, band_area = cs.tolerance_band(
            series.sizes.size, cfg["chain"]["delta"], series.neff[lo:],
            C=cfg["chain"]["band_C"], x_tail=series.sizes[lo:])
        chain_energy_now = self.art["descent_traj"][-1]["chain_energy"] / Z**2
        inputs = {
            "c1_error": self.summary["C1"]["c1_error"],
            "c1_stat": 0.0,
            "erm_term": self.summary["C1"]["erm_heldout"],
            "kkt": certs.kkt,
            "r_geo": certs.r_geo,
            "T": certs.iterations,
            "mu_hat": certs.mu_hat,
            "eps": certs.epsilon_final,
            "delta_mr": certs.delta_lowrank,
            "chain_energy": chain_energy_now,
            "tol_band": band_slope,
            "lambda2": graph.lambda2,
            "slope_plus": max(decision.slope_tail, 0.0),
            "area_minus": max(-decision.area_drop, 0.0),
            "eps_prox": e_prox,
        }
        constants = risk_mod.RiskConstants(**cfg["risk"])
        budget = risk_mod.assemble_risk(inputs, constants)
        measured = 1.0 + weighted_norm(C_out.values - clean.values, w, grid) / Z
        bound_ok = measured <= budget.total * (1 + 1e-12)
        self.art.update(C_out=C_out, risk_budget=budget,
                        risk_measured=measured)
        self.summary["Risk"] = {
            "total": budget.total,
            "log_terms": list(budget.log_terms),
            "factors": list(budget.factors),
            "chain_forms": budget.chain_forms,
            "measured_dimensionless": measured,
            "inputs": inputs,
            "bound_holds": bool(bound_ok),
        }
        self._gate("Risk_bound", measured, budget.total, bound_ok)

    # -- driver -----------------------------------------------------------
    def run_all(self):
        for name in STAGES:
            self._timed(name, getattr(self, f"stage_{name}"))
        self.summary["gates"] = self.gates
        self.summary["all_pass"] = bool(all(g["pass"]
                                            for g in self.gates.values()))
        self.summary["meta"]["timestamp"] = time.time()
        if self.out:
            (self.out / "summary.json").write_text(summary_to_json(self.summary))
        return self.summary


def summary_to_json(summary: dict) -> str:
    return json.dumps(summary, sort_keys=True, indent=1, default=_json_default)


def strip_meta(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k != "meta"}


def run_pipeline(config: dict | RunConfig | None = None, out_dir=None):
    """Execute the full pipeline; returns (summary, exit_status).

    Exit status 0 iff every gate passes; stage failures raise with the stage
    named (the CLI maps that to a nonzero exit), except bridge convergence
    failures, which surface as a failed C2 gate.
    """
    ctx = PipelineContext(config, out_dir)
    for name in STAGES:
        try:
            ctx._timed(name, getattr(ctx, f"stage_{name}"))
        except Exception as exc:
            raise RuntimeError(f"pipeline stage '{name}' failed: {exc}") from exc
    ctx.summary["gates"] = ctx.gates
    ctx.summary["all_pass"] = bool(all(g["pass"] for g in ctx.gates.values()))
    ctx.summary["meta"]["timestamp"] = time.time()
    if ctx.out:
        (ctx.out / "summary.json").write_text(summary_to_json(ctx.summary))
    return ctx.summary, (0 if ctx.summary["all_pass"] else 1)
