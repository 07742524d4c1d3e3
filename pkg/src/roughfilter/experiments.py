"""End-to-end experiments shared by the command line and the test suite.

Each experiment takes a validated ScenarioConfig, runs one pipeline, and
returns a RunReport whose exit_code follows the CLI convention:
0 pass, 1 a quantitative gate failed, 2 unusable configuration,
3 inconclusive (not enough signal above the Monte Carlo floor).
"""

from __future__ import annotations

import os

import numpy as np

from .backward import (backward_davie_residual, duality_check, grid_axes,
                       pilot_box, solve_backward_fk)
from .classical import (conditional_mc_filter, kalman_bucy,
                        randomization_harness, riccati_fixed_point,
                        simulate_system)
from .config import RunReport, ScenarioConfig
from .degenerate import (collapse_gap, degenerate_filter, kernel_leak,
                         moore_penrose, penrose_defects)
from .errors import ConfigurationError
from .models import get_model
from .operators import (OperatorContext, ks_davie_residual, total_mass_rde,
                        write_residual_csv, zakai_davie_residual)
from .particle import (Perturbation, robustness_probe, run_filter,
                       write_filter_csv)
from .roughpath import (TimeGrid, geometrify, lift_ito, lift_piecewise_linear,
                        load_rough_path, save_rough_path, validate)
from .testfuncs import library, one


def scenario_from_config(cfg: ScenarioConfig):
    return get_model(cfg.model, **cfg.model_params)


def grid_from_config(cfg: ScenarioConfig, scn) -> TimeGrid:
    horizon = scn.default_horizon if cfg.horizon is None else float(cfg.horizon)
    return TimeGrid(horizon, cfg.steps)


def phis_from_config(cfg: ScenarioConfig, dim: int):
    lib = {tf.name: tf for tf in library(dim)}
    lib["one"] = one(dim)
    if cfg.phis is None:
        return library(dim)
    out = []
    for name in cfg.phis:
        if name not in lib:
            raise ConfigurationError(
                f"$.phis: unknown test function {name!r}; have {sorted(lib)}")
        out.append(lib[name])
    return out


class DriverBundle:
    def __init__(self, grid, rp, y_fine=None, w_fine=None):
        self.grid = grid
        self.rp = rp
        self.y_fine = y_fine
        self.w_fine = w_fine


def driver_from_config(cfg: ScenarioConfig, scn) -> DriverBundle:
    grid = grid_from_config(cfg, scn)
    if cfg.driver == "file":
        rp = load_rough_path(cfg.driver_file)
        if rp.steps != cfg.steps:
            raise ConfigurationError(
                f"$.steps: driver file has {rp.steps} steps, config says {cfg.steps}")
        return DriverBundle(rp.grid, rp)
    fine = grid.refine(cfg.refine)
    sim = simulate_system(scn, fine, cfg.seed, n_paths=1)
    y_fine = sim.obs[0]
    if cfg.driver == "piecewise_linear":
        rp = lift_piecewise_linear(grid, y_fine[:: cfg.refine], cfg.alpha,
                                   meta={"seed": cfg.seed})
    else:
        rp = lift_ito(grid, y_fine, cfg.refine, cfg.alpha, meta={"seed": cfg.seed})
        if cfg.driver == "geometrified":
            rp = geometrify(rp)
    return DriverBundle(grid, rp, y_fine=y_fine, w_fine=sim.noise_w[0])


def _reduced_coeffs(scn):
    if scn.coeffs is None:
        raise ConfigurationError(
            f"model {scn.name!r} has no reduced coefficients; "
            "use the degenerate command")
    return scn.coeffs


def _out_path(cfg: ScenarioConfig, name: str) -> str | None:
    if cfg.out is None:
        return None
    os.makedirs(cfg.out, exist_ok=True)
    return os.path.join(cfg.out, name)


def exp_lift(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    bundle = driver_from_config(cfg, scn)
    report = validate(bundle.rp)
    rr = RunReport(command="lift", config_hash=cfg.config_hash())
    rr.metrics = report.as_dict()
    rr.flags["ok"] = report.ok
    base = _out_path(cfg, "driver")
    if base is not None:
        save_rough_path(bundle.rp, base)
        rr.outputs += [base + ".csv", base + ".json"]
    rr.exit_code = 0 if report.ok else 1
    return rr


def exp_filter(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    coeffs = _reduced_coeffs(scn)
    bundle = driver_from_config(cfg, scn)
    phis = phis_from_config(cfg, scn.dim_x)
    ens = run_filter(coeffs, bundle.rp, cfg.particles, cfg.seed, phis, scn.init,
                     bm_substeps=cfg.bm_substeps)
    rr = RunReport(command="filter", config_hash=cfg.config_hash())
    n = bundle.rp.steps
    for tf in phis:
        rr.metrics[tf.name] = {
            "mu_T": ens.mu(tf, n), "sigma_T": ens.sigma(tf, n),
            "stderr_T": ens.stderr(tf, n), "sigma_stderr_T": ens.sigma_stderr(tf, n),
        }
    path = _out_path(cfg, "filter.csv")
    if path is not None:
        write_filter_csv(path, ens)
        rr.outputs.append(path)
    return rr


def _residual_experiment(cfg: ScenarioConfig, kind: str) -> RunReport:
    scn = scenario_from_config(cfg)
    coeffs = _reduced_coeffs(scn)
    bundle = driver_from_config(cfg, scn)
    phis = [tf for tf in phis_from_config(cfg, scn.dim_x) if tf.name != "one"]
    ens = run_filter(coeffs, bundle.rp, cfg.particles, cfg.seed, phis, scn.init,
                     bm_substeps=cfg.bm_substeps)
    ctx = OperatorContext(coeffs, bundle.rp)
    target = 3.0 * cfg.alpha - 0.2
    rr = RunReport(command=kind, config_hash=cfg.config_hash())
    # A certificate below target is not a refutation: the max statistic at
    # finite M is one-sided, so anything short of a certified fit exits 3.
    any_inconclusive = False
    below_target = []
    for tf in phis:
        if kind == "zakai":
            rep = zakai_davie_residual(ens, ctx, tf, cfg.spans)
        else:
            rep = ks_davie_residual(ens, ctx, tf, cfg.spans)
        rr.metrics[tf.name] = rep.as_dict()
        path = _out_path(cfg, f"residual_{kind}_{tf.name}.csv")
        if path is not None:
            write_residual_csv(path, rep)
            rr.outputs.append(path)
        if rep.inconclusive:
            any_inconclusive = True
        elif not (rep.exponent >= target):
            below_target.append(tf.name)
    rr.flags["target_exponent"] = target
    rr.flags["insufficient_spans"] = any_inconclusive
    rr.flags["below_target"] = below_target
    rr.flags["certified"] = not any_inconclusive and not below_target
    rr.exit_code = 0 if rr.flags["certified"] else 3
    return rr


def exp_zakai(cfg: ScenarioConfig) -> RunReport:
    return _residual_experiment(cfg, "zakai")


def exp_ks(cfg: ScenarioConfig) -> RunReport:
    return _residual_experiment(cfg, "ks")


def exp_mass(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    coeffs = _reduced_coeffs(scn)
    bundle = driver_from_config(cfg, scn)
    phis = [tf for tf in phis_from_config(cfg, scn.dim_x) if tf.name != "one"]
    ens = run_filter(coeffs, bundle.rp, cfg.particles, cfg.seed, phis, scn.init,
                     bm_substeps=cfg.bm_substeps)
    ctx = OperatorContext(coeffs, bundle.rp)
    report = total_mass_rde(ens, ctx, phis)
    rr = RunReport(command="mass", config_hash=cfg.config_hash())
    rr.metrics = report.as_dict()
    rr.exit_code = 0 if report.ok else 1
    return rr


def duality_checkpoints(steps: int, count: int) -> list[int]:
    nodes = np.unique(np.round(np.linspace(0, steps, count + 1)).astype(int))
    return [int(c) for c in nodes]


def exp_duality(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    coeffs = _reduced_coeffs(scn)
    bundle = driver_from_config(cfg, scn)
    phis = [tf for tf in phis_from_config(cfg, scn.dim_x) if tf.name != "one"]
    ens = run_filter(coeffs, bundle.rp, cfg.particles, cfg.seed, phis, scn.init,
                     bm_substeps=cfg.bm_substeps)
    box = pilot_box(coeffs, bundle.rp, scn.init, seed=cfg.seed)
    axes = grid_axes(box, cfg.grid_points)
    cs = duality_checkpoints(bundle.rp.steps, cfg.checkpoints)
    sol = solve_backward_fk(coeffs, bundle.rp, phis, cs, axes,
                            cfg.inner_particles, cfg.seed, box=box)
    report = duality_check(ens, sol, phis)
    rr = RunReport(command="duality", config_hash=cfg.config_hash())
    rr.metrics["duality"] = report.as_dict()
    rr.metrics["exit_fraction"] = sol.exit_fraction.tolist()
    if scn.dim_x == 1:
        ctx = OperatorContext(coeffs, bundle.rp)
        rr.metrics["backward_residual"] = {
            tf.name: [{"s": w.s, "t": w.t, "residual": w.residual,
                       "noise_floor": w.noise_floor}
                      for w in backward_davie_residual(ctx, sol, tf.name)]
            for tf in phis
        }
    rr.exit_code = 0 if report.ok else 1
    return rr


def robustness_gates(report, amounts: list[float], f_nonzero: bool,
                     ratio_spread_tol: float = 5.0) -> dict:
    """The three quantitative gates on a perturbation ladder."""
    by_id = {r.perturb_id: r for r in report.rows}
    area = [(a, by_id[f"area_shift[{a:g}]"]) for a in sorted(amounts, reverse=True)
            if f"area_shift[{a:g}]" in by_id]
    ratios = [r.diff_max / r.rho for _, r in area if r.rho > 0]
    spread = (max(ratios) / min(ratios)) if ratios and min(ratios) > 0 else float("inf")
    monotone = True
    for (a1, r1), (a2, r2) in zip(area, area[1:]):
        slack = 3.0 * (max(r1.paired_se.values()) + max(r2.paired_se.values()))
        if r2.diff_max > r1.diff_max + slack:
            monotone = False
    geo_significant = None
    if "geometrify" in by_id:
        g = by_id["geometrify"]
        geo_significant = any(g.diffs[k] > 3.0 * g.paired_se[k] for k in g.diffs)
    ok = spread <= ratio_spread_tol and monotone
    if f_nonzero and geo_significant is not None:
        ok = ok and geo_significant
    return {"ratio_spread": spread, "ratio_spread_tol": ratio_spread_tol,
            "monotone": monotone, "geo_significant": geo_significant,
            "f_nonzero": f_nonzero, "ok": ok}


def _f_nonzero(coeffs) -> bool:
    x = np.linspace(-1.0, 1.0, 7)[:, None] * np.ones((1, coeffs.dim_x))
    y = np.zeros(coeffs.dim_y)
    return float(np.max(np.abs(coeffs.f(0.0, x, y)))) > 1e-12


def exp_robustness(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    coeffs = _reduced_coeffs(scn)
    bundle = driver_from_config(cfg, scn)
    phis = [tf for tf in phis_from_config(cfg, scn.dim_x) if tf.name != "one"]
    perts = [Perturbation(kind=p["kind"], amount=float(p.get("amount", 0.0)))
             for p in cfg.perturbations]
    report = robustness_probe(coeffs, bundle.rp, perts, phis, cfg.particles,
                              cfg.seed, scn.init, threads=cfg.threads)
    amounts = [p.amount for p in perts if p.kind == "area_shift"]
    gates = robustness_gates(report, amounts, _f_nonzero(coeffs))
    rr = RunReport(command="robustness", config_hash=cfg.config_hash())
    rr.metrics = report.as_dict()
    rr.flags = gates
    path = _out_path(cfg, "robustness.csv")
    if path is not None:
        import csv

        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(report.to_csv_rows())
        rr.outputs.append(path)
    rr.exit_code = 0 if gates["ok"] else 1
    return rr


def exp_randomize(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    _reduced_coeffs(scn)
    grid = grid_from_config(cfg, scn)
    phis = phis_from_config(cfg, scn.dim_x)
    report = randomization_harness(scn, grid, cfg.refine, cfg.particles,
                                   cfg.seed, phis, alpha=cfg.alpha)
    rr = RunReport(command="randomize", config_hash=cfg.config_hash())
    rr.metrics = report.as_dict()
    rr.exit_code = 0 if report.ok else 1
    return rr


def exp_kalman(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    if scn.linear_gaussian is None:
        raise ConfigurationError(
            f"model {scn.name!r} has no linear-Gaussian reference")
    coeffs = _reduced_coeffs(scn)
    bundle = driver_from_config(cfg, scn)
    if bundle.y_fine is None:
        raise ConfigurationError("kalman comparison needs a simulated driver")
    phis = phis_from_config(cfg, scn.dim_x)
    id_tf = next((tf for tf in phis if tf.name == "clipped_identity"), None)
    if id_tf is None:
        from .testfuncs import clipped_identity

        id_tf = clipped_identity(scn.dim_x)
        phis = list(phis) + [id_tf]
    ens = run_filter(coeffs, bundle.rp, cfg.particles, cfg.seed, phis, scn.init,
                     bm_substeps=cfg.bm_substeps)
    fine = bundle.grid.refine(cfg.refine)
    kb = kalman_bucy(scn.linear_gaussian, fine, bundle.y_fine)
    cs = [c for c in duality_checkpoints(bundle.rp.steps, cfg.checkpoints) if c > 0]
    sig = ens.sigma(id_tf)
    sse = ens.sigma_stderr(id_tf)
    rows = []
    ok = True
    for c in cs:
        ref = float(kb.mean[c * cfg.refine])
        diff = abs(float(sig[c]) - ref)
        budget = 3.0 * float(sse[c]) + 1e-2
        rows.append({"node": c, "t": float(bundle.grid.nodes[c]),
                     "rough": float(sig[c]), "kalman": ref,
                     "diff": diff, "budget": budget, "ok": diff <= budget})
        ok = ok and diff <= budget
    rr = RunReport(command="kalman", config_hash=cfg.config_hash())
    rr.metrics["rows"] = rows
    rr.metrics["riccati_fixed_point"] = riccati_fixed_point(scn.linear_gaussian)
    rr.metrics["var_T"] = float(kb.var[-1])
    rr.exit_code = 0 if ok else 1
    return rr


def exp_degenerate(cfg: ScenarioConfig) -> RunReport:
    scn = scenario_from_config(cfg)
    grid = grid_from_config(cfg, scn)
    phis = phis_from_config(cfg, scn.dim_x)
    rr = RunReport(command="degenerate", config_hash=cfg.config_hash())
    k = scn.prim.k_matrix(0.0, np.zeros(scn.prim.dim_y))
    pen = penrose_defects(k, moore_penrose(k))
    rr.metrics["penrose_defect"] = pen
    if scn.coeffs is not None:
        report = collapse_gap(scn, grid, cfg.refine, cfg.particles, cfg.seed,
                              phis, alpha=cfg.alpha)
        rr.metrics["collapse"] = report.as_dict()
        rr.exit_code = 0 if report.ok else 1
        return rr
    run = degenerate_filter(scn, grid, cfg.refine, cfg.particles, cfg.seed,
                            phis, alpha=cfg.alpha)
    n = run.hat_rp.steps
    rr.metrics["terminal"] = {tf.name: run.ensemble.sigma(tf, n) for tf in phis}
    leak = kernel_leak(scn.prim, run.hat_rp)
    rr.metrics["kernel_leak"] = leak
    ok = pen <= 1e-8 and leak <= 1e-10
    rr.flags["ok"] = ok
    rr.exit_code = 0 if ok else 1
    return rr
