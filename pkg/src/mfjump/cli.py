"""Configuration-driven experiment runner.

Commands: ``mfjump flow|simulate|control|game|verify --config <path>
[--out <dir>] [--threads k]``.  Results are written as a canonical JSON
document (sorted keys, repr-round-trip floats, no timestamps) so identical
configs produce byte-identical outputs at any thread count.

Exit codes: 0 success, 2 config validation failure, 3 solver non-convergence,
4 invariant failure, 5 no value at grid resolution.
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import __version__
from .backward import (SolverError, balanced_decomposition, comparison_check,
                       entropic_backward, feynman_kac_backward)
from .config import ConfigError, ExperimentConfig, canonical_json
from .flows import (ConvergenceError, FeedbackControl, Flow,
                    flow_diagnostics, linear_forward, picard_fixed_point)
from .games import solve_game, verify_saddle
from .model import Dist, constant_model, wasserstein1, wasserstein2
from .optimal import solve_optimal, verify_optimality
from .oracles import (expm_backward_value, fit_decay_exponent, lp_wasserstein,
                      two_state_marginal)
from .sampling import (girsanov_martingale_check, martingale_diagnostic,
                       particle_system, payoff_mc_direct, payoff_mc_girsanov,
                       sample_path, dump_paths_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_INVARIANT = 4
EXIT_NO_VALUE = 5

SCHEMA_VERSION = 1


def _document(command: str, cfg: ExperimentConfig, results: dict) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "artifact_version": __version__,
        "command": command,
        "config": cfg.canonical(),
        "config_sha256": cfg.sha256(),
        "seed": cfg.doc["mc"]["seed"],
        "results": results,
    }
    return canonical_json(doc)


def _write(out_dir: str, name: str, text: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def _default_controls(cfg: ExperimentConfig):
    grid = cfg.time_grid()
    size = cfg.n_states()
    gu, gv = cfg.control_grids()
    u = FeedbackControl.constant(gu, 0, grid.n_steps, size)
    v = FeedbackControl.constant(gv, 0, grid.n_steps, size) if gv is not None else None
    return u, v


def _baseline_flow(cfg: ExperimentConfig, model):
    grid = cfg.time_grid()
    u, v = _default_controls(cfg)
    sol = cfg.doc["solver"]
    flow, history = picard_fixed_point(
        model, u, cfg.initial_dist(), grid, v=v, tol=sol["picard_tol"],
        max_iter=sol["picard_max_iter"], damping=sol["damping"],
        scheme=sol["scheme"])
    return flow, history, u, v


def cmd_flow(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    model = cfg.build_model()
    try:
        flow, history, _, _ = _baseline_flow(cfg, model)
    except ConvergenceError as exc:
        print("flow: %s" % exc, file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    diag = flow_diagnostics(flow)
    results = {
        "iterations": len(history),
        "distance_history": list(history),
        "diagnostics": diag.to_json_obj(),
    }
    if "csv" in cfg.doc["output"]["formats"]:
        flow.write_csv(os.path.join(_ensure(out_dir), "flow.csv"))
    if "json" in cfg.doc["output"]["formats"]:
        flow.write_json(os.path.join(_ensure(out_dir), "flow.json"))
    _write(out_dir, "result_flow.json", _document("flow", cfg, results))
    return EXIT_OK


def _ensure(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _agreement_row(name, a, b):
    se = math.hypot(getattr(a, "std_error", 0.0), getattr(b, "std_error", 0.0))
    am = a.mean if hasattr(a, "mean") else float(a)
    bm = b.mean if hasattr(b, "mean") else float(b)
    return {"pair": name, "diff": am - bm, "combined_3se": 3.0 * se,
            "ok": abs(am - bm) <= 3.0 * se}


def cmd_simulate(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    model = cfg.build_model()
    cost = cfg.cost_spec()
    mc = cfg.doc["mc"]
    try:
        flow, _, u, v = _baseline_flow(cfg, model)
    except ConvergenceError as exc:
        print("simulate: %s" % exc, file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    sol = feynman_kac_backward(model, flow, u, cost, v=v)
    ent = entropic_backward(model, flow, u, cost, v=v)
    ode_value = float(sol.v[0, mc["x0"]])
    direct = payoff_mc_direct(model, flow, u, cost, mc["x0"], mc["n_paths"],
                              mc["seed"], threads=threads, v=v)
    girs = payoff_mc_girsanov(model, flow, u, cost, mc["x0"], mc["n_paths"],
                              mc["seed"], threads=threads, v=v)
    lcheck = girsanov_martingale_check(model, flow, u, mc["x0"], mc["n_paths"],
                                       mc["seed"], threads=threads, v=v)
    mart = martingale_diagnostic(model, flow, u, mc["x0"], mc["n_paths"],
                                 mc["seed"], threads=threads, v=v)
    results = {
        "ode_value": ode_value,
        "log_value_at_start": float(sol.Y[0, mc["x0"]]),
        "transform_gap": sol.sup_diff(ent),
        "direct": direct.to_json_obj(),
        "girsanov": girs.to_json_obj(),
        "density_mean_check": {
            "mean": lcheck.mean, "std_error": lcheck.std_error,
            "abs_error": abs(lcheck.mean - 1.0),
            "ok": abs(lcheck.mean - 1.0) <= 3.0 * lcheck.std_error,
        },
        "agreement": [
            _agreement_row("direct_vs_girsanov", direct, girs),
            _agreement_row("direct_vs_ode", direct, ode_value),
            _agreement_row("girsanov_vs_ode", girs, ode_value),
        ],
        "martingale": mart.to_json_obj(),
    }
    ndump = int(cfg.doc["output"].get("dump_paths", 0))
    if ndump > 0:
        records = [sample_path(model, flow, u, mc["x0"], mc["seed"],
                               path_index=k, v=v) for k in range(ndump)]
        dump_paths_csv(os.path.join(_ensure(out_dir), "paths.csv"), records)
    if "csv" in cfg.doc["output"]["formats"]:
        sol.write_csv(os.path.join(_ensure(out_dir), "bsde.csv"))
    _write(out_dir, "result_simulate.json", _document("simulate", cfg, results))
    return EXIT_OK


def cmd_control(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    model = cfg.build_model()
    cost = cfg.cost_spec()
    mc = cfg.doc["mc"]
    sv = cfg.doc["solver"]
    gu, _ = cfg.control_grids()
    grid = cfg.time_grid()
    try:
        result = solve_optimal(
            model, gu, cost, cfg.initial_dist(), mc["x0"], grid,
            tol=sv["outer_tol"], max_outer=sv["outer_max_iter"],
            picard_tol=sv["picard_tol"], picard_max_iter=sv["picard_max_iter"],
            damping=sv["damping"])
    except ConvergenceError as exc:
        print("control: %s (history %s)" % (exc, exc.history), file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    report = verify_optimality(
        model, result, gu, cost, cfg.initial_dist(),
        int(sv.get("n_sweep", 50)), mc["seed"], tol=sv["outer_tol"],
        picard_tol=sv["picard_tol"], picard_max_iter=sv["picard_max_iter"])
    mc_check = payoff_mc_direct(model, result.flow_star, result.u_star, cost,
                                mc["x0"], mc["n_paths"], mc["seed"],
                                threads=threads)
    log_gap_se = mc_check.std_error / mc_check.mean if mc_check.mean > 0 else 0.0
    results = {
        "solution": result.to_json_obj(),
        "verification": report.to_json_obj(),
        "mc_log_value": math.log(mc_check.mean),
        "mc_log_value_3se": 3.0 * log_gap_se,
        "mc_matches_value": abs(math.log(mc_check.mean) - result.value_at_start)
        <= 3.0 * log_gap_se,
    }
    if "csv" in cfg.doc["output"]["formats"]:
        result.sol_star.write_csv(os.path.join(_ensure(out_dir), "value_control.csv"))
    _write(out_dir, "result_control.json", _document("control", cfg, results))
    return EXIT_OK if report.ok else EXIT_INVARIANT


def cmd_game(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    model = cfg.build_model()
    cost = cfg.cost_spec()
    mc = cfg.doc["mc"]
    sv = cfg.doc["solver"]
    gu, gv = cfg.control_grids()
    if gv is None:
        print("game: control.v_points is required", file=sys.stderr)
        return EXIT_CONFIG
    grid = cfg.time_grid()
    try:
        result = solve_game(
            model, gu, gv, cost, cfg.initial_dist(), mc["x0"], grid,
            tol=sv["outer_tol"], max_outer=sv["outer_max_iter"],
            picard_tol=sv["picard_tol"], picard_max_iter=sv["picard_max_iter"],
            damping=sv["damping"])
    except ConvergenceError as exc:
        print("game: %s (history %s)" % (exc, exc.history), file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    results = {"solution": result.to_json_obj()}
    if result.no_value_at_grid:
        ordered = comparison_check(result.sol_upper, result.sol, tol=1e-9)
        results["ordered_values"] = ordered.to_json_obj()
        _write(out_dir, "result_game.json", _document("game", cfg, results))
        print("game: no value at grid resolution (Isaacs gap %.3e)"
              % result.isaacs_gap, file=sys.stderr)
        return EXIT_NO_VALUE
    report = verify_saddle(
        model, result, gu, gv, cost, cfg.initial_dist(),
        int(sv.get("n_sweep", 50)), mc["seed"], tol=sv["outer_tol"],
        picard_tol=sv["picard_tol"], picard_max_iter=sv["picard_max_iter"])
    results["saddle"] = report.to_json_obj()
    if "csv" in cfg.doc["output"]["formats"]:
        result.sol.write_csv(os.path.join(_ensure(out_dir), "value_game.csv"))
    _write(out_dir, "result_game.json", _document("game", cfg, results))
    return EXIT_OK if report.ok else EXIT_INVARIANT


# -- verify battery ---------------------------------------------------------


def _check_wasserstein_lp(rng):
    worst = 0.0
    for _ in range(200):
        size = int(rng.integers(2, 5))
        support = np.sort(rng.choice(12, size=size, replace=False))
        n_max = int(support.max())
        pa = np.zeros(n_max + 1)
        pb = np.zeros(n_max + 1)
        pa[support] = rng.random(size) + 1e-3
        pb[support] = rng.random(size) + 1e-3
        mu, nu = Dist(pa), Dist(pb)
        worst = max(
            worst,
            abs(wasserstein1(mu, nu) - lp_wasserstein(mu.probs, nu.probs, 1)),
            abs(wasserstein2(mu, nu) - lp_wasserstein(mu.probs, nu.probs, 2)))
    return {"max_abs_error": worst, "ok": worst < 1e-10}


def _two_state_setup(a=0.7, b=1.3, horizon=1.0):
    from .flows import TimeGrid
    model = constant_model(np.array([[0.0, a], [b, 0.0]]))
    return model, TimeGrid(horizon, 400)


def _check_two_state(cfg):
    from .backward import CostSpec
    from .flows import TimeGrid
    a, b = 0.7, 1.3
    model, grid = _two_state_setup(a, b)
    xi = Dist.point(0, 1)
    frozen = Flow.constant(grid, xi)
    errs = {}
    for n in (100, 200, 400):
        g = TimeGrid(grid.horizon, n)
        flow = linear_forward(model, Flow.constant(g, xi), None, xi)
        exact = np.array([two_state_marginal(a, b, t) for t in g.nodes()])
        errs[n] = float(np.abs(flow.table()[:, 1] - exact).max())
    order = math.log2(errs[100] / errs[200]) if errs[200] > 0 else 4.0
    cost = CostSpec(f=lambda t, i, mu, u, v=None: 1.0 if i == 1 else 0.0,
                    h=lambda i, mu: 0.0, f_bound=1.0, h_bound=1.0)
    flow = linear_forward(model, frozen, None, xi)
    sol = feynman_kac_backward(model, flow, None, cost)
    oracle = expm_backward_value(model.g.generator(), [0.0, 1.0], [0.0, 0.0],
                                 grid.horizon, grid.n_nodes)
    back_err = float(np.abs(sol.v - oracle).max())
    return {"forward_sup_error": errs[400], "backward_sup_error": back_err,
            "rk4_order": order,
            "ok": errs[400] <= 1e-8 and back_err <= 1e-8 and order >= 3.5}


def _check_transform(cfg, model):
    flow, _, u, v = _baseline_flow(cfg, model)
    cost = cfg.cost_spec()
    sol = feynman_kac_backward(model, flow, u, cost, v=v)
    g_override = None
    if cfg.doc["solver"].get("inject_violation") == "perturb_g":
        g_override = model.g.rates.copy()
        i, j = model.g.active_pairs()[0]
        g_override[i, j] *= 1.01  # asymmetric perturbation of one active pair
    ent = entropic_backward(model, flow, u, cost, v=v, g_override=g_override)
    gap = sol.sup_diff(ent)
    return {"sup_gap": gap, "ok": gap <= 1e-8}


def _check_comparison(cfg, model):
    from .backward import CostSpec
    flow, _, u, v = _baseline_flow(cfg, model)
    base = cfg.cost_spec()
    shifted = CostSpec(f=base.f, f_rows=base.f_rows,
                       h=lambda i, mu: base.h(i, mu) - 1.0,
                       f_bound=base.f_bound, h_bound=base.h_bound + 1.0)
    hi = feynman_kac_backward(model, flow, u, base, v=v)
    lo = feynman_kac_backward(model, flow, u, shifted, v=v)
    size = model.n_states
    terminal = np.array([base.h(i, flow.dists[-1]) - shifted.h(i, flow.dists[-1])
                         for i in range(size)])
    rep = comparison_check(hi, lo, terminal_margins=terminal,
                           driver_margins=np.zeros(1))
    return {"min_margin": rep.min_margin, "ok": rep.ok}


def _check_balanced(rng):
    worst = 0.0
    positivity = True
    for _ in range(100):
        n_a, m = 5, 4
        ells = rng.normal(size=(n_a, m))
        ells = np.maximum(ells, -0.95)  # keep 1 + ell > 0
        fs = rng.normal(size=n_a)
        g_row = rng.random(m) + 0.1
        y = float(rng.random() + 0.5)
        z = rng.normal(size=m)
        zbar = rng.normal(size=m)
        mode = "min" if rng.random() < 0.5 else "max"
        ell_hat, res = balanced_decomposition(ells, fs, y, z, zbar, g_row, mode)
        worst = max(worst, res)
        positivity = positivity and bool((1.0 + ell_hat > 0.0).all())
    return {"max_residual": worst, "positivity_preserved": positivity,
            "ok": worst < 1e-10 and positivity}


def _check_girsanov(cfg, model, threads):
    mc = cfg.doc["mc"]
    flow, _, u, v = _baseline_flow(cfg, model)
    est = girsanov_martingale_check(model, flow, u, mc["x0"], mc["n_paths"],
                                    mc["seed"], threads=threads, v=v)
    err = abs(est.mean - 1.0)
    return {"mean": est.mean, "std_error": est.std_error, "abs_error": err,
            "ok": err <= 3.0 * est.std_error}


def _check_particles(cfg, model):
    mc = cfg.doc["mc"]
    grid = cfg.time_grid()
    xi = cfg.initial_dist()
    u, v = _default_controls(cfg)
    sol = cfg.doc["solver"]
    flow, _ = picard_fixed_point(model, u, xi, grid, v=v, tol=sol["picard_tol"],
                                 max_iter=sol["picard_max_iter"])
    sizes = (100, 1000, 10000)
    replicates = 6
    means = []
    for n in sizes:
        vals = []
        for r in range(replicates):
            emp, rep = particle_system(model, u, xi, n, mc["seed"] + 1000 * r + n,
                                       grid, v=v, reference_flow=flow)
            vals.append(rep.w1_terminal)
        means.append(float(np.mean(vals)))
    slope = fit_decay_exponent(sizes, means)
    return {"sizes": list(sizes), "w1_means": means, "exponent": slope,
            "ok": slope <= -0.35}


def _check_agreement(cfg, model, threads):
    mc = cfg.doc["mc"]
    cost = cfg.cost_spec()
    flow, _, u, v = _baseline_flow(cfg, model)
    sol = feynman_kac_backward(model, flow, u, cost, v=v)
    ode_value = float(sol.v[0, mc["x0"]])
    direct = payoff_mc_direct(model, flow, u, cost, mc["x0"], mc["n_paths"],
                              mc["seed"], threads=threads, v=v)
    girs = payoff_mc_girsanov(model, flow, u, cost, mc["x0"], mc["n_paths"],
                              mc["seed"], threads=threads, v=v)
    rows = [_agreement_row("direct_vs_girsanov", direct, girs),
            _agreement_row("direct_vs_ode", direct, ode_value),
            _agreement_row("girsanov_vs_ode", girs, ode_value)]
    return {"rows": rows, "ok": all(r["ok"] for r in rows)}


def _check_determinism(cfg, model, threads):
    mc = cfg.doc["mc"]
    cost = cfg.cost_spec()
    flow, _, u, v = _baseline_flow(cfg, model)
    n = min(mc["n_paths"], 2000)
    runs = [payoff_mc_direct(model, flow, u, cost, mc["x0"], n, mc["seed"],
                             threads=k, v=v) for k in (1, 1, 4)]
    same = (runs[0].mean == runs[1].mean == runs[2].mean
            and runs[0].std_error == runs[1].std_error == runs[2].std_error)
    return {"ok": bool(same)}


def cmd_verify(cfg: ExperimentConfig, out_dir: str, threads: int) -> int:
    model = cfg.build_model()
    rng = np.random.Generator(np.random.Philox(
        key=np.array([cfg.doc["mc"]["seed"], 9 << 48], dtype=np.uint64)))
    checks = {}
    checks["wasserstein_lp"] = _check_wasserstein_lp(rng)
    checks["two_state_closed_form"] = _check_two_state(cfg)
    checks["transform_equivalence"] = _check_transform(cfg, model)
    checks["comparison_ordering"] = _check_comparison(cfg, model)
    checks["balanced_residual"] = _check_balanced(rng)
    checks["girsanov_martingale"] = _check_girsanov(cfg, model, threads)
    checks["estimator_agreement"] = _check_agreement(cfg, model, threads)
    checks["particle_chaos"] = _check_particles(cfg, model)
    checks["determinism"] = _check_determinism(cfg, model, threads)
    failed = sorted(name for name, c in checks.items() if not c["ok"])
    results = {"checks": checks, "failed": failed, "all_ok": not failed}
    _write(out_dir, "result_verify.json", _document("verify", cfg, results))
    for name in sorted(checks):
        print("%-24s %s" % (name, "PASS" if checks[name]["ok"] else "FAIL"))
    return EXIT_OK if not failed else EXIT_INVARIANT


_COMMANDS = {
    "flow": cmd_flow,
    "simulate": cmd_simulate,
    "control": cmd_control,
    "game": cmd_game,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfjump",
        description="Mean-field jump-chain experiments: flows, payoffs, "
                    "optimal controls, zero-sum games.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for Monte Carlo batches")
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config)
    except (ConfigError, OSError) as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out if args.out is not None else \
        cfg.doc["output"].get("directory", ".")
    try:
        return _COMMANDS[args.command](cfg, out_dir, max(1, args.threads))
    except SolverError as exc:
        print("solver error: %s" % exc, file=sys.stderr)
        return EXIT_NO_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
