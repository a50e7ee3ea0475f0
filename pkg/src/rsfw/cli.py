"""Config-driven experiment runner.

Usage: rsfw <ratios|solve|curvature|failure|stoch|graph> --config cfg.json
            [--out DIR] [--seed U64] [--threads K] [--offline-full-gap] [--svg]

Every subcommand reads one JSON config, writes delimited data files plus a
JSON summary into the output directory, and optionally renders SVG figures
from the same aggregates.  Exit codes: 0 success, 1 runtime failure,
2 configuration error.  Reruns with identical configs and seeds reproduce
every value column byte for byte; wall-clock columns and the timing sidecar
are the only nondeterministic outputs.
"""

import argparse
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import curvature as curvature_mod
from . import experiments, geometry, plots, ratios, solver
from .rng import derive_seed

ENV_SEED = "RSFW_MASTER_SEED"


class ConfigError(ValueError):
    """The experiment configuration is malformed or incomplete."""


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def _require(cfg: dict, key: str, types=None):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    value = cfg[key]
    if types is not None and not isinstance(value, types):
        raise ConfigError(f"config key {key!r} has the wrong type")
    return value


def _master_seed(cfg, args):
    if args.seed is not None:
        return int(args.seed)
    if os.environ.get(ENV_SEED):
        return int(os.environ[ENV_SEED])
    return cfg.get("seed")


def _replicate_seeds(cfg, args):
    seeds = _require(cfg, "seeds", list)
    if args.seed is not None or os.environ.get(ENV_SEED):
        master = int(args.seed) if args.seed is not None else int(os.environ[ENV_SEED])
        return [derive_seed(master, "replicate", i) for i in range(len(seeds))]
    return [int(s) for s in seeds]


def _run_many(jobs, threads: int):
    """Execute (key, callable) jobs, optionally in a thread pool; results are
    returned keyed, so aggregation order never depends on scheduling."""
    if threads <= 1 or len(jobs) <= 1:
        return {key: fn() for key, fn in jobs}
    out = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {key: pool.submit(fn) for key, fn in jobs}
        for key, fut in futures.items():
            out[key] = fut.result()
    return out


# ---------------------------------------------------------------------------
# problem/rule construction for the run-style subcommands


def _build_problem(block: dict):
    kind = _require(block, "kind", str)
    if kind == "quadratic_ellipsoid":
        problem, body = experiments.gen_quadratic_ellipsoid(
            n=int(_require(block, "n")),
            cond=float(block.get("cond", 10.0)),
            seed=int(_require(block, "seed")),
            ell_spread=tuple(block.get("ell_spread", (0.8, 1.25))),
        )
        return problem, body, None
    if kind == "logistic_rf":
        reference = bool(block.get("reference", True))
        if "feature_csv" in block:
            phi = experiments.load_feature_csv(block["feature_csv"])
            labels = experiments.load_label_csv(_require(block, "label_csv", str))
            problem, body, rf = experiments.logistic_from_features(
                phi, labels,
                rho_k=float(block.get("rho_k", 1e-3)),
                lam=float(block.get("lambda", 2e-2)),
                rho_h=float(block.get("rho_h", 1e-3)),
                reference=reference,
            )
        else:
            problem, body, rf = experiments.gen_logistic_rf(
                n=int(_require(block, "n")),
                m=int(_require(block, "m")),
                rho_k=float(block.get("rho_k", 1e-3)),
                lam=float(block.get("lambda", 2e-2)),
                seed=int(_require(block, "seed")),
                rho_h=float(block.get("rho_h", 1e-3)),
                reference=reference,
            )
        return problem, body, rf
    raise ConfigError(f"unknown problem kind {kind!r}")


def _build_rule(block: dict, problem, body, d: int, rf=None):
    kind = _require(block, "kind", str)
    if kind == "open_loop":
        beta0 = block.get("beta0", "auto")
        if beta0 == "auto":
            gc = body.geometry()
            beta0 = geometry.beta0_unif(gc.kappa_unif, body.dim, d)
        return solver.OpenLoop(float(beta0))
    if kind == "short_step":
        lip = block.get("lipschitz", "problem")
        if isinstance(lip, dict) and "grid" in lip:
            base = solver.SolverConfig(
                horizon=int(lip.get("horizon", 50)), section_dim=d,
                seed=int(lip.get("seed", 0)), step_rule=solver.ShortStep(1.0),
            )
            lip = experiments.select_short_step_constant(problem, body, base, lip["grid"])
        elif lip == "problem":
            lip = problem.smoothness
        elif lip == "section_curvature":
            if rf is None:
                raise ConfigError("section_curvature constants need a logistic problem")
            from .stiefel import sample_stiefel

            frame = sample_stiefel(body.dim, d, derive_seed(0, "curvature-probe"))
            lip = rf.section_curvature_bound(frame.rows.T)
        return solver.ShortStep(float(lip))
    if kind == "compressed_short_step":
        return solver.CompressedShortStep()
    if kind == "exact_directional":
        return solver.ExactDirectional()
    raise ConfigError(f"unknown step rule kind {kind!r}")


def _aggregate(traces):
    fs = np.stack([np.concatenate([t.f, [t.summary["final_f"]]]) for t in traces])
    ks = np.arange(fs.shape[1])
    return ks, fs.mean(axis=0), fs.std(axis=0)


def _mean_wall(traces):
    walls = np.stack([np.cumsum(t.elapsed_ns) * 1e-9 for t in traces])
    return np.concatenate([[0.0], walls.mean(axis=0)])


def _write_run_outputs(out, label, traces):
    for t in traces:
        t.write_csv(out / f"trace_{label}_seed{t.summary['seed']}.csv")
    ks, mean_f, std_f = _aggregate(traces)
    write_csv(out / f"aggregate_{label}.csv", ("k", "mean_f", "std_f"), zip(ks, mean_f, std_f))
    return ks, mean_f, std_f


# ---------------------------------------------------------------------------
# subcommands


def cmd_ratios(cfg: dict, args, out: Path) -> int:
    samples = int(_require(cfg, "samples"))
    seed = _master_seed(cfg, args)
    if seed is None:
        raise ConfigError("ratios config needs a master seed")
    grid = _require(cfg, "grid", list)
    rows = []
    all_ok = True
    for i, cell in enumerate(grid):
        n, d, rho = int(cell["n"]), int(cell["d"]), float(cell["rho"])
        lower, upper = ratios.expected_gamma_bounds(n, d)
        est = ratios.mc_estimate_gamma(n, d, rho, samples, derive_seed(seed, "cell", i))
        ok = lower - 3.0 * est.stderr <= est.mean <= upper + 3.0 * est.stderr
        all_ok &= ok
        rows.append((n, d, rho, samples, est.mean, est.stderr, lower, upper, ok))
    write_csv(
        out / "ratios.csv",
        ("n", "d", "rho", "samples", "mean", "stderr", "lower", "upper", "in_interval"),
        rows,
    )
    write_json(out / "summary.json", {
        "all_in_interval": bool(all_ok),
        "cells": [
            {"n": r[0], "d": r[1], "rho": r[2], "mean": r[4], "stderr": r[5],
             "lower": r[6], "upper": r[7], "in_interval": bool(r[8])}
            for r in rows
        ],
        "samples": samples,
        "seed": int(seed),
    })
    if args.svg:
        import collections

        by_nd = collections.defaultdict(list)
        for r in rows:
            by_nd[(r[0], r[1])].append(r)
        curves = {}
        for (n, d), cells in sorted(by_nd.items()):
            cells.sort(key=lambda r: r[2])
            curves[f"n={n} d={d}"] = ([r[2] for r in cells], [r[4] for r in cells],
                                      [3.0 * r[5] for r in cells])
        plots.plot_mean_band(out / "ratios.svg", curves, "pair overlap",
                             "mean section ratio", logy=False)
    return 0 if all_ok else 1


def cmd_solve(cfg: dict, args, out: Path) -> int:
    problem, body, rf = _build_problem(_require(cfg, "problem", dict))
    sol = _require(cfg, "solver", dict)
    horizon = int(_require(sol, "horizon"))
    dims = [int(v) for v in _require(sol, "d", list)]
    seeds = _replicate_seeds(sol, args)
    methods = {}
    for d in dims:
        rule = _build_rule(_require(sol, "rule", dict), problem, body, d, rf)
        label = f"rsfw_d{d}"
        jobs = [
            (
                s,
                (lambda s=s, d=d, rule=rule: solver.rsfw_run(
                    problem, body,
                    solver.SolverConfig(horizon=horizon, section_dim=d, seed=s,
                                        step_rule=rule, keep_iterates=args.offline_full_gap),
                )),
            )
            for s in seeds
        ]
        traces = list(_run_many(jobs, args.threads).values())
        if args.offline_full_gap:
            for t in traces:
                solver.attach_full_gap(t, problem, body)
        methods[label] = traces
    if sol.get("full_fw", False):
        rule = _build_rule(_require(sol, "rule", dict), problem, body, body.dim, rf)
        cfg_full = solver.SolverConfig(horizon=horizon, section_dim=body.dim,
                                       seed=seeds[0], step_rule=rule,
                                       keep_iterates=args.offline_full_gap)
        trace = solver.full_fw_run(problem, body, cfg_full)
        if args.offline_full_gap:
            solver.attach_full_gap(trace, problem, body)
        methods["full_fw"] = [trace]
    curves_iter, curves_time = {}, {}
    summary_methods = {}
    for label, traces in methods.items():
        ks, mean_f, std_f = _write_run_outputs(out, label, traces)
        curves_iter[label] = (ks, mean_f, std_f)
        curves_time[label] = (_mean_wall(traces), mean_f, None)
        entry = {"final_mean_f": float(mean_f[-1]), "seeds": [t.summary["seed"] for t in traces]}
        if problem.f_star is not None:
            entry["final_mean_gap"] = float(mean_f[-1] - problem.f_star)
        summary_methods[label] = entry
    doc = {"methods": summary_methods, "horizon": horizon, "dims": dims}
    if problem.f_star is not None:
        doc["f_star"] = float(problem.f_star)
    write_json(out / "summary.json", doc)
    write_json(out / "timing.json", {
        label: [int(t.summary["wall_ns"]) for t in traces] for label, traces in methods.items()
    })
    if args.svg:
        plots.plot_mean_band(out / "objective_vs_iteration.svg", curves_iter,
                             "iteration", "objective", logy=False)
        plots.plot_mean_band(out / "objective_vs_time.svg", curves_time,
                             "seconds", "objective", logy=False)
    return 0


def cmd_curvature(cfg: dict, args, out: Path) -> int:
    n = int(_require(cfg, "n"))
    d = int(_require(cfg, "d"))
    eta = float(_require(cfg, "eta"))
    trials = int(_require(cfg, "trials"))
    seed = _master_seed(cfg, args)
    if seed is None:
        raise ConfigError("curvature config needs a master seed")
    spec_block = _require(cfg, "spectrum", dict)
    kind = _require(spec_block, "kind", str)
    if kind == "linspace":
        eigs = np.linspace(float(spec_block["lo"]), float(spec_block["hi"]), n)
    elif kind == "geomspace":
        eigs = np.geomspace(float(spec_block["lo"]), float(spec_block["hi"]), n)
    elif kind == "explicit":
        eigs = np.asarray(spec_block["values"], dtype=float)
        if eigs.shape != (n,):
            raise ConfigError("explicit spectrum length must equal n")
    else:
        raise ConfigError(f"unknown spectrum kind {kind!r}")
    H = np.diag(eigs)
    k_cals = [float(k) for k in cfg.get("k_cal", [1.0, 1.5, 2.0, 3.0])]
    rows = []
    for kc in k_cals:
        rep = curvature_mod.spectral_sandwich_check(H, n, d, eta, trials, seed, k_cal=kc)
        rows.append((kc, rep.coverage, rep.median_deviation, rep.max_deviation, rep.err_bound))
    write_csv(out / "coverage.csv",
              ("k_cal", "coverage", "median_deviation", "max_deviation", "err_bound"), rows)
    write_json(out / "summary.json", {
        "n": n, "d": d, "eta": eta, "trials": trials, "seed": int(seed),
        "mean_eigenvalue": float(np.trace(H) / n),
        "rows": [{"k_cal": r[0], "coverage": r[1], "median_deviation": r[2],
                  "max_deviation": r[3], "err_bound": r[4]} for r in rows],
    })
    if args.svg:
        plots.plot_coverage(out / "coverage.svg", [r[0] for r in rows],
                            [r[1] for r in rows], eta)
    return 0


def cmd_failure(cfg: dict, args, out: Path) -> int:
    n = int(cfg.get("n", 100))
    d = int(cfg.get("d", 10))
    horizon = int(cfg.get("horizon", 500))
    seeds = _replicate_seeds(cfg, args)
    problem, body, x0 = experiments.gen_failure_instance(n, d, float(cfg.get("delta_interior", 0.1)))
    lip = float(cfg.get("lipschitz", 1.0))
    jobs = [
        (
            s,
            (lambda s=s: solver.rsfw_run(
                problem, body,
                solver.SolverConfig(horizon=horizon, section_dim=d, seed=s,
                                    step_rule=solver.ShortStep(lip), x0=x0),
            )),
        )
        for s in seeds
    ]
    traces = list(_run_many(jobs, args.threads).values())
    full_trace = solver.full_fw_run(
        problem, body,
        solver.SolverConfig(horizon=horizon, section_dim=d, seed=seeds[0],
                            step_rule=solver.ShortStep(lip), x0=x0),
    )
    ks, mean_f, std_f = _write_run_outputs(out, f"rsfw_d{d}", traces)
    _write_run_outputs(out, "full_fw", [full_trace])
    rsfw_gap = float(mean_f[-1] - problem.f_star)
    full_gap = float(full_trace.summary["final_f"] - problem.f_star)
    stagnated = rsfw_gap >= max(10.0 * full_gap, 0.05)
    write_json(out / "summary.json", {
        "n": n, "d": d, "horizon": horizon, "f_star": problem.f_star,
        "rsfw_mean_final_gap": rsfw_gap, "full_fw_final_gap": full_gap,
        "stagnated": bool(stagnated), "seeds": [t.summary["seed"] for t in traces],
    })
    if args.svg:
        plots.plot_mean_band(out / "failure_gap.svg", {
            f"rsfw_d{d}": (ks, mean_f - problem.f_star, std_f),
            "full_fw": (ks, np.concatenate([full_trace.f, [full_trace.summary["final_f"]]])
                        - problem.f_star, None),
        }, "iteration", "objective gap")
    return 0


def cmd_stoch(cfg: dict, args, out: Path) -> int:
    n = int(cfg.get("n", 40))
    d = int(cfg.get("d", 8))
    components = int(cfg.get("components", 200))
    a_mb = float(cfg.get("a_mb", 4.0))
    beta0 = float(cfg.get("beta0", 1.0))
    horizon = int(cfg.get("horizon", 400))
    instance_seed = int(cfg.get("instance_seed", 7))
    seeds = _replicate_seeds(cfg, args)
    problem, body, _ = experiments.gen_finite_sum_quadratic(components, n, instance_seed)
    jobs = [
        (
            s,
            (lambda s=s: solver.stochastic_rsfw_run(
                problem, body,
                solver.SolverConfig(horizon=horizon, section_dim=d, seed=s,
                                    step_rule=solver.OpenLoop(beta0), batch_scale=a_mb),
            )),
        )
        for s in seeds
    ]
    traces = list(_run_many(jobs, args.threads).values())
    import math as _math

    expected = np.array(
        [min(_math.ceil((k + 2.0 / beta0) ** 2 / a_mb), components) for k in range(horizon)]
    )
    audit_ok = all(np.array_equal(t.batch, expected) for t in traces)
    ks, mean_f, std_f = _write_run_outputs(out, f"stoch_d{d}", traces)
    write_json(out / "summary.json", {
        "batch_schedule_ok": bool(audit_ok),
        "batch_cap_iterations": [int(t.summary["batch_cap_iterations"]) for t in traces],
        "beta0": beta0, "a_mb": a_mb, "components": components,
        "final_mean_gap": float(mean_f[-1] - problem.f_star),
        "f_star": problem.f_star,
        "seeds": [t.summary["seed"] for t in traces],
    })
    if args.svg:
        plots.plot_mean_band(out / "stoch_gap.svg", {
            f"stoch_d{d}": (ks, np.maximum(mean_f - problem.f_star, 1e-16), std_f)
        }, "iteration", "objective gap")
    return 0 if audit_ok else 1


def cmd_graph(cfg: dict, args, out: Path) -> int:
    gssl, body = experiments.gen_graph_ssl(
        m_nodes=int(cfg.get("nodes", 80)),
        k_nn=int(cfg.get("k_nn", 6)),
        labeled_count=int(cfg.get("labeled", 20)),
        mu=float(cfg.get("mu", 1e-6)),
        gamma_g=float(cfg.get("gamma_g", 0.05)),
        beta4=float(cfg.get("beta4", 0.01)),
        tau=float(cfg.get("tau", 1000.0)),
        seed=int(cfg.get("instance_seed", 3)),
    )
    horizon = int(cfg.get("horizon", 100))
    dims = [int(v) for v in cfg.get("d", [5])]
    seeds = _replicate_seeds(cfg, args)
    curves = {}
    summary_methods = {}
    for d in dims:
        jobs = [
            (
                s,
                (lambda s=s, d=d: solver.rsfw_run(
                    gssl.problem, body,
                    solver.SolverConfig(horizon=horizon, section_dim=d, seed=s,
                                        step_rule=solver.ExactDirectional()),
                )),
            )
            for s in seeds
        ]
        traces = list(_run_many(jobs, args.threads).values())
        label = f"rsfw_d{d}"
        ks, mean_f, std_f = _write_run_outputs(out, label, traces)
        curves[label] = (ks, mean_f, std_f)
        summary_methods[label] = {"final_mean_f": float(mean_f[-1])}
    if cfg.get("full_fw", False):
        trace = solver.full_fw_run(
            gssl.problem, body,
            solver.SolverConfig(horizon=horizon, section_dim=body.dim, seed=seeds[0],
                                step_rule=solver.ExactDirectional()),
        )
        ks, mean_f, std_f = _write_run_outputs(out, "full_fw", [trace])
        curves["full_fw"] = (ks, mean_f, None)
        summary_methods["full_fw"] = {"final_mean_f": float(mean_f[-1])}
    write_json(out / "summary.json", {
        "methods": summary_methods, "horizon": horizon,
        "labeled": int(len(gssl.labeled_idx)), "f_star": gssl.problem.f_star,
        "seeds": [int(s) for s in seeds],
    })
    if args.svg:
        plots.plot_mean_band(out / "graph_objective.svg", curves, "iteration",
                             "objective", logy=False)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsfw", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("ratios", "Monte Carlo section-efficiency expectation checks"),
        ("solve", "deterministic solver runs over seeds and section dimensions"),
        ("curvature", "spectral compression coverage diagnostics"),
        ("failure", "polytope corner-stalling demonstration"),
        ("stoch", "finite-sum stochastic runs with growing batches"),
        ("graph", "graph semi-supervised runs over the quartic body"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--threads", type=int, default=1, help="parallel replicate workers")
        p.add_argument("--offline-full-gap", action="store_true",
                       help="attach the full-oracle gap column, computed post hoc")
        p.add_argument("--svg", action="store_true", help="render SVG figures")
    return parser


COMMANDS = {
    "ratios": cmd_ratios,
    "solve": cmd_solve,
    "curvature": cmd_curvature,
    "failure": cmd_failure,
    "stoch": cmd_stoch,
    "graph": cmd_graph,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        resolved = dict(cfg)
        if args.seed is not None:
            resolved["seed"] = int(args.seed)
        write_json(out / "resolved_config.json", resolved)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"run failed: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
