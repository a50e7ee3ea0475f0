"""Random-subspace Frank-Wolfe iteration loops and trace recording.

One iteration samples a fresh Haar frame, computes the gradient (or a
mini-batch estimate drawn independently of the frame), calls the feasible
set's exact section oracle, and moves by a step rule: predetermined open
loop, clipped short step, compressed-curvature short step for quadratics
over ellipsoids, or the closed-form exact directional step for labeled
least-squares objectives.  Full-space Frank-Wolfe runs through the same
loop with the full oracle.  Diagnostics that need the full oracle (the
global gap column) are computed offline from saved snapshots, never inside
the timed loop.
"""

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import curvature as _curvature
from .geometry import Ellipsoid, FeasibleSet
from .oracles import (
    FrameDegenerateError,
    OracleFailureError,
    SectionResult,
    full_lmo,
    section_lmo,
)
from .rng import derive_rng, derive_seed
from .stiefel import StiefelFrame, sample_stiefel

GAP_ABORT = -1e-12


class OracleInconsistencyError(RuntimeError):
    """An oracle reported a materially negative gap or broke a descent bound."""


class RunAbortedError(RuntimeError):
    """A run stopped early on an oracle failure.

    Carries the partial trace recorded up to the failing iteration; the
    failing cause is chained as __cause__.
    """

    def __init__(self, message: str, trace: "RunTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class Problem:
    """Smooth convex objective with optional structure hooks.

    gradient must match finite differences (validated by the generators).
    hessian is the dense quadratic-term matrix when the objective is an
    exact quadratic; labeled_idx marks the coordinates the exact-directional
    step's curvature denominator sees; component_gradient/n_components give
    finite-sum access for the stochastic loop.
    """

    dim: int
    value: callable
    gradient: callable
    smoothness: float
    f_star: float | None = None
    hessian: np.ndarray | None = None
    labeled_idx: np.ndarray | None = None
    component_gradient: callable = None
    n_components: int | None = None
    reference_point: np.ndarray | None = None


@dataclass(frozen=True)
class OpenLoop:
    beta0: float

    def __post_init__(self):
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError(f"beta0 must lie in (0, 1], got {self.beta0}")

    name = "open_loop"


@dataclass(frozen=True)
class ShortStep:
    lipschitz: float

    def __post_init__(self):
        if self.lipschitz <= 0:
            raise ValueError(f"short-step constant must be positive, got {self.lipschitz}")

    name = "short_step"


@dataclass(frozen=True)
class CompressedShortStep:
    name = "compressed_short_step"


@dataclass(frozen=True)
class ExactDirectional:
    name = "exact_directional"


@dataclass
class SolverConfig:
    horizon: int
    section_dim: int
    seed: int
    step_rule: object
    x0: np.ndarray | None = None
    batch_scale: float = 4.0
    keep_iterates: bool = False
    frame_sampler: callable = None
    check_feasibility: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class RunTrace:
    """Per-iteration records plus the run summary.

    Columns are parallel arrays indexed by iteration.  f is the objective at
    the pre-step iterate; gap_section the section gap realized there.  The
    optional gap_full column is attached post hoc by attach_full_gap.
    """

    k: np.ndarray
    f: np.ndarray
    gap_section: np.ndarray
    alpha: np.ndarray
    step_norm: np.ndarray
    batch: np.ndarray
    elapsed_ns: np.ndarray
    oracle_ns: np.ndarray
    summary: dict
    gap_full: np.ndarray | None = None
    iterates: list = field(default_factory=list, repr=False)
    extras: dict = field(default_factory=dict, repr=False)

    CSV_COLUMNS = ("k", "f", "gap_section", "alpha", "step_norm", "batch", "elapsed_ns", "oracle_ns")

    def csv_text(self) -> str:
        cols = list(self.CSV_COLUMNS) + (["gap_full"] if self.gap_full is not None else [])
        lines = [",".join(cols)]
        for i in range(len(self.k)):
            row = [
                str(int(self.k[i])),
                repr(float(self.f[i])),
                repr(float(self.gap_section[i])),
                repr(float(self.alpha[i])),
                repr(float(self.step_norm[i])),
                str(int(self.batch[i])),
                str(int(self.elapsed_ns[i])),
                str(int(self.oracle_ns[i])),
            ]
            if self.gap_full is not None:
                row.append(repr(float(self.gap_full[i])))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def summary_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True)


class _Recorder:
    def __init__(self):
        self.rows = {name: [] for name in RunTrace.CSV_COLUMNS}
        self.extras = {}

    def add(self, **kwargs):
        for name in RunTrace.CSV_COLUMNS:
            self.rows[name].append(kwargs[name])
        for name, value in kwargs.items():
            if name not in self.rows:
                self.extras.setdefault(name, []).append(value)

    def build(self, summary, iterates) -> RunTrace:
        arrays = {name: np.asarray(vals) for name, vals in self.rows.items()}
        extras = {name: np.asarray(vals) for name, vals in self.extras.items()}
        return RunTrace(summary=summary, iterates=iterates, extras=extras, **arrays)


def open_loop_alpha(k: int, beta0: float) -> float:
    """Predetermined step 2 / (beta0 k + 2)."""
    if k < 0:
        raise ValueError("iteration index must be nonnegative")
    if not 0.0 < beta0 <= 1.0:
        raise ValueError(f"beta0 must lie in (0, 1], got {beta0}")
    return 2.0 / (beta0 * k + 2.0)


def short_step_alpha(gap: float, lipschitz: float, step_norm2: float) -> float:
    """Clipped quadratic-model minimizer min{1, gap / (L ||s - x||^2)};
    zero when the oracle returned the base point."""
    if lipschitz <= 0:
        raise ValueError(f"short-step constant must be positive, got {lipschitz}")
    if gap < GAP_ABORT:
        raise OracleInconsistencyError(f"negative gap {gap} fed to the short step")
    if step_norm2 == 0.0:
        return 0.0
    return min(1.0, max(gap, 0.0) / (lipschitz * step_norm2))


def exact_directional_alpha(problem: Problem, x: np.ndarray, s: np.ndarray) -> float:
    """Closed-form exact step for labeled least-squares objectives.

    The directional curvature is ||D_labeled||^2 / |labeled|; when that
    vanishes with positive gap the objective is affine decreasing along the
    step and the full step is taken.
    """
    if problem.labeled_idx is None:
        raise ValueError("exact directional step needs the labeled-projector structure")
    g = problem.gradient(x)
    d = s - x
    gap = float(g @ (x - s))
    den = float(np.sum(d[problem.labeled_idx] ** 2)) / len(problem.labeled_idx)
    if den == 0.0:
        return 1.0 if gap > 0 else 0.0
    return min(1.0, max(gap, 0.0) / den)


def minibatch_gradient(problem: Problem, x: np.ndarray, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Mean of batch uniformly resampled component gradients (with
    replacement); the exact full gradient once the batch reaches the
    component count."""
    n_comp = problem.n_components
    if batch >= n_comp:
        total = np.zeros(problem.dim)
        for i in range(n_comp):
            total += problem.component_gradient(i, x)
        return total / n_comp
    idx = rng.integers(0, n_comp, size=batch)
    total = np.zeros(problem.dim)
    for i in idx:
        total += problem.component_gradient(int(i), x)
    return total / batch


def fw_gap_full(problem: Problem, feasible_set: FeasibleSet, x: np.ndarray) -> float:
    """Global Frank-Wolfe gap max_y <grad f(x), x - y>; upper-bounds the
    optimality gap f(x) - f*."""
    g = problem.gradient(x)
    if np.linalg.norm(g) == 0:
        return 0.0
    s = full_lmo(feasible_set, g)
    gap = float(g @ (x - s))
    if gap < GAP_ABORT:
        raise OracleInconsistencyError(f"full oracle returned negative gap {gap}")
    return max(gap, 0.0)


def _initial_point(feasible_set: FeasibleSet, config: SolverConfig) -> np.ndarray:
    if config.x0 is not None:
        x0 = np.asarray(config.x0, dtype=float).copy()
    else:
        x0 = feasible_set.interior_point()
    if not feasible_set.contains(x0):
        raise ValueError("initial point is infeasible")
    return x0


def _frame_for(config: SolverConfig, n: int, k: int) -> StiefelFrame:
    if config.frame_sampler is not None:
        return config.frame_sampler(k)
    return sample_stiefel(n, config.section_dim, derive_seed(config.seed, "frame", k))


def _run_loop(problem: Problem, feasible_set: FeasibleSet, config: SolverConfig, oracle_mode: str) -> RunTrace:
    rule = config.step_rule
    stochastic = oracle_mode == "stochastic"
    if stochastic:
        if problem.component_gradient is None or not problem.n_components:
            raise ValueError("stochastic run needs finite-sum structure on the problem")
        if not isinstance(rule, OpenLoop):
            raise ValueError("the stochastic loop uses the open-loop step rule")
    x = _initial_point(feasible_set, config)
    n = feasible_set.dim
    rec = _Recorder()
    iterates = []
    wall_start = time.perf_counter_ns()
    f_cur = problem.value(x)
    cap_count = 0
    min_grad_norm = math.inf  # observed only; the infimum itself is unverifiable
    def abort(step: int, exc: Exception):
        summary = {
            "seed": int(config.seed), "n": int(n),
            "d": int(config.section_dim if oracle_mode != "full" else n),
            "rule": rule.name, "mode": oracle_mode, "iterations": step,
            "final_f": float(f_cur), "wall_ns": int(time.perf_counter_ns() - wall_start),
            "min_gradient_norm": float(min_grad_norm),
            "aborted_at": step, "error": str(exc),
        }
        raise RunAbortedError(f"run aborted at k={step}: {exc}",
                              rec.build(summary, iterates)) from exc

    for k in range(config.horizon):
        t0 = time.perf_counter_ns()
        if config.keep_iterates:
            iterates.append(x.copy())
        batch = 0
        if stochastic:
            beta0 = rule.beta0
            b_sched = math.ceil((k + 2.0 / beta0) ** 2 / config.batch_scale)
            batch = min(b_sched, problem.n_components)
            if b_sched > problem.n_components:
                cap_count += 1
            g = minibatch_gradient(problem, x, batch, derive_rng(config.seed, "batch", k))
        else:
            g = problem.gradient(x)
        extras = {}
        oracle_ns = 0
        min_grad_norm = min(min_grad_norm, float(np.linalg.norm(g)))
        try:
            if np.linalg.norm(g) == 0:
                result = SectionResult(s=x.copy(), z=np.zeros(config.section_dim), gap=0.0,
                                       degenerate=True)
            elif oracle_mode == "full":
                t_or = time.perf_counter_ns()
                s = full_lmo(feasible_set, g)
                oracle_ns = time.perf_counter_ns() - t_or
                gap = float(g @ (x - s))
                if gap < GAP_ABORT:
                    raise OracleInconsistencyError("full oracle produced a negative gap")
                result = SectionResult(s=s, z=s - x, gap=max(gap, 0.0))
            else:
                frame = _frame_for(config, n, k)
                t_or = time.perf_counter_ns()
                if isinstance(rule, CompressedShortStep):
                    if problem.hessian is None or not isinstance(feasible_set, Ellipsoid):
                        raise ValueError("compressed short step needs a quadratic over an ellipsoid")
                    alpha_c, curv, result = _curvature.compressed_short_step(
                        problem.hessian, feasible_set.M, x, frame, g
                    )
                    extras = {
                        "lp_section": curv.l_p,
                        "beta_sec": curv.beta_sec,
                        "pg_norm": float(np.linalg.norm(frame.project(g))),
                    }
                else:
                    result = section_lmo(feasible_set, x, frame, g)
                oracle_ns = time.perf_counter_ns() - t_or
        except (OracleFailureError, FrameDegenerateError, OracleInconsistencyError) as exc:
            abort(k, exc)
        d = result.s - x
        step_norm2 = float(d @ d)
        if isinstance(rule, OpenLoop):
            alpha = 0.0 if result.degenerate and step_norm2 == 0.0 else open_loop_alpha(k, rule.beta0)
        elif isinstance(rule, ShortStep):
            alpha = short_step_alpha(result.gap, rule.lipschitz, step_norm2)
        elif isinstance(rule, CompressedShortStep):
            alpha = alpha_c
        elif isinstance(rule, ExactDirectional):
            alpha = exact_directional_alpha(problem, x, result.s)
        else:
            raise ValueError(f"unknown step rule {rule!r}")
        x_next = x + alpha * d
        if config.check_feasibility and not feasible_set.contains(x_next):
            abort(k, OracleFailureError(f"iterate left the feasible set at k={k}"))
        f_next = problem.value(x_next)
        if isinstance(rule, CompressedShortStep) and not result.degenerate and alpha < 1.0:
            # quadratic short-step branch must realize the compressed descent model
            bound = f_cur - (extras["beta_sec"] / (2.0 * extras["lp_section"])) * extras["pg_norm"] * result.gap
            if f_next > bound + 1e-9:
                abort(k, OracleInconsistencyError(
                    f"compressed descent bound violated at k={k}: {f_next} > {bound}"
                ))
        rec.add(
            k=k,
            f=f_cur,
            gap_section=result.gap,
            alpha=alpha,
            step_norm=math.sqrt(step_norm2),
            batch=batch,
            elapsed_ns=time.perf_counter_ns() - t0,
            oracle_ns=oracle_ns,
            **extras,
        )
        x = x_next
        f_cur = f_next
    summary = {
        "seed": int(config.seed),
        "n": int(n),
        "d": int(config.section_dim if oracle_mode != "full" else n),
        "rule": rule.name,
        "mode": oracle_mode,
        "iterations": int(config.horizon),
        "final_f": float(f_cur),
        "wall_ns": int(time.perf_counter_ns() - wall_start),
        "min_gradient_norm": float(min_grad_norm),
    }
    if problem.f_star is not None:
        summary["final_gap"] = float(f_cur - problem.f_star)
    if stochastic:
        summary["batch_cap_iterations"] = int(cap_count)
        summary["batch_scale"] = float(config.batch_scale)
        summary["beta0"] = float(rule.beta0)
    if config.keep_iterates:
        iterates.append(x.copy())
    return rec.build(summary, iterates)


def rsfw_run(problem: Problem, feasible_set: FeasibleSet, config: SolverConfig) -> RunTrace:
    """Random-subspace Frank-Wolfe with a fresh Haar frame per iteration."""
    return _run_loop(problem, feasible_set, config, "section")


def full_fw_run(problem: Problem, feasible_set: FeasibleSet, config: SolverConfig) -> RunTrace:
    """Full-space Frank-Wolfe baseline through the same loop and trace format."""
    return _run_loop(problem, feasible_set, config, "full")


def stochastic_rsfw_run(problem: Problem, feasible_set: FeasibleSet, config: SolverConfig) -> RunTrace:
    """Finite-sum RSFW: growing mini-batches ceil((k + 2/beta0)^2 / A_mb),
    capped at the component count (the cap switches to the exact gradient and
    is logged), with the frame drawn independently of the batch."""
    return _run_loop(problem, feasible_set, config, "stochastic")


def attach_full_gap(trace: RunTrace, problem: Problem, feasible_set: FeasibleSet) -> RunTrace:
    """Compute the full-oracle gap column offline from saved snapshots."""
    if not trace.iterates:
        raise ValueError("run was recorded without keep_iterates; no snapshots to evaluate")
    gaps = [fw_gap_full(problem, feasible_set, x) for x in trace.iterates[: len(trace.k)]]
    trace.gap_full = np.asarray(gaps)
    return trace
