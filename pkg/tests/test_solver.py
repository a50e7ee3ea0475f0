import json
import math

import numpy as np
import pytest

from rsfw import geometry, solver
from rsfw.geometry import Ball, Ellipsoid
from rsfw.rng import derive_rng
from rsfw.solver import (
    CompressedShortStep,
    OpenLoop,
    OracleInconsistencyError,
    Problem,
    ShortStep,
    SolverConfig,
    attach_full_gap,
    exact_directional_alpha,
    full_fw_run,
    fw_gap_full,
    minibatch_gradient,
    open_loop_alpha,
    rsfw_run,
    short_step_alpha,
    stochastic_rsfw_run,
)
from rsfw.stiefel import coordinate_frame


def quadratic_ball_problem(n, target_scale):
    target = np.zeros(n)
    target[0] = target_scale
    x_star = target if target_scale <= 1.0 else target / target_scale
    f_star = float(0.5 * np.sum((x_star - target) ** 2))
    return (
        Problem(
            dim=n,
            value=lambda x: float(0.5 * np.sum((x - target) ** 2)),
            gradient=lambda x: x - target,
            smoothness=1.0,
            f_star=f_star,
            hessian=np.eye(n),
        ),
        Ball(np.zeros(n), 1.0),
        target,
    )


class TestStepRules:
    def test_open_loop_values(self):
        assert open_loop_alpha(0, 0.7) == 1.0
        assert open_loop_alpha(2, 1.0) == pytest.approx(0.5)
        assert open_loop_alpha(8, 0.5) == pytest.approx(1.0 / 3.0)

    def test_open_loop_validation(self):
        with pytest.raises(ValueError):
            open_loop_alpha(3, 0.0)
        with pytest.raises(ValueError):
            open_loop_alpha(3, 1.2)
        with pytest.raises(ValueError):
            OpenLoop(0.0)

    def test_short_step_values(self):
        assert short_step_alpha(0.5, 1.0, 1.0) == pytest.approx(0.5)
        assert short_step_alpha(2.0, 1.0, 1.0) == 1.0
        assert short_step_alpha(0.3, 1.0, 0.0) == 0.0

    def test_short_step_negative_gap_aborts(self):
        with pytest.raises(OracleInconsistencyError):
            short_step_alpha(-1e-6, 1.0, 1.0)
        assert short_step_alpha(-1e-13, 1.0, 1.0) == 0.0  # clamped

    def test_exact_directional_clip_boundary(self):
        labeled = np.array([0, 1])
        prob = Problem(
            dim=3,
            value=lambda u: float(0.25 * np.sum((u[labeled] - 1.0) ** 2)),
            gradient=lambda u: np.concatenate([(u[labeled] - 1.0) / 2.0, [0.0]]),
            smoothness=0.5,
            labeled_idx=labeled,
        )
        u = np.zeros(3)
        # numerator equals denominator: step exactly 1
        s = np.array([1.0, 0.0, 0.0])
        gap = float(prob.gradient(u) @ (u - s))
        den = float(np.sum((s - u)[labeled] ** 2)) / 2.0
        assert gap == pytest.approx(den)
        assert exact_directional_alpha(prob, u, s) == pytest.approx(1.0)
        # doubling the direction halves the optimal step
        assert exact_directional_alpha(prob, u, 2.0 * s) == pytest.approx(0.5)

    def test_exact_directional_free_descent(self):
        labeled = np.array([0])
        prob = Problem(
            dim=3,
            value=lambda u: float(0.5 * (u[0] - 1.0) ** 2 + 0.1 * u[2]),
            gradient=lambda u: np.array([u[0] - 1.0, 0.0, 0.1]),
            smoothness=1.0,
            labeled_idx=labeled,
        )
        u = np.zeros(3)
        s = np.array([0.0, 0.0, -1.0])  # unlabeled direction, positive gap
        assert exact_directional_alpha(prob, u, s) == 1.0
        s0 = np.array([0.0, 0.0, 1.0])  # zero denominator, nonpositive gap
        assert exact_directional_alpha(prob, u, s0) == 0.0

    def test_exact_directional_minimizes_segment(self):
        rng = derive_rng(1, "exd")
        labeled = np.arange(4)
        count = len(labeled)
        y = rng.standard_normal(count)

        def value(u):
            return float(0.5 * np.sum((u[labeled] - y) ** 2) / count)

        def gradient(u):
            g = np.zeros(8)
            g[labeled] = (u[labeled] - y) / count
            return g

        prob = Problem(dim=8, value=value, gradient=gradient, smoothness=1.0 / count, labeled_idx=labeled)
        u = rng.standard_normal(8)
        s = rng.standard_normal(8)
        alpha = exact_directional_alpha(prob, u, s)
        probes = np.linspace(0.0, 1.0, 100)
        best = min(value(u + a * (s - u)) for a in probes)
        assert value(u + alpha * (s - u)) <= best + 1e-12


class TestDeterministicRuns:
    def test_full_dimension_short_step_reaches_interior_optimum(self):
        prob, ball, _ = quadratic_ball_problem(20, 0.4)
        cfg = SolverConfig(horizon=100, section_dim=20, seed=0, step_rule=ShortStep(1.0))
        trace = rsfw_run(prob, ball, cfg)
        assert trace.summary["final_f"] - prob.f_star <= 1e-10

    def test_short_step_traces_are_monotone(self):
        prob, ball, _ = quadratic_ball_problem(30, 3.0)
        cfg = SolverConfig(horizon=150, section_dim=6, seed=3, step_rule=ShortStep(1.0))
        trace = rsfw_run(prob, ball, cfg)
        fs = np.concatenate([trace.f, [trace.summary["final_f"]]])
        assert np.all(np.diff(fs) <= 1e-12)

    def test_identity_frame_matches_full_fw(self):
        prob, ball, _ = quadratic_ball_problem(12, 3.0)
        cfg_sec = SolverConfig(
            horizon=40, section_dim=12, seed=5, step_rule=ShortStep(1.0),
            frame_sampler=lambda k: coordinate_frame(12, 12),
        )
        cfg_full = SolverConfig(horizon=40, section_dim=12, seed=5, step_rule=ShortStep(1.0))
        t_sec = rsfw_run(prob, ball, cfg_sec)
        t_full = full_fw_run(prob, ball, cfg_full)
        assert np.max(np.abs(t_sec.f - t_full.f)) < 1e-12
        assert np.max(np.abs(t_sec.alpha - t_full.alpha)) < 1e-12
        assert abs(t_sec.summary["final_f"] - t_full.summary["final_f"]) < 1e-12

    def test_runs_are_deterministic_in_config(self):
        prob, ball, _ = quadratic_ball_problem(15, 3.0)
        cfg = SolverConfig(horizon=60, section_dim=4, seed=11, step_rule=ShortStep(1.0))
        a = rsfw_run(prob, ball, cfg)
        b = rsfw_run(prob, ball, cfg)
        for col in ("f", "gap_section", "alpha", "step_norm", "batch"):
            assert np.array_equal(getattr(a, col), getattr(b, col))

    def test_summary_records_observed_gradient_floor(self):
        # the optimum lies outside the ball, so the observed gradient norm
        # stays at least dist(target, ball) = 2
        prob, ball, _ = quadratic_ball_problem(15, 3.0)
        cfg = SolverConfig(horizon=50, section_dim=4, seed=11, step_rule=ShortStep(1.0))
        trace = rsfw_run(prob, ball, cfg)
        assert trace.summary["min_gradient_norm"] >= 2.0 - 1e-12
        assert trace.summary["min_gradient_norm"] <= 4.0

    def test_iterates_stay_feasible(self):
        prob, ball, _ = quadratic_ball_problem(25, 3.0)
        cfg = SolverConfig(horizon=80, section_dim=5, seed=7, step_rule=OpenLoop(0.5),
                           keep_iterates=True)
        trace = rsfw_run(prob, ball, cfg)
        for x in trace.iterates:
            assert ball.contains(x)

    def test_one_step_smoothness_bound_on_quadratic(self):
        prob, ball, _ = quadratic_ball_problem(20, 3.0)
        cfg = SolverConfig(horizon=100, section_dim=4, seed=13, step_rule=OpenLoop(0.5),
                           keep_iterates=True)
        trace = rsfw_run(prob, ball, cfg)
        for k in range(len(trace.k)):
            if trace.alpha[k] == 0.0:
                continue
            x = trace.iterates[k]
            x_next = trace.iterates[k + 1]
            d = (x_next - x) / trace.alpha[k]
            g = prob.gradient(x)
            bound = (
                prob.value(x)
                + trace.alpha[k] * float(g @ d)
                + 0.5 * prob.smoothness * trace.alpha[k] ** 2 * float(d @ d)
            )
            assert prob.value(x_next) <= bound + 1e-9

    def test_empirical_contraction_frequency(self):
        # short steps with the optimum outside: h ratio < 1 on nearly every
        # iteration that has not yet hit float-exact convergence
        prob, ball, _ = quadratic_ball_problem(50, 3.0)
        below = 0
        total = 0
        for seed in range(20):
            cfg = SolverConfig(horizon=300, section_dim=10, seed=seed, step_rule=ShortStep(1.0))
            trace = rsfw_run(prob, ball, cfg)
            h = np.concatenate([trace.f, [trace.summary["final_f"]]]) - prob.f_star
            alive = h[:-1] > 1e-13 * h[0]
            total += int(alive.sum())
            below += int(np.sum(h[1:][alive] < h[:-1][alive]))
        assert below / total >= 0.95

    def test_full_gap_column_is_offline(self):
        prob, ball, _ = quadratic_ball_problem(10, 3.0)
        cfg = SolverConfig(horizon=25, section_dim=3, seed=2, step_rule=ShortStep(1.0),
                           keep_iterates=True)
        trace = rsfw_run(prob, ball, cfg)
        attach_full_gap(trace, prob, ball)
        assert trace.gap_full is not None
        assert len(trace.gap_full) == len(trace.k)
        assert np.all(trace.gap_full >= -1e-12)
        # the global gap dominates the section gap
        assert np.all(trace.gap_full >= trace.gap_section - 1e-9)

    def test_csv_round_trip_columns(self, tmp_path):
        prob, ball, _ = quadratic_ball_problem(8, 3.0)
        cfg = SolverConfig(horizon=10, section_dim=2, seed=1, step_rule=ShortStep(1.0))
        trace = rsfw_run(prob, ball, cfg)
        path = tmp_path / "trace.csv"
        trace.write_csv(path)
        text = path.read_text()
        header = text.splitlines()[0].split(",")
        assert header == list(trace.CSV_COLUMNS)
        body = np.array(
            [[float(v) for v in line.split(",")] for line in text.splitlines()[1:]]
        )
        assert np.array_equal(body[:, 1], trace.f)

    def test_infeasible_start_rejected(self):
        prob, ball, _ = quadratic_ball_problem(5, 3.0)
        cfg = SolverConfig(horizon=5, section_dim=2, seed=0, step_rule=ShortStep(1.0),
                           x0=np.full(5, 1.0))
        with pytest.raises(ValueError):
            rsfw_run(prob, ball, cfg)

    def test_oracle_failure_aborts_with_partial_trace(self):
        # a set whose membership test starts rejecting mid-run makes the
        # oracle's result check fail; the run must surface the iterations
        # recorded so far together with the cause
        from rsfw.solver import RunAbortedError

        class FlakyBall(Ball):
            def __init__(self, center, radius, failures_after):
                super().__init__(center, radius)
                self.calls = 0
                self.failures_after = failures_after

            def contains(self, x, tol=1e-10):
                self.calls += 1
                if self.calls > self.failures_after:
                    return False
                return super().contains(x, tol=tol)

        prob, _, _ = quadratic_ball_problem(8, 3.0)
        flaky = FlakyBall(np.zeros(8), 1.0, failures_after=12)
        cfg = SolverConfig(horizon=50, section_dim=2, seed=3, step_rule=ShortStep(1.0))
        with pytest.raises(RunAbortedError) as excinfo:
            rsfw_run(prob, flaky, cfg)
        partial = excinfo.value.trace
        assert 0 < len(partial.k) < 50
        assert "aborted_at" in partial.summary
        assert excinfo.value.__cause__ is not None
        assert "error" in json.loads(partial.summary_json())


class TestFullGap:
    def test_zero_at_constrained_optimum(self):
        prob, ball, target = quadratic_ball_problem(6, 3.0)
        x_star = target / 3.0
        assert fw_gap_full(prob, ball, x_star) <= 1e-8

    def test_ball_closed_form(self):
        prob, ball, target = quadratic_ball_problem(9, 3.0)
        rng = derive_rng(3, "gap")
        for _ in range(20):
            x = rng.standard_normal(9)
            x *= rng.uniform(0, 1) / np.linalg.norm(x)
            g = x - target
            expected = float(g @ x) + np.linalg.norm(g)
            assert fw_gap_full(prob, ball, x) == pytest.approx(expected, rel=1e-10)

    def test_dominates_objective_gap(self):
        prob, ball, _ = quadratic_ball_problem(12, 3.0)
        rng = derive_rng(4, "gapdom")
        for _ in range(200):
            x = rng.standard_normal(12)
            x *= rng.uniform(0, 1) / np.linalg.norm(x)
            assert fw_gap_full(prob, ball, x) >= prob.value(x) - prob.f_star - 1e-12


class TestStochastic:
    def _finite_sum(self, n_components=5, n=6, seed=8):
        from rsfw.experiments import gen_finite_sum_quadratic

        return gen_finite_sum_quadratic(n_components, n, seed)

    def test_batch_schedule_examples(self):
        # beta0 = 1, A_mb = 4: b_0 = 1, b_2 = 4
        prob, ball, _ = self._finite_sum(n_components=50)
        cfg = SolverConfig(horizon=3, section_dim=2, seed=0, step_rule=OpenLoop(1.0),
                           batch_scale=4.0)
        trace = stochastic_rsfw_run(prob, ball, cfg)
        assert trace.batch[0] == 1
        assert trace.batch[2] == 4

    def test_single_component_reduces_to_deterministic(self):
        prob, ball, _ = self._finite_sum(n_components=1)
        cfg = SolverConfig(horizon=30, section_dim=2, seed=9, step_rule=OpenLoop(0.8))
        t_stoch = stochastic_rsfw_run(prob, ball, cfg)
        t_det = rsfw_run(prob, ball, cfg)
        assert np.array_equal(t_stoch.f, t_det.f)
        assert np.array_equal(t_stoch.alpha, t_det.alpha)

    def test_minibatch_gradient_unbiased(self):
        prob, ball, _ = self._finite_sum(n_components=40, n=8)
        rng = derive_rng(10, "unbiased")
        x = 0.3 * rng.standard_normal(8)
        resamples = np.stack(
            [minibatch_gradient(prob, x, 4, derive_rng(10, "mb", i)) for i in range(10_000)]
        )
        target = prob.gradient(x)
        se = resamples.std(axis=0, ddof=1) / math.sqrt(resamples.shape[0])
        assert np.all(np.abs(resamples.mean(axis=0) - target) <= 4.0 * se + 1e-15)

    def test_cap_switches_to_exact_gradient(self):
        prob, ball, _ = self._finite_sum(n_components=3, n=5)
        rng = derive_rng(11, "cap")
        x = 0.2 * rng.standard_normal(5)
        g = minibatch_gradient(prob, x, 3, derive_rng(11, "mb"))
        assert np.allclose(g, prob.gradient(x), atol=1e-12)

    def test_stochastic_requires_structure(self):
        prob, ball, _ = quadratic_ball_problem(6, 3.0)
        cfg = SolverConfig(horizon=5, section_dim=2, seed=0, step_rule=OpenLoop(1.0))
        with pytest.raises(ValueError):
            stochastic_rsfw_run(prob, ball, cfg)

    def test_stochastic_iterates_feasible_and_batches_capped(self):
        prob, ball, _ = self._finite_sum(n_components=20, n=10)
        cfg = SolverConfig(horizon=60, section_dim=3, seed=5, step_rule=OpenLoop(1.0),
                           batch_scale=4.0, keep_iterates=True)
        trace = stochastic_rsfw_run(prob, ball, cfg)
        assert np.all(trace.batch <= 20)
        assert trace.summary["batch_cap_iterations"] > 0
        for x in trace.iterates:
            assert ball.contains(x)


class TestCompressedRule:
    def test_isotropic_hessian_matches_ambient_short_step(self):
        n, d = 12, 4
        target = np.zeros(n)
        target[0] = 3.0
        L_amb = 2.0
        prob = Problem(
            dim=n,
            value=lambda x: float(0.5 * L_amb * np.sum((x - target) ** 2)),
            gradient=lambda x: L_amb * (x - target),
            smoothness=L_amb,
            hessian=L_amb * np.eye(n),
        )
        body = Ellipsoid(np.eye(n))
        cfg_c = SolverConfig(horizon=30, section_dim=d, seed=21, step_rule=CompressedShortStep())
        cfg_s = SolverConfig(horizon=30, section_dim=d, seed=21, step_rule=ShortStep(L_amb))
        t_c = rsfw_run(prob, body, cfg_c)
        t_s = rsfw_run(prob, body, cfg_s)
        assert np.max(np.abs(t_c.alpha - t_s.alpha)) < 1e-10
        assert np.max(np.abs(t_c.f - t_s.f)) < 1e-10

    def test_compressed_rule_requires_quadratic_over_ellipsoid(self):
        prob, ball, _ = quadratic_ball_problem(8, 3.0)
        cfg = SolverConfig(horizon=5, section_dim=2, seed=0, step_rule=CompressedShortStep())
        with pytest.raises(ValueError):
            rsfw_run(prob, ball, cfg)

    def test_compressed_descent_model_recorded(self):
        n, d = 20, 4
        Q = np.diag(np.concatenate([np.ones(n - 1), [50.0]]))
        M = np.diag(np.linspace(0.5, 2.0, n))
        rng = derive_rng(22, "cq")
        u = rng.standard_normal(n)
        t = 1.4 * u / math.sqrt(u @ (M @ u))
        prob = Problem(
            dim=n,
            value=lambda x: float(0.5 * (x - t) @ (Q @ (x - t))),
            gradient=lambda x: Q @ (x - t),
            smoothness=50.0,
            hessian=Q,
        )
        body = Ellipsoid(M)
        cfg = SolverConfig(horizon=120, section_dim=d, seed=4, step_rule=CompressedShortStep())
        trace = rsfw_run(prob, body, cfg)
        fs = np.concatenate([trace.f, [trace.summary["final_f"]]])
        assert np.all(np.diff(fs) <= 1e-12)
        branch = trace.alpha < 1.0
        lhs = fs[1:][branch]
        model = fs[:-1][branch] - (
            trace.extras["beta_sec"][branch]
            / (2.0 * trace.extras["lp_section"][branch])
        ) * trace.extras["pg_norm"][branch] * trace.gap_section[branch]
        assert np.all(lhs <= model + 1e-9)
