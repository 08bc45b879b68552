"""
Tests for ensembles, consensus-probability sweeps, bound comparisons and the W^2 checks.
"""
import math
from fractions import Fraction

import numpy as np
import pytest

from src.analysis import LimitReport, detect_limit
from src.engine import ModelParams, OpinionState, derive_replica_seed, simulate
from src.errors import ConfigError, EnsembleCancelledError, ParameterError, TheoremDomainError
from src.experiments import (
    EIGHT_AGENT_BOUNDS,
    EnsembleConfig,
    EnsembleResult,
    EnsembleRunner,
    ReplicaResult,
    StopRule,
    bound_comparison_curve,
    consensus_probability_sweep,
    eight_agent_trajectory,
    run_ensemble,
    run_replica,
    summarize_sweep_point,
    tau_tail_comparison,
    uniform_grid,
    w_matrix_exact,
    w_matrix_spot_check,
    w_matrix_targets,
)


def fixed_config(**overrides):
    values = dict(n=3, mu=0.5, replicas=6, master_seed=2024, bounds=(0.5, 0.5, 0.5), max_steps=50_000)
    values.update(overrides)
    return EnsembleConfig(**values)


class TestEnsembleConfig:
    @pytest.mark.parametrize("overrides", [
        dict(n=2, bounds=(0.5, 0.5)),
        dict(bounds=None),
        dict(r_max=0.5),
        dict(bounds=(0.5, 0.5)),
        dict(bounds=None, r_max=0.0),
        dict(x0=(0.1, 0.2)),
        dict(replicas=0),
        dict(max_steps=0),
        dict(epsilon=0.0),
        dict(check_every=0),
    ])
    def test_rejects_bad_fields(self, overrides):
        with pytest.raises(ConfigError):
            fixed_config(**overrides)

    def test_runner_needs_a_worker(self):
        with pytest.raises(ConfigError):
            EnsembleRunner(jobs=0)


class TestStopRule:
    def test_needs_every_cluster_complete(self):
        confidence = ModelParams.build(0.5, (0.3, 0.2, 0.1)).confidence
        assert not StopRule(confidence, epsilon=None)(OpinionState.of((0.0, 0.25, 0.9)))
        assert StopRule(confidence, epsilon=None)(OpinionState.of((0.0, 0.1, 0.9)))

    def test_epsilon_caps_the_widest_cluster(self):
        confidence = ModelParams.build(0.5, (0.3, 0.2, 0.1)).confidence
        x = OpinionState.of((0.0, 0.1, 0.9))
        assert not StopRule(confidence, epsilon=0.05)(x)
        assert StopRule(confidence, epsilon=0.2)(x)

    def test_waits_for_min_time(self):
        confidence = ModelParams.build(0.5, (0.3, 0.2, 0.1)).confidence
        x = OpinionState.of((0.0, 0.1, 0.9))
        assert not StopRule(confidence, epsilon=None, min_time=5)(x)
        assert StopRule(confidence, epsilon=None, min_time=5)(OpinionState(5, x.x))


class TestEnsemble:
    def test_single_replica_matches_direct_run(self):
        x0 = (0.1, 0.4, 0.95)
        config = fixed_config(replicas=1, x0=x0, check_every=5)
        result = run_replica(config, 0)

        seed = derive_replica_seed(2024, 0, 0)
        params = ModelParams.build(0.5, (0.5, 0.5, 0.5))
        stop = StopRule(params.confidence, config.epsilon)
        trace = simulate(OpinionState.of(x0), params, config.max_steps, seed, thinning=5, stop_when=stop)
        report = detect_limit(trace, config.tolerance)

        assert result.seed == seed
        assert result.steps == trace.steps
        assert result.report == report

    def test_deterministic(self):
        config = fixed_config()
        a = run_ensemble(config)
        b = run_ensemble(config)
        assert [r.report for r in a.replicas] == [r.report for r in b.replicas]

    def test_worker_count_does_not_change_results(self):
        config = fixed_config(n=4, bounds=None, r_max=0.6, replicas=5)
        serial = run_ensemble(config, jobs=1)
        parallel = run_ensemble(config, jobs=2)
        assert [r.seed for r in parallel.replicas] == [r.seed for r in serial.replicas]
        assert [r.report for r in parallel.replicas] == [r.report for r in serial.replicas]

    def test_counts_add_up(self):
        result = run_ensemble(fixed_config(n=5, bounds=None, r_max=0.3, replicas=12, max_steps=20_000))
        assert result.consensus + result.non_consensus + result.not_yet == 12
        frame = result.to_frame()
        assert list(frame["replica"]) == list(range(12))
        assert set(frame["status"]) <= {"reached", "not_yet"}

    def test_sampled_bounds_respect_the_largest(self):
        result = run_ensemble(fixed_config(n=6, bounds=None, r_max=0.4, replicas=4, max_steps=1_000))
        for replica in result.replicas:
            assert replica.bounds[0] == 0.4
            assert all(0 < b <= 0.4 for b in replica.bounds[1:])

    def test_wide_first_bound_always_reaches_consensus(self):
        result = run_ensemble(fixed_config(n=4, bounds=(1.0, 0.3, 0.2, 0.1), replicas=10, max_steps=200_000))
        assert result.completed > 0
        assert result.non_consensus == 0

    @pytest.mark.parametrize("jobs", [1, 2])
    def test_progress_callback(self, jobs):
        seen = []
        run_ensemble(fixed_config(replicas=4), jobs=jobs,
                     progress_callback=lambda done, total, info: seen.append((done, total, info["current"])))
        assert seen == [(1, 4, 1), (2, 4, 2), (3, 4, 3), (4, 4, 4)]

    def test_cancel_stops_the_ensemble(self):
        runner = EnsembleRunner()
        with pytest.raises(EnsembleCancelledError) as excinfo:
            runner.run(fixed_config(replicas=4), progress_callback=lambda done, total, info: runner.cancel())
        assert excinfo.value.finished == 1
        assert excinfo.value.exit_code == 1
        assert not runner.running


class TestSweep:
    def test_standard_error_of_rigged_point(self):
        config = fixed_config(replicas=5)
        consensus = LimitReport(tau=3, x_star=(0.5, 0.5, 0.5), structure_ok=True, consensus=True)
        split = LimitReport(tau=3, x_star=(0.1, 0.1, 0.9), structure_ok=True, consensus=False)
        reports = [consensus, consensus, consensus, split, LimitReport.not_yet(1e-9)]
        replicas = tuple(
            ReplicaResult(replica_index=k, seed=k, bounds=(0.5, 0.5, 0.5), x0=(0.0, 0.5, 1.0), steps=10, report=r)
            for k, r in enumerate(reports)
        )
        point = summarize_sweep_point(0.5, EnsembleResult(config=config, replicas=replicas))
        assert point.p_hat == 0.75
        assert point.se == pytest.approx(math.sqrt(0.75 * 0.25 / 4))
        assert point.completed == 4
        assert point.not_yet == 1

    def test_small_sweep(self):
        result = consensus_probability_sweep(4, 0.5, [0.1, 1.0], replicas=8, master_seed=5, max_steps=200_000)
        assert [p.r_max for p in result.points] == [0.1, 1.0]
        assert 0.0 <= result.points[0].p_hat <= 1.0
        assert result.points[1].completed > 0
        assert result.points[1].p_hat == 1.0
        frame = result.to_frame()
        assert list(frame.columns) == ["r_max", "p_hat", "se", "replicas", "not_yet"]

    def test_grid_values_outside_unit_interval(self):
        with pytest.raises(ConfigError):
            consensus_probability_sweep(4, 0.5, [0.5, 1.5], replicas=2, master_seed=1)

    def test_uniform_grid(self):
        assert uniform_grid(4) == [0.25, 0.5, 0.75, 1.0]
        with pytest.raises(ConfigError):
            uniform_grid(0)


class TestBoundComparison:
    def test_rate_curve_on_reference_instance(self, reference_params):
        frame = bound_comparison_curve(reference_params, 60, [0, 10, 20, 40], master_seed=3,
                                       x0=(0.0, 0.45, 0.9), max_steps=20_000)
        assert frame["theoretical"].iloc[0] == pytest.approx(3.75)
        assert 0.0 < frame["empirical"].iloc[0] <= 3.0
        assert frame["dominated"].all()

    def test_grid_beyond_step_cap(self, reference_params):
        with pytest.raises(ConfigError):
            bound_comparison_curve(reference_params, 2, [0, 500], master_seed=3, max_steps=100)

    def test_tau_tail_on_reference_instance(self, reference_params):
        frame = tau_tail_comparison(reference_params, 80, [1, 5, 17, 40], master_seed=9, x0=(0.0, 0.45, 0.9))
        assert frame["empirical"].iloc[0] == 1.0
        assert frame["bound"].iloc[0] == 1.0
        assert frame["dominated"].all()

    def test_below_half_is_rejected(self):
        params = ModelParams.build(0.3, (0.5, 0.5, 0.5))
        with pytest.raises(TheoremDomainError):
            tau_tail_comparison(params, 2, [1], master_seed=0)


class TestEightAgentTrajectory:
    def test_same_seed_same_trajectory(self):
        a = eight_agent_trajectory(4, steps=2000, thinning=50)
        b = eight_agent_trajectory(4, steps=2000, thinning=50)
        assert a.params.bounds == EIGHT_AGENT_BOUNDS
        assert [s.x for s in a.states] == [s.x for s in b.states]
        assert len(a.states) == 41

    def test_fixed_start(self):
        x0 = np.linspace(0.0, 1.0, 8).tolist()
        trace = eight_agent_trajectory(1, steps=100, thinning=10, x0=x0)
        assert trace.initial_state.x == tuple(x0)


class TestWMatrix:
    def test_exact_three_agents(self):
        exact = w_matrix_exact(3, 3, 0.5)
        for r in range(3):
            for c in range(3):
                assert exact[r][c] == (Fraction(2, 3) if r == c else Fraction(1, 6))

    def test_exact_matches_targets_inside_larger_population(self):
        exact = w_matrix_exact(4, 7, 0.75)
        off, diag = w_matrix_targets(4, 7, Fraction(3, 4))
        assert exact[0][1] == off
        assert exact[2][2] == diag

    def test_singleton_cluster_is_identity(self):
        assert w_matrix_exact(1, 5, 0.5) == [[Fraction(1)]]
        report = w_matrix_spot_check(1, 5, 0.5, samples=100)
        assert report.ok
        assert report.mean[0, 0] == 1.0

    def test_sampled_mean_near_target(self):
        report = w_matrix_spot_check(4, 10, 0.5, samples=100_000, seed=0)
        assert report.off_diagonal_target == pytest.approx(1 / 90)
        assert report.ok

    def test_invalid_cluster_size(self):
        with pytest.raises(ParameterError):
            w_matrix_exact(6, 5, 0.5)
        with pytest.raises(ParameterError):
            w_matrix_spot_check(2, 5, 0.5, samples=1)
