"""
Monte Carlo experiments: ensembles, consensus-probability sweeps and bound comparisons.
"""
import logging
import math
from concurrent.futures import Executor, ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.analysis import DEFAULT_LIMIT_TOLERANCE, LimitReport, RateBoundParams, detect_limit, rate_bound, tau_tail_bound
from src.clusters import is_all_complete, max_cluster_deviation, mc_partition
from src.engine import (
    DEFAULT_MEMORY_CAP_BYTES,
    ConfidenceProfile,
    ModelParams,
    OpinionState,
    Trace,
    derive_replica_seed,
    pair_count,
    random_state,
    simulate,
    unrank_pair,
)
from src.errors import ConfigError, EnsembleCancelledError, ParameterError

logger = logging.getLogger(__name__)

EIGHT_AGENT_BOUNDS = (0.5, 0.41, 0.35, 0.24, 0.175, 0.165, 0.12, 0.047)
DEFAULT_MAX_STEPS = 1_000_000
DEFAULT_EPSILON = 1e-8
DEFAULT_CHECK_EVERY = 10

ProgressCallback = Callable[[int, int, Dict[str, Any]], None]


@dataclass(frozen=True)
class EnsembleConfig:
    """
    Configuration of an ensemble of independent runs.

    Exactly one of `bounds` (fixed for every replica) and `r_max` (agent 1 gets
    r_max, the others iid uniform on (0, r_max]) is given. Without `x0` the
    initial opinions are iid uniform on [0, 1].
    """
    n: int
    mu: float
    replicas: int
    master_seed: int
    bounds: Optional[Tuple[float, ...]] = None
    r_max: Optional[float] = None
    x0: Optional[Tuple[float, ...]] = None
    max_steps: int = DEFAULT_MAX_STEPS
    epsilon: Optional[float] = DEFAULT_EPSILON
    check_every: int = DEFAULT_CHECK_EVERY
    sweep_index: int = 0
    tolerance: float = DEFAULT_LIMIT_TOLERANCE

    def __post_init__(self):
        if self.n < 3:
            raise ConfigError(f"n must be >= 3, got {self.n}")
        if (self.bounds is None) == (self.r_max is None):
            raise ConfigError("give exactly one of fixed bounds or r_max")
        if self.bounds is not None and len(self.bounds) != self.n:
            raise ConfigError(f"expected {self.n} bounds, got {len(self.bounds)}")
        if self.r_max is not None and not self.r_max > 0:
            raise ConfigError(f"r_max must be positive, got {self.r_max}")
        if self.x0 is not None and len(self.x0) != self.n:
            raise ConfigError(f"expected {self.n} initial opinions, got {len(self.x0)}")
        if self.replicas < 1:
            raise ConfigError(f"replicas must be >= 1, got {self.replicas}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.check_every < 1:
            raise ConfigError(f"check_every must be >= 1, got {self.check_every}")


class StopRule:
    """
    Stop once all MC clusters are complete, every cluster is narrower than
    `epsilon` (if given) and at least `min_time` steps have passed.
    """
    def __init__(self, confidence: ConfidenceProfile, epsilon: Optional[float] = DEFAULT_EPSILON,
                 min_time: int = 0):
        self.confidence = confidence
        self.epsilon = epsilon
        self.min_time = min_time

    def __call__(self, state: OpinionState) -> bool:
        if state.t < self.min_time:
            return False
        partition = mc_partition(state, self.confidence)
        if not is_all_complete(state, self.confidence, partition):
            return False
        return self.epsilon is None or max_cluster_deviation(partition, state) < self.epsilon


@dataclass(frozen=True)
class ReplicaResult:
    replica_index: int
    seed: int
    bounds: Tuple[float, ...]
    x0: Tuple[float, ...]
    steps: int
    report: LimitReport


@dataclass(frozen=True)
class EnsembleResult:
    """
    Replica results ordered by replica index.
    """
    config: EnsembleConfig
    replicas: Tuple[ReplicaResult, ...]

    @property
    def reports(self) -> List[LimitReport]:
        return [r.report for r in self.replicas]

    @property
    def consensus(self) -> int:
        return sum(1 for r in self.reports if r.reached and r.consensus)

    @property
    def non_consensus(self) -> int:
        return sum(1 for r in self.reports if r.reached and not r.consensus)

    @property
    def not_yet(self) -> int:
        return sum(1 for r in self.reports if not r.reached)

    @property
    def completed(self) -> int:
        return self.consensus + self.non_consensus

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.replicas:
            rows.append({
                "replica": r.replica_index,
                "seed": r.seed,
                "status": r.report.status,
                "tau": r.report.tau,
                "consensus": r.report.consensus,
                "structure_ok": r.report.structure_ok,
                "steps": r.steps,
                "limit_values": (
                    len(set(round(v, 9) for v in r.report.x_star)) if r.report.x_star else None
                ),
            })
        return pd.DataFrame(rows)


def replica_params(config: EnsembleConfig, rng: np.random.Generator) -> ModelParams:
    if config.bounds is not None:
        return ModelParams.build(config.mu, config.bounds)
    others = config.r_max * (1.0 - rng.random(config.n - 1))
    return ModelParams.build(config.mu, (config.r_max,) + tuple(others.tolist()))


def initial_rng(seed: int) -> np.random.Generator:
    """
    Generator for the initial conditions of a run, independent of its pair stream.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))


def run_replica(config: EnsembleConfig, replica_index: int) -> ReplicaResult:
    """
    Run one replica of an ensemble; a pure function of (config, replica_index).
    """
    seed = derive_replica_seed(config.master_seed, config.sweep_index, replica_index)
    init_rng = initial_rng(seed)
    params = replica_params(config, init_rng)
    if config.x0 is not None:
        x0 = OpinionState.of(config.x0)
    else:
        x0 = random_state(init_rng, config.n)

    stop = StopRule(params.confidence, config.epsilon)
    trace = simulate(x0, params, config.max_steps, seed, thinning=config.check_every, stop_when=stop)
    report = detect_limit(trace, config.tolerance)
    if not report.reached:
        logger.warning("Replica %d (seed %d) hit the step cap %d before completion",
                       replica_index, seed, config.max_steps)
    return ReplicaResult(
        replica_index=replica_index,
        seed=seed,
        bounds=params.bounds,
        x0=x0.x,
        steps=trace.steps,
        report=report,
    )


class EnsembleRunner:
    """
    Class for running ensembles of independent replicas.
    """
    def __init__(self, jobs: int = 1):
        """
        Initialize the ensemble runner.

        Args:
            jobs: Number of worker processes (1 runs replicas in-process)
        """
        if jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {jobs}")
        self.jobs = jobs
        self.running = False
        self.cancel_flag = False

    def run(self, config: EnsembleConfig,
            progress_callback: Optional[ProgressCallback] = None) -> EnsembleResult:
        """
        Run every replica of the configuration.

        Results are placed by replica index, so the outcome does not depend on
        completion order or on the number of workers.

        Args:
            config: Ensemble configuration
            progress_callback: Called as (done, total, info) after each replica

        Returns:
            EnsembleResult: All replica results
        """
        self.running = True
        self.cancel_flag = False
        total = config.replicas
        results: List[Optional[ReplicaResult]] = [None] * total
        done = 0

        def report_progress(result: ReplicaResult, finished: int) -> None:
            if progress_callback:
                progress_callback(finished, total, {
                    "current": finished,
                    "total": total,
                    "replica": result.replica_index,
                    "status": result.report.status,
                })

        try:
            if self.jobs == 1:
                for index in range(total):
                    if self.cancel_flag:
                        break
                    results[index] = run_replica(config, index)
                    done += 1
                    report_progress(results[index], done)
            else:
                with ProcessPoolExecutor(max_workers=self.jobs) as executor:
                    done = self._run_parallel(executor, config, results, report_progress)
        finally:
            self.running = False

        if any(r is None for r in results):
            raise EnsembleCancelledError(done, total)
        ensemble = EnsembleResult(config=config, replicas=tuple(results))
        logger.info("Ensemble done: %d consensus, %d non-consensus, %d not yet",
                    ensemble.consensus, ensemble.non_consensus, ensemble.not_yet)
        return ensemble

    def _run_parallel(self, executor: Executor, config: EnsembleConfig,
                      results: List[Optional[ReplicaResult]],
                      report_progress: Callable[[ReplicaResult, int], None]) -> int:
        future_to_index = {
            executor.submit(run_replica, config, index): index
            for index in range(config.replicas)
        }
        done = 0
        for future in as_completed(future_to_index):
            if self.cancel_flag:
                for f in future_to_index:
                    f.cancel()
                break
            index = future_to_index[future]
            results[index] = future.result()
            done += 1
            report_progress(results[index], done)
        return done

    def cancel(self) -> None:
        """
        Cancel the current ensemble.
        """
        self.cancel_flag = True


def run_ensemble(config: EnsembleConfig, jobs: int = 1,
                 progress_callback: Optional[ProgressCallback] = None) -> EnsembleResult:
    return EnsembleRunner(jobs).run(config, progress_callback)


def standard_error(p_hat: float, count: int) -> float:
    return math.sqrt(p_hat * (1 - p_hat) / count)


@dataclass(frozen=True)
class SweepPoint:
    r_max: float
    p_hat: float
    se: float
    replicas: int
    completed: int
    not_yet: int


@dataclass(frozen=True)
class SweepResult:
    """
    Consensus-probability estimates over a grid of largest confidence bounds.

    p_hat is the consensus fraction among completed replicas and se its
    binomial standard error over the same count.
    """
    points: Tuple[SweepPoint, ...]

    @property
    def estimates(self) -> List[float]:
        return [p.p_hat for p in self.points]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "r_max": p.r_max,
                "p_hat": p.p_hat,
                "se": p.se,
                "replicas": p.replicas,
                "not_yet": p.not_yet,
            }
            for p in self.points
        ])


def summarize_sweep_point(r_max: float, ensemble: EnsembleResult) -> SweepPoint:
    completed = ensemble.completed
    if completed == 0:
        p_hat, se = float("nan"), float("nan")
    else:
        p_hat = ensemble.consensus / completed
        se = standard_error(p_hat, completed)
    return SweepPoint(
        r_max=r_max,
        p_hat=p_hat,
        se=se,
        replicas=ensemble.config.replicas,
        completed=completed,
        not_yet=ensemble.not_yet,
    )


def consensus_probability_sweep(n: int,
                                mu: float,
                                r_max_grid: Sequence[float],
                                replicas: int,
                                master_seed: int,
                                max_steps: int = DEFAULT_MAX_STEPS,
                                epsilon: Optional[float] = DEFAULT_EPSILON,
                                check_every: int = DEFAULT_CHECK_EVERY,
                                jobs: int = 1,
                                progress_callback: Optional[ProgressCallback] = None) -> SweepResult:
    """
    Estimate the consensus probability as a function of the largest bound.

    For each grid value r_max, agent 1 gets bound r_max, agents 2..n get iid
    uniform bounds on (0, r_max] and opinions start iid uniform on [0, 1].
    Grid point k uses sweep index k in seed derivation.

    Args:
        n: Number of agents
        mu: Weighting factor
        r_max_grid: Values of the largest bound, each in (0, 1]
        replicas: Runs per grid point
        master_seed: Seed from which every replica seed is derived
        max_steps: Step cap per run
        epsilon: Within-cluster spread that ends a completed run
        check_every: Stride (in steps) of the stop-rule check
        jobs: Worker processes
        progress_callback: Passed to each grid point's ensemble

    Returns:
        SweepResult: One point per grid value
    """
    points = []
    for index, r_max in enumerate(r_max_grid):
        if not 0 < r_max <= 1:
            raise ConfigError(f"grid value {r_max} is outside (0, 1]")
        config = EnsembleConfig(
            n=n, mu=mu, replicas=replicas, master_seed=master_seed, r_max=float(r_max),
            max_steps=max_steps, epsilon=epsilon, check_every=check_every, sweep_index=index,
        )
        ensemble = run_ensemble(config, jobs, progress_callback)
        point = summarize_sweep_point(float(r_max), ensemble)
        logger.info("r_max=%.4g: p_hat=%.4f se=%.4f not_yet=%d", point.r_max, point.p_hat, point.se, point.not_yet)
        points.append(point)
    return SweepResult(points=tuple(points))


def uniform_grid(points: int) -> List[float]:
    """
    The grid {i / points : i = 1..points}.
    """
    if points < 1:
        raise ConfigError(f"grid needs at least one point, got {points}")
    return [i / points for i in range(1, points + 1)]


def _completion_runs(params: ModelParams, replicas: int, master_seed: int, min_time: int,
                     max_steps: int, x0: Optional[Sequence[float]]) -> List[Tuple[Trace, LimitReport]]:
    runs = []
    for index in range(replicas):
        seed = derive_replica_seed(master_seed, 0, index)
        if x0 is not None:
            start = OpinionState.of(x0)
        else:
            start = random_state(initial_rng(seed), params.n)
        stop = StopRule(params.confidence, epsilon=None, min_time=min_time)
        trace = simulate(start, params, max_steps, seed, thinning=1, stop_when=stop)
        runs.append((trace, detect_limit(trace)))
    return runs


def bound_comparison_curve(params: ModelParams,
                           replicas: int,
                           t_grid: Sequence[int],
                           master_seed: int,
                           x0: Optional[Sequence[float]] = None,
                           max_steps: int = 100_000) -> pd.DataFrame:
    """
    Compare the empirical mean of ||x(t) - x*||^2 with the theoretical rate bound.

    Each replica runs at full resolution until it is complete and past the last
    grid time; x* comes from detect_limit. Replicas with no limit by
    `max_steps` contribute the sound upper bound n.

    Args:
        params: Model parameters (mu in [1/2, 1))
        replicas: Number of runs
        t_grid: Times at which to compare
        master_seed: Seed from which replica seeds are derived
        x0: Fixed initial state, or None for uniform initial opinions
        max_steps: Step cap per run

    Returns:
        pd.DataFrame: Columns t, empirical, se, theoretical, dominated
    """
    rate_params = RateBoundParams.from_params(params)
    t_grid = sorted(int(t) for t in t_grid)
    if max_steps < t_grid[-1]:
        raise ConfigError(f"max_steps {max_steps} is below the last grid time {t_grid[-1]}")

    runs = _completion_runs(params, replicas, master_seed, t_grid[-1], max_steps, x0)
    values = np.empty((replicas, len(t_grid)))
    for row, (trace, report) in enumerate(runs):
        for column, t in enumerate(t_grid):
            if report.reached and t < len(trace.states):
                deviation = np.asarray(trace.states[t].x) - np.asarray(report.x_star)
                values[row, column] = float(deviation @ deviation)
            else:
                values[row, column] = float(params.n)

    empirical = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / math.sqrt(replicas) if replicas > 1 else np.zeros(len(t_grid))
    theoretical = [rate_bound(rate_params, t) for t in t_grid]
    return pd.DataFrame({
        "t": t_grid,
        "empirical": empirical,
        "se": se,
        "theoretical": theoretical,
        "dominated": empirical <= np.asarray(theoretical) + 3 * se,
    })


def tau_tail_comparison(params: ModelParams,
                        replicas: int,
                        t_grid: Sequence[int],
                        master_seed: int,
                        x0: Optional[Sequence[float]] = None,
                        max_steps: int = 100_000) -> pd.DataFrame:
    """
    Compare the empirical tail P(tau >= t) of the completion time with c^floor(t/(T+1)).

    Runs without completion by `max_steps` count as tau >= t for every t.

    Returns:
        pd.DataFrame: Columns t, empirical, se, bound, dominated
    """
    rate_params = RateBoundParams.from_params(params)
    t_grid = sorted(int(t) for t in t_grid)
    runs = _completion_runs(params, replicas, master_seed, 0, max_steps, x0)
    taus = [report.tau for _, report in runs]
    rows = []
    for t in t_grid:
        hits = sum(1 for tau in taus if tau is None or tau >= t)
        p_hat = hits / replicas
        se = standard_error(p_hat, replicas)
        bound = tau_tail_bound(rate_params, t)
        rows.append({"t": t, "empirical": p_hat, "se": se, "bound": bound,
                     "dominated": p_hat <= bound + 3 * se})
    return pd.DataFrame(rows)


def eight_agent_trajectory(seed: int, steps: int = 200_000, thinning: int = 100,
                           x0: Optional[Sequence[float]] = None,
                           memory_cap_bytes: int = DEFAULT_MEMORY_CAP_BYTES) -> Trace:
    """
    The n=8, mu=1/2 trajectory run with the eight fixed heterogeneous bounds.

    Without x0 the initial opinions are drawn uniformly from a stream derived
    from the seed.
    """
    params = ModelParams.build(0.5, EIGHT_AGENT_BOUNDS)
    if x0 is None:
        start = random_state(initial_rng(seed), params.n)
    else:
        start = OpinionState.of(x0)
    return simulate(start, params, steps, seed, thinning=thinning, memory_cap_bytes=memory_cap_bytes)


@dataclass(frozen=True)
class WMatrixReport:
    """
    Sampled mean of the squared per-step update matrix of one complete cluster.
    """
    mean: np.ndarray
    standard_errors: np.ndarray
    off_diagonal_target: float
    diagonal_target: float
    samples: int
    ok: bool


def w_matrix_targets(cluster_size: int, n: int, mu) -> Tuple[Any, Any]:
    """
    Expected off-diagonal and diagonal entries of W^2 for a cluster of the given size.
    """
    off = 4 * mu * (1 - mu) / (n * (n - 1))
    return off, 1 - off * (cluster_size - 1)


def _update_matrix(pair_rank: int, cluster_size: int, n: int, mu) -> List[List[Any]]:
    one = type(mu)(1)
    matrix = [[one if r == c else 0 * one for c in range(cluster_size)] for r in range(cluster_size)]
    pair = unrank_pair(pair_rank, n)
    i, j = pair.i - 1, pair.j - 1
    if j < cluster_size:
        matrix[i][i] = matrix[j][j] = 1 - mu
        matrix[i][j] = matrix[j][i] = mu
    return matrix


def w_matrix_exact(cluster_size: int, n: int, mu: float) -> List[List[Fraction]]:
    """
    E[W^2] by enumerating all pairs, in exact rational arithmetic.

    The cluster is taken to be agents 1..cluster_size.
    """
    if not 1 <= cluster_size <= n:
        raise ParameterError(f"cluster size must lie in [1, {n}], got {cluster_size}")
    mu_q = Fraction(mu)
    m = pair_count(n)
    total = [[Fraction(0)] * cluster_size for _ in range(cluster_size)]
    for rank in range(m):
        w = _update_matrix(rank, cluster_size, n, mu_q)
        for r in range(cluster_size):
            for c in range(cluster_size):
                total[r][c] += sum(w[r][k] * w[k][c] for k in range(cluster_size))
    return [[entry / m for entry in row] for row in total]


def w_matrix_spot_check(cluster_size: int, n: int, mu: float, samples: int,
                        seed: int = 0, z_limit: float = 5.0) -> WMatrixReport:
    """
    Average W^2 over sampled pairs and compare with its closed-form expectation.

    Every entry must lie within `z_limit` standard errors of its target; entries
    with zero sample variance must match exactly.

    Args:
        cluster_size: Size of the complete cluster (agents 1..cluster_size)
        n: Total number of agents
        mu: Weighting factor
        samples: Number of sampled pairs
        seed: Seed of the pair draws
        z_limit: Allowed deviation in standard errors

    Returns:
        WMatrixReport: Means, standard errors, targets and the verdict
    """
    if not 1 <= cluster_size <= n:
        raise ParameterError(f"cluster size must lie in [1, {n}], got {cluster_size}")
    if samples < 2:
        raise ParameterError(f"need at least 2 samples, got {samples}")
    rng = np.random.default_rng(seed)
    ranks = rng.integers(0, pair_count(n), size=samples)
    squares = {}
    stack = np.empty((samples, cluster_size, cluster_size))
    for row, rank in enumerate(ranks.tolist()):
        if rank not in squares:
            w = np.array(_update_matrix(rank, cluster_size, n, mu), dtype=float)
            squares[rank] = w @ w
        stack[row] = squares[rank]

    mean = stack.mean(axis=0)
    errors = stack.std(axis=0, ddof=1) / math.sqrt(samples)
    off_target, diag_target = w_matrix_targets(cluster_size, n, mu)
    target = np.full((cluster_size, cluster_size), off_target)
    np.fill_diagonal(target, diag_target)
    deviation = np.abs(mean - target)
    ok = bool(np.all(np.where(errors > 0, deviation <= z_limit * errors, deviation <= 1e-12)))
    return WMatrixReport(
        mean=mean,
        standard_errors=errors,
        off_diagonal_target=off_target,
        diagonal_target=diag_target,
        samples=samples,
        ok=ok,
    )
