"""
Analysis module: convergence-rate constants, limit detection and exact oracles.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from src.clusters import MCPartition, is_all_complete, mc_partition
from src.control import completion_length_bound
from src.engine import (
    ConfidenceProfile,
    ModelParams,
    OpinionState,
    Trace,
    interact,
    pair_count,
    unrank_pair,
)
from src.errors import OracleBudgetError, ParameterError, TheoremDomainError
from src.utils.helpers import complement_power, log_pair_probability

logger = logging.getLogger(__name__)

DEFAULT_LIMIT_TOLERANCE = 1e-9
DEFAULT_ORACLE_BUDGET = 2_000_000


@dataclass(frozen=True)
class RateBoundParams:
    """
    Constants T and c of the mean-square convergence bound.

    T = (n-1)^2 (1 + ceil(log_{1-mu}(rn/r1))) ceil((1-rn) / ((1-mu)^2 rn)) and
    c = 1 - (2 / (n(n-1)))^T. Since c is usually 1 to double precision, it is
    kept as log(1 - c) and powers of c are evaluated in log space.
    """
    n: int
    mu: float
    r1: float
    rn: float
    T: int = field(init=False)
    log_one_minus_c: float = field(init=False)

    def __post_init__(self):
        if self.n < 3:
            raise ParameterError(f"n must be >= 3, got {self.n}")
        if not 0.5 <= self.mu < 1.0:
            raise TheoremDomainError(self.mu, "rate bound")
        if not self.r1 >= self.rn > 0:
            raise ParameterError(f"need r1 >= rn > 0, got r1={self.r1}, rn={self.rn}")
        T = completion_length_bound(self.n, self.mu, self.r1, self.rn)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "log_one_minus_c", log_pair_probability(self.n, T))

    @classmethod
    def from_params(cls, params: ModelParams) -> "RateBoundParams":
        confidence = params.confidence
        return cls(n=params.n, mu=params.mu, r1=confidence.r_max, rn=confidence.r_min)

    @property
    def c(self) -> float:
        return -math.expm1(self.log_one_minus_c)

    def c_power(self, exponent: int) -> float:
        return complement_power(self.log_one_minus_c, exponent)


def rate_bound(params: RateBoundParams, t: int) -> float:
    """
    Mean-square bound on ||x(t) - x*||^2.

    Args:
        params: Rate constants
        t: Time (>= 0)

    Returns:
        float: n c^floor(t / (2(T+1))) + (n/4) (1 - 8 mu (1-mu) / (n(n-1)))^floor(t/2)
    """
    if t < 0:
        raise ParameterError(f"t must be non-negative, got {t}")
    n, mu = params.n, params.mu
    first = n * params.c_power(t // (2 * (params.T + 1)))
    contraction = 8 * mu * (1 - mu) / (n * (n - 1))
    second = n / 4 * math.exp((t // 2) * math.log1p(-contraction))
    return first + second


def tau_tail_bound(params: RateBoundParams, t: int) -> float:
    """
    Bound c^floor(t / (T+1)) on the probability that completion takes t steps or more.
    """
    if t < 1:
        raise ParameterError(f"t must be >= 1, got {t}")
    return params.c_power(t // (params.T + 1))


def post_completion_decay(n: int, mu: float, cluster_size: int, t: int) -> float:
    """
    Per-step-compounded factor by which a complete cluster's expected squared
    deviation from its mean shrinks over t steps.
    """
    return (1 - 4 * mu * (1 - mu) * cluster_size / (n * (n - 1))) ** t


@dataclass(frozen=True)
class LimitReport:
    """
    Limit detected on a trace; `tau` is None while the run is not yet complete.
    """
    tau: Optional[int]
    x_star: Optional[Tuple[float, ...]]
    structure_ok: bool
    consensus: bool
    tolerance: float = DEFAULT_LIMIT_TOLERANCE

    @property
    def reached(self) -> bool:
        return self.tau is not None

    @property
    def status(self) -> str:
        return "reached" if self.reached else "not_yet"

    @classmethod
    def not_yet(cls, tolerance: float) -> "LimitReport":
        return cls(tau=None, x_star=None, structure_ok=False, consensus=False, tolerance=tolerance)


def cluster_means(partition: MCPartition, x: OpinionState) -> Tuple[float, ...]:
    """
    Vector whose entry for each agent is the mean opinion of its cluster.
    """
    limit = [0.0] * x.n
    for cluster in partition.clusters:
        mean = math.fsum(x.opinion(a) for a in cluster.members) / cluster.size
        for a in cluster.members:
            limit[a - 1] = mean
    return tuple(limit)


def limit_structure_ok(x_star: Sequence[float], confidence: ConfidenceProfile,
                       tol: float = DEFAULT_LIMIT_TOLERANCE) -> bool:
    """
    Check that every two limit opinions coincide or differ by more than both bounds.
    """
    for a in range(len(x_star)):
        for b in range(a + 1, len(x_star)):
            distance = abs(x_star[a] - x_star[b])
            if distance > tol and not distance > max(confidence.bounds[a], confidence.bounds[b]):
                return False
    return True


def is_consensus(x_star: Sequence[float], tol: float = DEFAULT_LIMIT_TOLERANCE) -> bool:
    return max(x_star) - min(x_star) <= tol


def limit_at(x: OpinionState, confidence: ConfidenceProfile) -> Optional[Tuple[float, ...]]:
    """
    The exact limit if every MC cluster of x is complete, else None.
    """
    partition = mc_partition(x, confidence)
    if is_all_complete(x, confidence, partition):
        return cluster_means(partition, x)
    return None


def detect_limit(trace: Trace, tol: float = DEFAULT_LIMIT_TOLERANCE) -> LimitReport:
    """
    Find the first recorded time at which all MC clusters are complete.

    From that time on the clusters never change and every update is mutual
    inside a cluster, so each cluster's mean is the limit of its members.

    Args:
        trace: Recorded run
        tol: Equality tolerance for limit values (> 0)

    Returns:
        LimitReport: The limit, or a not-yet report if the trace never completes
    """
    if tol <= 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")
    confidence = trace.params.confidence
    for state in trace.states:
        x_star = limit_at(state, confidence)
        if x_star is not None:
            return LimitReport(
                tau=state.t,
                x_star=x_star,
                structure_ok=limit_structure_ok(x_star, confidence, tol),
                consensus=is_consensus(x_star, tol),
                tolerance=tol,
            )
    return LimitReport.not_yet(tol)


class ConsensusVerdict(str, Enum):
    ALWAYS_CONSENSUS = "always_consensus"
    CONSENSUS_NOT_GUARANTEED = "consensus_not_guaranteed"


def check_consensus_corollary(confidence: ConfidenceProfile) -> ConsensusVerdict:
    """
    Almost-sure consensus holds for every initial state in [0,1]^n iff r_1 >= 1.
    """
    if confidence.r_max >= 1.0:
        return ConsensusVerdict.ALWAYS_CONSENSUS
    return ConsensusVerdict.CONSENSUS_NOT_GUARANTEED


def isolation_witness(r1: float) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """
    Initial-condition box that rules out consensus when r1 < 1.

    Agent 1 in the first interval and every other agent in the second are
    more than r1 apart, so agent 1 never interacts with anyone.

    Returns:
        Tuple: ((0, (1 - r1)/3), ((2 + r1)/3, 1))
    """
    if not 0 < r1 < 1:
        raise ParameterError(f"witness needs 0 < r1 < 1, got {r1}")
    return (0.0, (1 - r1) / 3), ((2 + r1) / 3, 1.0)


class OracleFunctional(str, Enum):
    SQUARED_DISTANCE = "squared_distance"
    COMPLETE_BY = "complete_by"
    CONSENSUS_CLUSTER = "consensus_cluster"
    LIMIT_SQUARED_DISTANCE = "limit_squared_distance"


def _squared_distance(x: Sequence[float], y: Sequence[float]) -> float:
    return math.fsum((a - b) ** 2 for a, b in zip(x, y))


class ExhaustiveOracle:
    """
    Exact expectations over every pair sequence of a fixed length.

    Paths are enumerated depth-first in rank order and leaf values are summed
    with math.fsum, so results are deterministic.
    """
    def __init__(self, params: ModelParams, budget: int = DEFAULT_ORACLE_BUDGET):
        """
        Initialize the oracle.

        Args:
            params: Model parameters
            budget: Maximum number of full-length paths to enumerate
        """
        self.params = params
        self.budget = budget
        self.pairs = [unrank_pair(rank, params.n) for rank in range(pair_count(params.n))]

    def _check_budget(self, horizon: int) -> None:
        if horizon < 0:
            raise ParameterError(f"horizon must be non-negative, got {horizon}")
        required = len(self.pairs) ** horizon
        if required > self.budget:
            raise OracleBudgetError(required, self.budget)

    def _step(self, values: List[float], rank: int) -> List[float]:
        child = list(values)
        pair = self.pairs[rank]
        interact(child, pair.i - 1, pair.j - 1, self.params.bounds, self.params.mu)
        return child

    def expectation(self,
                    x0: OpinionState,
                    horizon: int,
                    functional: OracleFunctional,
                    x_star: Optional[Sequence[float]] = None) -> float:
        """
        Exact expectation of a functional of the path at time `horizon`.

        Args:
            x0: Initial state
            horizon: Number of random pair updates
            functional: Which quantity to average
            x_star: Reference vector for SQUARED_DISTANCE

        Returns:
            float: The expectation under uniform pair sampling
        """
        x0.require_size(self.params.n)
        self._check_budget(horizon)
        functional = OracleFunctional(functional)
        if functional is OracleFunctional.SQUARED_DISTANCE and x_star is None:
            raise ParameterError("squared_distance needs a reference vector x_star")

        confidence = self.params.confidence
        n = self.params.n
        m = len(self.pairs)
        leaves: List[float] = []

        def leaf_value(values: List[float], limit: Optional[Tuple[float, ...]]) -> float:
            if functional is OracleFunctional.SQUARED_DISTANCE:
                return _squared_distance(values, x_star)
            if functional is OracleFunctional.COMPLETE_BY:
                return 1.0 if limit is not None else 0.0
            if functional is OracleFunctional.CONSENSUS_CLUSTER:
                final = limit_at(OpinionState(0, tuple(values)), confidence)
                return 1.0 if final is not None and is_consensus(final) else 0.0
            if limit is None:
                return float(n)
            return _squared_distance(values, limit)

        def visit(values: List[float], depth: int, limit: Optional[Tuple[float, ...]]) -> None:
            if limit is None:
                limit = limit_at(OpinionState(0, tuple(values)), confidence)
            if depth == horizon:
                leaves.append(leaf_value(values, limit))
                return
            if functional is OracleFunctional.COMPLETE_BY and limit is not None:
                # completion is permanent; every continuation scores 1
                leaves.append(float(m ** (horizon - depth)))
                return
            for rank in range(m):
                visit(self._step(values, rank), depth + 1, limit)

        visit(list(x0.x), 0, None)
        return math.fsum(leaves) / m ** horizon

    def tau_tail(self, x0: OpinionState, horizon: int) -> List[float]:
        """
        Exact P(tau >= t) for t = 0, ..., horizon + 1, tau being the first all-complete time.
        """
        x0.require_size(self.params.n)
        self._check_budget(horizon)
        confidence = self.params.confidence
        m = len(self.pairs)
        surviving = [0] * (horizon + 1)

        def visit(values: List[float], depth: int) -> None:
            if limit_at(OpinionState(0, tuple(values)), confidence) is not None:
                return
            surviving[depth] += 1
            if depth == horizon:
                return
            for rank in range(m):
                visit(self._step(values, rank), depth + 1)

        visit(list(x0.x), 0)
        tail = [1.0]
        for depth in range(horizon + 1):
            tail.append(float(Fraction(surviving[depth], m ** depth)))
        return tail


def exact_expectation_oracle(x0: OpinionState,
                             params: ModelParams,
                             horizon: int,
                             functional: OracleFunctional,
                             x_star: Optional[Sequence[float]] = None,
                             budget: int = DEFAULT_ORACLE_BUDGET) -> float:
    """
    Exact expectation of a path functional by enumerating all pair sequences.

    Args:
        x0: Initial state
        params: Model parameters
        horizon: Sequence length
        functional: Functional to average
        x_star: Reference vector for SQUARED_DISTANCE
        budget: Largest number of paths allowed

    Returns:
        float: The exact expectation
    """
    oracle = ExhaustiveOracle(params, budget)
    return oracle.expectation(x0, horizon, functional, x_star)


def exact_tau_distribution(x0: OpinionState, params: ModelParams, horizon: int,
                           budget: int = DEFAULT_ORACLE_BUDGET) -> List[float]:
    """
    Exact tail P(tau >= t), t = 0..horizon+1, of the first all-complete time.
    """
    return ExhaustiveOracle(params, budget).tau_tail(x0, horizon)
