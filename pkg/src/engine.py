"""
Engine module implementing the stochastic Deffuant-Weisbuch gossip protocol.

Agents are numbered 1..n in every public type; lists used internally are 0-based.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import InvalidPairError, ParameterError, TheoremDomainError, TraceMemoryError

logger = logging.getLogger(__name__)

# Pair ranks drawn per numpy call inside simulate(); part of the seed contract.
RANK_CHUNK = 4096

DEFAULT_MEMORY_CAP_BYTES = 512 * 1024 * 1024


@dataclass(frozen=True)
class ConfidenceProfile:
    """
    Per-agent confidence bounds in user order plus their canonical ordering.

    `canonical_order[k]` is the (1-based) agent with the (k+1)-th largest bound;
    ties keep the smaller agent index first.
    """
    bounds: Tuple[float, ...]
    canonical_order: Tuple[int, ...] = field(init=False, repr=False)
    ranks: Tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        bounds = tuple(float(r) for r in self.bounds)
        if not bounds:
            raise ParameterError("confidence profile needs at least one bound")
        for position, r in enumerate(bounds, start=1):
            if not math.isfinite(r) or r <= 0:
                raise ParameterError(f"confidence bound of agent {position} must be positive, got {r!r}")
        order = sorted(range(len(bounds)), key=lambda a: (-bounds[a], a))
        ranks = [0] * len(bounds)
        for rank, agent in enumerate(order):
            ranks[agent] = rank
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "canonical_order", tuple(a + 1 for a in order))
        object.__setattr__(self, "ranks", tuple(ranks))

    @property
    def n(self) -> int:
        return len(self.bounds)

    @property
    def r_max(self) -> float:
        return self.bounds[self.canonical_order[0] - 1]

    @property
    def r_min(self) -> float:
        return self.bounds[self.canonical_order[-1] - 1]

    def bound(self, agent: int) -> float:
        """
        Confidence bound of a 1-based agent.
        """
        return self.bounds[agent - 1]

    def rank(self, agent: int) -> int:
        """
        0-based position of a 1-based agent in the canonical order.
        """
        return self.ranks[agent - 1]


@dataclass(frozen=True)
class ModelParams:
    """
    Parameters of a heterogeneous DW model.
    """
    n: int
    mu: float
    confidence: ConfidenceProfile

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise ParameterError(f"n must be an integer >= 3, got {self.n!r}")
        if not 0.0 < self.mu < 1.0:
            raise ParameterError(f"mu must lie in (0, 1), got {self.mu!r}")
        if self.confidence.n != self.n:
            raise ParameterError(
                f"expected {self.n} confidence bounds, got {self.confidence.n}"
            )

    @classmethod
    def build(cls, mu: float, bounds: Sequence[float]) -> "ModelParams":
        """
        Build parameters from a weighting factor and a list of bounds.

        Args:
            mu: Weighting factor in (0, 1)
            bounds: Confidence bounds in agent order

        Returns:
            ModelParams: Validated parameters with n = len(bounds)
        """
        profile = ConfidenceProfile(tuple(bounds))
        return cls(n=profile.n, mu=float(mu), confidence=profile)

    @property
    def bounds(self) -> Tuple[float, ...]:
        return self.confidence.bounds

    def require_theorem_domain(self, operation: str) -> None:
        """
        Raise TheoremDomainError unless mu lies in [1/2, 1).
        """
        if self.mu < 0.5:
            raise TheoremDomainError(self.mu, operation)


@dataclass(frozen=True)
class OpinionState:
    """
    Opinion vector x(t) in [0, 1]^n at time t.
    """
    t: int
    x: Tuple[float, ...]

    def __post_init__(self):
        if self.t < 0:
            raise ParameterError(f"time index must be non-negative, got {self.t}")
        values = tuple(float(v) for v in self.x)
        for agent, v in enumerate(values, start=1):
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"opinion of agent {agent} is outside [0, 1]: {v!r}")
        object.__setattr__(self, "x", values)

    @classmethod
    def of(cls, values: Sequence[float], t: int = 0) -> "OpinionState":
        return cls(t=t, x=tuple(values))

    @property
    def n(self) -> int:
        return len(self.x)

    def opinion(self, agent: int) -> float:
        return self.x[agent - 1]

    def require_size(self, n: int) -> None:
        if len(self.x) != n:
            raise ParameterError(f"state has {len(self.x)} opinions, model has {n} agents")


@dataclass(frozen=True, order=True)
class AgentPair:
    """
    Unordered pair of distinct agents, stored with i < j.
    """
    i: int
    j: int

    def __post_init__(self):
        if not (isinstance(self.i, (int, np.integer)) and isinstance(self.j, (int, np.integer))):
            raise InvalidPairError(f"pair indices must be integers, got ({self.i!r}, {self.j!r})")
        object.__setattr__(self, "i", int(self.i))
        object.__setattr__(self, "j", int(self.j))
        if not 1 <= self.i < self.j:
            raise InvalidPairError(f"pair must satisfy 1 <= i < j, got ({self.i}, {self.j})")

    @classmethod
    def of(cls, a: int, b: int) -> "AgentPair":
        """
        Build a pair from two agents given in any order.
        """
        if a == b:
            raise InvalidPairError(f"pair needs two distinct agents, got ({a}, {b})")
        return cls(min(a, b), max(a, b))

    def check(self, n: int) -> None:
        if self.j > n:
            raise InvalidPairError(f"pair ({self.i}, {self.j}) is out of range for n={n}")

    def as_list(self) -> List[int]:
        return [self.i, self.j]


@dataclass(frozen=True)
class VerificationResult:
    """
    Outcome of a verifier: truthy iff no violation was found.
    """
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok

    @classmethod
    def passed(cls) -> "VerificationResult":
        return cls(True, "")

    @classmethod
    def failed(cls, reason: str) -> "VerificationResult":
        return cls(False, reason)


@dataclass(frozen=True, eq=False)
class Trace:
    """
    Recorded trajectory of one simulation run.

    `pairs` is a read-only (steps, 2) integer array of 1-based agent pairs; row t
    is the pair used to go from time t to t + 1. States are recorded every
    `thinning` steps starting at t = 0.
    """
    params: ModelParams
    seed: int
    states: Tuple[OpinionState, ...]
    pairs: np.ndarray
    thinning: int = 1

    @property
    def steps(self) -> int:
        return int(self.pairs.shape[0])

    @property
    def initial_state(self) -> OpinionState:
        return self.states[0]

    @property
    def final_state(self) -> OpinionState:
        return self.states[-1]


def pair_count(n: int) -> int:
    return n * (n - 1) // 2


def unrank_pair(rank: int, n: int) -> AgentPair:
    """
    Map a rank in [0, n(n-1)/2) to a pair by triangular unranking.

    Ranks enumerate (1,2), (1,3), ..., (1,n), (2,3), ... in order.

    Args:
        rank: Integer rank of the pair
        n: Number of agents

    Returns:
        AgentPair: The pair with that rank
    """
    m = pair_count(n)
    if not 0 <= rank < m:
        raise InvalidPairError(f"pair rank {rank} is out of range for n={n}")
    reverse = m - 1 - rank
    p = (math.isqrt(8 * reverse + 1) - 1) // 2
    offset = reverse - p * (p + 1) // 2
    i0 = n - 2 - p
    j0 = n - 1 - offset
    return AgentPair(i0 + 1, j0 + 1)


def rank_pair(pair: AgentPair, n: int) -> int:
    """
    Inverse of unrank_pair.
    """
    pair.check(n)
    i0, j0 = pair.i - 1, pair.j - 1
    return i0 * n - i0 * (i0 + 1) // 2 + (j0 - i0 - 1)


def _toward(a: float, b: float, mu: float) -> float:
    moved = a + mu * (b - a)
    # rounding may overshoot the partner's opinion by an ulp
    if a <= b:
        return min(max(moved, a), b)
    return min(max(moved, b), a)


def interact(x: List[float], i: int, j: int, bounds: Sequence[float], mu: float) -> None:
    """
    Apply one DW interaction in place on a 0-based opinion list.

    Args:
        x: Mutable opinion list
        i: 0-based index of the first agent
        j: 0-based index of the second agent
        bounds: Confidence bounds, 0-based
        mu: Weighting factor
    """
    xi = x[i]
    xj = x[j]
    gap = abs(xj - xi)
    if gap <= bounds[i]:
        x[i] = _toward(xi, xj, mu)
    if gap <= bounds[j]:
        x[j] = _toward(xj, xi, mu)


def dw_step(x: OpinionState, pair: AgentPair, params: ModelParams) -> OpinionState:
    """
    Apply one DW update to the given pair.

    Args:
        x: Current state
        pair: The interacting pair
        params: Model parameters

    Returns:
        OpinionState: The state at time t + 1; the input is not modified
    """
    pair.check(params.n)
    x.require_size(params.n)
    values = list(x.x)
    interact(values, pair.i - 1, pair.j - 1, params.bounds, params.mu)
    return OpinionState(x.t + 1, tuple(values))


def make_rng(seed: int) -> np.random.Generator:
    """
    The toolkit's generator: PCG64 seeded with a non-negative 64-bit integer.
    """
    if seed < 0 or seed >= 2 ** 64:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def derive_replica_seed(master_seed: int, sweep_index: int, replica_index: int) -> int:
    """
    Derive the 64-bit seed of one replica.

    The seed depends only on (master_seed, sweep_index, replica_index), via
    numpy's SeedSequence hashing with the two indices as spawn key, so replicas
    can run in any order and extra sweep points never perturb existing ones.
    """
    sequence = np.random.SeedSequence(master_seed, spawn_key=(sweep_index, replica_index))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def sample_pair(rng: np.random.Generator, n: int) -> AgentPair:
    """
    Draw one pair uniformly from the n(n-1)/2 unordered pairs.

    Args:
        rng: Seeded generator, advanced by one draw
        n: Number of agents (at least 3)

    Returns:
        AgentPair: The sampled pair
    """
    if n < 3:
        raise ParameterError(f"pair sampling needs n >= 3, got {n}")
    return unrank_pair(int(rng.integers(0, pair_count(n))), n)


def random_state(rng: np.random.Generator, n: int) -> OpinionState:
    """
    Draw an initial state uniformly from [0, 1]^n.
    """
    return OpinionState(0, tuple(rng.random(n).tolist()))


def predicted_trace_bytes(n: int, steps: int, thinning: int) -> int:
    """
    Rough memory footprint of a trace: recorded states plus the pair log.
    """
    recorded = steps // thinning + 1
    return recorded * (8 * n + 120) + steps * 8


def simulate(x0: OpinionState,
             params: ModelParams,
             steps: int,
             seed: int,
             thinning: int = 1,
             stop_when: Optional[Callable[[OpinionState], bool]] = None,
             memory_cap_bytes: int = DEFAULT_MEMORY_CAP_BYTES) -> Trace:
    """
    Simulate the DW protocol from x0 for a number of steps.

    Args:
        x0: Initial state (its time index is reset to 0)
        params: Model parameters
        steps: Number of pair updates to perform
        seed: 64-bit seed of the pair stream
        thinning: Record every `thinning`-th state
        stop_when: Optional predicate checked at every recorded state; the run
            ends at the first recorded state where it returns True
        memory_cap_bytes: Reject runs whose trace would exceed this size

    Returns:
        Trace: The recorded run, reproducible from its arguments
    """
    x0.require_size(params.n)
    if steps < 0:
        raise ParameterError(f"steps must be non-negative, got {steps}")
    if thinning < 1:
        raise ParameterError(f"thinning must be >= 1, got {thinning}")
    predicted = predicted_trace_bytes(params.n, steps, thinning)
    if predicted > memory_cap_bytes:
        logger.warning("Rejecting trace of %d steps: about %d bytes", steps, predicted)
        raise TraceMemoryError(predicted, memory_cap_bytes)

    rng = make_rng(seed)
    n = params.n
    lookup = [unrank_pair(rank, n) for rank in range(pair_count(n))]
    first = [p.i - 1 for p in lookup]
    second = [p.j - 1 for p in lookup]
    lookup_array = np.array([p.as_list() for p in lookup], dtype=np.int32)

    bounds = params.bounds
    mu = params.mu
    x = list(x0.x)
    start = OpinionState(0, x0.x)
    states = [start]
    pairs = np.empty((steps, 2), dtype=np.int32)

    logger.debug("Simulating n=%d mu=%s steps=%d seed=%d thinning=%d", n, mu, steps, seed, thinning)
    t = 0
    stopped = stop_when is not None and stop_when(start)
    while t < steps and not stopped:
        size = min(RANK_CHUNK, steps - t)
        ranks = rng.integers(0, len(lookup), size=size)
        pairs[t:t + size] = lookup_array[ranks]
        for rank in ranks.tolist():
            interact(x, first[rank], second[rank], bounds, mu)
            t += 1
            if t % thinning == 0:
                state = OpinionState(t, tuple(x))
                states.append(state)
                if stop_when is not None and stop_when(state):
                    stopped = True
                    break

    if stopped:
        logger.debug("Stop rule fired at t=%d", t)
    pairs = pairs[:t].copy()
    pairs.setflags(write=False)
    return Trace(params=params, seed=seed, states=tuple(states), pairs=pairs, thinning=thinning)


def apply_sequence(x0: OpinionState, seq: Sequence[AgentPair], params: ModelParams) -> OpinionState:
    """
    Fold dw_step over a control sequence of pairs.

    Args:
        x0: Initial state
        seq: Pairs chosen as control inputs
        params: Model parameters

    Returns:
        OpinionState: The state after the whole sequence
    """
    x0.require_size(params.n)
    for pair in seq:
        pair.check(params.n)
    values = list(x0.x)
    for pair in seq:
        interact(values, pair.i - 1, pair.j - 1, params.bounds, params.mu)
    return OpinionState(x0.t + len(seq), tuple(values))


def verify_replay(trace: Trace) -> VerificationResult:
    """
    Replay the pair log from the first state and compare every recorded state bit-exactly.
    """
    params = trace.params
    states = trace.states
    if states[0].t != 0:
        return VerificationResult.failed(f"first recorded state has t={states[0].t}, expected 0")
    for k, state in enumerate(states):
        if state.t != k * trace.thinning:
            return VerificationResult.failed(
                f"recorded state {k} has t={state.t}, expected {k * trace.thinning}"
            )
    if (len(states) - 1) * trace.thinning > trace.steps:
        return VerificationResult.failed("pair log is shorter than the recorded states")

    x = list(states[0].x)
    next_record = 1
    for t, (i, j) in enumerate(trace.pairs.tolist(), start=1):
        if not (1 <= i < j <= params.n):
            return VerificationResult.failed(f"invalid pair ({i}, {j}) at step {t - 1}")
        interact(x, i - 1, j - 1, params.bounds, params.mu)
        if next_record < len(states) and states[next_record].t == t:
            if tuple(x) != states[next_record].x:
                return VerificationResult.failed(f"replay diverges from recorded state at t={t}")
            next_record += 1
    return VerificationResult.passed()
