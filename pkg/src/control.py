"""
Constructive control sequences for the DW-control system.

The pair at each step is a control input instead of a random draw. The
synthesizers here split an MC cluster or shrink its diameter, and drive every
cluster to completeness, each within a certified number of steps.
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from src.clusters import MCCluster, cluster_diameter, is_complete, lyapunov_F, mc_partition
from src.engine import (
    AgentPair,
    ModelParams,
    OpinionState,
    VerificationResult,
    apply_sequence,
    interact,
)
from src.errors import InvalidPairError, ParameterError, PreconditionError, SynthesisError
from src.utils.helpers import ceil_div, complement_power, exact_decimal, log_ceil, log_pair_probability

logger = logging.getLogger(__name__)

# Opinions closer than this count as equal in the split test.
SPLIT_TOLERANCE = 1e-12
# Members this close to the low-band edge have left the band.
BAND_TOLERANCE = 2 * SPLIT_TOLERANCE
# Slack allowed when checking a claimed diameter decrease.
SHRINK_TOLERANCE = 2 * BAND_TOLERANCE


class Outcome(str, Enum):
    SPLIT = "split"
    SHRINK = "shrink"
    COMPLETE = "complete"


class Phase(str, Enum):
    PULL = "pull-left"
    PUSH = "push-right"


@dataclass(frozen=True)
class SynthesisStep:
    """
    One segment of a synthesized sequence: `active_agent` paired with `partner`
    `repeat_count` times in a row.
    """
    phase: Phase
    active_agent: int
    target_set: Tuple[int, ...]
    partner: int
    repeat_count: int


@dataclass(frozen=True)
class ControlSequence:
    """
    A finite control input with the outcome it claims and its length bound.

    `target_members` are the agents the claim is about: the cluster for split
    and shrink, all agents for complete.
    """
    pairs: Tuple[AgentPair, ...]
    start_state: OpinionState
    claimed_outcome: Outcome
    length_bound: int
    target_members: Tuple[int, ...]
    segments: Tuple[SynthesisStep, ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)


def _one_minus(mu: float) -> Fraction:
    return 1 - exact_decimal(mu)


def partner_repeat_cap(r_min: float, r_max: float, mu: float) -> int:
    """
    Most consecutive updates with one partner: 1 + ceil(log_{1-mu}(r_min / r_max)).
    """
    return 1 + log_ceil(exact_decimal(r_min) / exact_decimal(r_max), _one_minus(mu))


def split_or_shrink_bound(size: int, r_min: float, r_max: float, mu: float) -> int:
    """
    Length bound (|C| - 1)^2 (1 + ceil(log_{1-mu}(r_min / r_max))) for one cluster.
    """
    return (size - 1) ** 2 * partner_repeat_cap(r_min, r_max, mu)


def completion_length_bound(n: int, mu: float, r1: float, rn: float) -> int:
    """
    Length bound for driving all clusters to completeness.

    Returns:
        int: (n-1)^2 (1 + ceil(log_{1-mu}(rn / r1))) ceil((1 - rn) / ((1-mu)^2 rn))
    """
    shrink_steps = ceil_div(1 - exact_decimal(rn), _one_minus(mu) ** 2 * exact_decimal(rn))
    return (n - 1) ** 2 * partner_repeat_cap(rn, r1, mu) * shrink_steps


class _ClusterSynthesizer:
    """
    Scratch-state driver for the split-or-shrink construction on one cluster.

    Decisions use oriented opinions y = sign * x so that the mirrored case runs
    the same code; the scratch state itself stays in real coordinates.
    """
    def __init__(self, x: OpinionState, cluster: MCCluster, params: ModelParams, length_bound: int):
        self.params = params
        self.confidence = params.confidence
        self.members = cluster.members
        self.values = list(x.x)
        self.length_bound = length_bound
        self.pairs: List[AgentPair] = []
        self.segments: List[SynthesisStep] = []

        rank = self.confidence.rank
        self.active = min(self.members, key=rank)
        self.r_active = self.confidence.bound(self.active)
        self.r_min = cluster.r_min

        j = min(self.members, key=lambda a: (self.values[a - 1], rank(a)))
        k = max(self.members, key=lambda a: (self.values[a - 1], -rank(a)))
        middle = (self.values[j - 1] + self.values[k - 1]) / 2
        self.sign = 1.0 if self.values[self.active - 1] >= middle else -1.0

        lowest = min(self._y(a) for a in self.members)
        highest = max(self._y(a) for a in self.members)
        margin = (1 - params.mu) ** 2 * self.r_min
        self.low_threshold = lowest + margin
        self.band_edge = self.low_threshold - min(BAND_TOLERANCE, margin / 2)
        self.return_level = lowest + self.r_min / 2
        self.shrunk_level = highest - margin
        logger.debug(
            "Synthesizing on cluster %s: active agent %d, %s orientation",
            list(self.members), self.active, "direct" if self.sign > 0 else "mirrored",
        )

    def _y(self, agent: int) -> float:
        return self.sign * self.values[agent - 1]

    def _low_set(self) -> Tuple[int, ...]:
        return tuple(a for a in self.members if self._y(a) < self.band_edge)

    def _is_split(self) -> bool:
        partition = mc_partition(OpinionState(0, tuple(self.values)), self.confidence)
        owners = {partition.cluster_index(a) for a in self.members}
        return len(owners) >= 2

    def _reachable(self) -> List[int]:
        y_active = self._y(self.active)
        return [
            a for a in self.members
            if a != self.active and abs(self._y(a) - y_active) <= self.r_active
        ]

    def _play(self, partner: int) -> bool:
        """
        Apply one update of (active, partner); True if the cluster has split.
        """
        if len(self.pairs) >= self.length_bound:
            raise SynthesisError(
                f"sequence for cluster {list(self.members)} exceeds its bound {self.length_bound}"
            )
        self.pairs.append(AgentPair.of(self.active, partner))
        interact(self.values, self.active - 1, partner - 1, self.confidence.bounds, self.params.mu)
        return self._is_split()

    def _pull(self) -> Optional[Outcome]:
        target = len(self._low_set()) - 1
        while True:
            low = self._low_set()
            if not low:
                return Outcome.SHRINK
            if len(low) <= target:
                return None

            y_active = self._y(self.active)
            below = [a for a in self._reachable() if self._y(a) < y_active - SPLIT_TOLERANCE]
            if not below:
                # nobody left of the active agent within reach
                if self._is_split():
                    return Outcome.SPLIT
                raise SynthesisError(f"no pull partner for agent {self.active} and no split")
            partner = min(below, key=lambda a: (self._y(a), self.confidence.rank(a)))

            gap = y_active - self._y(partner)
            ratio = Fraction(self.confidence.bound(partner)) / Fraction(gap)
            repeats = max(log_ceil(ratio, _one_minus(self.params.mu)), 0) + 1
            self.segments.append(SynthesisStep(Phase.PULL, self.active, low, partner, repeats))
            for _ in range(repeats):
                if self._play(partner):
                    return Outcome.SPLIT

    def _push(self) -> Optional[Outcome]:
        last_partner = None
        while True:
            if max(self._y(a) for a in self.members) <= self.shrunk_level:
                return Outcome.SHRINK
            y_active = self._y(self.active)
            if y_active >= self.return_level:
                return None

            above = [a for a in self._reachable() if self._y(a) > y_active + SPLIT_TOLERANCE]
            if not above:
                if self._is_split():
                    return Outcome.SPLIT
                raise SynthesisError(f"no push partner for agent {self.active} and no split")
            partner = max(above, key=lambda a: (self._y(a), -self.confidence.rank(a)))

            if partner == last_partner:
                previous = self.segments[-1]
                self.segments[-1] = replace(previous, repeat_count=previous.repeat_count + 1)
            else:
                self.segments.append(SynthesisStep(Phase.PUSH, self.active, self._low_set(), partner, 1))
            last_partner = partner
            if self._play(partner):
                return Outcome.SPLIT

    def run(self) -> Outcome:
        while True:
            outcome = self._pull()
            if outcome is not None:
                return outcome
            outcome = self._push()
            if outcome is not None:
                return outcome


def split_or_shrink(x: OpinionState, cluster: MCCluster, params: ModelParams) -> ControlSequence:
    """
    Synthesize pairs that split an incomplete MC cluster or shrink its diameter.

    The agent with the largest bound in the cluster alternately pulls the lowest
    reachable member up (until one more member leaves the low band above the
    cluster minimum) and moves right toward the highest reachable member, until
    the cluster splits, the low band empties, or the maximum drops by
    (1 - mu)^2 r_min. If that agent sits left of the cluster's midpoint the
    construction runs mirrored.

    Args:
        x: Current state
        cluster: An MC cluster of x with diameter larger than its smallest bound
        params: Model parameters with mu in [1/2, 1)

    Returns:
        ControlSequence: Pairs claiming SPLIT or SHRINK, within the length bound
    """
    params.require_theorem_domain("split_or_shrink")
    x.require_size(params.n)
    if frozenset(cluster.members) not in mc_partition(x, params.confidence).member_sets():
        raise PreconditionError(f"agents {list(cluster.members)} are not an MC cluster of the state")
    diameter = cluster_diameter(cluster, x)
    if diameter <= cluster.r_min:
        raise PreconditionError(
            f"cluster diameter {diameter} does not exceed its smallest bound {cluster.r_min}"
        )

    bound = split_or_shrink_bound(cluster.size, cluster.r_min, cluster.r_max, params.mu)
    synthesizer = _ClusterSynthesizer(x, cluster, params, bound)
    outcome = synthesizer.run()
    logger.debug("Cluster %s: %s after %d steps (bound %d)",
                 list(cluster.members), outcome.value, len(synthesizer.pairs), bound)
    return ControlSequence(
        pairs=tuple(synthesizer.pairs),
        start_state=x,
        claimed_outcome=outcome,
        length_bound=bound,
        target_members=cluster.members,
        segments=tuple(synthesizer.segments),
    )


def drive_to_complete(x: OpinionState, params: ModelParams) -> ControlSequence:
    """
    Synthesize pairs after which every MC cluster is complete.

    Incomplete clusters are handled in partition order; the partition is
    recomputed after each split-or-shrink piece.

    Args:
        x: Initial state
        params: Model parameters with mu in [1/2, 1)

    Returns:
        ControlSequence: Pairs claiming COMPLETE, within the completion bound
    """
    params.require_theorem_domain("drive_to_complete")
    x.require_size(params.n)
    confidence = params.confidence
    bound = completion_length_bound(params.n, params.mu, confidence.r_max, confidence.r_min)

    pairs: List[AgentPair] = []
    segments: List[SynthesisStep] = []
    state = x
    while True:
        partition = mc_partition(state, confidence)
        incomplete = [c for c in partition.clusters if not is_complete(c, state)]
        if not incomplete:
            break
        piece = split_or_shrink(state, incomplete[0], params)
        pairs.extend(piece.pairs)
        segments.extend(piece.segments)
        if len(pairs) > bound:
            raise SynthesisError(f"completion sequence exceeds its bound {bound}")
        state = apply_sequence(state, piece.pairs, params)

    logger.debug("All clusters complete after %d steps (bound %d)", len(pairs), bound)
    return ControlSequence(
        pairs=tuple(pairs),
        start_state=x,
        claimed_outcome=Outcome.COMPLETE,
        length_bound=bound,
        target_members=tuple(range(1, params.n + 1)),
        segments=tuple(segments),
    )


def verify_outcome(seq: ControlSequence, params: ModelParams) -> VerificationResult:
    """
    Replay a control sequence and check its claimed outcome and length.
    """
    if len(seq.pairs) > seq.length_bound:
        return VerificationResult.failed(
            f"sequence has {len(seq.pairs)} pairs, bound is {seq.length_bound}"
        )
    try:
        final = apply_sequence(seq.start_state, seq.pairs, params)
    except (InvalidPairError, ParameterError) as e:
        return VerificationResult.failed(f"replay failed: {e}")

    members = seq.target_members
    if not members or any(not 1 <= a <= params.n for a in members):
        return VerificationResult.failed(f"target members {list(members)} are invalid")

    if seq.claimed_outcome is Outcome.SPLIT:
        partition = mc_partition(final, params.confidence)
        owners = {partition.cluster_index(a) for a in members}
        if len(owners) < 2:
            return VerificationResult.failed("members still form one MC cluster")
    elif seq.claimed_outcome is Outcome.SHRINK:
        r_min = min(params.confidence.bound(a) for a in members)
        before = _spread(seq.start_state, members)
        after = _spread(final, members)
        required = (1 - params.mu) ** 2 * r_min
        if before - after < required - SHRINK_TOLERANCE:
            return VerificationResult.failed(
                f"diameter decreased by {before - after}, needed {required}"
            )
    elif seq.claimed_outcome is Outcome.COMPLETE:
        partition = mc_partition(final, params.confidence)
        remaining = lyapunov_F(partition, final)
        if remaining != 0:
            return VerificationResult.failed(f"incomplete clusters remain (F={remaining})")
    return VerificationResult.passed()


def _spread(x: OpinionState, members: Sequence[int]) -> float:
    opinions = [x.opinion(a) for a in members]
    return max(opinions) - min(opinions)


def hitting_tail_bound(t: int, t_star: int, n: int) -> float:
    """
    Upper bound a^floor(t / (t* + 1)) on P(tau >= t) under the random protocol.

    Here a = 1 - (2 / (n (n-1)))^t*, where t* is a control horizon that reaches
    the target set from every state.

    Args:
        t: Time (>= 1)
        t_star: Control horizon (>= 1)
        n: Number of agents (>= 3)

    Returns:
        float: The tail bound
    """
    if t < 1 or t_star < 1:
        raise ParameterError(f"hitting_tail_bound needs t >= 1 and t_star >= 1, got t={t}, t_star={t_star}")
    if n < 3:
        raise ParameterError(f"hitting_tail_bound needs n >= 3, got {n}")
    return complement_power(log_pair_probability(n, t_star), t // (t_star + 1))
