"""
Maximal-confidence (MC) cluster decomposition and the checks built on it.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np

from src.engine import ConfidenceProfile, OpinionState, Trace, VerificationResult

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MCCluster:
    """
    One maximal-confidence cluster, as computed at a given state.

    `members` holds 1-based agents in increasing order; `anchor` is the agent
    whose bound closed the cluster.
    """
    members: Tuple[int, ...]
    r_max: float
    r_min: float
    x_min: float
    x_max: float
    anchor: int

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def complete(self) -> bool:
        """
        Completeness at the state the cluster was computed from.
        """
        return self.x_max - self.x_min <= self.r_min

    def __contains__(self, agent: int) -> bool:
        return agent in self.members


@dataclass(frozen=True)
class MCPartition:
    """
    Ordered MC clusters C_1, ..., C_K of one state.
    """
    clusters: Tuple[MCCluster, ...]
    state_time: int

    def __len__(self) -> int:
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def cluster_index(self, agent: int) -> int:
        """
        0-based index of the cluster holding an agent.
        """
        for index, cluster in enumerate(self.clusters):
            if agent in cluster.members:
                return index
        raise KeyError(f"agent {agent} is not in the partition")

    def member_sets(self) -> List[frozenset]:
        return [frozenset(cluster.members) for cluster in self.clusters]


def make_cluster(members: Iterable[int], anchor: int, x: OpinionState,
                 confidence: ConfidenceProfile) -> MCCluster:
    """
    Build a cluster record for a member set at a state.
    """
    members = tuple(sorted(members))
    opinions = [x.opinion(a) for a in members]
    bounds = [confidence.bound(a) for a in members]
    return MCCluster(
        members=members,
        r_max=max(bounds),
        r_min=min(bounds),
        x_min=min(opinions),
        x_max=max(opinions),
        anchor=anchor,
    )


def mc_partition(x: OpinionState, confidence: ConfidenceProfile) -> MCPartition:
    """
    Compute the MC clusters of a state.

    The remaining agent with the largest bound (canonical order) anchors the
    next cluster, which is closed under chains of opinion gaps no larger than
    the anchor's bound. On the line, chain reachability equals closure over
    adjacent gaps of the opinion-sorted remaining agents.

    Args:
        x: Opinion state
        confidence: Confidence profile of the model

    Returns:
        MCPartition: Clusters in construction order
    """
    x.require_size(confidence.n)
    values = x.x
    alive = sorted(range(1, confidence.n + 1), key=lambda a: (values[a - 1], confidence.rank(a)))
    assigned = [False] * (confidence.n + 1)
    clusters = []
    for anchor in confidence.canonical_order:
        if assigned[anchor]:
            continue
        r = confidence.bound(anchor)
        position = alive.index(anchor)
        lo = position
        while lo > 0 and values[alive[lo] - 1] - values[alive[lo - 1] - 1] <= r:
            lo -= 1
        hi = position
        while hi < len(alive) - 1 and values[alive[hi + 1] - 1] - values[alive[hi] - 1] <= r:
            hi += 1
        members = alive[lo:hi + 1]
        for agent in members:
            assigned[agent] = True
        del alive[lo:hi + 1]
        clusters.append(make_cluster(members, anchor, x, confidence))

    partition = MCPartition(clusters=tuple(clusters), state_time=x.t)
    assert verify_gap(partition, x, confidence), "MC partition violates the inter-cluster gap"
    return partition


def cluster_diameter(cluster: MCCluster, x: OpinionState) -> float:
    """
    Spread x_max - x_min of the cluster's members at state x.
    """
    opinions = [x.opinion(a) for a in cluster.members]
    return max(opinions) - min(opinions)


def is_complete(cluster: MCCluster, x: OpinionState) -> bool:
    """
    Check whether every pair of members interacts under the smallest member bound.
    """
    return cluster_diameter(cluster, x) <= cluster.r_min


def lyapunov_F(partition: MCPartition, x: OpinionState) -> float:
    """
    Sum of the diameters of the incomplete clusters (0 iff all are complete).
    """
    return math.fsum(
        cluster_diameter(cluster, x)
        for cluster in partition.clusters
        if not is_complete(cluster, x)
    )


def is_all_complete(x: OpinionState, confidence: ConfidenceProfile,
                    partition: Optional[MCPartition] = None) -> bool:
    """
    Check whether every MC cluster of x is complete.

    Pass `partition` when the partition of x is already at hand.
    """
    if partition is None:
        partition = mc_partition(x, confidence)
    return all(is_complete(cluster, x) for cluster in partition.clusters)


def max_cluster_deviation(partition: MCPartition, x: OpinionState) -> float:
    """
    Largest cluster diameter of the partition at state x.
    """
    return max(cluster_diameter(cluster, x) for cluster in partition.clusters)


def verify_gap(partition: MCPartition, x: OpinionState,
               confidence: ConfidenceProfile) -> VerificationResult:
    """
    Check the inter-cluster distance property on every pair of clusters.

    Each pair must be separated in opinion by strictly more than the largest
    bound over the members of both clusters. The partition must also cover
    every agent exactly once.
    """
    seen = [a for cluster in partition.clusters for a in cluster.members]
    if sorted(seen) != list(range(1, confidence.n + 1)):
        return VerificationResult.failed("clusters do not partition the agents")

    spans = []
    for index, cluster in enumerate(partition.clusters):
        opinions = [x.opinion(a) for a in cluster.members]
        r_max = max(confidence.bound(a) for a in cluster.members)
        spans.append((min(opinions), max(opinions), r_max, index))

    for a in range(len(spans)):
        for b in range(a + 1, len(spans)):
            low_a, high_a, r_a, index_a = spans[a]
            low_b, high_b, r_b, index_b = spans[b]
            r_pair = max(r_a, r_b)
            if not (low_b - high_a > r_pair or low_a - high_b > r_pair):
                return VerificationResult.failed(
                    f"clusters {index_a + 1} and {index_b + 1} are not separated by more than {r_pair}"
                )
    return VerificationResult.passed()


def verify_convexity(trace: Trace) -> VerificationResult:
    """
    Check that every cluster's members stay inside the cluster's hull afterwards.

    For each recorded state and each of its MC clusters, the members' opinions
    at all later recorded states must lie within [x_min, x_max] of that state.
    With thinning > 1 only recorded states are checked.
    """
    confidence = trace.params.confidence
    history = np.array([state.x for state in trace.states], dtype=float)
    later_min = np.minimum.accumulate(history[::-1], axis=0)[::-1]
    later_max = np.maximum.accumulate(history[::-1], axis=0)[::-1]

    for k, state in enumerate(trace.states):
        partition = mc_partition(state, confidence)
        for cluster in partition.clusters:
            columns = [a - 1 for a in cluster.members]
            if later_min[k, columns].min() < cluster.x_min or later_max[k, columns].max() > cluster.x_max:
                return VerificationResult.failed(
                    f"cluster {list(cluster.members)} leaves its hull after t={state.t}"
                )
    return VerificationResult.passed()
