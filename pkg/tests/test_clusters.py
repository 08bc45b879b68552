"""
Tests for the MC partition, completeness, the Lyapunov sum and the structural verifiers.
"""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import lattice_value, model_instances
from src.clusters import (
    MCPartition,
    cluster_diameter,
    is_all_complete,
    is_complete,
    lyapunov_F,
    make_cluster,
    max_cluster_deviation,
    mc_partition,
    verify_convexity,
    verify_gap,
)
from src.engine import ConfidenceProfile, ModelParams, OpinionState, Trace, make_rng, simulate
from src.errors import ParameterError


def union_find_partition(x, bounds):
    """
    Reference partition: for each anchor in canonical order, union every pair of
    remaining agents within the anchor's bound and take the anchor's component.
    """
    n = len(x)
    order = sorted(range(n), key=lambda a: (-bounds[a], a))
    remaining = set(range(n))
    clusters = []
    for anchor in order:
        if anchor not in remaining:
            continue
        parent = {a: a for a in remaining}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in itertools.combinations(sorted(remaining), 2):
            if abs(x[a] - x[b]) <= bounds[anchor]:
                parent[find(a)] = find(b)
        root = find(anchor)
        members = frozenset(a + 1 for a in remaining if find(a) == root)
        clusters.append(members)
        remaining -= {a - 1 for a in members}
    return clusters


class TestPartitionExamples:
    def test_chain_forms_one_cluster(self):
        partition = mc_partition(OpinionState.of((0.06, 0.14, 0.5)), ConfidenceProfile((0.4, 0.3, 0.2)))
        assert partition.member_sets() == [frozenset({1, 2, 3})]
        assert partition.clusters[0].anchor == 1

    def test_far_agent_splits_off(self):
        x = OpinionState.of((0.0, 0.1, 0.9))
        confidence = ConfidenceProfile((0.3, 0.2, 0.1))
        partition = mc_partition(x, confidence)
        assert partition.member_sets() == [frozenset({1, 2}), frozenset({3})]
        assert verify_gap(partition, x, confidence)

    def test_equal_opinions_give_one_cluster(self):
        partition = mc_partition(OpinionState.of([0.3] * 6), ConfidenceProfile([0.01] * 6))
        assert len(partition) == 1
        assert partition.clusters[0].size == 6

    def test_seven_agent_schematic(self):
        x = OpinionState.of((0.1, 0.7, 0.4, 0.8, 0.0, 0.9, 0.25))
        confidence = ConfidenceProfile((0.2, 0.15, 0.1, 0.1, 0.1, 0.1, 0.1))
        partition = mc_partition(x, confidence)
        assert partition.member_sets() == [frozenset({1, 3, 5, 7}), frozenset({2, 4, 6})]
        assert [c.anchor for c in partition] == [1, 2]
        assert partition.cluster_index(4) == 1

    def test_later_anchor_uses_its_own_bound(self):
        x = OpinionState.of((0.0, 0.5, 0.62, 0.9))
        confidence = ConfidenceProfile((0.1, 0.15, 0.05, 0.05))
        assert mc_partition(x, confidence).member_sets() == [
            frozenset({2, 3}), frozenset({1}), frozenset({4}),
        ]

    def test_size_mismatch(self):
        with pytest.raises(ParameterError):
            mc_partition(OpinionState.of((0.1, 0.2)), ConfidenceProfile((0.1, 0.2, 0.3)))


class TestUnionFindAgreement:
    @pytest.mark.parametrize("bounds", [
        (0.3, 0.2, 0.1),
        (0.1, 0.1, 0.1),
        (0.45, 0.15, 0.25),
        (1.0, 0.05, 0.05),
    ])
    def test_exhaustive_three_agents(self, bounds):
        confidence = ConfidenceProfile(bounds)
        for values in itertools.product([k / 10 for k in range(11)], repeat=3):
            partition = mc_partition(OpinionState.of(values), confidence)
            assert partition.member_sets() == union_find_partition(values, bounds)

    @pytest.mark.slow
    def test_exhaustive_five_agents(self):
        bounds = (0.3, 0.25, 0.2, 0.1, 0.1)
        confidence = ConfidenceProfile(bounds)
        for values in itertools.product([k / 10 for k in range(11)], repeat=5):
            partition = mc_partition(OpinionState.of(values), confidence)
            assert partition.member_sets() == union_find_partition(values, bounds)

    @given(st.integers(min_value=3, max_value=5).flatmap(
        lambda n: st.tuples(
            st.lists(lattice_value, min_size=n, max_size=n),
            st.lists(st.sampled_from([0.05, 0.1, 0.2, 0.3, 0.5]), min_size=n, max_size=n),
        )
    ))
    def test_lattice_states(self, instance):
        values, bounds = instance
        partition = mc_partition(OpinionState.of(values), ConfidenceProfile(bounds))
        assert partition.member_sets() == union_find_partition(values, bounds)


class TestCompleteness:
    def test_complete_pair(self):
        x = OpinionState.of((0.0, 0.1, 0.9))
        cluster = make_cluster((1, 2), 1, x, ConfidenceProfile((0.3, 0.2, 0.1)))
        assert is_complete(cluster, x)

    def test_incomplete_pair(self):
        x = OpinionState.of((0.0, 0.25, 0.9))
        cluster = make_cluster((1, 2), 1, x, ConfidenceProfile((0.3, 0.2, 0.1)))
        assert not is_complete(cluster, x)

    def test_singleton_is_complete(self):
        x = OpinionState.of((0.0, 0.5, 1.0))
        cluster = make_cluster((3,), 3, x, ConfidenceProfile((0.3, 0.2, 0.1)))
        assert is_complete(cluster, x)
        assert cluster_diameter(cluster, x) == 0

    def test_diameter_and_F_on_incomplete_cluster(self):
        x = OpinionState.of((0.06, 0.14, 0.5))
        partition = mc_partition(x, ConfidenceProfile((0.4, 0.3, 0.2)))
        assert cluster_diameter(partition.clusters[0], x) == pytest.approx(0.44)
        assert lyapunov_F(partition, x) == pytest.approx(0.44)
        assert not is_all_complete(x, ConfidenceProfile((0.4, 0.3, 0.2)))

    def test_F_is_zero_when_all_complete(self):
        x = OpinionState.of((0.0, 0.1, 0.9))
        confidence = ConfidenceProfile((0.3, 0.2, 0.1))
        partition = mc_partition(x, confidence)
        assert lyapunov_F(partition, x) == 0
        assert is_all_complete(x, confidence)
        assert max_cluster_deviation(partition, x) == pytest.approx(0.1)

    @given(model_instances(max_n=7))
    def test_F_is_zero_or_exceeds_smallest_bound(self, instance):
        params, x = instance
        partition = mc_partition(x, params.confidence)
        value = lyapunov_F(partition, x)
        assert value == 0 or value > params.confidence.r_min


class TestVerifyGap:
    @settings(max_examples=300)
    @given(model_instances(max_n=10))
    def test_partition_output_passes(self, instance):
        params, x = instance
        partition = mc_partition(x, params.confidence)
        assert verify_gap(partition, x, params.confidence)

    def test_merged_clusters_fail(self):
        x = OpinionState.of((0.0, 0.1, 0.3))
        confidence = ConfidenceProfile((0.3, 0.2, 0.1))
        forged = MCPartition(
            clusters=(
                make_cluster((1,), 1, x, confidence),
                make_cluster((2, 3), 2, x, confidence),
            ),
            state_time=0,
        )
        result = verify_gap(forged, x, confidence)
        assert not result
        assert "not separated" in result.reason

    def test_missing_agent_fails(self):
        x = OpinionState.of((0.0, 0.1, 0.9))
        confidence = ConfidenceProfile((0.3, 0.2, 0.1))
        partial = MCPartition(clusters=(make_cluster((1, 2), 1, x, confidence),), state_time=0)
        assert not verify_gap(partial, x, confidence)


class TestVerifyConvexity:
    @settings(max_examples=40)
    @given(model_instances(mus=[0.5, 0.7, 0.9]), st.integers(min_value=0, max_value=2 ** 32))
    def test_engine_traces_pass(self, instance, seed):
        params, x = instance
        assert verify_convexity(simulate(x, params, 300, seed=seed, thinning=3))

    def test_doctored_trace_fails(self):
        params = ModelParams.build(0.5, (0.3, 0.2, 0.1))
        trace = simulate(OpinionState.of((0.0, 0.1, 0.9)), params, 10, seed=0)
        states = list(trace.states)
        x = list(states[-1].x)
        x[2] = 0.5
        states[-1] = OpinionState(states[-1].t, tuple(x))
        doctored = Trace(trace.params, trace.seed, tuple(states), trace.pairs, trace.thinning)
        result = verify_convexity(doctored)
        assert not result
        assert "[3]" in result.reason

    def test_long_eight_agent_run(self, eight_agent_params):
        x0 = OpinionState.of(make_rng(8).random(8).tolist())
        trace = simulate(x0, eight_agent_params, 20_000, seed=8, thinning=50)
        assert verify_convexity(trace)
        history = np.array([s.x for s in trace.states])
        assert history.min() >= min(x0.x) and history.max() <= max(x0.x)


class TestRelabeling:
    @given(model_instances(), st.data())
    def test_member_sets_follow_the_agents(self, instance, data):
        params, x = instance
        order = data.draw(st.permutations(range(params.n)))
        relabeled = mc_partition(
            OpinionState.of([x.x[k] for k in order]),
            ConfidenceProfile(tuple(params.bounds[k] for k in order)),
        )
        mapped = {frozenset(order[a - 1] + 1 for a in members) for members in relabeled.member_sets()}
        assert mapped == set(mc_partition(x, params.confidence).member_sets())


class TestStabilityAfterCompletion:
    def test_partition_is_frozen_once_all_clusters_are_complete(self):
        params = ModelParams.build(0.5, (0.3, 0.25, 0.2, 0.15, 0.1))
        confidence = params.confidence
        reached = 0
        for seed in range(5):
            x0 = OpinionState.of(make_rng(seed + 200).random(params.n).tolist())
            trace = simulate(x0, params, 5_000, seed=seed, thinning=5)
            first = next((k for k, s in enumerate(trace.states) if is_all_complete(s, confidence)), None)
            if first is None:
                continue
            reached += 1
            expected = set(mc_partition(trace.states[first], confidence).member_sets())
            for state in trace.states[first:]:
                assert set(mc_partition(state, confidence).member_sets()) == expected
        assert reached >= 1
