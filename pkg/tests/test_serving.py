import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topiclora import (
    NodeState,
    PlacementPolicy,
    RoutingDecision,
    ServingMetrics,
    Topology,
    load_metrics,
    place,
    save_metrics,
    simulate,
)

from _oracles import ReferenceLRU


def trace(topic_ids, fallback_every=None):
    out = []
    for i, t in enumerate(topic_ids):
        fb = fallback_every is not None and i % fallback_every == 0
        out.append(RoutingDecision(i, -1 if fb else t, None if fb else -0.5, fb, "fallback"))
    return out


def random_trace(rng, n, n_topics, fallback_p=0.1):
    out = []
    for i in range(n):
        if rng.random() < fallback_p:
            out.append(RoutingDecision(i, -1, None, True, "fallback"))
        else:
            out.append(RoutingDecision(i, int(rng.integers(0, n_topics)), -0.4, False, "fallback"))
    return out


def test_single_node_owns_everything():
    assert place([3, 0, 7], 1) == {0: 0, 3: 0, 7: 0}


def test_hash_placement():
    assert place([0, 1, 2, 3, 4], 3, "hash") == {0: 0, 1: 1, 2: 2, 3: 0, 4: 1}


def test_round_robin_placement_deals_sorted_topics():
    assert place([9, 2, 5, 7], 2, "rr") == {2: 0, 5: 1, 7: 0, 9: 1}


def test_size_balanced_hand_trace():
    # oracle: greedy hand-trace; sizes 10,9,2,1 over two nodes -> loads 11/11
    sizes = {0: 10, 1: 9, 2: 2, 3: 1}
    got = place([0, 1, 2, 3], 2, "balanced", sizes=sizes)
    assert got == {0: 0, 1: 1, 2: 1, 3: 0}
    loads = [0, 0]
    for t, n in got.items():
        loads[n] += sizes[t]
    assert loads == [11, 11]


def test_placement_totality():
    rng = np.random.default_rng(0)
    topics = sorted(rng.choice(100, size=17, replace=False).tolist())
    for policy in PlacementPolicy:
        mapping = place(topics, 4, policy)
        assert sorted(mapping) == topics, "every topic mapped exactly once"
        assert all(0 <= n < 4 for n in mapping.values())


def test_place_rejects_negative_topic():
    with pytest.raises(ValueError, match=">= 0"):
        place([-1, 2], 2)


def test_topology_validation():
    with pytest.raises(ValueError, match="num_nodes"):
        Topology(num_nodes=0, cache_capacity=1)
    with pytest.raises(ValueError, match="cache_capacity"):
        Topology(num_nodes=1, cache_capacity=0)
    with pytest.raises(ValueError):
        Topology(num_nodes=1, cache_capacity=1, cost_hit=-1.0)
    with pytest.raises(ValueError):
        Topology(num_nodes=1, cache_capacity=1, policy="nonsense")


def test_empty_trace_all_zero():
    metrics = simulate([], Topology(num_nodes=3, cache_capacity=2))
    assert metrics.total_queries == 0
    assert metrics.routed_queries == 0
    assert metrics.fallback_queries == 0
    assert metrics.hits == metrics.misses == metrics.evictions == 0
    assert metrics.total_cost == 0.0
    assert metrics.unique_topics == 0
    assert metrics.hit_rate == 0.0


def test_node_lru_matches_reference_event_by_event():
    # oracle: independent LRU; compare outcome and full cache state per event
    rng = np.random.default_rng(1)
    requests = rng.integers(0, 12, size=1000).tolist()
    node = NodeState(capacity=4)
    ref = ReferenceLRU(capacity=4)
    for key in requests:
        got_hit = node.serve(int(key))
        want_hit = ref.request(int(key))
        assert got_hit == want_hit
        assert list(node.cache) == ref.keys()
        assert len(node.cache) <= 4
    assert (node.hits, node.misses, node.evictions) == (ref.hits, ref.misses, ref.evictions)


@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=1, max_value=6))
@settings(max_examples=40, deadline=None)
def test_node_lru_property(seed, capacity):
    rng = np.random.default_rng(seed)
    node = NodeState(capacity=capacity)
    ref = ReferenceLRU(capacity=capacity)
    for key in rng.integers(0, capacity + 3, size=200).tolist():
        assert node.serve(int(key)) == ref.request(int(key))
        assert list(node.cache) == ref.keys()


def test_simulate_aggregates_match_singlenode_lru():
    rng = np.random.default_rng(2)
    decisions = random_trace(rng, 600, n_topics=9, fallback_p=0.15)
    topo = Topology(num_nodes=1, cache_capacity=3)
    metrics = simulate(decisions, topo)
    ref = ReferenceLRU(capacity=3)
    fallbacks = 0
    for d in decisions:
        if d.fallback:
            fallbacks += 1
        else:
            ref.request(d.topic_id)
    assert metrics.hits == ref.hits
    assert metrics.misses == ref.misses
    assert metrics.evictions == ref.evictions
    assert metrics.fallback_queries == fallbacks


def test_cost_identity():
    rng = np.random.default_rng(3)
    for n_nodes, cap in [(1, 1), (2, 3), (4, 2)]:
        decisions = random_trace(rng, 400, n_topics=11, fallback_p=0.2)
        topo = Topology(num_nodes=n_nodes, cache_capacity=cap, cost_hit=1.5, cost_load=7.0)
        m = simulate(decisions, topo)
        expected = (
            m.hits * topo.cost_hit
            + m.misses * (topo.cost_hit + topo.cost_load)
            + m.fallback_queries * topo.cost_hit
        )
        assert m.total_cost == expected


def test_hit_rate_monotone_in_capacity():
    rng = np.random.default_rng(4)
    decisions = random_trace(rng, 800, n_topics=10, fallback_p=0.05)
    for policy in ("hash", "rr", "balanced"):
        rates = [
            simulate(decisions, Topology(num_nodes=2, cache_capacity=c, policy=policy)).hit_rate
            for c in range(1, 11)
        ]
        assert all(b >= a for a, b in zip(rates, rates[1:]))


def test_unique_topics_matches_recount():
    rng = np.random.default_rng(5)
    decisions = random_trace(rng, 300, n_topics=7, fallback_p=0.3)
    metrics = simulate(decisions, Topology(num_nodes=2, cache_capacity=2))
    assert metrics.unique_topics == len({d.topic_id for d in decisions if not d.fallback})


def test_fallbacks_never_touch_caches():
    decisions = [RoutingDecision(i, -1, None, True, "fallback") for i in range(10)]
    metrics = simulate(decisions, Topology(num_nodes=2, cache_capacity=2))
    assert metrics.fallback_queries == 10
    assert metrics.hits == metrics.misses == 0
    assert metrics.total_cost == 10 * 1.0
    assert all(row["queries"] == 0 for row in metrics.per_node)


def test_per_node_rows_sum_to_totals():
    rng = np.random.default_rng(6)
    decisions = random_trace(rng, 500, n_topics=8, fallback_p=0.1)
    metrics = simulate(decisions, Topology(num_nodes=3, cache_capacity=2))
    assert sum(r["queries"] for r in metrics.per_node) == metrics.routed_queries
    assert sum(r["hits"] for r in metrics.per_node) == metrics.hits
    assert sum(r["misses"] for r in metrics.per_node) == metrics.misses


def test_explicit_placement_validated():
    decisions = trace([0, 1, 2])
    topo = Topology(num_nodes=2, cache_capacity=2)
    with pytest.raises(ValueError, match="missing topics"):
        simulate(decisions, topo, placement={0: 0, 1: 1})
    with pytest.raises(ValueError, match="nonexistent nodes"):
        simulate(decisions, topo, placement={0: 0, 1: 1, 2: 5})


def test_placement_routes_to_owning_node():
    decisions = trace([0, 0, 1, 1])
    metrics = simulate(decisions, Topology(num_nodes=2, cache_capacity=1), placement={0: 1, 1: 0})
    by_node = {r["node"]: r["queries"] for r in metrics.per_node}
    assert by_node == {0: 2, 1: 2}


def test_metrics_json_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    metrics = simulate(random_trace(rng, 100, 5), Topology(num_nodes=2, cache_capacity=2))
    p = tmp_path / "metrics.json"
    save_metrics(metrics, p)
    assert load_metrics(p) == metrics


def test_render_mentions_nodes_and_hit_rate():
    rng = np.random.default_rng(8)
    metrics = simulate(random_trace(rng, 50, 4), Topology(num_nodes=2, cache_capacity=2))
    text = metrics.render()
    assert "hit rate" in text
    assert "node 0:" in text and "node 1:" in text
