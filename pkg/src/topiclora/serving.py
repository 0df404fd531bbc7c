"""Multi-node adapter-serving simulation with per-node LRU caches.

Experts are placed on nodes by a static policy, then a trace of routing
decisions is replayed: each routed query goes to the node owning its
topic, costing ``cost_hit`` when the adapter is cached and
``cost_hit + cost_load`` when it must be fetched (evicting the least
recently used adapter if the cache is full). Fallback queries go to the
base-model node, cost one hit, and never touch a cache.

Everything is deterministic: the same trace and topology always produce
the same metrics, and the total cost satisfies

    total == hits * cost_hit + misses * (cost_hit + cost_load)
             + fallbacks * cost_hit
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .routing import RoutingDecision


class PlacementPolicy(str, Enum):
    HASH = "hash"
    ROUND_ROBIN = "rr"
    SIZE_BALANCED = "balanced"


@dataclass
class Topology:
    num_nodes: int
    cache_capacity: int  # adapters per node
    policy: PlacementPolicy | str = PlacementPolicy.HASH
    cost_hit: float = 1.0
    cost_load: float = 10.0

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValueError(f"num_nodes must be >= 1, got {self.num_nodes}")
        if self.cache_capacity < 1:
            raise ValueError(f"cache_capacity must be >= 1, got {self.cache_capacity}")
        if self.cost_hit < 0 or self.cost_load < 0:
            raise ValueError("costs must be non-negative")
        self.policy = PlacementPolicy(self.policy)


def place(
    topic_ids: Sequence[int],
    num_nodes: int,
    policy: PlacementPolicy | str = PlacementPolicy.HASH,
    sizes: Mapping[int, int] | None = None,
) -> dict[int, int]:
    """Assign each topic's adapter to a node.

    hash: node = topic_id % num_nodes.
    rr: topics in ascending order, dealt round-robin.
    balanced: largest adapter first onto the least-loaded node; ties break
    to the lower node index, equal sizes to the lower topic_id.
    """
    policy = PlacementPolicy(policy)
    if num_nodes < 1:
        raise ValueError(f"num_nodes must be >= 1, got {num_nodes}")
    topics = sorted(set(int(t) for t in topic_ids))
    if any(t < 0 for t in topics):
        raise ValueError("topic ids must be >= 0")
    if policy is PlacementPolicy.HASH:
        return {t: t % num_nodes for t in topics}
    if policy is PlacementPolicy.ROUND_ROBIN:
        return {t: i % num_nodes for i, t in enumerate(topics)}
    loads = [0] * num_nodes
    assignment: dict[int, int] = {}
    by_size = sorted(topics, key=lambda t: (-(sizes[t] if sizes else 1), t))
    for t in by_size:
        node = min(range(num_nodes), key=lambda n: (loads[n], n))
        assignment[t] = node
        loads[node] += sizes[t] if sizes else 1
    return assignment


class NodeState:
    """One serving node: an LRU cache of adapters, keyed by topic id."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.cache: OrderedDict[int, None] = OrderedDict()
        self.queries = 0
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def serve(self, topic_id: int) -> bool:
        """Serve one query for a topic; returns True on a cache hit."""
        self.queries += 1
        if topic_id in self.cache:
            self.cache.move_to_end(topic_id)
            self.hits += 1
            return True
        if len(self.cache) >= self.capacity:
            self.cache.popitem(last=False)
            self.evictions += 1
        self.cache[topic_id] = None
        self.misses += 1
        return False


@dataclass
class ServingMetrics:
    num_nodes: int
    cache_capacity: int
    policy: str
    cost_hit: float
    cost_load: float
    total_queries: int
    routed_queries: int
    fallback_queries: int
    hits: int
    misses: int
    evictions: int
    unique_topics: int
    total_cost: float
    per_node: list[dict] = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        return self.hits / self.routed_queries if self.routed_queries else 0.0

    def to_json(self) -> dict:
        return {
            "num_nodes": self.num_nodes, "cache_capacity": self.cache_capacity,
            "policy": self.policy, "cost_hit": self.cost_hit,
            "cost_load": self.cost_load, "total_queries": self.total_queries,
            "routed_queries": self.routed_queries,
            "fallback_queries": self.fallback_queries, "hits": self.hits,
            "misses": self.misses, "evictions": self.evictions,
            "unique_topics": self.unique_topics, "total_cost": self.total_cost,
            "per_node": self.per_node,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ServingMetrics":
        return cls(**obj)

    def render(self) -> str:
        lines = [
            f"serving simulation: {self.num_nodes} nodes, cache {self.cache_capacity} "
            f"adapters/node, placement {self.policy}",
            f"  queries: {self.total_queries} total, {self.routed_queries} routed, "
            f"{self.fallback_queries} fallback to base",
            f"  unique adapters touched: {self.unique_topics}",
            f"  cache: {self.hits} hits, {self.misses} loads, {self.evictions} "
            f"evictions (hit rate {self.hit_rate:.3f})",
            f"  cost: {self.total_cost:g} "
            f"(hit={self.cost_hit:g}, load={self.cost_load:g})",
        ]
        for row in self.per_node:
            lines.append(
                f"  node {row['node']}: queries={row['queries']} hits={row['hits']} "
                f"misses={row['misses']} evictions={row['evictions']}"
            )
        return "\n".join(lines)


def simulate(
    decisions: Sequence[RoutingDecision],
    topology: Topology,
    placement: Mapping[int, int] | None = None,
) -> ServingMetrics:
    """Replay a routing trace against a topology and report cache behavior.

    When no placement is given, one is computed from the set of routed
    topics in the trace using the topology's policy.
    """
    routed_topics = sorted({d.topic_id for d in decisions if not d.fallback})
    if placement is None:
        placement = place(routed_topics, topology.num_nodes, topology.policy)
    else:
        missing = [t for t in routed_topics if t not in placement]
        if missing:
            raise ValueError(f"placement is missing topics {missing}")
        bad = [n for n in placement.values() if not 0 <= n < topology.num_nodes]
        if bad:
            raise ValueError(f"placement references nonexistent nodes {sorted(set(bad))}")

    nodes = [NodeState(topology.cache_capacity) for _ in range(topology.num_nodes)]
    fallback_queries = 0
    total_cost = 0.0
    for d in decisions:
        if d.fallback:
            fallback_queries += 1
            total_cost += topology.cost_hit
            continue
        hit = nodes[placement[d.topic_id]].serve(d.topic_id)
        total_cost += topology.cost_hit if hit else topology.cost_hit + topology.cost_load

    per_node = [
        {"node": i, "queries": n.queries, "hits": n.hits, "misses": n.misses,
         "evictions": n.evictions}
        for i, n in enumerate(nodes)
    ]
    return ServingMetrics(
        num_nodes=topology.num_nodes,
        cache_capacity=topology.cache_capacity,
        policy=topology.policy.value,
        cost_hit=topology.cost_hit,
        cost_load=topology.cost_load,
        total_queries=len(decisions),
        routed_queries=len(decisions) - fallback_queries,
        fallback_queries=fallback_queries,
        hits=sum(n.hits for n in nodes),
        misses=sum(n.misses for n in nodes),
        evictions=sum(n.evictions for n in nodes),
        unique_topics=len(routed_topics),
        total_cost=total_cost,
        per_node=per_node,
    )


def save_metrics(metrics: ServingMetrics, path: str | Path) -> None:
    Path(path).write_text(json.dumps(metrics.to_json(), indent=2) + "\n", encoding="utf-8")


def load_metrics(path: str | Path) -> ServingMetrics:
    return ServingMetrics.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
