"""Nearest-centroid query routing.

A query is embedded with the same hashed n-gram embedder used for
clustering and sent to the expert of the closest centroid (Euclidean).
Two modes differ in how pruned topics are treated:

* ``fallback``: the nearest centroid is found over *all* topics; if that
  topic was pruned the query is answered by the bare base model and the
  decision records which pruned topic it landed on.
* ``always``: the nearest centroid is found over retained topics only, so
  every query gets an expert.

Queries whose embedding is degenerate (no n-grams, zero vector) fall back
in both modes with ``topic_id`` -1 and no similarity. Reported similarity
is the negated Euclidean distance, so higher means closer. Distance ties
resolve to the lowest topic index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding import HashedNgramEmbedder, is_degenerate
from .topics import TopicKMeans, squared_distances

MAX_QUERY_CHARS = 4096


class RoutingMode(str, Enum):
    FALLBACK = "fallback"
    ALWAYS_ROUTE = "always"


@dataclass
class RoutingDecision:
    query_id: int
    topic_id: int  # -1 when the embedding was degenerate
    similarity: float | None  # -distance to the chosen centroid; None if degenerate
    fallback: bool
    mode: str

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id, "topic_id": self.topic_id,
            "similarity": self.similarity, "fallback": self.fallback, "mode": self.mode,
        }


class Router:
    """Route queries to per-topic experts by nearest centroid."""

    def __init__(
        self,
        topic_model: TopicKMeans,
        embedder: HashedNgramEmbedder,
        mode: RoutingMode | str = RoutingMode.FALLBACK,
        max_query_chars: int = MAX_QUERY_CHARS,
    ):
        if getattr(topic_model, "cluster_centers_", None) is None:
            raise ValueError("topic model is not fitted")
        self.mode = RoutingMode(mode)
        self.topic_model = topic_model
        self.embedder = embedder
        self.max_query_chars = max_query_chars
        centers = topic_model.cluster_centers_
        if centers.shape[1] != embedder.dim:
            raise ValueError(
                f"embedder dimension {embedder.dim} != centroid dimension {centers.shape[1]}"
            )
        self._centers = np.asarray(centers, dtype=np.float64)
        self._retained = np.asarray(topic_model.retained_, dtype=bool)
        if not self._retained.any():
            raise ValueError("no retained topics to route to")

    def route(self, query_id: int, text: str) -> RoutingDecision:
        if not isinstance(text, str):
            raise TypeError(f"query text must be str, got {type(text).__name__}")
        vec = self.embedder.embed(text[: self.max_query_chars])
        if is_degenerate(vec):
            return RoutingDecision(query_id, -1, None, True, self.mode.value)
        d2 = squared_distances(vec[None, :].astype(np.float64), self._centers)[0]
        if self.mode is RoutingMode.ALWAYS_ROUTE:
            masked = np.where(self._retained, d2, np.inf)
            topic = int(np.argmin(masked))
            fallback = False
        else:
            topic = int(np.argmin(d2))
            fallback = not bool(self._retained[topic])
        similarity = -float(np.sqrt(max(d2[topic], 0.0)))
        return RoutingDecision(query_id, topic, similarity, fallback, self.mode.value)

    def route_batch(self, queries: Iterable[tuple[int, str]]) -> list[RoutingDecision]:
        return [self.route(qid, text) for qid, text in queries]

    def inspect(self, query_id: int, text: str, max_text_chars: int = 60) -> str:
        """One human-readable line: query snippet, destination, similarity."""
        decision = self.route(query_id, text)
        snippet = text[:max_text_chars].replace("\n", " ")
        if len(text) > max_text_chars:
            snippet += "..."
        if decision.topic_id == -1:
            dest = "BASE (no expert): degenerate query embedding"
            return f"[{query_id}] {snippet!r} -> {dest}"
        keywords = None
        if self.topic_model.keywords_ is not None:
            keywords = self.topic_model.keywords_[decision.topic_id]
        label = f"topic {decision.topic_id}"
        if keywords:
            label += " [" + ", ".join(keywords) + "]"
        if decision.fallback:
            dest = f"BASE (no expert): nearest {label} was pruned"
        else:
            dest = label
        return f"[{query_id}] {snippet!r} -> {dest} (similarity {decision.similarity:.4f})"


@dataclass
class RoutingStats:
    total: int
    fallback_count: int
    per_topic: dict[int, int]

    @property
    def fallback_rate(self) -> float:
        return self.fallback_count / self.total if self.total else 0.0


def summarize_decisions(decisions: Sequence[RoutingDecision]) -> RoutingStats:
    per_topic: dict[int, int] = {}
    fallback_count = 0
    for d in decisions:
        if d.fallback:
            fallback_count += 1
        else:
            per_topic[d.topic_id] = per_topic.get(d.topic_id, 0) + 1
    return RoutingStats(len(decisions), fallback_count, per_topic)


def save_decisions(decisions: Sequence[RoutingDecision], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_json()) + "\n")


def load_decisions(path: str | Path) -> list[RoutingDecision]:
    decisions = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                decisions.append(RoutingDecision(
                    query_id=obj["query_id"], topic_id=obj["topic_id"],
                    similarity=obj["similarity"], fallback=obj["fallback"],
                    mode=obj["mode"],
                ))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: bad decision on line {lineno}: {exc}") from None
    return decisions
