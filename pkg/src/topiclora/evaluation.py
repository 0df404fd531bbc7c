"""Perplexity and multiple-choice evaluation under routed experts.

Every variant walks documents in corpus order and accumulates NLL in
float64, so results are deterministic and the base-only variant is
bitwise-reproducible: routing with no adapters available takes the exact
same scoring path (adapter None per document) as scoring the bare model.

Multiple-choice items route on the prompt alone; options never influence
routing. An option's score is the sum of log-probabilities of its tokens
conditioned on the prompt, divided by the option token count. The
prediction is the argmax, ties to the lowest option index.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Document, McItem, load_corpus, tokenize
from .lm import TinyCausalLM, _doc_nll
from .lora import AdapterRegistry, LoraAdapter
from .routing import Router, RoutingDecision


@dataclass
class PerplexityResult:
    perplexity: float
    total_tokens: int
    num_docs: int
    fallback_count: int
    unique_adapters: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "perplexity": self.perplexity, "total_tokens": self.total_tokens,
            "num_docs": self.num_docs, "fallback_count": self.fallback_count,
            "unique_adapters": self.unique_adapters,
        }


@dataclass
class McResult:
    accuracy: float
    correct: int
    total: int
    fallback_count: int
    unique_adapters: list[int] = field(default_factory=list)
    predictions: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy, "correct": self.correct, "total": self.total,
            "fallback_count": self.fallback_count,
            "unique_adapters": self.unique_adapters, "predictions": self.predictions,
        }


def _resolve_adapter(
    registry: AdapterRegistry | None, decision: RoutingDecision | None
) -> LoraAdapter | None:
    """The adapter a decision lands on; None means the bare base model."""
    if decision is None or decision.fallback or registry is None:
        return None
    return registry.get(decision.topic_id)


def eval_perplexity(
    model: TinyCausalLM,
    registry: AdapterRegistry | None,
    router: Router | None,
    docs: Sequence[Document],
) -> PerplexityResult:
    """Routed corpus perplexity; pass router=None for the base-only variant."""
    docs = list(docs)
    if not docs:
        raise ValueError("validation corpus is empty")
    total_nll = 0.0
    total_tokens = 0
    fallback_count = 0
    used: set[int] = set()
    with torch.no_grad():
        for doc in docs:
            decision = router.route(doc.doc_id, doc.text) if router is not None else None
            adapter = _resolve_adapter(registry, decision)
            if decision is not None and decision.fallback:
                fallback_count += 1
            if adapter is not None:
                used.add(adapter.topic_id)
            nll, count = _doc_nll(model, adapter, doc.token_ids)
            total_nll += nll
            total_tokens += count
    if total_tokens == 0:
        raise ValueError("validation corpus contains no predictable tokens")
    return PerplexityResult(
        perplexity=math.exp(total_nll / total_tokens),
        total_tokens=total_tokens,
        num_docs=len(docs),
        fallback_count=fallback_count,
        unique_adapters=sorted(used),
    )


def score_option(
    model: TinyCausalLM,
    adapter: LoraAdapter | None,
    prompt_ids: Sequence[int],
    option_ids: Sequence[int],
) -> float:
    """Length-normalized log-likelihood of option tokens given the prompt.

    When prompt + option exceed the context window, the prompt is truncated
    from the left; the option must fit with at least one context token.
    """
    if not option_ids:
        raise ValueError("option has no tokens")
    ctx = model.config.context_len
    if len(option_ids) >= ctx:
        raise ValueError(
            f"option of {len(option_ids)} tokens does not fit context_len {ctx}"
        )
    ids = list(prompt_ids) + list(option_ids)
    if len(ids) > ctx:
        ids = ids[-ctx:]
    inputs = torch.tensor(ids[:-1], dtype=torch.long)
    targets = torch.tensor(ids[1:], dtype=torch.long)
    logits = model(inputs, adapter)
    logprobs = F.log_softmax(logits, dim=-1)
    picked = logprobs[torch.arange(len(targets)), targets]
    tail = picked[-len(option_ids):]
    return float(tail.sum()) / len(option_ids)


def eval_mc(
    model: TinyCausalLM,
    registry: AdapterRegistry | None,
    router: Router | None,
    items: Sequence[McItem],
) -> McResult:
    """Zero-shot multiple-choice accuracy; pass router=None for base-only."""
    items = list(items)
    if not items:
        raise ValueError("no multiple-choice items to evaluate")
    correct = 0
    fallback_count = 0
    used: set[int] = set()
    predictions = []
    with torch.no_grad():
        for item in items:
            decision = router.route(item.item_id, item.prompt) if router is not None else None
            adapter = _resolve_adapter(registry, decision)
            if decision is not None and decision.fallback:
                fallback_count += 1
            if adapter is not None:
                used.add(adapter.topic_id)
            prompt_ids = tokenize(item.prompt)[:-1]  # keep BOS + bytes, drop EOS
            scores = [
                score_option(model, adapter, prompt_ids, list(opt.encode("utf-8")))
                for opt in item.options
            ]
            predicted = int(np.argmax(scores))  # ties resolve to the lowest index
            if predicted == item.gold_index:
                correct += 1
            predictions.append({
                "item_id": item.item_id,
                "topic_id": decision.topic_id if decision is not None else None,
                "fallback": decision.fallback if decision is not None else None,
                "scores": scores,
                "predicted": predicted,
                "gold": item.gold_index,
            })
    return McResult(
        accuracy=correct / len(items),
        correct=correct,
        total=len(items),
        fallback_count=fallback_count,
        unique_adapters=sorted(used),
        predictions=predictions,
    )


# ---------------------------------------------------------------------------
# Per-expert diagnostics
# ---------------------------------------------------------------------------

def load_holdouts(shards_dir: str | Path) -> dict[int, list[Document]]:
    """Read the per-topic holdout files written at training time."""
    holdouts: dict[int, list[Document]] = {}
    for path in sorted(Path(shards_dir).glob("topic_*.holdout.jsonl")):
        topic_id = int(path.name.split(".")[0].split("_")[1])
        holdouts[topic_id] = list(load_corpus(path, split="validation"))
    if not holdouts:
        raise ValueError(f"no holdout files under {shards_dir}")
    return holdouts


def _topic_perplexity(
    model: TinyCausalLM, adapter: LoraAdapter | None, docs: Sequence[Document]
) -> float:
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for doc in docs:
            nll, count = _doc_nll(model, adapter, doc.token_ids)
            total_nll += nll
            total_tokens += count
    return math.exp(total_nll / total_tokens)


def per_expert_perplexity(
    model: TinyCausalLM,
    registry: AdapterRegistry,
    holdouts: dict[int, list[Document]],
) -> list[tuple[int, float]]:
    """Each trained expert scored on its own holdout, sorted best-first.

    Topics with an empty holdout or no trained adapter are skipped with a
    warning; the sorted tail exposes underperforming experts.
    """
    results = []
    for topic_id in sorted(holdouts):
        docs = holdouts[topic_id]
        if not docs:
            warnings.warn(f"topic {topic_id} has no holdout documents; skipped")
            continue
        adapter = registry.get(topic_id)
        if adapter is None:
            warnings.warn(f"topic {topic_id} has no trained adapter; skipped")
            continue
        results.append((topic_id, _topic_perplexity(model, adapter, docs)))
    results.sort(key=lambda pair: (pair[1], pair[0]))
    return results


def cross_perplexity_matrix(
    model: TinyCausalLM,
    registry: AdapterRegistry,
    holdouts: dict[int, list[Document]],
) -> tuple[list[int], np.ndarray]:
    """Matrix of expert-i perplexity on topic-j holdout (rows experts, cols topics).

    Only topics that have both an adapter and a non-empty holdout appear.
    The diagonal holds matched-expert scores.
    """
    topics = [
        t for t in sorted(holdouts)
        if holdouts[t] and registry.get(t) is not None
    ]
    if not topics:
        raise ValueError("no topics with both an adapter and holdout documents")
    matrix = np.zeros((len(topics), len(topics)), dtype=np.float64)
    for i, expert_topic in enumerate(topics):
        adapter = registry.get(expert_topic)
        for j, eval_topic in enumerate(topics):
            matrix[i, j] = _topic_perplexity(model, adapter, holdouts[eval_topic])
    return topics, matrix


def docs_per_topic(labels: Sequence[int], n_topics: int) -> np.ndarray:
    """Exact document counts per topic over all n_topics (pruned included)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_topics):
        raise ValueError("label outside [0, n_topics)")
    return np.bincount(labels, minlength=n_topics)


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------

def _bar(value: float, peak: float, width: int = 40) -> str:
    if peak <= 0:
        return ""
    return "#" * max(0, round(width * value / peak))


def render_docs_histogram(
    counts: Sequence[int], retained: Sequence[bool] | None = None, width: int = 40
) -> str:
    counts = list(counts)
    peak = max(counts) if counts else 0
    lines = [f"documents per topic (total {sum(counts)})"]
    for topic_id, count in enumerate(counts):
        flag = ""
        if retained is not None and not retained[topic_id]:
            flag = "  (pruned)"
        lines.append(f"  topic {topic_id:>4}: {count:>6} {_bar(count, peak, width)}{flag}")
    return "\n".join(lines)


def render_per_expert(pairs: Sequence[tuple[int, float]], width: int = 40) -> str:
    lines = ["per-expert holdout perplexity (sorted ascending)"]
    if not pairs:
        return lines[0] + "\n  (none)"
    peak = max(p for _, p in pairs)
    for topic_id, ppl in pairs:
        lines.append(f"  topic {topic_id:>4}: {ppl:>9.4f} {_bar(ppl, peak, width)}")
    return "\n".join(lines)


def render_report(report: dict) -> str:
    """Plain-text rendering of the full report bundle."""
    lines = ["== corpus perplexity =="]
    for variant, stats in report.get("perplexity", {}).items():
        extra = ""
        if stats.get("fallback_count") is not None:
            extra = (f"  (fallback {stats['fallback_count']}/{stats['num_docs']}, "
                     f"{len(stats.get('unique_adapters', []))} unique adapters)")
        lines.append(f"  {variant:<10} {stats['perplexity']:.4f}{extra}")
    if "mc" in report:
        lines.append("")
        lines.append("== multiple-choice accuracy ==")
        for variant, stats in report["mc"].items():
            lines.append(
                f"  {variant:<10} {stats['accuracy']:.4f} "
                f"({stats['correct']}/{stats['total']}, "
                f"{len(stats.get('unique_adapters', []))} unique adapters)"
            )
    if "keywords" in report:
        lines.append("")
        lines.append("== topic keywords ==")
        for topic_id, words in report["keywords"].items():
            lines.append(f"  topic {topic_id}: {', '.join(words)}")
    if "per_expert_perplexity" in report:
        lines.append("")
        lines.append(render_per_expert([tuple(p) for p in report["per_expert_perplexity"]]))
    if "docs_per_topic" in report:
        lines.append("")
        lines.append(render_docs_histogram(
            report["docs_per_topic"], report.get("retained")
        ))
    if "serving" in report:
        lines.append("")
        lines.append("== serving ==")
        serving = report["serving"]
        lines.append(
            f"  {serving['routed_queries']} routed queries over "
            f"{serving['unique_topics']} unique adapters, hits {serving['hits']}, "
            f"loads {serving['misses']}, cost {serving['total_cost']:g}"
        )
    return "\n".join(lines) + "\n"
