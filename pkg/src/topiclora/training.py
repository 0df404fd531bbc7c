"""Per-topic expert training and the embarrassingly-parallel orchestrator.

Each retained topic gets its own shard of the corpus and its own training
job. Jobs share nothing: the base model is frozen, seeds and data order
are derived from (recipe seed, topic id), and every worker pins itself to
one torch thread. Training the same shard in any scheduling order, with
any worker count, therefore produces bitwise-identical adapters.

Orchestration runs one spawned process per shard with bounded concurrency.
Workers write their outputs to temp files and commit with an atomic
rename, the report last, so a killed worker leaves no final files and is
recorded as failed in the manifest while the remaining jobs complete.
"""

from __future__ import annotations

import json
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import Document, load_corpus, save_corpus
from .lm import (
    TinyCausalLM, batch_tensors, cosine_lr, lm_loss, load_base, pack_windows,
    save_base,
)
from .lora import LoraAdapter, adapter_filename, init_adapter, save_adapter

KILL_ENV = "TOPICLORA_KILL_TOPICS"  # test hook: comma-separated topic ids to die on


@dataclass
class TrainRecipe:
    lr_max: float = 4e-4
    lr_min: float = 4e-5
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    epochs: int = 1
    micro_batch: int = 4
    grad_accum: int = 4
    grad_clip: float | None = None
    rank: int = 8
    seed: int = 0

    def __post_init__(self):
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.lr_max <= 0 or self.lr_min <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min ({self.lr_min}) exceeds lr_max ({self.lr_max})")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.micro_batch < 1 or self.grad_accum < 1:
            raise ValueError("micro_batch and grad_accum must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.grad_accum

    def to_json(self) -> dict:
        return {
            "lr_max": self.lr_max, "lr_min": self.lr_min, "betas": list(self.betas),
            "weight_decay": self.weight_decay, "epochs": self.epochs,
            "micro_batch": self.micro_batch, "grad_accum": self.grad_accum,
            "grad_clip": self.grad_clip, "rank": self.rank, "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainRecipe":
        obj = dict(obj)
        obj["betas"] = tuple(obj.get("betas", (0.9, 0.95)))
        return cls(**obj)


def derive_seed(base_seed: int, topic_id: int, stream: int = 0) -> int:
    """Mix (base seed, topic id) into an independent per-topic seed."""
    state = np.random.SeedSequence([base_seed, topic_id, stream]).generate_state(1, np.uint64)
    return int(state[0])


@dataclass
class TopicShard:
    topic_id: int
    docs: list[Document]

    def __post_init__(self):
        if self.topic_id < 0:
            raise ValueError(f"topic_id must be >= 0, got {self.topic_id}")


def shard_corpus(
    docs: Sequence[Document], labels: Sequence[int],
    retained: Sequence[bool] | None = None,
) -> list[TopicShard]:
    """Group documents by assigned topic; pruned topics get no shard."""
    if len(docs) != len(labels):
        raise ValueError(f"{len(docs)} documents but {len(labels)} labels")
    by_topic: dict[int, list[Document]] = {}
    for doc, label in zip(docs, labels):
        by_topic.setdefault(int(label), []).append(doc)
    shards = []
    for topic_id in sorted(by_topic):
        if retained is not None and not retained[topic_id]:
            continue
        members = sorted(by_topic[topic_id], key=lambda d: d.doc_id)
        shards.append(TopicShard(topic_id=topic_id, docs=members))
    return shards


def split_for_validation(
    shard: TopicShard, fraction: float = 0.1, seed: int = 0
) -> tuple[TopicShard, TopicShard]:
    """Deterministically hold out a fraction of a shard before training.

    Shards with a single document keep it for training and get an empty
    holdout. Selection depends only on (seed, topic_id, doc count).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(shard.docs)
    if n < 2:
        return shard, TopicShard(shard.topic_id, [])
    n_hold = min(n - 1, max(1, int(round(fraction * n))))
    rng = np.random.default_rng([seed, shard.topic_id, 77])
    picks = set(rng.permutation(n)[:n_hold].tolist())
    train = [d for i, d in enumerate(shard.docs) if i not in picks]
    hold = [d for i, d in enumerate(shard.docs) if i in picks]
    return TopicShard(shard.topic_id, train), TopicShard(shard.topic_id, hold)


@dataclass
class TrainReport:
    topic_id: int
    rank: int
    steps: int
    tokens_seen: int
    final_loss: float
    loss_curve: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "topic_id": self.topic_id, "rank": self.rank, "steps": self.steps,
            "tokens_seen": self.tokens_seen, "final_loss": self.final_loss,
            "loss_curve": self.loss_curve,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainReport":
        return cls(**obj)


def train_expert(
    model: TinyCausalLM, shard: TopicShard, recipe: TrainRecipe
) -> tuple[LoraAdapter, TrainReport]:
    """Train one adapter on one shard against the frozen base.

    Runs single-threaded regardless of ambient torch settings so results
    do not depend on which worker slot the shard landed in. The final
    short batch of an epoch is trained like any other.
    """
    if not model.frozen:
        raise RuntimeError("base model must be frozen before expert training")
    if not shard.docs:
        raise ValueError(f"shard for topic {shard.topic_id} has no documents")
    windows = pack_windows(shard.docs, model.config.context_len)
    if not windows:
        raise ValueError(f"shard for topic {shard.topic_id} has no trainable windows")

    saved_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        adapter = init_adapter(
            model, shard.topic_id, recipe.rank, derive_seed(recipe.seed, shard.topic_id)
        )
        adapter.requires_grad_(True)
        optimizer = torch.optim.AdamW(
            list(adapter.parameters()), lr=recipe.lr_max,
            betas=recipe.betas, weight_decay=recipe.weight_decay,
        )
        rng = np.random.default_rng([recipe.seed, shard.topic_id, 1])
        group_size = recipe.effective_batch
        groups_per_epoch = math.ceil(len(windows) / group_size)
        total_steps = groups_per_epoch * recipe.epochs

        loss_curve: list[float] = []
        tokens_seen = 0
        step = 0
        for _ in range(recipe.epochs):
            order = rng.permutation(len(windows))
            for g in range(groups_per_epoch):
                group = order[g * group_size:(g + 1) * group_size]
                micros = [
                    group[m:m + recipe.micro_batch]
                    for m in range(0, len(group), recipe.micro_batch)
                ]
                lr = cosine_lr(step, total_steps, recipe.lr_max, recipe.lr_min)
                for param_group in optimizer.param_groups:
                    param_group["lr"] = lr
                optimizer.zero_grad()
                group_loss = 0.0
                for micro in micros:
                    inputs, targets = batch_tensors([windows[i] for i in micro])
                    loss = lm_loss(model(inputs, adapter), targets)
                    (loss / len(micros)).backward()
                    group_loss += float(loss.detach()) / len(micros)
                    tokens_seen += int((targets != -100).sum())
                if recipe.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(adapter.parameters(), recipe.grad_clip)
                optimizer.step()
                loss_curve.append(group_loss)
                step += 1
        report = TrainReport(
            topic_id=shard.topic_id, rank=recipe.rank, steps=total_steps,
            tokens_seen=tokens_seen, final_loss=loss_curve[-1], loss_curve=loss_curve,
        )
        trained = adapter.detach()
        trained.tokens_seen = tokens_seen
        trained.final_loss = loss_curve[-1]
        return trained, report
    finally:
        torch.set_num_threads(saved_threads)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    topic_id: int
    status: str  # "ok" | "failed"
    path: str | None
    tokens_seen: int | None
    final_loss: float | None

    def to_json(self) -> dict:
        return {
            "topic_id": self.topic_id, "status": self.status, "path": self.path,
            "tokens_seen": self.tokens_seen, "final_loss": self.final_loss,
        }


def save_manifest(entries: Sequence[ManifestEntry], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in sorted(entries, key=lambda e: e.topic_id):
            fh.write(json.dumps(entry.to_json()) + "\n")


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    entries = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(ManifestEntry(**json.loads(line)))
    return entries


# ---------------------------------------------------------------------------
# Process-per-shard orchestration
# ---------------------------------------------------------------------------

def _report_path(out_dir: Path, topic_id: int) -> Path:
    return out_dir / f"topic_{topic_id:05d}.report.json"


def run_worker(base_path: str, shard_path: str, recipe_json: str, out_dir: str,
               topic_id: int) -> None:
    """Entry point executed inside a spawned worker process."""
    kill = os.environ.get(KILL_ENV, "")
    if kill and topic_id in {int(t) for t in kill.split(",") if t.strip()}:
        os._exit(9)  # simulate a hard crash before any output is committed
    model = load_base(base_path)
    docs = [d for d in load_corpus(shard_path)]
    shard = TopicShard(topic_id=topic_id, docs=docs)
    recipe = TrainRecipe.from_json(json.loads(recipe_json))
    adapter, report = train_expert(model, shard, recipe)

    out = Path(out_dir)
    adapter_path = out / adapter_filename(topic_id)
    tmp_adapter = adapter_path.with_suffix(".lora.tmp")
    save_adapter(adapter, tmp_adapter)
    os.replace(tmp_adapter, adapter_path)
    report_path = _report_path(out, topic_id)
    tmp_report = report_path.with_suffix(".json.tmp")
    tmp_report.write_text(json.dumps(report.to_json()) + "\n", encoding="utf-8")
    os.replace(tmp_report, report_path)


def train_all(
    model: TinyCausalLM,
    shards: Sequence[TopicShard],
    recipe: TrainRecipe,
    out_dir: str | Path,
    max_workers: int = 1,
    holdout_fraction: float = 0.1,
) -> list[ManifestEntry]:
    """Train every shard in its own process and write the run manifest.

    Shard payloads and split holdouts are materialized under
    ``out_dir/shards`` first, then up to ``max_workers`` workers run
    concurrently. A worker that exits abnormally (including SIGKILL) marks
    its topic failed without disturbing the others.
    """
    if max_workers < 1:
        raise ValueError(f"max_workers must be >= 1, got {max_workers}")
    seen = [s.topic_id for s in shards]
    if len(set(seen)) != len(seen):
        raise ValueError("duplicate topic_id among shards")
    out = Path(out_dir)
    shard_dir = out / "shards"
    shard_dir.mkdir(parents=True, exist_ok=True)
    base_path = out / "base.model"
    save_base(model, base_path)

    jobs: list[tuple[int, Path]] = []
    for shard in sorted(shards, key=lambda s: s.topic_id):
        train, hold = split_for_validation(shard, holdout_fraction, recipe.seed)
        train_path = shard_dir / f"topic_{shard.topic_id:05d}.train.jsonl"
        hold_path = shard_dir / f"topic_{shard.topic_id:05d}.holdout.jsonl"
        save_corpus(train.docs, train_path)
        save_corpus(hold.docs, hold_path)
        jobs.append((shard.topic_id, train_path))

    recipe_json = json.dumps(recipe.to_json())
    pending = list(jobs)
    running: list[tuple[int, subprocess.Popen]] = []
    failures: dict[int, int] = {}
    while pending or running:
        while pending and len(running) < max_workers:
            topic_id, train_path = pending.pop(0)
            proc = subprocess.Popen([
                sys.executable, "-m", "topiclora._worker",
                str(base_path), str(train_path), recipe_json, str(out), str(topic_id),
            ])
            running.append((topic_id, proc))
        time.sleep(0.02)
        still = []
        for topic_id, proc in running:
            code = proc.poll()
            if code is None:
                still.append((topic_id, proc))
            elif code != 0:
                failures[topic_id] = code
        running = still

    entries = []
    for topic_id, _ in jobs:
        adapter_path = out / adapter_filename(topic_id)
        report_path = _report_path(out, topic_id)
        if topic_id not in failures and adapter_path.exists() and report_path.exists():
            report = TrainReport.from_json(json.loads(report_path.read_text()))
            entries.append(ManifestEntry(
                topic_id=topic_id, status="ok", path=adapter_path.name,
                tokens_seen=report.tokens_seen, final_loss=report.final_loss,
            ))
        else:
            entries.append(ManifestEntry(
                topic_id=topic_id, status="failed", path=None,
                tokens_seen=None, final_loss=None,
            ))
    save_manifest(entries, out / "manifest.jsonl")
    return entries
