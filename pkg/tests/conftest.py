"""Shared fixtures.

The `acc_*` fixtures build the acceptance-scale pipeline (8 planted topics,
300 docs each, pretrained base, one trained expert per topic). They are
session-scoped because the base pretrain takes about a minute and several
acceptance criteria share the artifacts.
"""

from __future__ import annotations

import time
from types import SimpleNamespace

import pytest

from topiclora import (
    AdapterRegistry,
    HashedNgramEmbedder,
    ModelConfig,
    TinyCausalLM,
    TopicKMeans,
    TrainRecipe,
    base_checksum,
    make_synthetic_corpus,
    make_synthetic_mc,
    pretrain,
    shard_corpus,
    train_all,
)

ACC = dict(topics=8, docs_per_topic=300, vocab_per_topic=120, words_per_doc=60, seed=0)
PRETRAIN_STEPS = 2000

# one "A<n> PASS/FAIL: detail" line per acceptance criterion, echoed after the
# run because capture would otherwise swallow them for passing tests
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acc_corpus():
    return make_synthetic_corpus(
        ACC["topics"],
        ACC["docs_per_topic"],
        ACC["vocab_per_topic"],
        seed=ACC["seed"],
        words_per_doc=ACC["words_per_doc"],
    )


@pytest.fixture(scope="session")
def acc_val():
    return make_synthetic_corpus(
        ACC["topics"],
        30,
        ACC["vocab_per_topic"],
        seed=ACC["seed"],
        words_per_doc=ACC["words_per_doc"],
        split="validation",
    )


@pytest.fixture(scope="session")
def acc_mc():
    return make_synthetic_mc(ACC["topics"], 8, ACC["vocab_per_topic"], seed=ACC["seed"])


@pytest.fixture(scope="session")
def acc_embedder():
    return HashedNgramEmbedder().fit()


@pytest.fixture(scope="session")
def acc_embeddings(acc_embedder, acc_corpus):
    return acc_embedder.transform(acc_corpus.texts())


@pytest.fixture(scope="session")
def acc_topic_model(acc_embeddings):
    return TopicKMeans(n_clusters=ACC["topics"], seed=ACC["seed"]).fit(acc_embeddings)


@pytest.fixture(scope="session")
def acc_base(acc_corpus):
    model = TinyCausalLM(ModelConfig())
    start = time.monotonic()
    losses = pretrain(model, acc_corpus, steps=PRETRAIN_STEPS, seed=ACC["seed"])
    seconds = time.monotonic() - start
    model.freeze()
    return SimpleNamespace(model=model, seconds=seconds, losses=losses)


@pytest.fixture(scope="session")
def acc_trained(acc_base, acc_corpus, acc_topic_model, tmp_path_factory):
    """One-worker train_all run; doubles as the A6 single-worker reference."""
    out = tmp_path_factory.mktemp("experts_w1")
    shards = shard_corpus(
        list(acc_corpus), acc_topic_model.labels_, acc_topic_model.retained_
    )
    checksum_before = base_checksum(acc_base.model)
    start = time.monotonic()
    entries = train_all(acc_base.model, shards, TrainRecipe(seed=ACC["seed"]), out, max_workers=1)
    seconds = time.monotonic() - start
    checksum_after = base_checksum(acc_base.model)
    return SimpleNamespace(
        out=out,
        shards=shards,
        entries=entries,
        registry=AdapterRegistry(out),
        seconds=seconds,
        checksum_before=checksum_before,
        checksum_after=checksum_after,
    )
