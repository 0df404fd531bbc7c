"""Corpus ingestion, byte-level tokenization, and synthetic data generation.

Documents are stored as JSONL (one object per line) with integer "id" and
string "text" keys; unknown keys are ignored. Tokenization is byte-level:
each UTF-8 byte maps to its own id, plus BOS/EOS markers, for a vocabulary
of exactly 258 symbols.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258

Split = Literal["train", "validation"]


def tokenize(text: str) -> list[int]:
    """Map text to ``[BOS, utf8 bytes..., EOS]`` token ids."""
    return [BOS_ID, *text.encode("utf-8"), EOS_ID]


def detokenize(token_ids: Sequence[int]) -> str:
    """Inverse of :func:`tokenize`; BOS/EOS markers are dropped."""
    return bytes(t for t in token_ids if t < 256).decode("utf-8")


@dataclass
class Document:
    """One corpus record: raw text plus (optional) token ids and topic."""

    doc_id: int
    text: str
    token_ids: list[int] | None = None
    topic_id: int | None = None

    def __post_init__(self):
        if self.doc_id < 0:
            raise ValueError(f"doc_id must be non-negative, got {self.doc_id}")

    @property
    def num_tokens(self) -> int:
        if self.token_ids is None:
            raise ValueError(f"document {self.doc_id} is not tokenized")
        return len(self.token_ids)


@dataclass
class Corpus:
    """An ordered collection of documents for one split."""

    documents: list[Document]
    split: Split = "train"

    def __post_init__(self):
        if self.split == "train" and not self.documents:
            raise ValueError("empty train corpus")
        ids = [d.doc_id for d in self.documents]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate doc_id {dup}")
        self.documents.sort(key=lambda d: d.doc_id)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    def __getitem__(self, i: int) -> Document:
        return self.documents[i]

    def texts(self) -> list[str]:
        return [d.text for d in self.documents]

    def by_id(self, doc_id: int) -> Document:
        doc = self._index().get(doc_id)
        if doc is None:
            raise KeyError(f"no document with doc_id {doc_id}")
        return doc

    def _index(self) -> dict[int, Document]:
        if not hasattr(self, "_id_index"):
            self._id_index = {d.doc_id: d for d in self.documents}
        return self._id_index

    @property
    def total_tokens(self) -> int:
        return sum(d.num_tokens for d in self.documents)


@dataclass
class McItem:
    """One multiple-choice query: a prompt, candidate options, and the gold index."""

    item_id: int
    prompt: str
    options: list[str]
    gold_index: int

    def __post_init__(self):
        if len(self.options) < 2:
            raise ValueError(f"item {self.item_id}: need at least 2 options")
        if any(not isinstance(o, str) or not o for o in self.options):
            raise ValueError(f"item {self.item_id}: options must be non-empty strings")
        if not 0 <= self.gold_index < len(self.options):
            raise ValueError(
                f"item {self.item_id}: gold_index {self.gold_index} out of range"
            )


def load_corpus(path: str | Path, split: Split = "train") -> Corpus:
    """Load a JSONL corpus file.

    Each line must be a JSON object with an integer "id" and a string "text";
    any other keys are ignored. Documents are returned in ascending doc_id
    order and tokenized eagerly.
    """
    path = Path(path)
    documents: list[Document] = []
    seen: set[int] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed JSON on line {lineno}: {exc}") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{path}: line {lineno} is not a JSON object")
            doc_id = obj.get("id")
            text = obj.get("text")
            if not isinstance(doc_id, int) or isinstance(doc_id, bool):
                raise ValueError(f"{path}: line {lineno} has no integer 'id'")
            if not isinstance(text, str):
                raise ValueError(f"{path}: line {lineno} has no string 'text'")
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id}")
            seen.add(doc_id)
            topic = obj.get("topic")
            if not isinstance(topic, int) or isinstance(topic, bool):
                topic = None
            documents.append(
                Document(doc_id=doc_id, text=text, token_ids=tokenize(text), topic_id=topic)
            )
    return Corpus(documents=documents, split=split)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back to JSONL. Topic labels, when present, are kept."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for doc in corpus:
            obj: dict = {"id": doc.doc_id, "text": doc.text}
            if doc.topic_id is not None:
                obj["topic"] = doc.topic_id
            fh.write(json.dumps(obj) + "\n")


def load_mc_items(path: str | Path) -> list[McItem]:
    """Load a multiple-choice task file (JSONL with id/prompt/options/gold)."""
    path = Path(path)
    items: list[McItem] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed JSON on line {lineno}: {exc}") from None
            try:
                items.append(
                    McItem(
                        item_id=int(obj["id"]),
                        prompt=str(obj["prompt"]),
                        options=list(obj["options"]),
                        gold_index=int(obj["gold"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: bad MC item on line {lineno}: {exc}") from None
    return items


def save_mc_items(items: list[McItem], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for it in items:
            fh.write(
                json.dumps(
                    {"id": it.item_id, "prompt": it.prompt, "options": it.options,
                     "gold": it.gold_index}
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Synthetic planted-topic corpus
# ---------------------------------------------------------------------------

_SHARED_POOL_SIZE = 20
_WORD_LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))
_WORD_LENGTH = 6  # fixed so every topic has near-identical byte statistics


def _random_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        word = "".join(_WORD_LETTERS[rng.integers(0, 26, size=_WORD_LENGTH)])
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def synthetic_pools(
    num_topics: int, vocab_per_topic: int, seed: int
) -> tuple[list[list[str]], list[str]]:
    """Deterministic per-topic keyword pools plus a small shared pool.

    Pools depend only on (num_topics, vocab_per_topic, seed), so corpora and
    MC tasks generated with the same arguments share vocabulary.
    """
    rng = np.random.default_rng([seed, 3221])
    taken: set[str] = set()
    shared = _random_words(rng, _SHARED_POOL_SIZE, taken)
    pools = [_random_words(rng, vocab_per_topic, taken) for _ in range(num_topics)]
    return pools, shared


def make_synthetic_corpus(
    num_topics: int,
    docs_per_topic: int,
    vocab_per_topic: int,
    seed: int,
    words_per_doc: int = 60,
    shared_fraction: float = 0.2,
    split: Split = "train",
) -> Corpus:
    """Generate a corpus with planted topic labels.

    Topic ``t`` draws its words from a topic-specific pool plus a small shared
    pool; the planted label is stored in ``Document.topic_id``. Identical
    arguments produce byte-identical corpora; the two splits use disjoint
    random streams over the same pools.
    """
    if min(num_topics, docs_per_topic, vocab_per_topic) < 1:
        raise ValueError("num_topics, docs_per_topic and vocab_per_topic must be >= 1")
    pools, shared = synthetic_pools(num_topics, vocab_per_topic, seed)
    stream = 0 if split == "train" else 1
    rng = np.random.default_rng([seed, stream, 17])
    shared_arr = np.array(shared)
    documents: list[Document] = []
    doc_id = 0
    for topic in range(num_topics):
        pool_arr = np.array(pools[topic])
        for _ in range(docs_per_topic):
            use_shared = rng.random(words_per_doc) < shared_fraction
            topic_words = pool_arr[rng.integers(0, len(pool_arr), size=words_per_doc)]
            shared_words = shared_arr[rng.integers(0, len(shared_arr), size=words_per_doc)]
            words = np.where(use_shared, shared_words, topic_words)
            text = " ".join(words.tolist())
            documents.append(
                Document(doc_id=doc_id, text=text, token_ids=tokenize(text), topic_id=topic)
            )
            doc_id += 1
    return Corpus(documents=documents, split=split)


def make_synthetic_mc(
    num_topics: int,
    items_per_topic: int,
    vocab_per_topic: int,
    seed: int,
    num_options: int = 4,
    prompt_words: int = 12,
    option_words: int = 6,
) -> list[McItem]:
    """Generate a multiple-choice task over the planted topic pools.

    The prompt and the gold option use one topic's vocabulary; distractor
    options are drawn from other topics. A model specialised on the prompt's
    topic should therefore prefer the gold continuation.
    """
    if num_options < 2:
        raise ValueError("need at least 2 options")
    if num_options > num_topics:
        raise ValueError("num_options cannot exceed num_topics (one distractor per topic)")
    pools, _ = synthetic_pools(num_topics, vocab_per_topic, seed)
    rng = np.random.default_rng([seed, 2, 17])
    items: list[McItem] = []
    item_id = 0
    for topic in range(num_topics):
        pool = np.array(pools[topic])
        for _ in range(items_per_topic):
            prompt = " ".join(pool[rng.integers(0, len(pool), size=prompt_words)].tolist())
            gold = " " + " ".join(pool[rng.integers(0, len(pool), size=option_words)].tolist())
            others = [t for t in range(num_topics) if t != topic]
            picks = rng.choice(len(others), size=num_options - 1, replace=False)
            options = []
            for p in picks:
                other_pool = np.array(pools[others[int(p)]])
                options.append(
                    " " + " ".join(
                        other_pool[rng.integers(0, len(other_pool), size=option_words)].tolist()
                    )
                )
            gold_index = int(rng.integers(0, num_options))
            options.insert(gold_index, gold)
            items.append(
                McItem(item_id=item_id, prompt=prompt, options=options, gold_index=gold_index)
            )
            item_id += 1
    return items
