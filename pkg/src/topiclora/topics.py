"""K-means topic modeling over document embeddings.

``TopicKMeans`` is a scikit-learn style estimator (``fit`` / ``predict`` /
``get_params``) implementing Lloyd's algorithm with seeded k-means++
initialization. The fitted centroids are the topic embeddings used for
query routing; small clusters can be marked as pruned without touching the
centroids, and per-topic keywords are extracted with class-based TF-IDF.

Distances are Euclidean throughout (normative for both clustering and
routing). On the unit-normalized embeddings produced by this package the
induced nearest-centroid ordering matches cosine similarity up to centroid
norms.
"""

from __future__ import annotations

import struct
from collections import Counter
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils import check_array

from . import binio

TOPIC_MODEL_MAGIC = b"MOIN-TPC"


def squared_distances(X: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact (n, k) squared Euclidean distances, computed in float64.

    Uses the plain (x - c)^2 sum rather than the expanded form so results
    match a naive per-pair scan bit for bit.
    """
    X = np.asarray(X, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    n, d = X.shape
    k = centers.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    chunk = max(1, 4_000_000 // max(1, k * d))
    for start in range(0, n, chunk):
        diff = X[start:start + chunk, None, :] - centers[None, :, :]
        out[start:start + chunk] = (diff * diff).sum(axis=-1)
    return out


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded greedy k-means++ seeding.

    D^2 sampling with 2 + floor(ln k) candidates per step, keeping the
    candidate that lowers the potential most (first wins on ties).
    """
    n = X.shape[0]
    trials = 2 + int(np.log(k)) if k > 1 else 1
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[int(rng.integers(n))]
    closest = squared_distances(X, centers[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            candidates = rng.integers(n, size=trials)
        else:
            candidates = rng.choice(n, size=trials, p=closest / total)
        best_closest, best_potential = None, np.inf
        best_idx = -1
        for idx in candidates:
            idx = int(idx)
            cand = np.minimum(closest, squared_distances(X, X[idx:idx + 1]).ravel())
            potential = cand.sum()
            if potential < best_potential:
                best_idx, best_closest, best_potential = idx, cand, potential
        centers[c] = X[best_idx]
        closest = best_closest
    return centers


class TopicKMeans(BaseEstimator, ClusterMixin):
    """Lloyd's k-means with k-means++ init, empty-cluster repair, and pruning.

    Parameters
    ----------
    n_clusters : number of topics (k).
    seed : RNG seed for initialization; identical inputs and seed give an
        identical model.
    max_iters : Lloyd iteration cap.
    tol : convergence threshold on the max L2 centroid movement.

    Attributes (after ``fit``)
    --------------------------
    cluster_centers_ : (k, dim) float32 topic embeddings.
    labels_ : (n,) int64 assignment of the training documents.
    doc_counts_ : (k,) int64 documents per topic.
    retained_ : (k,) bool mask, all True until :meth:`prune`.
    keywords_ : per-topic keyword lists, None until :meth:`extract_keywords`.
    inertia_ : final within-cluster sum of squared distances (WCSS).
    wcss_history_ : WCSS after each assignment step; non-increasing.
    n_iter_ : Lloyd iterations executed.

    Nearest-centroid ties always break toward the lowest topic index, and
    empty clusters are re-seeded with the point farthest from its assigned
    centroid, so fitting is fully deterministic in (data, seed).
    """

    def __init__(self, n_clusters: int = 8, seed: int = 0, max_iters: int = 100,
                 tol: float = 1e-6):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iters = max_iters
        self.tol = tol

    # -- fitting -----------------------------------------------------------

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        k = self.n_clusters
        if k < 1:
            raise ValueError(f"n_clusters must be >= 1, got {k}")
        if X.shape[0] < k:
            raise ValueError(f"n_clusters ({k}) exceeds number of points ({X.shape[0]})")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")

        rng = np.random.default_rng(self.seed)
        centers = _kmeanspp_init(X, k, rng)
        labels = np.zeros(X.shape[0], dtype=np.int64)
        history: list[float] = []
        n_iter = 0
        for n_iter in range(1, self.max_iters + 1):
            dists = squared_distances(X, centers)
            labels = dists.argmin(axis=1)
            point_d2 = dists[np.arange(X.shape[0]), labels]
            counts = np.bincount(labels, minlength=k)
            for c in np.nonzero(counts == 0)[0]:
                # steal the farthest point, but never empty another cluster
                eligible = counts[labels] > 1
                idx = int(np.argmax(np.where(eligible, point_d2, -np.inf)))
                counts[labels[idx]] -= 1
                counts[c] += 1
                labels[idx] = c
                centers[c] = X[idx]
                point_d2[idx] = 0.0
            history.append(float(point_d2.sum()))
            new_centers = centers.copy()
            for c in range(k):
                new_centers[c] = X[labels == c].sum(axis=0) / counts[c]
            movement = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
            centers = new_centers
            if movement < self.tol:
                break

        self.cluster_centers_ = centers.astype(np.float32)
        self.labels_ = labels
        self.doc_counts_ = np.bincount(labels, minlength=k).astype(np.int64)
        self.retained_ = np.ones(k, dtype=bool)
        self.keywords_ = None
        self.wcss_history_ = history
        self.n_iter_ = n_iter
        final_d2 = squared_distances(X, centers)[np.arange(X.shape[0]), labels]
        self.inertia_ = float(final_d2.sum())
        return self

    # -- inference ---------------------------------------------------------

    def _require_fitted(self) -> None:
        if not hasattr(self, "cluster_centers_"):
            raise NotFittedError("this TopicKMeans instance is not fitted yet")

    def _check_dim(self, X: np.ndarray) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        dim = self.cluster_centers_.shape[1]
        if X.shape[1] != dim:
            raise ValueError(f"embedding dimension {X.shape[1]} != model dimension {dim}")
        return X

    def predict(self, X) -> np.ndarray:
        """Nearest-centroid topic index per row (ties to the lowest index)."""
        self._require_fitted()
        X = self._check_dim(X)
        return squared_distances(X, self.cluster_centers_).argmin(axis=1)

    def assign(self, embedding: np.ndarray) -> int:
        """Topic index for a single embedding vector."""
        return int(self.predict(np.asarray(embedding).reshape(1, -1))[0])

    # -- pruning and keywords ----------------------------------------------

    @property
    def k(self) -> int:
        self._require_fitted()
        return self.cluster_centers_.shape[0]

    @property
    def retained_topics(self) -> np.ndarray:
        self._require_fitted()
        return np.nonzero(self.retained_)[0]

    def prune(self, min_docs: int) -> "TopicKMeans":
        """Mark topics with fewer than ``min_docs`` documents as pruned.

        Returns a new model; centroids and counts are untouched, only the
        ``retained_`` mask changes. Raises if every topic would be pruned.
        """
        self._require_fitted()
        if min_docs < 0:
            raise ValueError(f"min_docs must be >= 0, got {min_docs}")
        retained = self.doc_counts_ >= min_docs
        if not retained.any():
            raise ValueError("no retained topics")
        out = TopicKMeans(**self.get_params())
        out.cluster_centers_ = self.cluster_centers_
        out.labels_ = self.labels_
        out.doc_counts_ = self.doc_counts_
        out.retained_ = retained
        out.keywords_ = self.keywords_
        out.wcss_history_ = getattr(self, "wcss_history_", [])
        out.n_iter_ = getattr(self, "n_iter_", 0)
        out.inertia_ = getattr(self, "inertia_", float("nan"))
        return out

    def retention_summary(self) -> str:
        self._require_fitted()
        return f"retained {int(self.retained_.sum())} of {self.k} clusters"

    def extract_keywords(self, texts, labels=None, top_n: int = 4) -> list[list[str]]:
        """Extract per-topic keywords with class-based TF-IDF; stores keywords_."""
        self._require_fitted()
        if labels is None:
            if self.labels_ is None:
                raise ValueError("no stored labels; pass the assignment explicitly")
            labels = self.labels_
        self.keywords_ = ctfidf_keywords(texts, labels, self.k, top_n=top_n)
        return self.keywords_


def ctfidf_keywords(texts, labels, k: int, top_n: int = 4) -> list[list[str]]:
    """Class-based TF-IDF keywords per topic.

    Each topic's documents are concatenated into one class document; a term t
    in class c is weighted ``tf(t, c) * ln(1 + A / f(t))`` where tf is the
    term's frequency in the class, f its total frequency over all classes,
    and A the average word count per class (total words / k). Terms are
    whitespace-delimited lowercase words. Returns the top_n terms per topic
    by weight, ties broken lexicographically.
    """
    texts = list(texts)
    labels = np.asarray(labels)
    if len(texts) != labels.shape[0]:
        raise ValueError("texts and labels length mismatch")
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    class_tf: list[Counter] = [Counter() for _ in range(k)]
    total_f: Counter = Counter()
    for text, label in zip(texts, labels):
        words = text.lower().split()
        class_tf[int(label)].update(words)
        total_f.update(words)
    total_words = sum(total_f.values())
    if total_words == 0:
        return [[] for _ in range(k)]
    avg_per_class = total_words / k
    keywords: list[list[str]] = []
    for c in range(k):
        scored = [
            (tf * np.log1p(avg_per_class / total_f[term]), term)
            for term, tf in class_tf[c].items()
        ]
        scored.sort(key=lambda pair: (-pair[0], pair[1]))
        keywords.append([term for _, term in scored[:top_n]])
    return keywords


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_topic_model(model: TopicKMeans, path: str | Path) -> None:
    """Write k, dim, seed, centroids, counts, retained mask, and keywords."""
    model._require_fitted()
    k, dim = model.cluster_centers_.shape
    with Path(path).open("wb") as fh:
        binio.write_magic(fh, TOPIC_MODEL_MAGIC)
        binio.write_u32(fh, k)
        binio.write_u32(fh, dim)
        binio.write_u64(fh, model.seed)
        binio.write_f32_array(fh, model.cluster_centers_)
        binio.write_u64_array(fh, model.doc_counts_)
        fh.write(model.retained_.astype("<u1").tobytes())
        if model.keywords_ is not None:
            for topic_words in model.keywords_:
                binio.write_u32(fh, len(topic_words))
                for word in topic_words:
                    binio.write_str(fh, word)


def load_topic_model(path: str | Path) -> TopicKMeans:
    """Load a fitted topic model; the training assignment is not persisted."""
    with Path(path).open("rb") as fh:
        binio.check_magic(fh, TOPIC_MODEL_MAGIC)
        k = binio.read_u32(fh, "cluster count")
        dim = binio.read_u32(fh, "embedding dim")
        seed = binio.read_u64(fh, "seed")
        centers = binio.read_f32_array(fh, (k, dim), "centroids")
        counts = binio.read_u64_array(fh, k, "doc_counts").astype(np.int64)
        retained_raw = binio.read_exact(fh, k, "retained mask")
        retained = np.frombuffer(retained_raw, dtype="<u1").astype(bool)
        peek = fh.read(4)
        keywords = None
        if peek:
            if len(peek) < 4:
                raise ValueError("truncated file while reading keywords block")
            keywords = []
            count = struct.unpack("<I", peek)[0]
            for topic in range(k):
                if topic > 0:
                    count = binio.read_u32(fh, f"keyword count for topic {topic}")
                keywords.append(
                    [binio.read_str(fh, f"keyword of topic {topic}") for _ in range(count)]
                )
            if fh.read(1):
                raise ValueError("trailing bytes after keywords block")
    model = TopicKMeans(n_clusters=k, seed=seed)
    model.cluster_centers_ = centers
    model.labels_ = None
    model.doc_counts_ = counts
    model.retained_ = retained
    model.keywords_ = keywords
    model.wcss_history_ = []
    model.n_iter_ = 0
    model.inertia_ = float("nan")
    return model
