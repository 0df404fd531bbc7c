"""Deterministic text embedding via hashed character n-grams.

The pipeline is fixed and platform-independent:

1. lowercase the text;
2. extract character n-grams of length ``ngram_size``;
3. hash each n-gram into ``hash_buckets`` buckets (hash documented below);
4. build the bucket term-frequency vector with sublinear scaling
   ``tf -> 1 + ln(tf)``;
5. project with a fixed ``dim x hash_buckets`` random sign matrix with
   entries ``+-1/sqrt(dim)``, drawn from ``numpy`` PCG64 seeded with
   ``projection_seed``;
6. L2-normalize.

Hash (frozen): every character of the n-gram contributes its Unicode
codepoint as 4 little-endian bytes to a 64-bit FNV-1a accumulator
(offset 0xcbf29ce484222325, prime 0x100000001b3); the accumulator is then
passed through the splitmix64 finalizer (Steele et al.'s published
constants) and reduced modulo ``hash_buckets``. Both functions use fixed
constants only, so bucket indices are identical on every platform.

Texts that yield no n-grams (e.g. the empty string) embed to the all-zero
vector, which downstream code treats as the degenerate "route to base"
flag; see :func:`is_degenerate`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import binio

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

EMBEDDINGS_MAGIC = b"MOIN-EMB"


def fnv1a64(data: bytes) -> int:
    """Reference 64-bit FNV-1a over a byte string (Python ints, exact)."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def splitmix64(h: int) -> int:
    """Reference splitmix64 finalizer (avalanches the FNV output)."""
    h &= _MASK64
    h ^= h >> 30
    h = (h * 0xBF58476D1CE4E5B9) & _MASK64
    h ^= h >> 27
    h = (h * 0x94D049BB133111EB) & _MASK64
    h ^= h >> 31
    return h


def hash_ngram(ngram: str, hash_buckets: int) -> int:
    """Scalar reference for the n-gram -> bucket map used by the embedder."""
    data = ngram.encode("utf-32-le")
    return splitmix64(fnv1a64(data)) % hash_buckets


def _ngram_buckets(text: str, n: int, hash_buckets: int) -> np.ndarray:
    """Vectorized bucket indices for all length-n character windows of text."""
    codepoints = np.frombuffer(text.encode("utf-32-le"), dtype="<u4").astype(np.uint64)
    if codepoints.size < n:
        return np.empty(0, dtype=np.int64)
    windows = np.lib.stride_tricks.sliding_window_view(codepoints, n)
    h = np.full(windows.shape[0], FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    byte_mask = np.uint64(0xFF)
    for pos in range(n):
        cp = windows[:, pos]
        for shift in (0, 8, 16, 24):  # little-endian bytes of the codepoint
            h = (h ^ ((cp >> np.uint64(shift)) & byte_mask)) * prime
    # splitmix64 finalizer
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h % np.uint64(hash_buckets)).astype(np.int64)


def is_degenerate(vector: np.ndarray) -> bool:
    """True for the flagged all-zero embedding of n-gram-free text."""
    return not np.any(vector)


class HashedNgramEmbedder(BaseEstimator, TransformerMixin):
    """Hashed n-gram text embedder with a seeded random projection.

    The transform is stateless with respect to data: ``fit`` only validates
    parameters and materializes the projection matrix, so the same
    configuration embeds identically everywhere. Outputs are float32 unit
    vectors (norm within 1e-6), except the all-zero degenerate case.

    Parameters
    ----------
    dim : output dimensionality (>= 2).
    ngram_size : character n-gram length (>= 1).
    hash_buckets : hashing-trick bucket count (>= dim).
    projection_seed : seed for the +-1/sqrt(dim) projection matrix.
    """

    def __init__(self, dim: int = 64, ngram_size: int = 3, hash_buckets: int = 4096,
                 projection_seed: int = 0):
        self.dim = dim
        self.ngram_size = ngram_size
        self.hash_buckets = hash_buckets
        self.projection_seed = projection_seed

    def _check_params(self) -> None:
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.hash_buckets < self.dim:
            raise ValueError(
                f"hash_buckets ({self.hash_buckets}) must be >= dim ({self.dim})"
            )
        if self.ngram_size < 1:
            raise ValueError(f"ngram_size must be >= 1, got {self.ngram_size}")

    def _projection(self) -> np.ndarray:
        key = (self.dim, self.hash_buckets, self.projection_seed)
        if getattr(self, "_proj_key", None) != key:
            self._check_params()
            rng = np.random.default_rng(self.projection_seed)
            signs = rng.integers(0, 2, size=(self.dim, self.hash_buckets))
            self._proj = (signs * 2 - 1).astype(np.float64) / np.sqrt(self.dim)
            self._proj_key = key
        return self._proj

    def fit(self, X=None, y=None):
        """Validate parameters and build the projection matrix."""
        self._projection()
        return self

    def embed(self, text: str) -> np.ndarray:
        """Embed one text into a float32 unit vector (zero vector if degenerate)."""
        proj = self._projection()
        buckets = _ngram_buckets(text.lower(), self.ngram_size, self.hash_buckets)
        if buckets.size == 0:
            return np.zeros(self.dim, dtype=np.float32)
        counts = np.bincount(buckets, minlength=self.hash_buckets)
        nonzero = np.nonzero(counts)[0]
        weights = 1.0 + np.log(counts[nonzero].astype(np.float64))
        vec = proj[:, nonzero] @ weights
        norm = np.linalg.norm(vec)
        if norm == 0.0:  # sign cancellation; treat like the no-n-gram case
            return np.zeros(self.dim, dtype=np.float32)
        vec /= norm
        return vec.astype(np.float32)

    def transform(self, X) -> np.ndarray:
        """Embed a sequence of texts; row i is ``embed(X[i])``."""
        texts = list(X)
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            if not isinstance(text, str):
                raise TypeError(f"expected str at position {i}, got {type(text).__name__}")
            out[i] = self.embed(text)
        return out

    def embed_batch(self, texts) -> list[np.ndarray]:
        """Embed texts into a list of vectors, elementwise equal to embed()."""
        return list(self.transform(texts))


def save_embeddings(X: np.ndarray, path: str | Path) -> None:
    """Persist an embedding matrix (count x dim float32, little-endian)."""
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D embedding matrix, got shape {X.shape}")
    with Path(path).open("wb") as fh:
        binio.write_magic(fh, EMBEDDINGS_MAGIC)
        fh.write(struct.pack("<Q", X.shape[0]))
        fh.write(struct.pack("<I", X.shape[1]))
        binio.write_f32_array(fh, X)


def load_embeddings(path: str | Path) -> np.ndarray:
    with Path(path).open("rb") as fh:
        binio.check_magic(fh, EMBEDDINGS_MAGIC)
        count = binio.read_u64(fh, "embedding count")
        dim = binio.read_u32(fh, "embedding dim")
        X = binio.read_f32_array(fh, (count, dim), "embedding data")
        if fh.read(1):
            raise ValueError("trailing bytes after embedding data")
    return X


def save_embedder_config(embedder: HashedNgramEmbedder, path: str | Path) -> None:
    """Persist embedder parameters so routing can rebuild the same embedder."""
    Path(path).write_text(
        json.dumps(embedder.get_params(), sort_keys=True) + "\n", encoding="utf-8"
    )


def load_embedder_config(path: str | Path) -> HashedNgramEmbedder:
    params = json.loads(Path(path).read_text(encoding="utf-8"))
    return HashedNgramEmbedder(**params)
