"""Low-rank adapters: creation, the update equation, and on-disk format.

An adapter holds a pair of factor matrices (a, b) for every adapted layer
of the base model. The adapted forward pass is

    y = W x + b (a x)

with no rank scaling and no dropout; a is drawn from N(0, 0.02) and b
starts at zero, so a freshly initialized adapter is an exact no-op.
Adapters attach to the attention and MLP projections only, never to the
embeddings or the output head.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np
import torch

from . import binio
from .lm import TinyCausalLM

ADAPTER_MAGIC = b"MOIN-LRA"


@dataclass
class LoraAdapter:
    topic_id: int
    rank: int
    # layer name -> (a, b) with a: (rank, in_dim), b: (out_dim, rank)
    layers: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    seed: int = 0
    tokens_seen: int = 0
    final_loss: float = 0.0

    def parameters(self) -> Iterator[torch.Tensor]:
        for a, b in self.layers.values():
            yield a
            yield b

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def nbytes(self) -> int:
        return 4 * self.num_parameters()

    def requires_grad_(self, flag: bool = True) -> "LoraAdapter":
        for t in self.parameters():
            t.requires_grad_(flag)
        return self

    def detach(self) -> "LoraAdapter":
        return LoraAdapter(
            self.topic_id, self.rank,
            {k: (a.detach().clone(), b.detach().clone())
             for k, (a, b) in self.layers.items()},
            seed=self.seed, tokens_seen=self.tokens_seen, final_loss=self.final_loss,
        )


def init_adapter(
    model: TinyCausalLM, topic_id: int, rank: int, seed: int
) -> LoraAdapter:
    """Create a zero-effect adapter for every adaptable layer of the model."""
    if topic_id < 0:
        raise ValueError(f"topic_id must be >= 0, got {topic_id}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    shapes = model.adapted_layer_shapes()
    for name, (in_dim, out_dim) in shapes.items():
        limit = min(in_dim, out_dim)
        if rank > limit:
            raise ValueError(
                f"rank {rank} exceeds min(in_dim, out_dim) = {limit} for layer {name!r}"
            )
        if rank > limit / 4:
            warnings.warn(
                f"rank {rank} is above min(in_dim, out_dim)/4 = {limit / 4:g} "
                f"for layer {name!r}; the low-rank factorization saves little",
                stacklevel=2,
            )
    gen = torch.Generator().manual_seed(seed)
    layers = {}
    for name, (in_dim, out_dim) in shapes.items():
        a = torch.empty(rank, in_dim).normal_(0.0, 0.02, generator=gen)
        b = torch.zeros(out_dim, rank)
        layers[name] = (a, b)
    return LoraAdapter(topic_id=topic_id, rank=rank, layers=layers, seed=seed)


def lora_delta(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference form of the low-rank correction: b @ (a @ x)."""
    return b @ (a @ x)


def merged_weight(w: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Fold the correction into the base weight: W + b @ a."""
    return w + b @ a


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _write_adapter(adapter: LoraAdapter, fh: BinaryIO) -> None:
    binio.write_magic(fh, ADAPTER_MAGIC)
    binio.write_u64(fh, adapter.topic_id)
    binio.write_u32(fh, adapter.rank)
    binio.write_u32(fh, len(adapter.layers))
    for name, (a, b) in adapter.layers.items():
        binio.write_str(fh, name)
        binio.write_u32(fh, a.shape[1])  # in_dim
        binio.write_u32(fh, b.shape[0])  # out_dim
        binio.write_f32_array(fh, a.detach().cpu().numpy())
        binio.write_f32_array(fh, b.detach().cpu().numpy())
    binio.write_u64(fh, adapter.tokens_seen)
    binio.write_f32(fh, adapter.final_loss)
    binio.write_u64(fh, adapter.seed)


def _read_adapter(fh: BinaryIO) -> LoraAdapter:
    binio.check_magic(fh, ADAPTER_MAGIC)
    topic_id = binio.read_u64(fh, "topic_id")
    rank = binio.read_u32(fh, "rank")
    count = binio.read_u32(fh, "layer count")
    layers = {}
    for _ in range(count):
        name = binio.read_str(fh, "layer name")
        in_dim = binio.read_u32(fh, f"in_dim of {name}")
        out_dim = binio.read_u32(fh, f"out_dim of {name}")
        a = torch.from_numpy(binio.read_f32_array(fh, (rank, in_dim), f"factor a of {name}"))
        b = torch.from_numpy(binio.read_f32_array(fh, (out_dim, rank), f"factor b of {name}"))
        layers[name] = (a, b)
    tokens_seen = binio.read_u64(fh, "tokens_seen")
    final_loss = binio.read_f32(fh, "final_loss")
    seed = binio.read_u64(fh, "seed")
    return LoraAdapter(
        topic_id=topic_id, rank=rank, layers=layers,
        seed=seed, tokens_seen=tokens_seen, final_loss=final_loss,
    )


def save_adapter(adapter: LoraAdapter, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        _write_adapter(adapter, fh)


def load_adapter(path: str | Path) -> LoraAdapter:
    with Path(path).open("rb") as fh:
        adapter = _read_adapter(fh)
        if fh.read(1):
            raise ValueError("trailing bytes after adapter tensors")
    return adapter


def adapter_bytes(adapter: LoraAdapter) -> bytes:
    buf = BytesIO()
    _write_adapter(adapter, buf)
    return buf.getvalue()


def adapter_filename(topic_id: int) -> str:
    return f"topic_{topic_id:05d}.lora"


class AdapterRegistry:
    """Directory of trained adapters, loaded lazily and cached in memory.

    An empty directory is a valid registry: every lookup misses and the
    caller falls back to the bare base model.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._paths: dict[int, Path] = {}
        self._cache: dict[int, LoraAdapter] = {}
        if self.root.exists():
            for path in sorted(self.root.glob("*.lora")):
                with path.open("rb") as fh:
                    binio.check_magic(fh, ADAPTER_MAGIC)
                    topic_id = binio.read_u64(fh, "topic_id")
                if topic_id in self._paths:
                    raise ValueError(
                        f"duplicate adapter for topic {topic_id}: "
                        f"{self._paths[topic_id].name} and {path.name}"
                    )
                self._paths[topic_id] = path

    def __len__(self) -> int:
        return len(self._paths)

    def __contains__(self, topic_id: int) -> bool:
        return topic_id in self._paths

    def topic_ids(self) -> list[int]:
        return sorted(self._paths)

    def path_for(self, topic_id: int) -> Path:
        return self._paths[topic_id]

    def get(self, topic_id: int) -> LoraAdapter | None:
        """The adapter for a topic, or None when no expert was trained for it."""
        if topic_id not in self._paths:
            return None
        if topic_id not in self._cache:
            adapter = load_adapter(self._paths[topic_id])
            if adapter.topic_id != topic_id:
                raise ValueError(
                    f"adapter file {self._paths[topic_id].name} claims topic "
                    f"{adapter.topic_id}"
                )
            self._cache[topic_id] = adapter
        return self._cache[topic_id]
