"""A tiny decoder-only autoregressive transformer used as the frozen base model.

Pre-norm decoder blocks in the Llama family layout: RMSNorm, causal
multi-head attention (Q/K/V/O projections, no biases), and a gated MLP
(SiLU gate). Positions use a learned absolute embedding table. Every
projection is an :class:`AdaptedLinear`, which accepts an optional low-rank
delta at call time, so per-topic experts modify the forward pass without
touching base weights.

All math runs on CPU in float32 (float64 via ``model.double()`` for
gradient checks). Forward passes are deterministic functions of their
inputs; there is no dropout anywhere.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import binio
from .corpus import Document, VOCAB_SIZE

BASE_MODEL_MAGIC = b"MOIN-BSE"
IGNORE_INDEX = -100


@dataclass
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 128
    mlp_hidden: int | None = None  # defaults to 4 * d_model
    rms_norm_eps: float = 1e-5
    init_seed: int = 0

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = 4 * self.d_model
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "context_len",
                     "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max (step 0) to lr_min (step total_steps), no warmup."""
    if total_steps <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class AdaptedLinear(nn.Module):
    """Bias-free linear layer with an optional low-rank delta.

    With factors (a, b) attached the output is ``W x + b (a x)`` -- the
    base product plus the rank-r correction; without factors it is a plain
    linear layer. The factor shapes must be a: (r, in_dim), b: (out_dim, r).
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self._qualname = ""  # stamped by the owning model

    def forward(self, x, adapter=None):
        y = F.linear(x, self.weight)
        if adapter is not None:
            factors = adapter.layers.get(self._qualname)
            if factors is not None:
                a, b = factors
                if a.shape[1] != self.in_dim or b.shape[0] != self.out_dim \
                        or a.shape[0] != b.shape[1]:
                    raise ValueError(
                        f"adapter factors for {self._qualname!r} have shapes "
                        f"{tuple(a.shape)}/{tuple(b.shape)}, expected "
                        f"(r, {self.in_dim})/({self.out_dim}, r)"
                    )
                y = y + F.linear(F.linear(x, a), b)
        return y


class CausalSelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.q = AdaptedLinear(d, d)
        self.k = AdaptedLinear(d, d)
        self.v = AdaptedLinear(d, d)
        self.o = AdaptedLinear(d, d)

    def forward(self, x, adapter=None):
        bsz, seq, d = x.shape
        shape = (bsz, seq, self.n_heads, self.head_dim)
        q = self.q(x, adapter).view(shape).transpose(1, 2)
        k = self.k(x, adapter).view(shape).transpose(1, 2)
        v = self.v(x, adapter).view(shape).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.triu(torch.ones(seq, seq, dtype=torch.bool), diagonal=1)
        scores = scores.masked_fill(mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(bsz, seq, d)
        return self.o(out, adapter)


class GatedMLP(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h = config.d_model, config.mlp_hidden
        self.up = AdaptedLinear(d, h)
        self.gate = AdaptedLinear(d, h)
        self.down = AdaptedLinear(h, d)

    def forward(self, x, adapter=None):
        return self.down(F.silu(self.gate(x, adapter)) * self.up(x, adapter), adapter)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.d_model, config.rms_norm_eps)
        self.attn = CausalSelfAttention(config)
        self.mlp_norm = RMSNorm(config.d_model, config.rms_norm_eps)
        self.mlp = GatedMLP(config)

    def forward(self, x, adapter=None):
        x = x + self.attn(self.attn_norm(x), adapter)
        x = x + self.mlp(self.mlp_norm(x), adapter)
        return x


class TinyCausalLM(nn.Module):
    """The frozen-able base model; experts attach at forward time.

    ``forward(token_ids, adapter=None)`` returns logits of shape
    ``(seq_len, vocab)`` for 1-D input or ``(batch, seq_len, vocab)`` for
    2-D input. Sequences longer than ``context_len`` are rejected.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.context_len, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.final_norm = RMSNorm(config.d_model, config.rms_norm_eps)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        self.frozen = False
        self._init_parameters()
        for name, mod in self.named_modules():
            if isinstance(mod, AdaptedLinear):
                mod._qualname = name

    def _init_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.init_seed)
        with torch.no_grad():
            for name, param in self.named_parameters():
                if "norm" in name:
                    param.fill_(1.0)
                else:
                    param.normal_(0.0, 0.02, generator=gen)

    def adapted_layer_names(self) -> list[str]:
        """Names of the layers experts adapt (attention + MLP projections)."""
        return [m._qualname for m in self.modules() if isinstance(m, AdaptedLinear)]

    def adapted_layer_shapes(self) -> dict[str, tuple[int, int]]:
        """Map layer name -> (in_dim, out_dim) for every adaptable layer."""
        return {
            m._qualname: (m.in_dim, m.out_dim)
            for m in self.modules()
            if isinstance(m, AdaptedLinear)
        }

    def forward(self, token_ids, adapter=None):
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids.unsqueeze(0)
        if ids.dim() != 2:
            raise ValueError(f"token_ids must be 1-D or 2-D, got {ids.dim()}-D")
        seq = ids.shape[1]
        if seq > self.config.context_len:
            raise ValueError(
                f"sequence length {seq} exceeds context_len {self.config.context_len}"
            )
        pos = torch.arange(seq)
        x = self.token_emb(ids) + self.pos_emb(pos)
        for block in self.blocks:
            x = block(x, adapter)
        logits = self.head(self.final_norm(x))
        return logits.squeeze(0) if squeeze else logits

    def freeze(self) -> "TinyCausalLM":
        for param in self.parameters():
            param.requires_grad_(False)
        self.frozen = True
        return self

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def base_checksum(model: TinyCausalLM) -> str:
    """SHA-256 over all base tensors, for frozen-base immutability checks."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Loss and perplexity
# ---------------------------------------------------------------------------

def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token-level cross-entropy; positions with target IGNORE_INDEX are masked."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"logits leading shape {tuple(logits.shape[:-1])} does not match "
            f"targets shape {tuple(targets.shape)}"
        )
    flat = targets.reshape(-1)
    if not (flat != IGNORE_INDEX).any():
        raise ValueError("no unmasked target positions")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), flat, ignore_index=IGNORE_INDEX
    )


def _doc_nll(model: TinyCausalLM, adapter, token_ids: Sequence[int]) -> tuple[float, int]:
    """Total negative log-likelihood and predicted-token count for one document.

    The document is scored in non-overlapping windows of at most
    ``context_len`` tokens; windows never span documents.
    """
    ctx = model.config.context_len
    total_nll = 0.0
    total_predicted = 0
    for start in range(0, len(token_ids), ctx):
        window = token_ids[start:start + ctx]
        if len(window) < 2:
            continue
        ids = torch.tensor(window, dtype=torch.long)
        logits = model(ids[:-1], adapter)
        nll = F.cross_entropy(logits, ids[1:], reduction="sum")
        total_nll += float(nll)
        total_predicted += len(window) - 1
    return total_nll, total_predicted


def perplexity(model: TinyCausalLM, adapter, docs: Iterable[Document]) -> float:
    """exp(total NLL / total predicted tokens) over per-document windows."""
    docs = list(docs)
    if not docs:
        raise ValueError("perplexity of an empty document list is undefined")
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for doc in docs:
            nll, count = _doc_nll(model, adapter, doc.token_ids)
            total_nll += nll
            total_tokens += count
    if total_tokens == 0:
        raise ValueError("documents contain no predictable tokens")
    return math.exp(total_nll / total_tokens)


# ---------------------------------------------------------------------------
# Window packing and pretraining
# ---------------------------------------------------------------------------

def pack_windows(docs: Iterable[Document], context_len: int) -> list[list[int]]:
    """Split each document into non-overlapping windows of <= context_len tokens.

    Windows with fewer than 2 tokens (no predictable position) are dropped,
    so the packed token count can fall short of the corpus total by at most
    one token per document.
    """
    windows: list[list[int]] = []
    for doc in docs:
        ids = doc.token_ids
        for start in range(0, len(ids), context_len):
            window = ids[start:start + context_len]
            if len(window) >= 2:
                windows.append(list(window))
    return windows


def batch_tensors(windows: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad a list of windows into (inputs, targets) tensors.

    Inputs are padded with token 0 and the corresponding targets with
    IGNORE_INDEX, so padding never contributes to the loss.
    """
    width = max(len(w) for w in windows) - 1
    inputs = torch.zeros(len(windows), width, dtype=torch.long)
    targets = torch.full((len(windows), width), IGNORE_INDEX, dtype=torch.long)
    for i, window in enumerate(windows):
        n = len(window) - 1
        inputs[i, :n] = torch.tensor(window[:-1], dtype=torch.long)
        targets[i, :n] = torch.tensor(window[1:], dtype=torch.long)
    return inputs, targets


def pretrain(
    model: TinyCausalLM,
    docs: Iterable[Document],
    steps: int,
    lr_max: float = 4e-4,
    lr_min: float = 4e-5,
    batch_size: int = 16,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.0,
    seed: int = 0,
) -> list[float]:
    """Standard autoregressive training of the (unfrozen) base model.

    Windows are shuffled with a seeded RNG and consumed cyclically with a
    reshuffle per epoch; the model is updated in place. Returns the per-step
    losses. The caller freezes the model afterwards.
    """
    if model.frozen:
        raise RuntimeError("cannot pretrain a frozen model")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if steps == 0:
        return []
    windows = pack_windows(docs, model.config.context_len)
    if not windows:
        raise ValueError("no trainable windows in the corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(windows))
    cursor = 0
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=lr_max, betas=betas, weight_decay=weight_decay
    )
    losses: list[float] = []
    for step in range(steps):
        batch: list[Sequence[int]] = []
        while len(batch) < batch_size:
            if cursor == len(order):
                order = rng.permutation(len(windows))
                cursor = 0
            batch.append(windows[order[cursor]])
            cursor += 1
        inputs, targets = batch_tensors(batch)
        lr = cosine_lr(step, steps, lr_max, lr_min)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()
        loss = lm_loss(model(inputs), targets)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return losses


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _write_base(model: TinyCausalLM, fh: BinaryIO) -> None:
    cfg = model.config
    binio.write_magic(fh, BASE_MODEL_MAGIC)
    fh.write(struct.pack(
        "<IIIIII", cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
        cfg.context_len, cfg.mlp_hidden,
    ))
    binio.write_f64(fh, cfg.rms_norm_eps)
    binio.write_u64(fh, cfg.init_seed)
    fh.write(struct.pack("<B", 1 if model.frozen else 0))
    state = model.state_dict()
    binio.write_u32(fh, len(state))
    for name, tensor in state.items():
        binio.write_str(fh, name)
        arr = tensor.detach().cpu().numpy()
        binio.write_u32(fh, arr.ndim)
        for dim in arr.shape:
            binio.write_u32(fh, dim)
        binio.write_f32_array(fh, arr)


def _read_base(fh: BinaryIO) -> TinyCausalLM:
    binio.check_magic(fh, BASE_MODEL_MAGIC)
    raw = binio.read_exact(fh, 24, "model config")
    vocab, d_model, n_layers, n_heads, context_len, mlp_hidden = struct.unpack("<IIIIII", raw)
    eps = binio.read_f64(fh, "rms_norm_eps")
    init_seed = binio.read_u64(fh, "init_seed")
    frozen = binio.read_exact(fh, 1, "frozen flag")[0] != 0
    config = ModelConfig(
        vocab_size=vocab, d_model=d_model, n_layers=n_layers, n_heads=n_heads,
        context_len=context_len, mlp_hidden=mlp_hidden, rms_norm_eps=eps,
        init_seed=init_seed,
    )
    model = TinyCausalLM(config)
    count = binio.read_u32(fh, "tensor count")
    state = {}
    for _ in range(count):
        name = binio.read_str(fh, "tensor name")
        ndim = binio.read_u32(fh, f"rank of {name}")
        shape = tuple(binio.read_u32(fh, f"dim of {name}") for _ in range(ndim))
        state[name] = torch.from_numpy(binio.read_f32_array(fh, shape, f"tensor {name}"))
    model.load_state_dict(state, strict=True)
    if frozen:
        model.freeze()
    return model


def save_base(model: TinyCausalLM, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        _write_base(model, fh)


def load_base(path: str | Path) -> TinyCausalLM:
    with Path(path).open("rb") as fh:
        model = _read_base(fh)
        if fh.read(1):
            raise ValueError("trailing bytes after model tensors")
    return model


def save_base_bytes(model: TinyCausalLM) -> bytes:
    buf = BytesIO()
    _write_base(model, buf)
    return buf.getvalue()


def load_base_bytes(blob: bytes) -> TinyCausalLM:
    return _read_base(BytesIO(blob))
