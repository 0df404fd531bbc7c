import hashlib

import numpy as np
import pytest
import torch

from topiclora import (
    AdapterRegistry,
    ModelConfig,
    TinyCausalLM,
    adapter_filename,
    init_adapter,
    load_adapter,
    lora_delta,
    merged_weight,
    save_adapter,
    tokenize,
)
from topiclora.lora import adapter_bytes


def tiny_model(**overrides):
    return TinyCausalLM(ModelConfig(**overrides))


def random_adapter(model, topic_id=0, rank=4, seed=0, scale=0.05):
    adapter = init_adapter(model, topic_id=topic_id, rank=rank, seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    for name, (a, b) in adapter.layers.items():
        adapter.layers[name] = (a, torch.randn(b.shape, generator=gen) * scale)
    return adapter


def adapter_checksum(adapter):
    h = hashlib.sha256()
    for name in sorted(adapter.layers):
        a, b = adapter.layers[name]
        h.update(name.encode())
        h.update(a.detach().numpy().tobytes())
        h.update(b.detach().numpy().tobytes())
    return h.hexdigest()


def test_lora_delta_matches_dense_merge():
    # oracle: dense (W + W_b W_a) x at small fixed shapes
    rng = np.random.default_rng(0)
    for _ in range(100):
        d, k, r = 5, 3, 2
        w = rng.normal(size=(k, d))
        a = rng.normal(size=(r, d))
        b = rng.normal(size=(k, r))
        x = rng.normal(size=d)
        got = w @ x + lora_delta(x, a, b)
        want = (w + b @ a) @ x
        assert np.abs(got - want).max() < 1e-6


def test_lora_delta_mixed_shapes():
    rng = np.random.default_rng(1)
    for _ in range(100):
        d = int(rng.integers(1, 12))
        k = int(rng.integers(1, 12))
        r = int(rng.integers(1, min(d, k) + 1))
        w = rng.normal(size=(k, d))
        a = rng.normal(size=(r, d))
        b = rng.normal(size=(k, r))
        x = rng.normal(size=d)
        got = w @ x + lora_delta(x, a, b)
        want = merged_weight(w, a, b) @ x
        assert np.abs(got - want).max() < 1e-6


def test_merged_weight_formula():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(4, 6))
    a = rng.normal(size=(2, 6))
    b = rng.normal(size=(4, 2))
    assert np.allclose(merged_weight(w, a, b), w + b @ a, atol=1e-12)


def test_init_adapter_b_zero_a_gaussian():
    model = tiny_model()
    adapter = init_adapter(model, topic_id=3, rank=4, seed=9)
    assert adapter.topic_id == 3
    assert adapter.rank == 4
    assert adapter.seed == 9
    a_values = []
    for a, b in adapter.layers.values():
        assert torch.count_nonzero(b) == 0
        assert a.shape[0] == 4 and b.shape[1] == 4
        a_values.append(a.flatten())
    flat = torch.cat(a_values)
    assert flat.std().item() == pytest.approx(0.02, rel=0.15)
    assert flat.abs().max().item() > 0


def test_init_adapter_deterministic():
    model = tiny_model()
    a = init_adapter(model, topic_id=0, rank=4, seed=5)
    b = init_adapter(model, topic_id=0, rank=4, seed=5)
    assert adapter_checksum(a) == adapter_checksum(b)
    c = init_adapter(model, topic_id=0, rank=4, seed=6)
    assert adapter_checksum(a) != adapter_checksum(c)


def test_fresh_adapter_logits_noop():
    model = tiny_model()
    adapter = init_adapter(model, topic_id=0, rank=8, seed=0)
    ids = torch.tensor(tokenize("no-op check"))
    base = model(ids)
    adapted = model(ids, adapter=adapter)
    assert torch.equal(base, adapted)
    assert (base - adapted).abs().max().item() <= 1e-7


def test_rank_validation():
    model = tiny_model()
    with pytest.raises(ValueError, match="rank"):
        init_adapter(model, topic_id=0, rank=65, seed=0)
    with pytest.raises(ValueError):
        init_adapter(model, topic_id=0, rank=0, seed=0)
    with pytest.raises(ValueError):
        init_adapter(model, topic_id=-1, rank=4, seed=0)
    with pytest.warns(UserWarning, match="rank"):
        init_adapter(model, topic_id=0, rank=32, seed=0)


def test_adapter_parameter_count_closed_form():
    model = tiny_model()
    adapter = init_adapter(model, topic_id=0, rank=8, seed=0)
    d, h = 64, 256
    per_block = 4 * (8 * d + d * 8) + 2 * (8 * d + h * 8) + (8 * h + d * 8)
    assert adapter.num_parameters() == 2 * per_block
    # adapter stays a small fraction of the base
    fraction = adapter.num_parameters() / model.parameter_count()
    assert 0.0 < fraction < 0.5


def test_adapter_round_trip(tmp_path):
    model = tiny_model()
    adapter = random_adapter(model, topic_id=12, rank=4, seed=3)
    adapter.tokens_seen = 12345
    adapter.final_loss = 2.5
    p = tmp_path / adapter_filename(12)
    save_adapter(adapter, p)
    back = load_adapter(p)
    assert back.topic_id == 12
    assert back.rank == 4
    assert back.seed == adapter.seed
    assert back.tokens_seen == 12345
    assert back.final_loss == pytest.approx(2.5)
    assert sorted(back.layers) == sorted(adapter.layers)
    for name in adapter.layers:
        a0, b0 = adapter.layers[name]
        a1, b1 = back.layers[name]
        assert torch.equal(a0, a1) and torch.equal(b0, b1)


def test_adapter_bytes_round_trip():
    model = tiny_model()
    adapter = random_adapter(model, topic_id=1, rank=2, seed=0)
    blob = adapter_bytes(adapter)
    assert blob[:8] == b"MOIN-LRA"


def test_load_adapter_rejects_trailing_bytes(tmp_path):
    model = tiny_model()
    adapter = init_adapter(model, topic_id=0, rank=2, seed=0)
    p = tmp_path / "a.lora"
    save_adapter(adapter, p)
    p.write_bytes(p.read_bytes() + b"zz")
    with pytest.raises(ValueError, match="trailing"):
        load_adapter(p)


def test_adapter_filename_format():
    assert adapter_filename(12) == "topic_00012.lora"
    assert adapter_filename(0) == "topic_00000.lora"


def test_registry_scan_at_desk_scale(tmp_path):
    # stand-in for a multi-thousand-adapter registry
    model = tiny_model()
    for t in range(47):
        save_adapter(init_adapter(model, topic_id=t, rank=2, seed=t), tmp_path / adapter_filename(t))
    registry = AdapterRegistry(tmp_path)
    assert registry.topic_ids() == list(range(47))
    assert registry.get(13).topic_id == 13
    assert registry.get(99) is None


def test_registry_duplicate_topic_error(tmp_path):
    model = tiny_model()
    adapter = init_adapter(model, topic_id=4, rank=2, seed=0)
    save_adapter(adapter, tmp_path / "one.lora")
    save_adapter(adapter, tmp_path / "two.lora")
    with pytest.raises(ValueError, match="duplicate"):
        AdapterRegistry(tmp_path)


def test_registry_lazy_cache_returns_same_object(tmp_path):
    model = tiny_model()
    save_adapter(init_adapter(model, topic_id=0, rank=2, seed=0), tmp_path / adapter_filename(0))
    registry = AdapterRegistry(tmp_path)
    assert registry.get(0) is registry.get(0)


def test_forward_does_not_mutate_adapter():
    model = tiny_model()
    adapter = random_adapter(model, topic_id=0, rank=4, seed=2)
    before = adapter_checksum(adapter)
    ids = torch.tensor(tokenize("serving must not mutate adapters"))
    for _ in range(3):
        model(ids, adapter=adapter)
    assert adapter_checksum(adapter) == before


def test_adapter_shape_mismatch_rejected():
    model = tiny_model()
    other = tiny_model(d_model=32, n_heads=2)
    adapter = init_adapter(other, topic_id=0, rank=2, seed=0)
    ids = torch.tensor(tokenize("shape check"))
    with pytest.raises(ValueError, match="shape"):
        model(ids, adapter=adapter)
