import numpy as np
import pytest

from src.model.tinylm import (KvTensor, TinyLmConfig, TokenSpan, decode, encode, forward_full, forward_step,
                              load_model, recompute_chunks)
from src.service.errors import ConsistencyError, LengthError, WindowError


@pytest.fixture
def config():
    return TinyLmConfig(layers=2, heads=4, head_dim=16, max_seq=64, seed=7)


def _evict(full: KvTensor, spans):
    keep = np.ones(len(full), dtype=bool)
    for span in spans:
        keep[span.start - int(full.positions[0]):span.stop - int(full.positions[0])] = False
    return KvTensor(full.keys[:, keep], full.values[:, keep], full.positions[keep])


def test_weights_are_deterministic(config):
    a = forward_full(config, encode("hello world"))
    load_model.cache_clear()
    b = forward_full(config, encode("hello world"))
    assert np.array_equal(a.kv.keys, b.kv.keys)
    assert np.array_equal(a.logits, b.logits)


def test_byte_tokenizer_round_trip():
    text = "context memory, 上下文"
    assert decode(encode(text)) == text
    assert all(0 <= t < 256 for t in encode(text))


def test_incremental_decode_matches_full_forward(config, rng):
    ids = rng.integers(0, config.vocab, 24).tolist()
    full = forward_full(config, ids)
    step = forward_full(config, ids[:10])
    kv = step.kv
    for token in ids[10:]:
        step = forward_step(config, kv, token)
        kv = step.kv
    np.testing.assert_allclose(kv.keys, full.kv.keys, atol=1e-5)
    np.testing.assert_allclose(kv.values, full.kv.values, atol=1e-5)
    np.testing.assert_allclose(step.logits, full.logits, atol=1e-4)


def test_attention_rows_are_causal_distributions(config, rng):
    ids = rng.integers(0, config.vocab, 12).tolist()
    attention = forward_full(config, ids).attention
    assert attention.shape == (config.layers, config.heads, 12, 12)
    np.testing.assert_allclose(attention.sum(axis=-1), 1.0, atol=1e-5)
    assert np.all(np.triu(attention[0, 0], k=1) == 0)


def test_global_positions_are_kept(config):
    result = forward_full(config, encode("abcd"), start_position=32)
    assert result.kv.positions.tolist() == [32, 33, 34, 35]
    shifted = forward_full(config, encode("abcd"))
    # rotary keys depend on the absolute position, values do not
    assert not np.allclose(result.kv.keys, shifted.kv.keys)
    np.testing.assert_allclose(result.kv.values, shifted.kv.values, atol=1e-4)


def test_recompute_of_random_chunk_subsets_is_exact(config, rng):
    ids = rng.integers(0, config.vocab, 64).tolist()
    full = forward_full(config, ids).kv
    chunks = [TokenSpan(s, s + 16) for s in range(0, 64, 16)]
    for _ in range(100):
        mask = rng.random(len(chunks)) < 0.5
        spans = [c for c, m in zip(chunks, mask) if m]
        recovered = recompute_chunks(config, _evict(full, spans), spans, ids)
        assert np.abs(recovered.keys - full.keys).max() <= 1e-4
        assert np.abs(recovered.values - full.values).max() <= 1e-4


def test_recompute_with_offset_window(config, rng):
    ids = rng.integers(0, config.vocab, 32).tolist()
    full = forward_full(config, ids, start_position=48).kv
    spans = [TokenSpan(48, 56), TokenSpan(64, 72)]
    recovered = recompute_chunks(config, _evict(full, spans), spans, ids, start_position=48)
    np.testing.assert_allclose(recovered.keys, full.keys, atol=1e-4)


def test_recompute_with_nothing_missing_copies(config, rng):
    ids = rng.integers(0, config.vocab, 8).tolist()
    full = forward_full(config, ids).kv
    recovered = recompute_chunks(config, full, [], ids)
    assert np.array_equal(recovered.keys, full.keys)
    assert recovered.keys is not full.keys


def test_overlapping_spans_are_rejected(config, rng):
    ids = rng.integers(0, config.vocab, 32).tolist()
    full = forward_full(config, ids).kv
    spans = [TokenSpan(0, 16), TokenSpan(8, 24)]
    with pytest.raises(ConsistencyError):
        recompute_chunks(config, _evict(full, spans[:1]), spans, ids)


def test_resident_positions_must_match(config, rng):
    ids = rng.integers(0, config.vocab, 32).tolist()
    full = forward_full(config, ids).kv
    with pytest.raises(ConsistencyError):
        recompute_chunks(config, full, [TokenSpan(0, 16)], ids)


def test_length_limits(config):
    with pytest.raises(LengthError):
        forward_full(config, [])
    with pytest.raises(LengthError):
        forward_full(config, [1] * (config.max_seq + 1))
    kv = forward_full(config, [1] * config.max_seq).kv
    with pytest.raises(WindowError):
        forward_step(config, kv, 2)


def test_head_dim_must_be_even():
    with pytest.raises(ValueError):
        TinyLmConfig(head_dim=15)


def test_changing_a_token_leaves_earlier_rows_alone(config, rng):
    ids = rng.integers(0, config.vocab, 20).tolist()
    changed = list(ids)
    changed[11] = (ids[11] + 1) % config.vocab
    a = forward_full(config, ids).kv
    b = forward_full(config, changed).kv
    np.testing.assert_allclose(a.keys[:, :11], b.keys[:, :11], atol=1e-6)
    np.testing.assert_allclose(a.values[:, :11], b.values[:, :11], atol=1e-6)
    assert not np.allclose(a.keys[:, 11:], b.keys[:, 11:], atol=1e-6)
    assert not np.allclose(a.values[:, 11:], b.values[:, 11:], atol=1e-6)


def test_recompute_of_single_token_spans(config):
    ids = encode("abcdef")
    full = forward_full(config, ids).kv
    spans = [TokenSpan(2, 3), TokenSpan(4, 5)]
    recovered = recompute_chunks(config, _evict(full, spans), spans, ids)
    np.testing.assert_allclose(recovered.keys, full.keys, atol=1e-4)
    np.testing.assert_allclose(recovered.values, full.values, atol=1e-4)
