"""
Deterministic toy decoder-only transformer with an explicit KV cache.

The model is never trained: weights are drawn from a seeded generator so that
two processes built from the same TinyLmConfig hold bit-identical weights. It
exists to produce real attention scores and real K/V tensors for the memory
manager, and to recompute arbitrary interleaved chunks of a context exactly.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from src.service.errors import ConsistencyError, LengthError, WindowError


@dataclass(frozen=True)
class TinyLmConfig:
    layers: int = 2
    heads: int = 4
    head_dim: int = 16
    vocab: int = 256
    max_seq: int = 512
    seed: int = 0
    rope_theta: float = 10000.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be >= 1")
        # rotary embedding rotates (x_i, x_{i+d/2}) pairs
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError("head_dim must be a positive even number")
        if self.vocab < 1 or self.max_seq < 1:
            raise ValueError("vocab and max_seq must be >= 1")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @property
    def channels(self) -> int:
        """K/V lanes per token across all layers."""
        return self.layers * 2 * self.heads * self.head_dim


@dataclass(frozen=True)
class TokenSpan:
    """Half-open range [start, stop) of global token positions."""
    start: int
    stop: int

    def __post_init__(self):
        if self.start < 0 or self.stop < self.start:
            raise ValueError(f"invalid span [{self.start}, {self.stop})")

    def __len__(self):
        return self.stop - self.start

    def overlaps(self, other: "TokenSpan") -> bool:
        return self.start < other.stop and other.start < self.stop


@dataclass
class KvTensor:
    keys: np.ndarray        # (L, T, H, d) float32
    values: np.ndarray      # (L, T, H, d) float32
    positions: np.ndarray   # (T,) int64, global token positions

    @classmethod
    def empty(cls, config: TinyLmConfig) -> "KvTensor":
        shape = (config.layers, 0, config.heads, config.head_dim)
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32), np.zeros(0, np.int64))

    def __len__(self):
        return int(self.positions.shape[0])

    def check_consistent(self):
        if self.keys.shape != self.values.shape:
            raise ConsistencyError(f"K/V shape mismatch {self.keys.shape} vs {self.values.shape}")
        if self.keys.shape[1] != len(self):
            raise ConsistencyError(
                f"per-layer length {self.keys.shape[1]} does not match {len(self)} positions")

    @property
    def next_position(self) -> int:
        return int(self.positions[-1]) + 1 if len(self) else 0

    def chunk_array(self, start: int, stop: int) -> np.ndarray:
        """K/V of local rows [start, stop) as one (L, 2, t, H, d) block."""
        return np.stack([self.keys[:, start:stop], self.values[:, start:stop]], axis=1)

    def drop_front(self, count: int) -> "KvTensor":
        return KvTensor(self.keys[:, count:].copy(), self.values[:, count:].copy(),
                        self.positions[count:].copy())

    @classmethod
    def from_chunk_arrays(cls, blocks: Sequence[np.ndarray], first_position: int) -> "KvTensor":
        joined = np.concatenate(blocks, axis=2)
        count = joined.shape[2]
        return cls(np.ascontiguousarray(joined[:, 0]), np.ascontiguousarray(joined[:, 1]),
                   np.arange(first_position, first_position + count, dtype=np.int64))


class ForwardResult(NamedTuple):
    kv: KvTensor
    attention: np.ndarray   # (L, H, n_new, T_total); lower-triangular when the cache was empty
    logits: np.ndarray      # (vocab,) next-token logits after the last input token


def encode(text: str) -> List[int]:
    return list(text.encode("utf-8"))


def decode(token_ids: Sequence[int]) -> str:
    return bytes(int(t) for t in token_ids).decode("utf-8", errors="replace")


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + np.float32(1e-6))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


def _attend(q, q_pos, k, v, k_pos):
    """Causal attention over keys selected by position, not by storage order."""
    scale = np.float32(1.0 / math.sqrt(q.shape[-1]))
    scores = np.einsum("nhd,thd->hnt", q, k) * scale
    masked = k_pos[None, :] > q_pos[:, None]
    scores = np.where(masked[None], np.float32(-np.inf), scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.einsum("hnt,thd->nhd", probs, v)
    return out.astype(np.float32), probs.astype(np.float32)


class _LayerWeights(NamedTuple):
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


class TinyLm:

    def __init__(self, config: TinyLmConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        hidden = config.hidden
        inner = hidden * config.mlp_ratio

        def normal(shape, fan_in):
            return rng.standard_normal(shape, dtype=np.float32) * np.float32(1.0 / math.sqrt(fan_in))

        self.embedding = rng.standard_normal((config.vocab, hidden), dtype=np.float32)
        self.layers = [
            _LayerWeights(
                wq=normal((hidden, hidden), hidden),
                wk=normal((hidden, hidden), hidden),
                wv=normal((hidden, hidden), hidden),
                wo=normal((hidden, hidden), hidden),
                w_up=normal((hidden, inner), hidden),
                w_down=normal((inner, hidden), inner),
            )
            for _ in range(config.layers)
        ]
        self.lm_head = normal((hidden, config.vocab), hidden)
        half = config.head_dim // 2
        self.inv_freq = (1.0 / (config.rope_theta ** (np.arange(half, dtype=np.float64) / half)))

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------
    def rotate(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Apply rotary embedding to (n, H, d) at the given global positions."""
        angles = np.outer(positions.astype(np.float64), self.inv_freq)
        cos = np.cos(angles).astype(np.float32)[:, None, :]
        sin = np.sin(angles).astype(np.float32)[:, None, :]
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def _project(self, layer: int, x: np.ndarray, positions: np.ndarray):
        w = self.layers[layer]
        n = x.shape[0]
        shape = (n, self.config.heads, self.config.head_dim)
        h = _rms_norm(x)
        q = self.rotate((h @ w.wq).reshape(shape), positions)
        k = self.rotate((h @ w.wk).reshape(shape), positions)
        v = (h @ w.wv).reshape(shape)
        return q, k, v

    def _finish_layer(self, layer: int, x: np.ndarray, attn_out: np.ndarray) -> np.ndarray:
        w = self.layers[layer]
        x = x + attn_out.reshape(x.shape[0], -1) @ w.wo
        return x + _silu(_rms_norm(x) @ w.w_up) @ w.w_down

    def logits(self, x_last: np.ndarray) -> np.ndarray:
        return (_rms_norm(x_last[None])[0] @ self.lm_head).astype(np.float32)

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------
    def extend(self, kv: KvTensor, token_ids: Sequence[int], start_position: Optional[int] = None) -> ForwardResult:
        """Append tokens to a cache; the general form of prefill and decode."""
        n = len(token_ids)
        if n == 0:
            raise LengthError("at least one token is required")
        kv.check_consistent()
        if len(kv) + n > self.config.max_seq:
            if len(kv):
                raise WindowError(f"cache of {len(kv)} tokens cannot take {n} more (max {self.config.max_seq})")
            raise LengthError(f"sequence of {n} tokens exceeds max_seq {self.config.max_seq}")

        first = kv.next_position if len(kv) else (start_position or 0)
        positions = np.arange(first, first + n, dtype=np.int64)
        all_positions = np.concatenate([kv.positions, positions])
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.min() < 0 or ids.max() >= self.config.vocab:
            raise ValueError("token id out of vocabulary")

        L, H = self.config.layers, self.config.heads
        total = len(all_positions)
        keys = np.empty((L, total, H, self.config.head_dim), np.float32)
        values = np.empty_like(keys)
        attention = np.empty((L, H, n, total), np.float32)

        x = self.embedding[ids]
        for layer in range(L):
            q, k, v = self._project(layer, x, positions)
            keys[layer, :len(kv)] = kv.keys[layer]
            values[layer, :len(kv)] = kv.values[layer]
            keys[layer, len(kv):] = k
            values[layer, len(kv):] = v
            out, probs = _attend(q, positions, keys[layer], values[layer], all_positions)
            attention[layer] = probs
            x = self._finish_layer(layer, x, out)

        return ForwardResult(KvTensor(keys, values, all_positions), attention, self.logits(x[-1]))

    def recompute_session(self, token_ids: Sequence[int], positions: np.ndarray, missing: np.ndarray) -> "RecomputeSession":
        return RecomputeSession(self, token_ids, positions, missing)


class RecomputeSession:
    """
    Layer-by-layer recompute of missing rows of a KV cache.

    Only the hidden states of missing tokens are carried between layers; every
    other token contributes through its resident K/V. A layer can be stepped as
    soon as the resident K/V of that layer are in place, which is what lets the
    loader overlap the next layer's I/O with this layer's compute.
    """

    def __init__(self, model: TinyLm, token_ids: Sequence[int], positions: np.ndarray, missing: np.ndarray):
        self.model = model
        self.positions = positions
        self.missing = missing
        ids = np.asarray(token_ids, dtype=np.int64)[missing]
        self.q_pos = positions[missing]
        self.x = model.embedding[ids]
        self.next_layer = 0

    def step(self, layer: int, keys: np.ndarray, values: np.ndarray) -> None:
        """Fill the missing rows of one layer's (T, H, d) keys/values in place."""
        if layer != self.next_layer:
            raise ConsistencyError(f"layer {layer} stepped out of order (expected {self.next_layer})")
        self.next_layer += 1
        if not self.missing.any():
            return
        q, k, v = self.model._project(layer, self.x, self.q_pos)
        keys[self.missing] = k
        values[self.missing] = v
        out, _ = _attend(q, self.q_pos, keys, values, self.positions)
        self.x = self.model._finish_layer(layer, self.x, out)


@lru_cache(maxsize=8)
def load_model(config: TinyLmConfig) -> TinyLm:
    return TinyLm(config)


def forward_full(config: TinyLmConfig, token_ids: Sequence[int], start_position: int = 0) -> ForwardResult:
    if not 1 <= len(token_ids) <= config.max_seq:
        raise LengthError(f"sequence length {len(token_ids)} outside [1, {config.max_seq}]")
    return load_model(config).extend(KvTensor.empty(config), token_ids, start_position)


def forward_step(config: TinyLmConfig, kv_cache: KvTensor, new_token_id: int) -> ForwardResult:
    kv_cache.check_consistent()
    if len(kv_cache) >= config.max_seq:
        raise WindowError(f"cache holds {len(kv_cache)} tokens, the maximum; slide the window first")
    return load_model(config).extend(kv_cache, [new_token_id])


def missing_mask(positions: np.ndarray, spans: Sequence[TokenSpan]) -> np.ndarray:
    mask = np.zeros(len(positions), dtype=bool)
    for span in spans:
        mask |= (positions >= span.start) & (positions < span.stop)
    return mask


def recompute_chunks(
    config: TinyLmConfig,
    resident_kv: KvTensor,
    missing_spans: Sequence[TokenSpan],
    token_ids: Sequence[int],
    start_position: int = 0,
) -> KvTensor:
    """Recover a full cache from resident K/V plus the text of the missing spans."""
    resident_kv.check_consistent()
    spans = sorted(missing_spans, key=lambda s: s.start)
    for a, b in zip(spans, spans[1:]):
        if a.overlaps(b):
            raise ConsistencyError(f"missing spans {a} and {b} overlap")

    positions = np.arange(start_position, start_position + len(token_ids), dtype=np.int64)
    if spans and (spans[0].start < start_position or spans[-1].stop > positions[-1] + 1):
        raise ConsistencyError("missing span outside the token range")
    missing = missing_mask(positions, spans)

    if not np.array_equal(resident_kv.positions, positions[~missing]):
        raise ConsistencyError("resident positions must be exactly the non-missing positions")
    if not missing.any():
        return KvTensor(resident_kv.keys.copy(), resident_kv.values.copy(), resident_kv.positions.copy())

    shape = (config.layers, len(positions), config.heads, config.head_dim)
    keys = np.zeros(shape, np.float32)
    values = np.zeros(shape, np.float32)
    keys[:, ~missing] = resident_kv.keys
    values[:, ~missing] = resident_kv.values

    session = load_model(config).recompute_session(token_ids, positions, missing)
    for layer in range(config.layers):
        session.step(layer, keys[layer], values[layer])
    return KvTensor(keys, values, positions)
