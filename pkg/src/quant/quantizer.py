"""
Channel-wise asymmetric linear quantization of KV chunks.

A chunk block has shape (L, 2, T, H, d): layer, K/V, token, head, head-dim.
One channel is a (layer, K/V, head, dim) lane across the chunk's T tokens, so
scale and zero point have shape (L, 2, H, d). Codes are serialized in the
block's C order, which makes every layer a contiguous byte segment.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from src.quant.bitpack import pack_codes, packed_nbytes, unpack_codes
from src.service.errors import FormatError, NumericError

QUANT_BITWIDTHS = (8, 4, 2)
FULL_PRECISION = 32


@dataclass(frozen=True)
class QuantizedChunkPayload:
    bitwidth: int
    shape: Tuple[int, int, int, int, int]
    scale: np.ndarray
    zero_point: np.ndarray
    packed: bytes

    @property
    def tokens(self) -> int:
        return self.shape[2]

    @property
    def channels(self) -> int:
        L, kv, _, H, d = self.shape
        return L * kv * H * d

    @property
    def nbytes(self) -> int:
        """Payload bytes only; the unit of the memory ledger."""
        return len(self.packed)

    @property
    def metadata_nbytes(self) -> int:
        return int(self.scale.nbytes + self.zero_point.nbytes)

    def codes(self) -> np.ndarray:
        count = int(np.prod(self.shape))
        return unpack_codes(self.packed, self.bitwidth, count).reshape(self.shape)


def payload_nbytes(tokens: int, channels: int, bitwidth: int) -> int:
    return packed_nbytes(tokens * channels, bitwidth)


def quantize(chunk_kv: np.ndarray, bitwidth: int) -> QuantizedChunkPayload:
    if chunk_kv.ndim != 5 or chunk_kv.size == 0:
        raise ValueError(f"expected a non-empty (L, 2, T, H, d) block, got shape {chunk_kv.shape}")
    x = np.asarray(chunk_kv, dtype=np.float32)
    if not np.isfinite(x).all():
        raise NumericError("chunk contains non-finite values")

    L, kv, T, H, d = x.shape
    if bitwidth == FULL_PRECISION:
        ones = np.ones((L, kv, H, d), np.float32)
        return QuantizedChunkPayload(bitwidth, x.shape, ones, np.zeros_like(ones), x.astype("<f4").tobytes())
    if bitwidth not in QUANT_BITWIDTHS:
        raise ValueError(f"bitwidth must be one of {QUANT_BITWIDTHS} or {FULL_PRECISION}")

    levels = (1 << bitwidth) - 1
    low = x.min(axis=2)
    high = x.max(axis=2)
    span = high - low
    scale = np.where(span > 0, span / np.float32(levels), np.float32(1.0)).astype(np.float32)
    zero_point = low.astype(np.float32)

    # np.rint rounds half to even
    codes = np.rint((x - zero_point[:, :, None]) / scale[:, :, None])
    codes = np.clip(codes, 0, levels).astype(np.uint8)
    return QuantizedChunkPayload(bitwidth, x.shape, scale, zero_point, pack_codes(codes, bitwidth))


def dequantize_codes(packed: bytes, bitwidth: int, scale: np.ndarray, zero_point: np.ndarray,
                     shape: Tuple[int, ...]) -> np.ndarray:
    """Reconstruct a block (or a single layer's block) from its packed payload."""
    count = int(np.prod(shape))
    if bitwidth == FULL_PRECISION:
        if len(packed) != count * 4:
            raise FormatError(f"float payload holds {len(packed)} bytes, expected {count * 4}")
        return np.frombuffer(packed, dtype="<f4").astype(np.float32).reshape(shape)
    if bitwidth not in QUANT_BITWIDTHS:
        raise FormatError(f"unsupported bitwidth {bitwidth}")
    codes = unpack_codes(packed, bitwidth, count).reshape(shape).astype(np.float32)
    token_axis = len(shape) - 3
    return codes * np.expand_dims(scale, token_axis) + np.expand_dims(zero_point, token_axis)


def dequantize(payload: QuantizedChunkPayload) -> np.ndarray:
    return dequantize_codes(payload.packed, payload.bitwidth, payload.scale, payload.zero_point, payload.shape)


def requantize(payload: QuantizedChunkPayload, lower_bitwidth: int) -> QuantizedChunkPayload:
    if lower_bitwidth >= payload.bitwidth:
        raise ValueError(f"cannot requantize {payload.bitwidth}-bit payload to {lower_bitwidth} bits")
    return quantize(dequantize(payload), lower_bitwidth)


def bitwidth_for_ratio(ratio: float, base_bitwidth: int = 8) -> int:
    """Map a chunk ratio (relative to the 8-bit base) to its bitwidth."""
    bits = ratio * base_bitwidth
    rounded = int(round(bits))
    if abs(bits - rounded) > 1e-9 or rounded not in QUANT_BITWIDTHS:
        raise ValueError(f"ratio {ratio} has no matching bitwidth")
    return rounded
