""" Pack/unpack sub-byte codes, LSB-first, little-endian byte order
"""
import math

import numpy as np

from src.service.errors import FormatError

PACKABLE_BITWIDTHS = (1, 2, 4, 8)


def packed_nbytes(count: int, bitwidth: int) -> int:
    return math.ceil(count * bitwidth / 8)


def _shifts(bitwidth):
    per_byte = 8 // bitwidth
    return per_byte, (np.arange(per_byte, dtype=np.uint8) * bitwidth)


def pack_codes(codes: np.ndarray, bitwidth: int) -> bytes:
    """ join codes in chunks of bitwidth bits, first code in the lowest bits
    """
    if bitwidth not in PACKABLE_BITWIDTHS:
        raise ValueError(f"cannot pack {bitwidth}-bit codes")
    flat = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    if flat.size and int(flat.max()) >= (1 << bitwidth):
        raise ValueError(f"code {int(flat.max())} does not fit in {bitwidth} bits")
    if bitwidth == 8:
        return flat.tobytes()

    per_byte, shifts = _shifts(bitwidth)
    pad = (-flat.size) % per_byte
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, np.uint8)])
    lanes = flat.reshape(-1, per_byte) << shifts
    return np.bitwise_or.reduce(lanes, axis=1).astype(np.uint8).tobytes()


def unpack_codes(data: bytes, bitwidth: int, count: int) -> np.ndarray:
    """ split data in bitwidth-bit codes; the inverse of pack_codes
    """
    if bitwidth not in PACKABLE_BITWIDTHS:
        raise FormatError(f"unsupported bitwidth {bitwidth}")
    expected = packed_nbytes(count, bitwidth)
    if len(data) != expected:
        raise FormatError(f"payload holds {len(data)} bytes, expected {expected}")
    raw = np.frombuffer(data, dtype=np.uint8)
    if bitwidth == 8:
        return raw.copy()

    per_byte, shifts = _shifts(bitwidth)
    mask = np.uint8((1 << bitwidth) - 1)
    codes = ((raw[:, None] >> shifts) & mask).ravel()
    if codes[count:].any():
        raise FormatError("unexpected trailing bits after the last code")
    return codes[:count]
