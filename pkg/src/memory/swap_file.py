"""
On-disk chunk files.

    header   "<4sHQIIHBHHH"  magic, version, ctx_id, chunk_index, token_start,
                             token_count, bitwidth, layers, heads, head_dim
    scale    f32[L, 2, H, d]
    zero     f32[L, 2, H, d]
    payload  packed codes, layer-major
    crc32    u32 over everything above

Every layer's codes are a contiguous segment of the payload, so a loader can
stream a chunk one layer at a time. The CRC is checked once the last layer
has been read.
"""

import os
import pickle
import shutil
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.quant.bitpack import packed_nbytes
from src.quant.quantizer import FULL_PRECISION, QuantizedChunkPayload, dequantize_codes
from src.service.errors import FormatError

MAGIC = b"LLMC"
VERSION = 1
SUFFIX = ".llmc"
CONTEXT_METADATA = "context.pkl"

_HEADER = struct.Struct("<4sHQIIHBHHH")
_CRC = struct.Struct("<I")


@dataclass(frozen=True)
class SwapHeader:
    ctx_id: int
    chunk_index: int
    token_start: int
    token_count: int
    bitwidth: int
    layers: int
    heads: int
    head_dim: int

    @property
    def channels_per_layer(self) -> int:
        return 2 * self.heads * self.head_dim

    @property
    def layer_nbytes(self) -> int:
        return packed_nbytes(self.token_count * self.channels_per_layer, self.bitwidth)

    @property
    def layer_shape(self) -> Tuple[int, int, int, int]:
        return 2, self.token_count, self.heads, self.head_dim

    @property
    def shape(self) -> Tuple[int, int, int, int, int]:
        return (self.layers,) + self.layer_shape

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.ctx_id, self.chunk_index, self.token_start,
                            self.token_count, self.bitwidth, self.layers, self.heads, self.head_dim)


def context_dir(swap_dir, ctx_id: int) -> Path:
    return Path(swap_dir) / f"{ctx_id:016x}"


def chunk_path(swap_dir, ctx_id: int, chunk_index: int) -> Path:
    return context_dir(swap_dir, ctx_id) / f"{chunk_index:06d}{SUFFIX}"


def encode_chunk(header: SwapHeader, payload: QuantizedChunkPayload) -> bytes:
    if payload.shape != header.shape or payload.bitwidth != header.bitwidth:
        raise FormatError(f"payload {payload.shape}/{payload.bitwidth}b does not match header")
    # a byte-aligned layer boundary keeps layer segments addressable
    if header.layers > 1 and (header.token_count * header.channels_per_layer * header.bitwidth) % 8:
        raise FormatError("layer segment is not byte aligned")
    body = b"".join([
        header.pack(),
        payload.scale.astype("<f4").tobytes(),
        payload.zero_point.astype("<f4").tobytes(),
        payload.packed,
    ])
    return body + _CRC.pack(zlib.crc32(body))


def payload_digest(payload: QuantizedChunkPayload) -> int:
    crc = zlib.crc32(payload.scale.astype("<f4").tobytes())
    crc = zlib.crc32(payload.zero_point.astype("<f4").tobytes(), crc)
    return zlib.crc32(payload.packed, crc)


def write_chunk(path, header: SwapHeader, payload: QuantizedChunkPayload) -> int:
    """Atomically replace the chunk file; returns bytes written."""
    data = encode_chunk(header, payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(SUFFIX + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


class SwapFileReader:
    """Reads one chunk file layer by layer."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "rb")
        self._crc = 0
        self._segments: List[Optional[bytes]] = []
        self.bytes_read = 0
        try:
            raw = self._read(_HEADER.size)
            magic, version, *fields = _HEADER.unpack(raw)
            if magic != MAGIC:
                raise FormatError(f"{self.path}: bad magic {magic!r}")
            if version != VERSION:
                raise FormatError(f"{self.path}: unsupported version {version}")
            self.header = SwapHeader(*fields)
            if self.header.bitwidth not in (1, 2, 4, 8, FULL_PRECISION):
                raise FormatError(f"{self.path}: bad bitwidth {self.header.bitwidth}")
            meta_shape = (self.header.layers, 2, self.header.heads, self.header.head_dim)
            count = int(np.prod(meta_shape))
            self.scale = np.frombuffer(self._read(4 * count), "<f4").astype(np.float32).reshape(meta_shape)
            self.zero_point = np.frombuffer(self._read(4 * count), "<f4").astype(np.float32).reshape(meta_shape)
        except Exception:
            self._fh.close()
            raise
        self._payload_offset = self._fh.tell()
        self._segments = [None] * self.header.layers

    def _read(self, size: int) -> bytes:
        data = self._fh.read(size)
        if len(data) != size:
            raise FormatError(f"{self.path}: truncated (wanted {size} bytes, got {len(data)})")
        self.bytes_read += size
        return data

    def read_layer_bytes(self, layer: int) -> bytes:
        if not 0 <= layer < self.header.layers:
            raise FormatError(f"{self.path}: no layer {layer}")
        self._fh.seek(self._payload_offset + layer * self.header.layer_nbytes)
        segment = self._read(self.header.layer_nbytes)
        self._segments[layer] = segment
        return segment

    def read_layer(self, layer: int) -> np.ndarray:
        """Dequantized (2, T, H, d) block of one layer."""
        segment = self.read_layer_bytes(layer)
        return dequantize_codes(segment, self.header.bitwidth, self.scale[layer], self.zero_point[layer],
                                self.header.layer_shape)

    def finish(self) -> QuantizedChunkPayload:
        """Verify the trailer and assemble the full payload; every layer must have been read."""
        try:
            for layer, segment in enumerate(self._segments):
                if segment is None:
                    self.read_layer_bytes(layer)
            self._fh.seek(self._payload_offset + self.header.layers * self.header.layer_nbytes)
            (stored,) = _CRC.unpack(self._read(_CRC.size))
            if self._fh.read(1):
                raise FormatError(f"{self.path}: trailing bytes after checksum")
            packed = b"".join(self._segments)
            body = b"".join([
                self.header.pack(),
                self.scale.astype("<f4").tobytes(),
                self.zero_point.astype("<f4").tobytes(),
                packed,
            ])
            if zlib.crc32(body) != stored:
                raise FormatError(f"{self.path}: checksum mismatch")
            return QuantizedChunkPayload(self.header.bitwidth, self.header.shape,
                                         self.scale, self.zero_point, packed)
        finally:
            self.close()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_chunk(path) -> Tuple[SwapHeader, QuantizedChunkPayload]:
    reader = SwapFileReader(path)
    return reader.header, reader.finish()


def remove_context_files(swap_dir, ctx_id: int) -> None:
    shutil.rmtree(context_dir(swap_dir, ctx_id), ignore_errors=True)


def remove_chunk_file(swap_dir, ctx_id: int, chunk_index: int) -> None:
    try:
        chunk_path(swap_dir, ctx_id, chunk_index).unlink()
    except FileNotFoundError:
        pass


def save_context_metadata(swap_dir, ctx_id: int, metadata: Dict) -> None:
    path = context_dir(swap_dir, ctx_id) / CONTEXT_METADATA
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(metadata, fh)
    os.replace(tmp, path)


def load_context_metadata(swap_dir, ctx_id: int) -> Dict:
    path = context_dir(swap_dir, ctx_id) / CONTEXT_METADATA
    with open(path, "rb") as fh:
        return pickle.load(fh)
