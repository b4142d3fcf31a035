from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from src.compression.density import DensityLedger
from src.compression.thresholds import DEFAULT_RATIOS
from src.model.tinylm import TokenSpan
from src.quant.quantizer import FULL_PRECISION, QuantizedChunkPayload, payload_nbytes

ChunkKey = Tuple[int, int]


class Residency(Enum):
    IN_MEMORY = 1   # no up-to-date swap file
    ON_DISK = 2
    BOTH = 3        # in memory with an identical swap file


@dataclass(frozen=True)
class StoreConfig:
    swap_dir: str = "./swap"
    budget_bytes: int = 64 * 1024 * 1024
    chunk_tokens: int = 16
    ratios: Tuple[float, ...] = DEFAULT_RATIOS
    ratio_global: float = 0.5
    window_tokens: int = 256
    quantize: bool = True           # False keeps chunks at full precision
    compress: bool = True           # tolerance-aware mixed ratios on top of the base bitwidth
    eviction: str = "lctru"         # "lctru" or "lru"
    aot: bool = True
    pipeline: bool = True

    def __post_init__(self):
        if self.chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1")
        if self.window_tokens < self.chunk_tokens:
            raise ValueError("window_tokens must hold at least one chunk")
        if self.eviction not in ("lctru", "lru"):
            raise ValueError(f"unknown eviction order {self.eviction!r}")

    @property
    def base_bitwidth(self) -> int:
        return 8 if self.quantize else FULL_PRECISION


@dataclass
class KvChunk:
    ctx_id: int
    chunk_index: int
    token_start: int
    token_count: int
    channels: int
    bitwidth: int
    payload: Optional[QuantizedChunkPayload] = None
    density: float = 0.0
    residency: Residency = Residency.IN_MEMORY
    dirty: bool = True
    last_access: int = 0
    file_crc: Optional[int] = None      # digest of the payload last written to the swap file

    @property
    def key(self) -> ChunkKey:
        return self.ctx_id, self.chunk_index

    @property
    def span(self) -> TokenSpan:
        return TokenSpan(self.token_start, self.token_start + self.token_count)

    @property
    def ratio(self) -> float:
        """Size relative to the 8-bit base; the LCTRU class of the chunk."""
        return self.bitwidth / 8

    @property
    def in_memory(self) -> bool:
        return self.residency in (Residency.IN_MEMORY, Residency.BOTH)

    @property
    def nbytes(self) -> int:
        return payload_nbytes(self.token_count, self.channels, self.bitwidth)

    @property
    def metadata_nbytes(self) -> int:
        return 2 * 4 * self.channels


@dataclass
class ContextState:
    ctx_id: int
    density: DensityLedger
    client_id: str = "local"
    system_prompt: Optional[str] = None
    token_ids: List[int] = field(default_factory=list)     # memory-resident text fragment
    first_position: int = 0
    chunks: Dict[int, KvChunk] = field(default_factory=dict)
    locked: bool = False
    clock: int = 0

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def end_position(self) -> int:
        return self.first_position + self.length

    def chunk_list(self) -> List[KvChunk]:
        return [self.chunks[i] for i in sorted(self.chunks)]

    def missing_chunks(self) -> List[KvChunk]:
        return [c for c in self.chunk_list() if not c.in_memory]

    def nbytes(self) -> int:
        return sum(c.nbytes for c in self.chunks.values())

    def resident_nbytes(self) -> int:
        return sum(c.nbytes for c in self.chunks.values() if c.in_memory)
