import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Tuple

from src.service.errors import ProfilingError

# Prefill of a 4096-token context on the reference accelerator, in seconds.
REFERENCE_PREFILL_SECONDS = 22.92
REFERENCE_PREFILL_TOKENS = 4096


@dataclass
class CostModel:
    """
    Linear delays: T_re(x) = a_re + b_re*x chunks, T_IO(m) = a_io + b_io*m bytes.

    With io_per_op (the default) the fixed I/O cost is paid once per chunk
    file read, a_io*ops; without it once per load.
    """
    a_re: float
    b_re: float
    a_io: float
    b_io: float
    r2_re: float = 1.0
    r2_io: float = 1.0
    re_points: List[Tuple[float, float]] = field(default_factory=list)
    io_points: List[Tuple[float, float]] = field(default_factory=list)
    chunk_tokens: int = 16
    profiled_at: str = ""
    io_per_op: bool = True

    def __post_init__(self):
        if self.b_re <= 0 or self.b_io <= 0:
            raise ProfilingError(f"slopes must be positive (b_re={self.b_re}, b_io={self.b_io})")

    def recompute_seconds(self, chunks: float) -> float:
        if chunks <= 0:
            return 0.0
        return self.a_re + self.b_re * chunks

    def io_seconds(self, nbytes: float, ops: float = 1) -> float:
        if nbytes <= 0:
            return 0.0
        ops = max(ops, 1) if self.io_per_op else 1
        return self.a_io * ops + self.b_io * nbytes

    def with_chunk_tokens(self, chunk_tokens: int) -> "CostModel":
        """Rescale the per-chunk recompute slope to another chunk size."""
        return replace(self, b_re=self.b_re * chunk_tokens / self.chunk_tokens, chunk_tokens=chunk_tokens)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CostModel":
        data = dict(data)
        data["re_points"] = [tuple(p) for p in data.get("re_points", [])]
        data["io_points"] = [tuple(p) for p in data.get("io_points", [])]
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CostModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def calibrated(cls, chunk_tokens: int = 16, a_re: float = 0.005, a_io: float = 0.0005,
                   b_io: float = 1.0e-9) -> "CostModel":
        """Reference desk profile: roughly 1 GB/s flash reads and a 7B-class prefill rate."""
        b_re = REFERENCE_PREFILL_SECONDS / REFERENCE_PREFILL_TOKENS * chunk_tokens
        return cls(a_re=a_re, b_re=b_re, a_io=a_io, b_io=b_io, chunk_tokens=chunk_tokens,
                   profiled_at=time.strftime("%Y-%m-%dT%H:%M:%S"))
