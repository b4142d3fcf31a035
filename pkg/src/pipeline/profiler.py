"""
One-shot profiling of recompute and I/O delays at a few discrete points.
"""

import os
import tempfile
import time
from typing import Protocol, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.pipeline.cost_model import CostModel
from src.service.errors import ProfilingError
from src.service.logger import logger

DEFAULT_RECOMPUTE_POINTS = (1, 2, 4, 8)
DEFAULT_IO_POINTS = (256 * 1024, 1024 * 1024, 4 * 1024 * 1024, 16 * 1024 * 1024)


class ProfileEngine(Protocol):
    chunk_tokens: int

    def time_recompute(self, chunks: int) -> float: ...

    def time_io(self, nbytes: int) -> float: ...


def fit_linear(points: Sequence[Tuple[float, float]]) -> Tuple[float, float, float]:
    """Least-squares intercept, slope and R^2 of y = a + b*x."""
    if len(points) < 4:
        raise ProfilingError(f"at least 4 points are required, got {len(points)}")
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    if np.ptp(x) == 0:
        raise ProfilingError("all test points share the same x")
    design = np.column_stack([np.ones_like(x), x])
    (a, b), *_ = np.linalg.lstsq(design, y, rcond=None)
    residual = y - (a + b * x)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if total == 0 else 1.0 - float((residual ** 2).sum()) / total
    return float(a), float(b), r2


class SyntheticTimer:
    """Reports modelled delays instead of measuring them."""

    def __init__(self, a_re=0.0, b_re=0.1, a_io=0.0, b_io=1e-8, noise=0.0, seed=0, chunk_tokens=16):
        self.a_re, self.b_re, self.a_io, self.b_io = a_re, b_re, a_io, b_io
        self.noise = noise
        self.chunk_tokens = chunk_tokens
        self._rng = np.random.default_rng(seed)

    def _jitter(self) -> float:
        return float(self._rng.normal(0.0, self.noise)) if self.noise else 0.0

    def time_recompute(self, chunks: int) -> float:
        return self.a_re + self.b_re * chunks + self._jitter()

    def time_io(self, nbytes: int) -> float:
        return self.a_io + self.b_io * nbytes + self._jitter()


class TinyLmProfileEngine:
    """Times the toy model's chunk recompute and plain file reads on this machine."""

    def __init__(self, model_config, chunk_tokens: int = 16, scratch_dir=None, seed: int = 0):
        self.model_config = model_config
        self.chunk_tokens = chunk_tokens
        self.scratch_dir = scratch_dir
        self._rng = np.random.default_rng(seed)

    def time_recompute(self, chunks: int) -> float:
        from src.model.tinylm import KvTensor, TokenSpan, recompute_chunks

        tokens = chunks * self.chunk_tokens
        if tokens > self.model_config.max_seq:
            raise ProfilingError(f"{chunks} chunks exceed max_seq {self.model_config.max_seq}")
        ids = self._rng.integers(0, self.model_config.vocab, tokens).tolist()
        empty = KvTensor.empty(self.model_config)
        start = time.perf_counter()
        recompute_chunks(self.model_config, empty, [TokenSpan(0, tokens)], ids)
        return time.perf_counter() - start

    def time_io(self, nbytes: int) -> float:
        with tempfile.NamedTemporaryFile(dir=self.scratch_dir, delete=False) as fh:
            fh.write(os.urandom(nbytes))
            path = fh.name
        try:
            fd = os.open(path, os.O_RDONLY)
            try:
                if hasattr(os, "posix_fadvise"):
                    os.fsync(fd)
                    os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
                start = time.perf_counter()
                while os.read(fd, 1 << 20):
                    pass
                return time.perf_counter() - start
            finally:
                os.close(fd)
        finally:
            os.unlink(path)


def profile(engine: ProfileEngine, recompute_points: Sequence[int] = DEFAULT_RECOMPUTE_POINTS,
            io_points: Sequence[int] = DEFAULT_IO_POINTS, repeats: int = 1) -> CostModel:
    re_points, io_samples = [], []
    steps = (len(recompute_points) + len(io_points)) * repeats
    with tqdm(total=steps, desc="profiling") as bar:
        for x in recompute_points:
            for _ in range(repeats):
                re_points.append((float(x), engine.time_recompute(x)))
                bar.update(1)
        for m in io_points:
            for _ in range(repeats):
                io_samples.append((float(m), engine.time_io(m)))
                bar.update(1)

    a_re, b_re, r2_re = fit_linear(re_points)
    a_io, b_io, r2_io = fit_linear(io_samples)
    if b_re <= 0 or b_io <= 0:
        raise ProfilingError(f"non-positive slope (b_re={b_re}, b_io={b_io})")
    logger.info("profiled T_re = %.4g + %.4gx (R2 %.3f), T_IO = %.4g + %.4gm (R2 %.3f)",
                a_re, b_re, r2_re, a_io, b_io, r2_io)
    return CostModel(a_re=a_re, b_re=b_re, a_io=a_io, b_io=b_io, r2_re=r2_re, r2_io=r2_io,
                     re_points=re_points, io_points=io_samples, chunk_tokens=engine.chunk_tokens,
                     profiled_at=time.strftime("%Y-%m-%dT%H:%M:%S"))
