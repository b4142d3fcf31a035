"""
Trace replay against context-memory policies.

The simulated device serves one callLLM at a time. For each event the policy
makes the called context resident (the switching latency), prefills the new
prompt, decodes the answer, and lets the context grow. Memory, eviction order
and the swap-in/recompute split come from the same components the live
store uses; only time is modelled, through a CostModel.

Policies
    llms                    8-bit chunks, tolerance-aware compression, LCTRU,
                            ahead-of-time swap-out, swapping-recompute pipeline
    llms-minus-pipeline     ... without the pipeline (pure swap-in)
    llms-minus-compression  ... with uniform 8-bit chunks
    llms-minus-lifecycle    ... with LRU order and synchronous write-back
    vllm-s                  16-bit chunks, LRU, synchronous write-back
    vllm-sq                 8-bit chunks, LRU, synchronous write-back
    swap                    whole 16-bit contexts swapped in and out
    lmk                     whole contexts killed and recomputed on next use
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.compression.thresholds import DEFAULT_RATIOS, solve_thresholds
from src.lifecycle.lctru import LctruQueue
from src.memory.chunk import KvChunk, Residency
from src.memory.ledger import MemoryLedger
from src.pipeline.cost_model import CostModel
from src.pipeline.planner import pick_recompute_set, plan
from src.quant.quantizer import bitwidth_for_ratio, payload_nbytes
from src.service.errors import BusyError, InsufficientMemoryError, OutOfMemoryError, PolicyError
from src.service.logger import logger
from src.trace.trace_gen import TraceConfig, TraceEvent, generate

ACCESS_MODES = ("full", "sparse")


@dataclass(frozen=True)
class SimulationModel:
    """A 7B-class decoder: 32 layers, hidden 4096, 512 KiB of 16-bit KV per token."""
    layers: int = 32
    hidden: int = 4096
    window_tokens: int = 2048
    chunk_tokens: int = 16
    ratios: Tuple[float, ...] = DEFAULT_RATIOS
    ratio_global: float = 0.5
    decode_seconds_per_token: float = 0.05
    sparse_fraction: float = 0.1
    sparse_span_tokens: int = 16
    seed: int = 0

    @property
    def channels(self) -> int:
        return self.layers * 2 * self.hidden

    def nbytes(self, tokens: int, bitwidth: int) -> int:
        return payload_nbytes(tokens, self.channels, bitwidth)

    def windowed(self, first_position: int, length: int) -> Tuple[int, int]:
        """(first_position, length) after dropping whole chunks beyond the window."""
        excess = length - self.window_tokens
        if excess < self.chunk_tokens:
            return first_position, length
        drop = (excess // self.chunk_tokens) * self.chunk_tokens
        return first_position + drop, length - drop


@dataclass(frozen=True)
class PolicySpec:
    name: str
    granularity: str = "chunk"      # "chunk" | "context"
    eviction: str = "lctru"         # "lctru" | "lru" | "kill"
    aot: bool = True
    pipeline: bool = True
    base_bitwidth: int = 8          # 16 or 8
    compress: bool = True

    def store_config(self, base):
        """StoreConfig for live replay; 16-bit chunks map to unquantized storage."""
        if self.granularity != "chunk":
            raise PolicyError(f"policy {self.name!r} is only available in simulation")
        return replace(base, quantize=self.base_bitwidth == 8, compress=self.compress,
                       eviction=self.eviction, aot=self.aot, pipeline=self.pipeline)


POLICIES: Dict[str, PolicySpec] = {
    "llms": PolicySpec("llms"),
    "llms-minus-pipeline": PolicySpec("llms-minus-pipeline", pipeline=False),
    "llms-minus-compression": PolicySpec("llms-minus-compression", compress=False),
    "llms-minus-lifecycle": PolicySpec("llms-minus-lifecycle", eviction="lru", aot=False),
    "vllm-s": PolicySpec("vllm-s", eviction="lru", aot=False, pipeline=False, base_bitwidth=16, compress=False),
    "vllm-sq": PolicySpec("vllm-sq", eviction="lru", aot=False, pipeline=False, base_bitwidth=8, compress=False),
    "swap": PolicySpec("swap", granularity="context", eviction="lru", aot=False, pipeline=False,
                       base_bitwidth=16, compress=False),
    "lmk": PolicySpec("lmk", granularity="context", eviction="kill", aot=False, pipeline=False,
                      base_bitwidth=16, compress=False),
}


def get_policy(policy: Union[str, PolicySpec]) -> PolicySpec:
    if isinstance(policy, PolicySpec):
        return policy
    try:
        return POLICIES[policy]
    except KeyError:
        raise PolicyError(f"unknown policy {policy!r}; choose from {sorted(POLICIES)}") from None


@dataclass
class EventMetrics:
    index: int
    time: float
    ctx_id: int
    queue_seconds: float = 0.0
    switch_latency: float = 0.0
    write_seconds: float = 0.0
    load_seconds: float = 0.0
    run_seconds: float = 0.0
    bytes_read: int = 0
    bytes_written_sync: int = 0
    bytes_written_aot: int = 0
    chunks_loaded: int = 0
    chunks_recomputed: int = 0
    evictions: int = 0
    faults: int = 0
    busy: bool = False
    degraded: bool = False


@dataclass
class ReplayMetrics:
    policy: str
    events: pd.DataFrame

    @property
    def served(self) -> pd.DataFrame:
        return self.events[~self.events["busy"]] if len(self.events) else self.events

    def _latency(self) -> np.ndarray:
        return self.served["switch_latency"].to_numpy(dtype=np.float64) if len(self.events) else np.zeros(0)

    @property
    def mean(self) -> float:
        lat = self._latency()
        return float(lat.mean()) if lat.size else 0.0

    @property
    def p50(self) -> float:
        lat = self._latency()
        return float(np.percentile(lat, 50)) if lat.size else 0.0

    @property
    def p95(self) -> float:
        lat = self._latency()
        return float(np.percentile(lat, 95)) if lat.size else 0.0

    @property
    def max(self) -> float:
        lat = self._latency()
        return float(lat.max()) if lat.size else 0.0

    def total(self, column: str) -> int:
        return int(self.events[column].sum()) if len(self.events) else 0

    @property
    def faults(self) -> int:
        return self.total("faults")

    @property
    def busy(self) -> int:
        return self.total("busy")

    @property
    def bytes_read(self) -> int:
        return self.total("bytes_read")

    @property
    def bytes_written(self) -> int:
        return self.total("bytes_written_sync") + self.total("bytes_written_aot")

    @property
    def chunks_recomputed(self) -> int:
        return self.total("chunks_recomputed")

    def summary(self) -> Dict[str, float]:
        return {
            "policy": self.policy,
            "events": len(self.events),
            "mean": self.mean,
            "p50": self.p50,
            "p95": self.p95,
            "max": self.max,
            "faults": self.faults,
            "busy": self.busy,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "chunks_recomputed": self.chunks_recomputed,
        }

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.events.to_csv(path, index=False, float_format="%.6f")
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("\n")
        pd.DataFrame([self.summary()]).to_csv(path, mode="a", index=False, float_format="%.6f")
        return path


def _metrics_frame(rows: List[EventMetrics]) -> pd.DataFrame:
    columns = list(EventMetrics.__dataclass_fields__)
    return pd.DataFrame([asdict(r) for r in rows], columns=columns)


def _chunk_density(seed: int, ctx_id: int, chunk_index: int) -> float:
    # attention mass concentrates on few chunks; a lognormal spread mimics that
    return float(np.random.default_rng([seed, ctx_id, chunk_index]).lognormal(0.0, 1.0))


# ----------------------------------------------------------------------
# chunk-granular policies
# ----------------------------------------------------------------------
@dataclass
class _SimContext:
    ctx_id: int
    first_position: int = 0
    length: int = 0
    chunks: Dict[int, KvChunk] = field(default_factory=dict)

    @property
    def end_position(self) -> int:
        return self.first_position + self.length


class _ChunkSimulator:

    def __init__(self, spec: PolicySpec, budget_bytes: int, cost: CostModel, model: SimulationModel,
                 access: str):
        self.spec = spec
        self.cost = cost
        self.model = model
        self.access = access
        self.ledger = MemoryLedger(budget_bytes)
        self.queue = LctruQueue(class_ordered=spec.eviction == "lctru")
        self.contexts: Dict[int, _SimContext] = {}
        self.disk_free_at = 0.0

    # memory -------------------------------------------------------------
    def _make_room(self, nbytes: int, ctx_id: int) -> Tuple[int, int, int]:
        """Reclaim until nbytes are free; returns (bytes written, write ops, evictions)."""
        shortfall = nbytes - self.ledger.free
        if shortfall <= 0:
            return 0, 0, 0
        victims = self.queue.pop_for(shortfall, skip=lambda key: key[0] == ctx_id)
        written = ops = 0
        for entry in victims:
            chunk = self.contexts[entry.key[0]].chunks[entry.key[1]]
            if chunk.dirty:
                written += chunk.nbytes
                ops += 1
                chunk.dirty = False
            self.ledger.release(chunk.key)
            chunk.residency = Residency.ON_DISK
        return written, ops, len(victims)

    def _admit(self, chunk: KvChunk, now: int, dirty: bool) -> None:
        self.ledger.claim(chunk.key, chunk.nbytes)
        chunk.residency = Residency.IN_MEMORY if dirty else Residency.BOTH
        chunk.dirty = dirty
        chunk.last_access = now
        self.queue.add(chunk.key, chunk.ratio, chunk.nbytes, now)

    def _resize(self, chunk: KvChunk, bitwidth: int, tokens: int, ctx_id: int) -> Tuple[int, int, int]:
        new_bytes = self.model.nbytes(tokens, bitwidth)
        grow = new_bytes - chunk.nbytes
        spill = self._make_room(grow, ctx_id) if grow > 0 else (0, 0, 0)
        self.ledger.resize(chunk.key, new_bytes)
        chunk.bitwidth = bitwidth
        chunk.token_count = tokens
        chunk.dirty = True
        chunk.residency = Residency.IN_MEMORY
        self.queue.reclassify(chunk.key, chunk.ratio, chunk.nbytes)
        return spill

    # access -------------------------------------------------------------
    def _needed(self, ctx: _SimContext, index: int) -> List[KvChunk]:
        chunks = [ctx.chunks[i] for i in sorted(ctx.chunks)]
        if self.access == "full" or not chunks:
            return chunks
        rng = np.random.default_rng([self.model.seed, index])
        span = self.model.sparse_span_tokens
        count = max(1, math.ceil(self.model.sparse_fraction * ctx.length / span))
        hi = max(ctx.end_position - span, ctx.first_position)
        starts = rng.integers(ctx.first_position, hi + 1, size=count)
        c = self.model.chunk_tokens
        wanted = {chunks[-1].chunk_index}
        for s in starts:
            stop = min(int(s) + span, ctx.end_position)
            wanted.update(range(int(s) // c, (stop - 1) // c + 1))
        return [ctx.chunks[i] for i in sorted(wanted) if i in ctx.chunks]

    # one call -------------------------------------------------------------
    def serve(self, index: int, event: TraceEvent, start: float) -> Tuple[EventMetrics, float]:
        model, cost, spec = self.model, self.cost, self.spec
        ctx = self.contexts.setdefault(event.ctx_id, _SimContext(event.ctx_id))
        row = EventMetrics(index, event.time, event.ctx_id)
        now = index + 1
        prompt_tokens = len(event.prompt.encode("utf-8"))
        answer_tokens = len(event.ground_truth.encode("utf-8"))

        current = sum(c.nbytes for c in ctx.chunks.values())
        after = self._grown_nbytes(ctx, prompt_tokens + answer_tokens)
        if max(after, current) > self.ledger.budget:
            row.busy = True
            return row, start

        # switch: reclaim + load
        needed = self._needed(ctx, index)
        missing = [c for c in needed if not c.in_memory]
        missing_bytes = sum(c.nbytes for c in missing)
        reserve = max(0, after - current)
        written, ops, row.evictions = self._make_room(missing_bytes + reserve, ctx.ctx_id)
        row.bytes_written_sync = written
        row.write_seconds = cost.io_seconds(written, ops)

        load_seconds, io_bytes = 0.0, 0
        if missing:
            by_ratio: Dict[float, List[KvChunk]] = {}
            for chunk in missing:
                by_ratio.setdefault(chunk.ratio, []).append(chunk)
            chunk_bytes = model.nbytes(model.chunk_tokens, 8)
            if spec.pipeline:
                pipeline_plan = plan(cost, {r: len(v) for r, v in by_ratio.items()}, missing_bytes, chunk_bytes)
                recompute = pick_recompute_set(by_ratio, pipeline_plan)
            else:
                recompute = []
            recompute_keys = {c.key for c in recompute}
            io_chunks = [c for c in missing if c.key not in recompute_keys]
            io_bytes = sum(c.nbytes for c in io_chunks)
            load_seconds = max(cost.recompute_seconds(len(recompute)), cost.io_seconds(io_bytes, len(io_chunks)))
            for chunk in missing:
                self._admit(chunk, now, dirty=False)
            row.chunks_loaded = len(io_chunks)
            row.chunks_recomputed = len(recompute)
        row.bytes_read = io_bytes
        row.load_seconds = load_seconds

        disk_wait = max(0.0, self.disk_free_at - start) if (written or io_bytes) else 0.0
        row.switch_latency = disk_wait + row.write_seconds + load_seconds
        if written or io_bytes:
            self.disk_free_at = start + row.switch_latency
        self.queue.touch([c.key for c in needed], now)
        for chunk in needed:
            chunk.last_access = now

        # inference: the context grows by the prompt and the answer
        spill = self._grow(ctx, prompt_tokens + answer_tokens, now)
        if spill[0]:
            self.disk_free_at = max(self.disk_free_at, start + row.switch_latency) + cost.io_seconds(*spill[:2])
            row.bytes_written_sync += spill[0]
        row.evictions += spill[2]
        # needed chunks pushed out while the context grew would fault during decode
        row.faults = sum(1 for c in needed if ctx.chunks.get(c.chunk_index) is c and not c.in_memory)
        row.run_seconds = (cost.b_re * prompt_tokens / model.chunk_tokens
                           + model.decode_seconds_per_token * answer_tokens)
        end = start + row.switch_latency + row.run_seconds

        if spec.compress:
            self._compress(ctx)

        if spec.aot:
            dirty = [c for c in ctx.chunks.values() if c.dirty and c.in_memory]
            nbytes = sum(c.nbytes for c in dirty)
            if nbytes:
                self.disk_free_at = max(end, self.disk_free_at) + cost.io_seconds(nbytes, len(dirty))
                row.bytes_written_aot = nbytes
            for chunk in dirty:
                chunk.dirty = False
                chunk.residency = Residency.BOTH
        return row, end

    def _grown_nbytes(self, ctx: _SimContext, tokens: int) -> int:
        """Bytes of the context's chunks once it has grown by `tokens` and slid its window."""
        model, c = self.model, self.model.chunk_tokens
        first, length = model.windowed(ctx.first_position, ctx.length + tokens)
        end = first + length
        total = 0
        for idx in range(first // c, (end - 1) // c + 1):
            start = idx * c
            count = min(start + c, end) - max(start, first)
            chunk = ctx.chunks.get(idx)
            if chunk is not None and chunk.token_count == count:
                total += chunk.nbytes
            else:
                total += model.nbytes(count, self.spec.base_bitwidth)
        return total

    def _grow(self, ctx: _SimContext, tokens: int, now: int) -> Tuple[int, int, int]:
        model, c = self.model, self.model.chunk_tokens
        first, length = model.windowed(ctx.first_position, ctx.length + tokens)
        for idx in [i for i in ctx.chunks if i < first // c]:
            chunk = ctx.chunks.pop(idx)
            if chunk.key in self.ledger:
                self.ledger.release(chunk.key)
            self.queue.remove(chunk.key)
        old_end = ctx.end_position
        ctx.first_position, ctx.length = first, length
        written = ops = evictions = 0
        for idx in range(max(old_end, first) // c, (ctx.end_position - 1) // c + 1):
            start = idx * c
            count = min(start + c, ctx.end_position) - max(start, first)
            chunk = ctx.chunks.get(idx)
            if chunk is None:
                chunk = KvChunk(ctx.ctx_id, idx, start, count, model.channels, self.spec.base_bitwidth,
                                density=_chunk_density(model.seed, ctx.ctx_id, idx))
                w, o, e = self._make_room(chunk.nbytes, ctx.ctx_id)
                self._admit(chunk, now, dirty=True)
                ctx.chunks[idx] = chunk
            elif chunk.token_count != count:
                if not chunk.in_memory:
                    w, o, e = self._make_room(chunk.nbytes, ctx.ctx_id)
                    self._admit(chunk, now, dirty=True)
                    written, ops, evictions = written + w, ops + o, evictions + e
                w, o, e = self._resize(chunk, self.spec.base_bitwidth, count, ctx.ctx_id)
            else:
                continue
            written, ops, evictions = written + w, ops + o, evictions + e
        return written, ops, evictions

    def _compress(self, ctx: _SimContext) -> None:
        full = [ctx.chunks[i] for i in sorted(ctx.chunks) if ctx.chunks[i].token_count == self.model.chunk_tokens]
        if not full:
            return
        plan_ = solve_thresholds([ch.density for ch in full], self.model.ratios, self.model.ratio_global)
        for chunk, ratio in zip(full, plan_.assignment):
            target = bitwidth_for_ratio(ratio, 8)
            if target < chunk.bitwidth and chunk.in_memory:
                self._resize(chunk, target, chunk.token_count, ctx.ctx_id)


# ----------------------------------------------------------------------
# context-granular policies
# ----------------------------------------------------------------------
@dataclass
class _WholeContext:
    ctx_id: int
    first_position: int = 0
    length: int = 0
    resident: bool = False


class _ContextSimulator:

    def __init__(self, spec: PolicySpec, budget_bytes: int, cost: CostModel, model: SimulationModel):
        self.spec = spec
        self.cost = cost
        self.model = model
        self.ledger = MemoryLedger(budget_bytes)
        self.queue = LctruQueue(class_ordered=False)
        self.contexts: Dict[int, _WholeContext] = {}
        self.disk_free_at = 0.0

    def serve(self, index: int, event: TraceEvent, start: float) -> Tuple[EventMetrics, float]:
        model, cost = self.model, self.cost
        ctx = self.contexts.setdefault(event.ctx_id, _WholeContext(event.ctx_id))
        row = EventMetrics(index, event.time, event.ctx_id)
        now = index + 1
        prompt_tokens = len(event.prompt.encode("utf-8"))
        answer_tokens = len(event.ground_truth.encode("utf-8"))
        first, final_len = model.windowed(ctx.first_position, ctx.length + prompt_tokens + answer_tokens)
        current = model.nbytes(ctx.length, self.spec.base_bitwidth)
        final = model.nbytes(final_len, self.spec.base_bitwidth)
        if final > self.ledger.budget:
            row.busy = True
            return row, start

        held = current if ctx.resident else 0
        victims = self.queue.pop_for(final - held - self.ledger.free, skip=lambda key: key == ctx.ctx_id)
        written = 0
        for entry in victims:
            victim = self.contexts[entry.key]
            self.ledger.release(victim.ctx_id)
            victim.resident = False
            if self.spec.eviction != "kill":
                written += entry.nbytes
        row.evictions = len(victims)
        row.bytes_written_sync = written
        row.write_seconds = cost.io_seconds(written, len(victims))

        load_seconds = 0.0
        if not ctx.resident and ctx.length:
            if self.spec.eviction == "kill":
                chunks = math.ceil(ctx.length / model.chunk_tokens)
                load_seconds = cost.recompute_seconds(chunks)
                row.chunks_recomputed = chunks
            else:
                load_seconds = cost.io_seconds(current, 1)
                row.bytes_read = current
        row.load_seconds = load_seconds

        uses_disk = bool(written or row.bytes_read)
        disk_wait = max(0.0, self.disk_free_at - start) if uses_disk else 0.0
        row.switch_latency = disk_wait + row.write_seconds + load_seconds
        if uses_disk:
            self.disk_free_at = start + row.switch_latency

        if ctx.resident:
            self.ledger.resize(ctx.ctx_id, final)
        else:
            self.ledger.claim(ctx.ctx_id, final)
            ctx.resident = True
        ctx.first_position, ctx.length = first, final_len
        self.queue.add(ctx.ctx_id, 1.0, final, now)

        row.run_seconds = (cost.b_re * prompt_tokens / model.chunk_tokens
                           + model.decode_seconds_per_token * answer_tokens)
        return row, start + row.switch_latency + row.run_seconds


# ----------------------------------------------------------------------
# entry points
# ----------------------------------------------------------------------
def replay(
    trace: Sequence[TraceEvent],
    policy: Union[str, PolicySpec],
    budget_bytes: int,
    cost: Optional[CostModel] = None,
    model: Optional[SimulationModel] = None,
    access: str = "full",
    progress: bool = False,
) -> ReplayMetrics:
    """Simulated replay; deterministic for a fixed trace, policy, model and cost."""
    spec = get_policy(policy)
    if access not in ACCESS_MODES:
        raise PolicyError(f"access must be one of {ACCESS_MODES}, got {access!r}")
    model = model or SimulationModel()
    cost = (cost or CostModel.calibrated(model.chunk_tokens)).with_chunk_tokens(model.chunk_tokens)
    if spec.granularity == "chunk":
        sim = _ChunkSimulator(spec, budget_bytes, cost, model, access)
    else:
        sim = _ContextSimulator(spec, budget_bytes, cost, model)

    rows, engine_free_at = [], 0.0
    for index, event in enumerate(tqdm(trace, desc=spec.name, disable=not progress)):
        start = max(event.time, engine_free_at)
        try:
            row, end = sim.serve(index, event, start)
        except (OutOfMemoryError, InsufficientMemoryError) as e:
            logger.warning("event %d of context %d is busy: %s", index, event.ctx_id, e)
            row, end = EventMetrics(index, event.time, event.ctx_id, busy=True), start
        row.queue_seconds = start - event.time
        rows.append(row)
        engine_free_at = end
    metrics = ReplayMetrics(spec.name, _metrics_frame(rows))
    logger.info("%s: mean switching latency %.4fs over %d events", spec.name, metrics.mean, len(rows))
    return metrics


def replay_live(
    trace: Sequence[TraceEvent],
    policy: Union[str, PolicySpec],
    service_factory: Callable,
    max_new_tokens: Optional[int] = None,
    progress: bool = False,
) -> ReplayMetrics:
    """
    Replay through a real LlmService. `service_factory(spec)` builds the
    service for the policy; trace contexts are created on first use.

    I/O is taken from the store's counters around each call, so eviction
    writes made on behalf of an event are charged to it; write_seconds covers
    every swap-file write of the event. Calls whose working set cannot be
    made resident are recorded as busy and the replay goes on.
    """
    spec = get_policy(policy)
    if spec.granularity != "chunk":
        raise PolicyError(f"policy {spec.name!r} is only available in simulation")
    service = service_factory(spec)
    stats = service.store.stats
    handles: Dict[int, int] = {}
    rows = []
    try:
        for index, event in enumerate(tqdm(trace, desc=f"{spec.name} (live)", disable=not progress)):
            if event.ctx_id not in handles:
                handles[event.ctx_id] = service.new_llm_ctx("replay").ctx_id
            cap = len(event.ground_truth.encode("utf-8")) or 1
            if max_new_tokens is not None:
                cap = min(cap, max_new_tokens)
            before = replace(stats)
            try:
                result = service.call_llm("replay", handles[event.ctx_id], event.prompt, max_new_tokens=cap)
            except (BusyError, OutOfMemoryError, InsufficientMemoryError) as e:
                logger.warning("event %d of context %d is busy: %s", index, event.ctx_id, e)
                row = EventMetrics(index, event.time, event.ctx_id, busy=True)
                _charge_io(row, before, stats, aot_bytes=0)
                rows.append(row)
                continue
            row = EventMetrics(
                index, event.time, event.ctx_id,
                switch_latency=result.switch_latency,
                load_seconds=result.load_report.wall_seconds,
                run_seconds=result.decode_seconds,
                chunks_loaded=result.load_report.chunks_loaded,
                faults=result.faults,
                degraded=result.load_report.degraded or result.write_report.degraded,
            )
            _charge_io(row, before, stats, aot_bytes=result.write_report.bytes_written)
            rows.append(row)
    finally:
        for handle in handles.values():
            service.del_llm_ctx("replay", handle)
    return ReplayMetrics(spec.name, _metrics_frame(rows))


def _charge_io(row: EventMetrics, before, after, aot_bytes: int) -> None:
    delta = {f.name: getattr(after, f.name) - getattr(before, f.name) for f in fields(after)}
    row.bytes_read = delta["bytes_read"]
    row.bytes_written_aot = aot_bytes
    row.bytes_written_sync = delta["bytes_written"] - aot_bytes
    row.write_seconds = delta["write_seconds"]
    row.evictions = delta["evictions"]
    row.chunks_recomputed = delta["chunks_recomputed"]


def sweep_chunk_size(
    trace: Sequence[TraceEvent],
    sizes: Sequence[int],
    budget_bytes: int,
    policy: Union[str, PolicySpec] = "llms",
    cost: Optional[CostModel] = None,
    model: Optional[SimulationModel] = None,
    access: str = "sparse",
    progress: bool = False,
) -> pd.DataFrame:
    """Mean switching latency per chunk size. `cost` is given per 16-token chunk."""
    model = model or SimulationModel()
    cost = cost or CostModel.calibrated(16)
    rows = []
    for size in tqdm(sizes, desc="chunk sizes", disable=not progress):
        sized = replace(model, chunk_tokens=int(size))
        metrics = replay(trace, policy, budget_bytes, cost.with_chunk_tokens(int(size)), sized, access)
        rows.append({"chunk_tokens": int(size), "mean": metrics.mean, "p95": metrics.p95,
                     "bytes_read": metrics.bytes_read, "chunks_recomputed": metrics.chunks_recomputed})
    return pd.DataFrame(rows)


def max_active_contexts(
    trace_config: TraceConfig,
    policy: Union[str, PolicySpec],
    budget_bytes: int,
    latency_constraint: float,
    cost: Optional[CostModel] = None,
    model: Optional[SimulationModel] = None,
    max_contexts: int = 16,
    progress: bool = False,
) -> Tuple[int, pd.DataFrame]:
    """Largest active-context count whose mean switching latency meets the constraint."""
    rows, best = [], 0
    for n in tqdm(range(1, max_contexts + 1), desc="contexts", disable=not progress):
        metrics = replay(generate(replace(trace_config, contexts=n)), policy, budget_bytes, cost, model)
        ok = metrics.mean <= latency_constraint
        rows.append({"contexts": n, "mean": metrics.mean, "within": ok})
        if ok:
            best = n
    return best, pd.DataFrame(rows)


def sweep_calling_rate(
    trace_config: TraceConfig,
    rates: Sequence[float],
    policy: Union[str, PolicySpec],
    budget_bytes: int,
    cost: Optional[CostModel] = None,
    model: Optional[SimulationModel] = None,
    progress: bool = False,
) -> pd.DataFrame:
    rows = []
    for rate in tqdm(rates, desc="rates", disable=not progress):
        metrics = replay(generate(replace(trace_config, rate=float(rate))), policy, budget_bytes, cost, model)
        rows.append({"rate": float(rate), "events": len(metrics.events), "mean": metrics.mean,
                     "p95": metrics.p95})
    return pd.DataFrame(rows)
