"""
Chunk-wise context memory.

Every context is split into a memory-resident text fragment (its token ids,
never swapped) and a swappable fragment: fixed-span KV chunks. The store
implements the four memory primitives on top of a byte ledger:

    claim    give free memory to a chunk
    reclaim  swap chunks out (in LCTRU order) until enough bytes are free
    load     bring a context's missing chunks back, part from swap files and
             part by recomputing them from the resident text
    fault    synchronous single-chunk load during inference
"""

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from src.compression.density import DensityLedger
from src.lifecycle.lctru import LctruQueue
from src.memory.chunk import ContextState, KvChunk, Residency, StoreConfig
from src.memory.ledger import MemoryLedger
from src.memory.swap_file import (CONTEXT_METADATA, SwapFileReader, SwapHeader, chunk_path, context_dir,
                                  load_context_metadata, payload_digest, remove_chunk_file, remove_context_files,
                                  save_context_metadata, write_chunk)
from src.model.tinylm import KvTensor, TinyLmConfig, load_model, missing_mask, recompute_chunks
from src.pipeline.cost_model import CostModel
from src.pipeline.executor import LoadReport, execute_overlapped
from src.pipeline.planner import pick_recompute_set, plan
from src.quant.quantizer import QuantizedChunkPayload, dequantize, payload_nbytes, quantize, requantize
from src.service.errors import ConsistencyError, ContextError, FormatError, NotFoundError, OutOfMemoryError
from src.service.logger import logger

METADATA_VERSION = 1


@dataclass
class StoreStats:
    bytes_read: int = 0
    bytes_written: int = 0
    files_written: int = 0
    sync_writes: int = 0
    evictions: int = 0
    faults: int = 0
    chunks_recomputed: int = 0
    write_seconds: float = 0.0


class ChunkStore:

    def __init__(self, model_config: TinyLmConfig, config: StoreConfig):
        if config.window_tokens + config.chunk_tokens > model_config.max_seq:
            raise ValueError(
                f"window {config.window_tokens} + chunk {config.chunk_tokens} exceeds max_seq {model_config.max_seq}")
        self.model_config = model_config
        self.config = config
        self.model = load_model(model_config)
        self.ledger = MemoryLedger(config.budget_bytes)
        self.queue = LctruQueue(class_ordered=config.eviction == "lctru")
        self.contexts: Dict[int, ContextState] = {}
        self.stats = StoreStats()
        self._lock = self.ledger.lock
        Path(config.swap_dir).mkdir(parents=True, exist_ok=True)
        self._next_ctx = self._scan_next_ctx_id()

    # ------------------------------------------------------------------
    # contexts
    # ------------------------------------------------------------------
    def _scan_next_ctx_id(self) -> int:
        ids = []
        for entry in Path(self.config.swap_dir).iterdir():
            try:
                ids.append(int(entry.name, 16))
            except ValueError:
                continue
        return max(ids, default=0) + 1

    def create_context(self, client_id: str = "local", system_prompt: Optional[str] = None) -> ContextState:
        with self._lock:
            ctx_id = self._next_ctx
            self._next_ctx += 1
            ctx = ContextState(ctx_id, DensityLedger(self.model_config.layers, self.model_config.heads),
                               client_id=client_id, system_prompt=system_prompt)
            self.contexts[ctx_id] = ctx
            return ctx

    def get(self, ctx_id: int) -> ContextState:
        try:
            return self.contexts[ctx_id]
        except KeyError:
            raise NotFoundError(f"context {ctx_id} does not exist") from None

    def delete_context(self, ctx_id: int) -> bool:
        with self._lock:
            ctx = self.contexts.pop(ctx_id, None)
            if ctx is None:
                return False
            for chunk in ctx.chunk_list():
                self._forget(chunk)
            remove_context_files(self.config.swap_dir, ctx_id)
            return True

    def chunk_path(self, chunk: KvChunk) -> Path:
        return chunk_path(self.config.swap_dir, chunk.ctx_id, chunk.chunk_index)

    def _is_locked(self, key) -> bool:
        ctx = self.contexts.get(key[0])
        return ctx is not None and ctx.locked

    def _chunk(self, key) -> KvChunk:
        return self.contexts[key[0]].chunks[key[1]]

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------
    def _admit(self, chunk: KvChunk, payload: QuantizedChunkPayload, dirty: bool) -> None:
        with self._lock:
            self.ledger.claim(chunk.key, len(payload.packed), payload.metadata_nbytes)
            chunk.payload = payload
            chunk.bitwidth = payload.bitwidth
            chunk.token_count = payload.tokens
            chunk.dirty = dirty
            chunk.residency = Residency.IN_MEMORY if dirty else Residency.BOTH
            self.queue.add(chunk.key, chunk.ratio, chunk.nbytes, chunk.last_access)

    def claim(self, chunk: KvChunk, payload: QuantizedChunkPayload) -> KvChunk:
        """Place a new chunk in memory; InsufficientMemoryError when the budget is short."""
        self._admit(chunk, payload, dirty=True)
        return chunk

    def ensure_free(self, required_bytes: int) -> List[KvChunk]:
        with self._lock:
            return self.reclaim(required_bytes - self.ledger.free)

    def reclaim(self, needed_bytes: int) -> List[KvChunk]:
        if needed_bytes <= 0:
            return []
        with self._lock:
            if needed_bytes > self.ledger.budget:
                raise OutOfMemoryError(f"{needed_bytes} bytes exceed the {self.ledger.budget} byte budget")
            victims = self.queue.pop_for(needed_bytes, skip=self._is_locked)
            freed = []
            for i, entry in enumerate(victims):
                chunk = self._chunk(entry.key)
                try:
                    self._swap_out(chunk)
                except OSError as e:
                    for rest in victims[i:]:
                        self.queue.add(rest.key, rest.ratio, rest.nbytes, rest.last_access)
                    raise OutOfMemoryError(f"cannot swap out {chunk.key}: {e}") from e
                freed.append(chunk)
            logger.debug("reclaimed %d chunks for %d bytes", len(freed), needed_bytes)
            return freed

    def _swap_out(self, chunk: KvChunk) -> None:
        if chunk.dirty:
            self.write_back(chunk)
            self.stats.sync_writes += 1
        self.ledger.release(chunk.key)
        chunk.payload = None
        chunk.residency = Residency.ON_DISK
        self.stats.evictions += 1

    def write_back(self, chunk: KvChunk) -> int:
        header = SwapHeader(chunk.ctx_id, chunk.chunk_index, chunk.token_start, chunk.token_count, chunk.bitwidth,
                            self.model_config.layers, self.model_config.heads, self.model_config.head_dim)
        begin = time.perf_counter()
        nbytes = write_chunk(self.chunk_path(chunk), header, chunk.payload)
        self.stats.write_seconds += time.perf_counter() - begin
        chunk.file_crc = payload_digest(chunk.payload)
        chunk.dirty = False
        chunk.residency = Residency.BOTH
        self.stats.bytes_written += nbytes
        self.stats.files_written += 1
        return nbytes

    def force_evict(self, chunk: KvChunk) -> None:
        """Evict a chunk regardless of locks (fault-path testing)."""
        with self._lock:
            if not chunk.in_memory:
                return
            self.queue.remove(chunk.key)
            self._swap_out(chunk)

    def _forget(self, chunk: KvChunk) -> None:
        with self._lock:
            if chunk.key in self.ledger:
                self.ledger.release(chunk.key)
            self.queue.remove(chunk.key)
            chunk.payload = None

    def replace_payload(self, chunk: KvChunk, payload: QuantizedChunkPayload) -> None:
        with self._lock:
            if not chunk.in_memory:
                raise ConsistencyError(f"chunk {chunk.key} is not in memory")
            self.ledger.resize(chunk.key, len(payload.packed))
            chunk.payload = payload
            chunk.bitwidth = payload.bitwidth
            chunk.token_count = payload.tokens
            if chunk.file_crc != payload_digest(payload):
                chunk.dirty = True
                chunk.residency = Residency.IN_MEMORY
            self.queue.reclassify(chunk.key, chunk.ratio, chunk.nbytes)

    def requantize_chunk(self, chunk: KvChunk, bitwidth: int) -> None:
        self.replace_payload(chunk, requantize(chunk.payload, bitwidth))

    def touch(self, ctx: ContextState, now: int) -> None:
        ctx.clock = now
        for chunk in ctx.chunk_list():
            chunk.last_access = now
        self.queue.touch([c.key for c in ctx.chunk_list()], now)

    # ------------------------------------------------------------------
    # writing new tokens
    # ------------------------------------------------------------------
    def commit(self, ctx: ContextState, kv: KvTensor, include_partial: bool = False) -> List[KvChunk]:
        """
        Quantize the chunks of `kv` that are complete (and, with
        include_partial, the trailing partial chunk) into the store.
        """
        if len(kv) != ctx.length or (len(kv) and int(kv.positions[0]) != ctx.first_position):
            raise ConsistencyError("KV cache is out of step with the context's resident tokens")
        if not ctx.length:
            return []
        c = self.config.chunk_tokens
        committed = []
        for idx in range(ctx.first_position // c, (ctx.end_position - 1) // c + 1):
            start = idx * c
            stop = min(start + c, ctx.end_position)
            chunk = ctx.chunks.get(idx)
            if chunk is not None and chunk.token_count == stop - start:
                continue
            if stop - start < c and not include_partial:
                continue
            block = kv.chunk_array(start - ctx.first_position, stop - ctx.first_position)
            payload = quantize(block, self.config.base_bitwidth)
            density = ctx.density.density_of(start, stop) if ctx.density.end_position >= stop else 0.0
            if chunk is None:
                chunk = KvChunk(ctx.ctx_id, idx, start, stop - start, self.model_config.channels,
                                payload.bitwidth, density=density, last_access=ctx.clock)
                self.ensure_free(len(payload.packed))
                self.claim(chunk, payload)
                ctx.chunks[idx] = chunk
            else:
                self.ensure_free(len(payload.packed) - chunk.nbytes)
                self.replace_payload(chunk, payload)
                chunk.density = density
            committed.append(chunk)
        return committed

    def refresh_densities(self, ctx: ContextState) -> None:
        for chunk in ctx.chunk_list():
            if ctx.density.first_position <= chunk.token_start and chunk.span.stop <= ctx.density.end_position:
                chunk.density = ctx.density.density_of(chunk.token_start, chunk.span.stop)

    def slide_window(self, ctx: ContextState) -> List[KvChunk]:
        """Delete the oldest whole chunks that lie beyond the window."""
        c = self.config.chunk_tokens
        excess = ctx.length - self.config.window_tokens
        if excess < c:
            return []
        drop_tokens = (excess // c) * c
        first_idx = ctx.first_position // c
        dropped = []
        with self._lock:
            for idx in range(first_idx, first_idx + drop_tokens // c):
                chunk = ctx.chunks.pop(idx, None)
                if chunk is None:
                    continue
                self._forget(chunk)
                remove_chunk_file(self.config.swap_dir, ctx.ctx_id, idx)
                dropped.append(chunk)
        ctx.token_ids = ctx.token_ids[drop_tokens:]
        ctx.first_position += drop_tokens
        ctx.density.drop_front(drop_tokens)
        logger.debug("context %d: window slid past %d chunks", ctx.ctx_id, len(dropped))
        return dropped

    def materialize(self, ctx: ContextState) -> KvTensor:
        """Dequantized KV cache of the whole context; every chunk must be in memory."""
        chunks = ctx.chunk_list()
        if not chunks:
            return KvTensor.empty(self.model_config)
        missing = [c.chunk_index for c in chunks if not c.in_memory]
        if missing:
            raise ContextError(f"context {ctx.ctx_id} chunks {missing} are not resident")
        kv = KvTensor.from_chunk_arrays([dequantize(c.payload) for c in chunks], chunks[0].token_start)
        if len(kv) != ctx.length or chunks[0].token_start != ctx.first_position:
            raise ConsistencyError(f"context {ctx.ctx_id} chunks do not cover its {ctx.length} tokens")
        return kv

    # ------------------------------------------------------------------
    # loading
    # ------------------------------------------------------------------
    def _local(self, ctx: ContextState, chunk: KvChunk) -> slice:
        return slice(chunk.token_start - ctx.first_position, chunk.span.stop - ctx.first_position)

    def _check_text(self, ctx: ContextState, chunks: Iterable[KvChunk]) -> None:
        for chunk in chunks:
            if chunk.token_start < ctx.first_position or chunk.span.stop > ctx.end_position:
                raise ContextError(
                    f"chunk {chunk.key} has neither a usable swap file nor resident text to recompute from")

    def _has_file(self, chunk: KvChunk) -> bool:
        return chunk.file_crc is not None and self.chunk_path(chunk).exists()

    def _resident_arrays(self, ctx: ContextState):
        shape = (self.model_config.layers, ctx.length, self.model_config.heads, self.model_config.head_dim)
        keys = np.zeros(shape, np.float32)
        values = np.zeros(shape, np.float32)
        for chunk in ctx.chunk_list():
            if chunk.in_memory:
                block = dequantize(chunk.payload)
                keys[:, self._local(ctx, chunk)] = block[:, 0]
                values[:, self._local(ctx, chunk)] = block[:, 1]
        return keys, values

    def _admit_recomputed(self, ctx: ContextState, chunk: KvChunk, keys, values) -> None:
        sl = self._local(ctx, chunk)
        block = np.stack([keys[:, sl], values[:, sl]], axis=1)
        payload = quantize(block, chunk.bitwidth)
        self._admit(chunk, payload, dirty=chunk.file_crc != payload_digest(payload))
        self.stats.chunks_recomputed += 1

    def _recompute(self, ctx: ContextState, targets: Sequence[KvChunk]) -> None:
        """Recompute `targets` from the text; every other chunk must be in memory."""
        self._check_text(ctx, targets)
        keys, values = self._resident_arrays(ctx)
        positions = np.arange(ctx.first_position, ctx.end_position, dtype=np.int64)
        spans = [c.span for c in targets]
        missing = missing_mask(positions, spans)
        resident = KvTensor(keys[:, ~missing], values[:, ~missing], positions[~missing])
        full = recompute_chunks(self.model_config, resident, spans, ctx.token_ids, ctx.first_position)
        for chunk in targets:
            self._admit_recomputed(ctx, chunk, full.keys, full.values)

    def load(self, ctx: ContextState, cost_model: Optional[CostModel] = None) -> LoadReport:
        """
        Bring every missing chunk of a context into memory.

        With a cost model and the pipeline enabled, part of the chunks are
        recomputed while the rest stream from their swap files layer by layer.
        """
        missing = ctx.missing_chunks()
        if not missing:
            return LoadReport()
        self._check_text(ctx, missing)
        self.ensure_free(sum(c.nbytes for c in missing))

        unreadable = [c for c in missing if not self._has_file(c)]
        readable = [c for c in missing if self._has_file(c)]
        pipeline_plan = None
        recompute = list(unreadable)
        if self.config.pipeline and cost_model is not None and readable:
            by_ratio: Dict[float, List[KvChunk]] = {}
            for chunk in readable:
                by_ratio.setdefault(chunk.ratio, []).append(chunk)
            chunk_bytes = payload_nbytes(self.config.chunk_tokens, self.model_config.channels, 8)
            pipeline_plan = plan(cost_model, {r: len(v) for r, v in by_ratio.items()},
                                 sum(c.nbytes for c in readable), chunk_bytes)
            recompute += pick_recompute_set(by_ratio, pipeline_plan)
        recompute_keys = {c.key for c in recompute}
        io_chunks = [c for c in readable if c.key not in recompute_keys]

        keys, values = self._resident_arrays(ctx)
        positions = np.arange(ctx.first_position, ctx.end_position, dtype=np.int64)
        session = self.model.recompute_session(ctx.token_ids, positions,
                                               missing_mask(positions, [c.span for c in recompute]))
        readers: Dict[int, SwapFileReader] = {}
        failed = set()

        def io_reader(layer: int) -> int:
            nbytes = 0
            for chunk in io_chunks:
                if chunk.chunk_index in failed:
                    continue
                try:
                    if layer == 0:
                        reader = SwapFileReader(self.chunk_path(chunk))
                        readers[chunk.chunk_index] = reader
                        h = reader.header
                        if (h.ctx_id, h.chunk_index, h.token_start, h.token_count, h.bitwidth) != (
                                chunk.ctx_id, chunk.chunk_index, chunk.token_start, chunk.token_count,
                                chunk.bitwidth):
                            raise FormatError(f"{reader.path}: header does not describe chunk {chunk.key}")
                    reader = readers[chunk.chunk_index]
                    block = reader.read_layer(layer)
                    keys[layer, self._local(ctx, chunk)] = block[0]
                    values[layer, self._local(ctx, chunk)] = block[1]
                    nbytes += reader.header.layer_nbytes
                except (OSError, FormatError) as e:
                    logger.warning("swap-in of chunk %s failed, recomputing: %s", chunk.key, e)
                    failed.add(chunk.chunk_index)
                    if chunk.chunk_index in readers:
                        readers.pop(chunk.chunk_index).close()
            return nbytes

        def recomputer(layer: int) -> None:
            session.step(layer, keys[layer], values[layer])

        report = execute_overlapped(pipeline_plan, io_reader, recomputer, self.model_config.layers)

        for chunk in io_chunks:
            if chunk.chunk_index in failed:
                continue
            try:
                payload = readers[chunk.chunk_index].finish()
                if payload_digest(payload) != chunk.file_crc:
                    raise FormatError(f"swap file of {chunk.key} is stale")
            except (OSError, FormatError) as e:
                logger.warning("swap-in of chunk %s failed, recomputing: %s", chunk.key, e)
                failed.add(chunk.chunk_index)
                continue
            self._admit(chunk, payload, dirty=False)
            report.chunks_loaded += 1

        report.chunks_recomputed = len(recompute)
        if failed:
            # recomputed rows may have attended to unreadable ones; redo them all
            redo = recompute + [c for c in io_chunks if c.chunk_index in failed]
            self._recompute(ctx, sorted(redo, key=lambda c: c.chunk_index))
            report.degraded = True
            report.failed = sorted(failed)
            report.chunks_recomputed = len(redo)
        else:
            for chunk in recompute:
                self._admit_recomputed(ctx, chunk, keys, values)

        self.stats.bytes_read += report.bytes_read
        logger.info("context %d: loaded %d chunks (%d bytes), recomputed %d in %.4fs", ctx.ctx_id,
                    report.chunks_loaded, report.bytes_read, report.chunks_recomputed, report.wall_seconds)
        return report

    def fault(self, ctx: ContextState, chunk_index: int) -> bool:
        """Synchronously bring one chunk back; False when it was already in memory."""
        chunk = ctx.chunks[chunk_index]
        if chunk.in_memory:
            return False
        self.stats.faults += 1
        logger.warning("fault on chunk %s", chunk.key)
        self.ensure_free(chunk.nbytes)
        if self._has_file(chunk):
            try:
                reader = SwapFileReader(self.chunk_path(chunk))
                payload = reader.finish()
                self.stats.bytes_read += len(payload.packed)
                if payload_digest(payload) == chunk.file_crc and payload.shape[2] == chunk.token_count:
                    self._admit(chunk, payload, dirty=False)
                    return True
            except (OSError, FormatError) as e:
                logger.warning("fault read of %s failed, recomputing: %s", chunk.key, e)
        others = [c for c in ctx.missing_chunks() if c is not chunk]
        self.ensure_free(sum(c.nbytes for c in others))
        self._recompute(ctx, sorted([chunk] + others, key=lambda c: c.chunk_index))
        return True

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------
    def context_metadata(self, ctx: ContextState) -> dict:
        return {
            "version": METADATA_VERSION,
            "ctx_id": ctx.ctx_id,
            "client_id": ctx.client_id,
            "system_prompt": ctx.system_prompt,
            "token_ids": list(ctx.token_ids),
            "first_position": ctx.first_position,
            "clock": ctx.clock,
            "density": (ctx.density.column_sums.copy(), ctx.density.counts.copy()),
            "chunks": [
                {
                    "chunk_index": c.chunk_index,
                    "token_start": c.token_start,
                    "token_count": c.token_count,
                    "bitwidth": c.bitwidth,
                    "density": c.density,
                    "file_crc": None if c.dirty else c.file_crc,
                }
                for c in ctx.chunk_list()
            ],
        }

    def save_metadata(self, ctx: ContextState) -> None:
        save_context_metadata(self.config.swap_dir, ctx.ctx_id, self.context_metadata(ctx))

    def restore_context(self, ctx_id: int) -> ContextState:
        """Rebuild a context from its swap directory; all of its chunks start on disk."""
        with self._lock:
            if ctx_id in self.contexts:
                return self.contexts[ctx_id]
            try:
                meta = load_context_metadata(self.config.swap_dir, ctx_id)
            except (OSError, EOFError) as e:
                raise ContextError(f"context {ctx_id} has no readable metadata: {e}") from e
            if meta.get("version") != METADATA_VERSION:
                raise ContextError(f"context {ctx_id} metadata version {meta.get('version')} is not supported")

            density = DensityLedger(self.model_config.layers, self.model_config.heads, meta["first_position"])
            density.column_sums, density.counts = meta["density"]
            ctx = ContextState(ctx_id, density, client_id=meta["client_id"], system_prompt=meta["system_prompt"],
                               token_ids=list(meta["token_ids"]), first_position=meta["first_position"],
                               clock=meta["clock"])
            for row in meta["chunks"]:
                ctx.chunks[row["chunk_index"]] = KvChunk(
                    ctx_id, row["chunk_index"], row["token_start"], row["token_count"],
                    self.model_config.channels, row["bitwidth"], density=row["density"],
                    residency=Residency.ON_DISK, dirty=False, last_access=meta["clock"],
                    file_crc=row["file_crc"])
            self.contexts[ctx_id] = ctx
            self._next_ctx = max(self._next_ctx, ctx_id + 1)
            logger.info("restored context %d with %d chunks", ctx_id, len(ctx.chunks))
            return ctx

    def stored_context_ids(self) -> List[int]:
        ids = []
        for entry in Path(self.config.swap_dir).iterdir():
            try:
                ctx_id = int(entry.name, 16)
            except ValueError:
                continue
            if (context_dir(self.config.swap_dir, ctx_id) / CONTEXT_METADATA).exists():
                ids.append(ctx_id)
        return sorted(ids)
