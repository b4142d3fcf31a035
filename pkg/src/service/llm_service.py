"""
The LLM service: newLLMCtx / callLLM / delLLMCtx on top of the chunk store.

One engine runs one callLLM at a time. A call locks the context's working
set, makes every chunk resident (swap-in and recompute overlapped), prefills
the prompt, decodes greedily, compresses the context by information density,
swaps dirty chunks out ahead of time and unlocks.
"""

import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from src.compression.thresholds import solve_thresholds
from src.lifecycle.lifecycle import WriteReport, aot_swapout, lock, unlock
from src.memory.chunk import ContextState, StoreConfig
from src.memory.chunk_store import ChunkStore
from src.model.tinylm import KvTensor, TinyLmConfig, decode, encode
from src.pipeline.cost_model import CostModel
from src.pipeline.executor import LoadReport
from src.quant.quantizer import bitwidth_for_ratio, dequantize, payload_nbytes
from src.service.errors import (BusyError, InsufficientMemoryError, LengthError, LlmsError, NotFoundError,
                                OutOfMemoryError, QuotaError)
from src.service.logger import logger


class ResponseStatus(Enum):
    OK = 0
    NOT_FOUND = 1
    BUSY = 2
    QUOTA_EXCEEDED = 3
    INVALID_REQUEST = 4
    OTHER_ERROR = 5


@dataclass
class ServiceResponse:
    status: ResponseStatus
    ctx_id: Optional[int] = None
    tokens: Optional[str] = None
    switch_latency_ms: Optional[float] = None
    error: Optional[str] = None
    warning: Optional[str] = None

    def to_wire(self) -> dict:
        message = {"ok": self.status == ResponseStatus.OK, "status": self.status.name}
        for name in ("ctx_id", "tokens", "switch_latency_ms", "error", "warning"):
            value = getattr(self, name)
            if value is not None:
                message[name] = value
        return message


@dataclass
class LlmCtxStub:
    ctx_id: int
    client_id: str = "local"
    system_prompt: Optional[str] = None


@dataclass
class CallResult:
    ctx_id: int
    text: str
    token_ids: List[int]
    switch_latency: float
    decode_seconds: float
    load_report: LoadReport = field(default_factory=LoadReport)
    write_report: WriteReport = field(default_factory=WriteReport)
    faults: int = 0


StepHook = Callable[["LlmService", ContextState, int], None]


class LlmService:

    def __init__(self, model_config: TinyLmConfig, store_config: StoreConfig,
                 cost_model: Optional[CostModel] = None, max_contexts: int = 8,
                 max_new_tokens: int = 16, eos_token: Optional[int] = None):
        self.store = ChunkStore(model_config, store_config)
        self.cost_model = cost_model or CostModel.calibrated(store_config.chunk_tokens)
        self.max_contexts = max_contexts
        self.max_new_tokens = max_new_tokens
        self.eos_token = eos_token
        self.clock = 0
        self._engine = threading.Lock()
        self._stubs: Dict[str, Set[int]] = {}

    @property
    def config(self) -> StoreConfig:
        return self.store.config

    # ------------------------------------------------------------------
    # API
    # ------------------------------------------------------------------
    def bind(self, client_id: str) -> str:
        with self._engine:
            self._stubs.setdefault(client_id, set())
        return client_id

    def new_llm_ctx(self, client_id: str = "local", system_prompt: Optional[str] = None) -> LlmCtxStub:
        with self._engine:
            owned = self._stubs.setdefault(client_id, set())
            if len(owned) >= self.max_contexts:
                raise QuotaError(f"client {client_id!r} already holds {len(owned)} contexts")
            ctx = self.store.create_context(client_id, system_prompt)
            owned.add(ctx.ctx_id)
            if system_prompt:
                ids = encode(system_prompt)
                try:
                    self._run_locked(ctx, len(ids), lambda: self._prefill_only(ctx, ids))
                except LlmsError:
                    owned.discard(ctx.ctx_id)
                    self.store.delete_context(ctx.ctx_id)
                    raise
            logger.info("client %s: new context %d (%d system-prompt tokens)", client_id, ctx.ctx_id, ctx.length)
            return LlmCtxStub(ctx.ctx_id, client_id, system_prompt)

    def call_llm(self, client_id: str, ctx_id: int, prompt: str, max_new_tokens: Optional[int] = None,
                 step_hook: Optional[StepHook] = None) -> CallResult:
        ids = encode(prompt)
        if not ids:
            raise LengthError("prompt is empty")
        cap = self.max_new_tokens if max_new_tokens is None else max_new_tokens
        with self._engine:
            ctx = self._owned(client_id, ctx_id)
            self.clock += 1
            result = self._run_locked(ctx, len(ids) + cap, lambda: self._call(ctx, ids, cap, step_hook))
            logger.info("context %d: switched in %.4fs, %d tokens decoded", ctx_id, result.switch_latency,
                        len(result.token_ids))
            return result

    def del_llm_ctx(self, client_id: str, ctx_id: int) -> bool:
        """False when the context was already gone (the call is still acknowledged)."""
        with self._engine:
            owned = self._stubs.get(client_id, set())
            if ctx_id not in owned:
                logger.warning("client %s: context %d is already deleted", client_id, ctx_id)
                return False
            owned.discard(ctx_id)
            return self.store.delete_context(ctx_id)

    def restore_contexts(self, client_id: str = "local") -> List[int]:
        """Re-register the contexts this client left in the swap directory."""
        restored = []
        with self._engine:
            owned = self._stubs.setdefault(client_id, set())
            for ctx_id in self.store.stored_context_ids():
                try:
                    ctx = self.store.restore_context(ctx_id)
                except LlmsError as e:
                    logger.warning("skipping context %d: %s", ctx_id, e)
                    continue
                if ctx.client_id == client_id:
                    owned.add(ctx_id)
                    restored.append(ctx_id)
        return restored

    def handle(self, client_id: str, request: dict) -> ServiceResponse:
        """One wire request in, exactly one response out."""
        try:
            op = request.get("op")
            if op == "bind":
                return ServiceResponse(ResponseStatus.OK)
            if op == "new":
                stub = self.new_llm_ctx(client_id, request.get("system_prompt"))
                return ServiceResponse(ResponseStatus.OK, ctx_id=stub.ctx_id)
            if op == "call":
                result = self.call_llm(client_id, int(request["ctx_id"]), str(request.get("prompt", "")),
                                       request.get("max_new_tokens"))
                return ServiceResponse(ResponseStatus.OK, ctx_id=result.ctx_id, tokens=result.text,
                                       switch_latency_ms=result.switch_latency * 1000.0)
            if op == "del":
                existed = self.del_llm_ctx(client_id, int(request["ctx_id"]))
                return ServiceResponse(ResponseStatus.OK, ctx_id=int(request["ctx_id"]),
                                       warning=None if existed else "context was already deleted")
            return ServiceResponse(ResponseStatus.INVALID_REQUEST, error=f"unknown op {op!r}")
        except NotFoundError as e:
            return ServiceResponse(ResponseStatus.NOT_FOUND, error=str(e))
        except (BusyError, OutOfMemoryError, InsufficientMemoryError) as e:
            # not re-queued; calls are already serialized by the engine lock
            return ServiceResponse(ResponseStatus.BUSY, error=str(e))
        except QuotaError as e:
            return ServiceResponse(ResponseStatus.QUOTA_EXCEEDED, error=str(e))
        except (LengthError, KeyError, TypeError, ValueError) as e:
            return ServiceResponse(ResponseStatus.INVALID_REQUEST, error=str(e))
        except Exception as e:
            logger.exception(e)
            return ServiceResponse(ResponseStatus.OTHER_ERROR, error=str(e))

    # ------------------------------------------------------------------
    # engine
    # ------------------------------------------------------------------
    def _owned(self, client_id: str, ctx_id: int) -> ContextState:
        if ctx_id not in self._stubs.get(client_id, set()):
            raise NotFoundError(f"context {ctx_id} does not exist for client {client_id!r}")
        return self.store.get(ctx_id)

    def growth_reserve(self, ctx: ContextState, growth_tokens: int) -> int:
        """Bytes a call may add to the context, bounded by the sliding window."""
        cfg = self.config
        final = min(ctx.length + growth_tokens, cfg.window_tokens + cfg.chunk_tokens)
        upper = payload_nbytes(final, self.store.model_config.channels, cfg.base_bitwidth)
        return max(0, upper - ctx.nbytes())

    def _run_locked(self, ctx: ContextState, growth_tokens: int, body):
        lock(self.store, ctx, self.growth_reserve(ctx, growth_tokens))
        try:
            return body()
        finally:
            unlock(self.store, ctx)

    def _prefill_only(self, ctx: ContextState, ids: List[int]) -> None:
        kv, _ = self._feed(ctx, KvTensor.empty(self.store.model_config), ids)
        self._finish(ctx, kv)

    def _call(self, ctx: ContextState, ids: List[int], cap: int, step_hook: Optional[StepHook]) -> CallResult:
        start = time.perf_counter()
        report = self.store.load(ctx, self.cost_model if self.config.pipeline else None)
        switch_latency = time.perf_counter() - start
        self.store.touch(ctx, self.clock)

        begin = time.perf_counter()
        kv, logits = self._feed(ctx, self.store.materialize(ctx), ids)
        generated, faults = [], 0
        for step in range(cap):
            if step_hook is not None:
                step_hook(self, ctx, step)
            faults += self._fault_in(ctx, kv)
            token = int(np.argmax(logits))
            if token == self.eos_token:
                break
            generated.append(token)
            kv, logits = self._feed(ctx, kv, [token])
        decode_seconds = time.perf_counter() - begin

        write_report = self._finish(ctx, kv)
        return CallResult(ctx.ctx_id, decode(generated), generated, switch_latency, decode_seconds,
                          report, write_report, faults)

    def _feed(self, ctx: ContextState, kv: KvTensor, ids: List[int]) -> Tuple[KvTensor, np.ndarray]:
        """Prefill `ids` piece by piece, committing full chunks and sliding the window as it fills."""
        cfg, model = self.config, self.store.model
        limit = min(model.config.max_seq, cfg.window_tokens + cfg.chunk_tokens)
        logits = None
        pos = 0
        while pos < len(ids):
            take = min(len(ids) - pos, limit - len(kv))
            piece = ids[pos:pos + take]
            result = model.extend(kv, piece, ctx.end_position)
            kv, logits = result.kv, result.logits
            ctx.density.update(result.attention)
            ctx.token_ids.extend(piece)
            self.store.commit(ctx, kv)
            before = ctx.first_position
            self.store.slide_window(ctx)
            if ctx.first_position != before:
                kv = kv.drop_front(ctx.first_position - before)
            pos += take
        return kv, logits

    def _fault_in(self, ctx: ContextState, kv: KvTensor) -> int:
        missing = ctx.missing_chunks()
        if not missing:
            return 0
        for chunk in missing:
            self.store.fault(ctx, chunk.chunk_index)
        for chunk in missing:
            block = dequantize(chunk.payload)
            lo = chunk.token_start - ctx.first_position
            kv.keys[:, lo:lo + chunk.token_count] = block[:, 0]
            kv.values[:, lo:lo + chunk.token_count] = block[:, 1]
        return len(missing)

    def _finish(self, ctx: ContextState, kv: KvTensor) -> WriteReport:
        self.store.commit(ctx, kv, include_partial=True)
        self.store.refresh_densities(ctx)
        if self.config.compress and self.config.quantize:
            self._compress(ctx)
        self.store.touch(ctx, self.clock)
        if not self.config.aot:
            return WriteReport()
        return aot_swapout(self.store, ctx)

    def _compress(self, ctx: ContextState) -> None:
        cfg = self.config
        full = [c for c in ctx.chunk_list() if c.token_count == cfg.chunk_tokens and c.in_memory]
        if not full:
            return
        plan = solve_thresholds([c.density for c in full], cfg.ratios, cfg.ratio_global)
        for chunk, ratio in zip(full, plan.assignment):
            target = bitwidth_for_ratio(ratio, 8)
            # one-way: a chunk is never re-inflated
            if target < chunk.bitwidth:
                self.store.requantize_chunk(chunk, target)
