"""
When chunks leave memory: the working-set lock taken around an inference and
the ahead-of-time swap-out performed when callLLM returns.
"""

from dataclasses import dataclass
from typing import Iterable, List

from src.lifecycle.lctru import LctruQueue, QueueEntry
from src.memory.chunk import ContextState
from src.memory.chunk_store import ChunkStore
from src.service.errors import BusyError
from src.service.logger import logger


@dataclass
class WriteReport:
    files_written: int = 0
    bytes_written: int = 0
    degraded: bool = False
    error: str = ""


def touch(queue: LctruQueue, keys: Iterable, now: int) -> LctruQueue:
    queue.touch(keys, now)
    return queue


def pop_for(queue: LctruQueue, needed_bytes: int, skip=None) -> List[QueueEntry]:
    return queue.pop_for(needed_bytes, skip)


def lock(store: ChunkStore, ctx: ContextState, reserve_bytes: int = 0) -> None:
    """
    Pin a context's chunks for the duration of an inference.

    The whole working set (all chunks plus `reserve_bytes` of growth) has to
    fit next to what other locked contexts already hold in memory.
    """
    if ctx.locked:
        return
    with store.ledger.lock:
        pinned = sum(c.nbytes for other in store.contexts.values() if other.locked and other is not ctx
                     for c in other.chunks.values() if c.in_memory)
        needed = ctx.nbytes() + reserve_bytes
        if needed + pinned > store.ledger.budget:
            raise BusyError(f"context {ctx.ctx_id} needs {needed} bytes, "
                            f"{store.ledger.budget - pinned} can be made available")
        ctx.locked = True


def unlock(store: ChunkStore, ctx: ContextState) -> None:
    with store.ledger.lock:
        ctx.locked = False


def aot_swapout(store: ChunkStore, ctx: ContextState) -> WriteReport:
    """Write every dirty chunk of the context and its metadata; stops at the first write error."""
    report = WriteReport()
    for chunk in ctx.chunk_list():
        if not chunk.dirty or not chunk.in_memory:
            continue
        try:
            report.bytes_written += store.write_back(chunk)
            report.files_written += 1
        except OSError as e:
            logger.error("ahead-of-time swap-out of %s failed: %s", chunk.key, e)
            report.degraded = True
            report.error = str(e)
            break
    try:
        store.save_metadata(ctx)
    except OSError as e:
        logger.error("saving metadata of context %d failed: %s", ctx.ctx_id, e)
        report.degraded = True
        report.error = report.error or str(e)
    return report
