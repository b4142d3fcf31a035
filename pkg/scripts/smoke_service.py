#!/usr/bin/env python3
"""
Smoke test for the context memory service.

Usage:
    python scripts/smoke_service.py [swap_dir]

Creates two contexts, forces one of them out of memory and compares a cold
call with a warm one. Defaults to ./swap_smoke.
"""
import os
import shutil
import sys

from src.config import global_config
from src.service.llm_service import LlmService


def main():
    swap_dir = os.path.abspath(sys.argv[1] if len(sys.argv) > 1 else './swap_smoke')
    shutil.rmtree(swap_dir, ignore_errors=True)
    print(f"Using swap dir: {swap_dir}")

    service = LlmService(global_config.model_config(), global_config.store_config(swap_dir=swap_dir),
                         max_new_tokens=8)
    news = service.new_llm_ctx("smoke", "You classify news headlines by topic. " * 4)
    chat = service.new_llm_ctx("smoke", "You summarise a chat between two friends. " * 4)
    print(f"contexts: news={news.ctx_id} chat={chat.ctx_id}")

    # 1) warm call
    warm = service.call_llm("smoke", news.ctx_id, "Markets rally as rates hold.")
    print(f"warm switch: {warm.switch_latency * 1000:.3f} ms, answer={warm.text!r}")

    # 2) evict every chunk of the context, then call it again
    store = service.store
    for chunk in store.get(news.ctx_id).chunk_list():
        store.force_evict(chunk)
    cold = service.call_llm("smoke", news.ctx_id, "Storm closes coastal roads.")
    report = cold.load_report
    print(f"cold switch: {cold.switch_latency * 1000:.3f} ms "
          f"(loaded {report.chunks_loaded}, recomputed {report.chunks_recomputed}, {report.bytes_read} bytes)")

    # 3) fault in the middle of decoding
    def evict_oldest(svc, ctx, step):
        if step == 1:
            svc.store.force_evict(ctx.chunk_list()[0])

    faulted = service.call_llm("smoke", chat.ctx_id, "Are we still on for Friday?", step_hook=evict_oldest)
    print(f"faults during decode: {faulted.faults}")

    ctx = store.get(news.ctx_id)
    bits = [c.bitwidth for c in ctx.chunk_list()]
    print(f"news context: {ctx.length} tokens, chunk bitwidths {bits}")
    print(f"ledger: {store.ledger.used} / {store.ledger.budget} bytes, stats {store.stats}")

    for stub in (news, chat):
        service.del_llm_ctx("smoke", stub.ctx_id)
    print("\nSmoke test finished.")
    return 0


if __name__ == '__main__':
    sys.exit(main())
