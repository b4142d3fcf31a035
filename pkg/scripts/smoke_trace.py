#!/usr/bin/env python3
"""
Smoke test for trace synthesis and simulated replay.

Usage:
    python scripts/smoke_trace.py [budget_mb]

Replays a one-hour trace of eight contexts through every policy and prints
the mean switching latency of each. Defaults to a 1536 MiB budget.
"""
import sys

from src.trace.simulator import POLICIES, replay
from src.trace.trace_gen import TraceConfig, describe, generate


def main():
    budget_mb = float(sys.argv[1]) if len(sys.argv) > 1 else 1536.0
    events = generate(TraceConfig(rate=1 / 60, hours=1.0, contexts=8, seed=0))
    stats = describe(events, 8)
    print(f"{stats['events']} events, mean inter-arrival {stats['mean_interarrival']:.1f}s, "
          f"mean delta {stats['mean_delta']:.0f} tokens")

    for name in POLICIES:
        metrics = replay(events, name, int(budget_mb * 1024 * 1024))
        print(f"  {name:<24} mean {metrics.mean * 1000:9.2f} ms  p95 {metrics.p95 * 1000:9.2f} ms  "
              f"busy {metrics.busy}")

    print("\nSmoke test finished.")
    return 0


if __name__ == '__main__':
    sys.exit(main())
