"""
Elastic split of a context load between swap-in and recompute.

Given x_w missing chunks in each ratio class w, choose x^re_w of them to
recompute so that
    max(T_re(sum_w x^re_w), T_IO(m - sum_w ratio_w * chunk_bytes * x^re_w))
is minimal. Recompute and I/O run on separate lanes, hence the max.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

from src.pipeline.cost_model import CostModel

EXHAUSTIVE_LIMIT = 10 ** 4
_TIE = 1e-12


@dataclass(frozen=True)
class PipelinePlan:
    ratios: Tuple[float, ...]        # descending
    totals: Tuple[int, ...]
    recompute: Tuple[int, ...]
    bytes_total: float
    chunk_bytes: float
    recompute_seconds: float
    io_seconds: float
    method: str = "exhaustive"

    @property
    def predicted_delay(self) -> float:
        return max(self.recompute_seconds, self.io_seconds)

    @property
    def recompute_count(self) -> int:
        return sum(self.recompute)

    @property
    def io_count(self) -> int:
        return sum(self.totals) - self.recompute_count

    @property
    def io_bytes(self) -> float:
        return _io_bytes(self.bytes_total, self.ratios, self.chunk_bytes, self.recompute)

    def recompute_by_ratio(self) -> Dict[float, int]:
        return dict(zip(self.ratios, self.recompute))


def _io_bytes(m, ratios, chunk_bytes, recompute) -> float:
    return max(m - sum(r * chunk_bytes * x for r, x in zip(ratios, recompute)), 0.0)


def _evaluate(cost, m, ratios, chunk_bytes, totals, recompute) -> Tuple[float, float]:
    t_re = cost.recompute_seconds(sum(recompute))
    ops = sum(totals) - sum(recompute)
    t_io = cost.io_seconds(_io_bytes(m, ratios, chunk_bytes, recompute), ops)
    return t_re, t_io


def _key(t_re, t_io, recompute):
    # smallest delay, then fewer recomputed chunks, then heavier classes first
    return (round(max(t_re, t_io) / _TIE), sum(recompute), tuple(-x for x in recompute))


def _normalize(totals: Mapping[float, int]) -> Tuple[Tuple[float, ...], Tuple[int, ...]]:
    items = sorted(((float(r), int(x)) for r, x in totals.items() if x > 0), reverse=True)
    return tuple(r for r, _ in items), tuple(x for _, x in items)


def plan(cost_model: CostModel, totals: Mapping[float, int], bytes_total: Optional[float] = None,
         chunk_bytes: float = 1.0, exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> PipelinePlan:
    """
    Choose per-class recompute counts. `chunk_bytes` is the size of a ratio-1
    chunk; `bytes_total` defaults to sum_w x_w * ratio_w * chunk_bytes.
    """
    ratios, counts = _normalize(totals)
    if bytes_total is None:
        bytes_total = sum(r * chunk_bytes * x for r, x in zip(ratios, counts))
    if not counts or bytes_total <= 0:
        return PipelinePlan(ratios, counts, tuple(0 for _ in counts), float(bytes_total or 0.0),
                            chunk_bytes, 0.0, 0.0, "trivial")

    grid = math.prod(x + 1 for x in counts)
    if grid <= exhaustive_limit:
        return _exhaustive(cost_model, ratios, counts, bytes_total, chunk_bytes)
    return _greedy(cost_model, ratios, counts, bytes_total, chunk_bytes)


def _exhaustive(cost, ratios, counts, m, chunk_bytes) -> PipelinePlan:
    best = None
    for recompute in itertools.product(*(range(x + 1) for x in counts)):
        t_re, t_io = _evaluate(cost, m, ratios, chunk_bytes, counts, recompute)
        key = _key(t_re, t_io, recompute)
        if best is None or key < best[0]:
            best = (key, recompute, t_re, t_io)
    _, recompute, t_re, t_io = best
    return PipelinePlan(ratios, counts, tuple(recompute), float(m), chunk_bytes, t_re, t_io, "exhaustive")


def _heavy_first(counts, total) -> Tuple[int, ...]:
    out, left = [], total
    for x in counts:
        take = min(x, left)
        out.append(take)
        left -= take
    return tuple(out)


def _greedy(cost, ratios, counts, m, chunk_bytes) -> PipelinePlan:
    """
    Recompute heaviest chunks first. For a fixed number of recomputed chunks
    this saves the most bytes, and the delay along this order is unimodal, so
    the scan stops at the first increase.
    """
    best = None
    for total in range(sum(counts) + 1):
        recompute = _heavy_first(counts, total)
        t_re, t_io = _evaluate(cost, m, ratios, chunk_bytes, counts, recompute)
        key = _key(t_re, t_io, recompute)
        if best is not None and key[0] > best[0][0]:
            break
        if best is None or key < best[0]:
            best = (key, recompute, t_re, t_io)
    _, recompute, t_re, t_io = best
    return PipelinePlan(ratios, counts, tuple(recompute), float(m), chunk_bytes, t_re, t_io, "greedy")


def lp_relaxation(cost_model: CostModel, totals: Mapping[float, int], bytes_total: Optional[float] = None,
                  chunk_bytes: float = 1.0) -> Tuple[float, Tuple[float, ...]]:
    """
    Continuous relaxation: returns (lower bound on the delay, fractional
    recompute counts). Heavy-first filling is optimal for any continuous
    total, so the problem reduces to one dimension over the total x.
    """
    ratios, counts = _normalize(totals)
    if bytes_total is None:
        bytes_total = sum(r * chunk_bytes * x for r, x in zip(ratios, counts))
    if not counts or bytes_total <= 0:
        return 0.0, tuple(0.0 for _ in counts)

    n = sum(counts)

    def fractional(x: float) -> Tuple[float, ...]:
        out, left = [], x
        for c in counts:
            take = min(float(c), max(left, 0.0))
            out.append(take)
            left -= take
        return tuple(out)

    def delay(x: float) -> float:
        rec = fractional(x)
        t_re = cost_model.a_re + cost_model.b_re * x if x > 0 else 0.0
        io_bytes = _io_bytes(bytes_total, ratios, chunk_bytes, rec)
        t_io = cost_model.a_io * max(n - x, 1) + cost_model.b_io * io_bytes if io_bytes > 0 else 0.0
        return max(t_re, t_io)

    # candidates: breakpoints of the piecewise-linear I/O curve plus the crossing on each piece
    candidates = {0.0, float(n), max(n - 1.0, 0.0)}
    start = 0.0
    for r, c in zip(ratios, counts):
        lo, hi = start, start + c
        candidates.update((lo, hi))
        # on [lo, hi]: T_io(x) = A - B x with B = a_io + b_io*r*chunk_bytes
        rec_lo = fractional(lo)
        io_lo = _io_bytes(bytes_total, ratios, chunk_bytes, rec_lo)
        a_line = cost_model.a_io * (n - lo) + cost_model.b_io * io_lo
        slope = cost_model.a_io + cost_model.b_io * r * chunk_bytes
        # a_re + b_re x = a_line - slope (x - lo)
        cross = (a_line + slope * lo - cost_model.a_re) / (cost_model.b_re + slope)
        if lo < cross < hi:
            candidates.add(cross)
        start = hi
    best_x = min(sorted(candidates), key=delay)
    return delay(best_x), fractional(best_x)


def round_relaxation(cost_model: CostModel, totals: Mapping[float, int], bytes_total: Optional[float] = None,
                     chunk_bytes: float = 1.0) -> PipelinePlan:
    """Integer plan from the relaxation: best of the floor/ceil of the fractional total."""
    ratios, counts = _normalize(totals)
    if bytes_total is None:
        bytes_total = sum(r * chunk_bytes * x for r, x in zip(ratios, counts))
    _, fractional = lp_relaxation(cost_model, totals, bytes_total, chunk_bytes)
    if not counts or bytes_total <= 0:
        return plan(cost_model, totals, bytes_total, chunk_bytes)
    x = sum(fractional)
    best = None
    for total in {math.floor(x), math.ceil(x)}:
        recompute = _heavy_first(counts, total)
        t_re, t_io = _evaluate(cost_model, bytes_total, ratios, chunk_bytes, counts, recompute)
        key = _key(t_re, t_io, recompute)
        if best is None or key < best[0]:
            best = (key, recompute, t_re, t_io)
    _, recompute, t_re, t_io = best
    return PipelinePlan(ratios, counts, recompute, float(bytes_total), chunk_bytes, t_re, t_io, "lp")


def pick_recompute_set(chunks_by_ratio: Mapping[float, Sequence], pipeline_plan: PipelinePlan) -> list:
    """Concrete chunks to recompute: the lowest-indexed x^re_w of each class."""
    chosen = []
    for ratio, count in pipeline_plan.recompute_by_ratio().items():
        members = sorted(chunks_by_ratio.get(ratio, ()), key=lambda c: c.chunk_index)
        chosen.extend(members[:count])
    return chosen
