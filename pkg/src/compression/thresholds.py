"""
Rank-threshold planning of mixed compression ratios.

Chunks are ranked by density (rank 100 = densest, ties rank the older chunk
lower) and cut into bands, one per ratio level, densest band least
compressed. The band sizes are chosen to hit the global average ratio as
closely as the chunk count allows and, among those, to maximize
    sum_w (1 / ratio_w) * sum_{i in band w} D_i.
"""

import math
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from src.service.errors import PlanningError

DEFAULT_RATIOS = (1.0, 0.5, 0.25)

_EPS = 1e-9


@dataclass(frozen=True)
class CompressionPlan:
    ratios: Tuple[float, ...]        # descending, least compressed first
    counts: Tuple[int, ...]          # chunks per band
    thresholds: Tuple[float, ...]    # sigma_w percentiles, len(ratios) + 1, from 100 down to 0
    ratio_global: float
    objective: float
    assignment: Tuple[float, ...]    # ratio per chunk, input order

    @property
    def chunks(self) -> int:
        return sum(self.counts)

    @property
    def realized_ratio(self) -> float:
        return sum(r * c for r, c in zip(self.ratios, self.counts)) / self.chunks


def density_ranks(densities: Sequence[float]) -> np.ndarray:
    """Percentile rank per chunk in (0, 100]."""
    dens = np.asarray(densities, dtype=np.float64)
    n = len(dens)
    order = np.lexsort((np.arange(n), dens))
    ranks = np.empty(n, np.float64)
    ranks[order] = 100.0 * np.arange(1, n + 1) / n
    return ranks


def _candidates(n: int, ratios: Sequence[float], target: float) -> Iterator[Tuple[int, ...]]:
    """Band counts that are closest to the ratio target for each leading prefix."""
    w = len(ratios)
    if w == 1:
        yield (n,)
        return
    for prefix in _compositions_upto(n, w - 2):
        used = sum(prefix)
        remaining = n - used
        partial = sum(r * c for r, c in zip(ratios, prefix))
        ra, rb = ratios[-2], ratios[-1]
        exact = (target - partial - rb * remaining) / (ra - rb)
        for ca in {min(max(math.floor(exact), 0), remaining), min(max(math.ceil(exact), 0), remaining)}:
            yield prefix + (ca, remaining - ca)


def _compositions_upto(n: int, parts: int) -> Iterator[Tuple[int, ...]]:
    """All prefixes of `parts` non-negative counts whose sum is at most n."""
    if parts == 0:
        yield ()
        return
    for first in range(n + 1):
        for rest in _compositions_upto(n - first, parts - 1):
            yield (first,) + rest


def solve_thresholds(densities: Sequence[float], ratios: Sequence[float] = DEFAULT_RATIOS,
                     ratio_global: float = 0.5) -> CompressionPlan:
    n = len(densities)
    if n == 0:
        raise PlanningError("at least one chunk is required")
    levels = tuple(sorted((float(r) for r in ratios), reverse=True))
    if len(set(levels)) != len(levels) or levels[-1] <= 0:
        raise PlanningError(f"ratio levels must be distinct and positive, got {ratios}")
    if not levels[-1] - _EPS <= ratio_global <= levels[0] + _EPS:
        raise PlanningError(
            f"ratio_global {ratio_global} not attainable; must lie in [{levels[-1]}, {levels[0]}]")

    ranks = density_ranks(densities)
    by_rank = np.argsort(-ranks, kind="stable")          # densest first
    prefix = np.concatenate([[0.0], np.cumsum(np.asarray(densities, np.float64)[by_rank])])
    target = ratio_global * n

    best = None
    for counts in _candidates(n, levels, target):
        deviation = abs(sum(r * c for r, c in zip(levels, counts)) - target)
        objective, start = 0.0, 0
        for r, c in zip(levels, counts):
            objective += (prefix[start + c] - prefix[start]) / r
            start += c
        # closest ratio first, then information, then less compression
        key = (-round(deviation / _EPS) * _EPS, objective, counts)
        if best is None or key > best[0]:
            best = (key, counts, objective)

    _, counts, objective = best
    thresholds = [100.0]
    remaining = n
    for c in counts:
        remaining -= c
        thresholds.append(100.0 * remaining / n)

    assignment = np.empty(n, np.float64)
    start = 0
    for r, c in zip(levels, counts):
        assignment[by_rank[start:start + c]] = r
        start += c

    return CompressionPlan(levels, tuple(counts), tuple(thresholds), float(ratio_global),
                           float(objective), tuple(float(a) for a in assignment))


def assign_ratio(plan: CompressionPlan, rank: float) -> float:
    """The ratio whose band sigma_{w+1} < rank <= sigma_w contains the rank."""
    for w, ratio in enumerate(plan.ratios):
        upper, lower = plan.thresholds[w], plan.thresholds[w + 1]
        if lower + _EPS < rank <= upper + _EPS:
            return ratio
    return plan.ratios[-1]


def band_sizes(plan: CompressionPlan, ranks: Sequence[float]) -> List[int]:
    sizes = [0] * len(plan.ratios)
    for rank in ranks:
        sizes[plan.ratios.index(assign_ratio(plan, rank))] += 1
    return sizes
