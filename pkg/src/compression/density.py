"""
Per-token information density from attention scores.

A token's density is the mean of its attention column over every defined
(unmasked) entry, across layers and heads. A chunk's density is the mean of
its tokens' densities. The ledger is fed incrementally with the attention rows
that prefill/decode produce, so it never needs the full matrices again.
"""

from typing import List

import numpy as np

from src.service.errors import ConsistencyError


class DensityLedger:

    def __init__(self, layers: int, heads: int, first_position: int = 0):
        self.layers = layers
        self.heads = heads
        self.first_position = first_position
        self.column_sums = np.zeros(0, np.float64)
        self.counts = np.zeros(0, np.int64)

    def __len__(self):
        return int(self.column_sums.shape[0])

    @property
    def end_position(self) -> int:
        return self.first_position + len(self)

    def update(self, rows: np.ndarray) -> "DensityLedger":
        """Accumulate (L, H, n_new, T) attention rows for the next n_new tokens."""
        if rows.ndim != 4 or rows.shape[:2] != (self.layers, self.heads):
            raise ConsistencyError(f"attention rows of shape {rows.shape} do not match L={self.layers}, H={self.heads}")
        n_new, total = rows.shape[2], rows.shape[3]
        if total != len(self) + n_new:
            raise ConsistencyError(f"rows span {total} columns, ledger expects {len(self) + n_new}")

        self.column_sums = np.concatenate([self.column_sums, np.zeros(n_new)])
        self.counts = np.concatenate([self.counts, np.zeros(n_new, np.int64)])
        self.column_sums += rows.sum(axis=(0, 1, 2), dtype=np.float64)
        defined_rows = np.minimum(n_new, total - np.arange(total))
        self.counts += defined_rows * self.layers * self.heads
        return self

    def token_densities(self) -> np.ndarray:
        return self.column_sums / np.maximum(self.counts, 1)

    def density_of(self, start: int, stop: int) -> float:
        """Mean density of global positions [start, stop)."""
        lo = start - self.first_position
        hi = stop - self.first_position
        if lo < 0 or hi > len(self) or hi <= lo:
            raise ConsistencyError(f"positions [{start}, {stop}) are not tracked")
        return float(self.token_densities()[lo:hi].mean())

    def chunk_densities(self, chunk_tokens: int) -> List[float]:
        """Densities of consecutive chunk_tokens-wide chunks, the last one possibly partial."""
        dens = self.token_densities()
        return [float(dens[i:i + chunk_tokens].mean()) for i in range(0, len(self), chunk_tokens)]

    def drop_front(self, count: int) -> None:
        self.column_sums = self.column_sums[count:]
        self.counts = self.counts[count:]
        self.first_position += count


def update_density(ledger: DensityLedger, rows: np.ndarray) -> DensityLedger:
    return ledger.update(rows)
