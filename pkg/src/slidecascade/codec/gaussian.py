"""Integer probability tables for discretized Gaussians.

A coded symbol s carries the probability mass of the interval
[s - 1/2, s + 1/2] under N(mu_hat, sigma_hat^2); mass beyond the support
ends is folded into the boundary symbols.  Masses are quantized to integer
counts summing exactly to 2^precision, with every in-support symbol kept
at count >= 1 so it stays codable, and any rounding surplus or deficit
absorbed by the mode (spilling to the next-largest entries in the rare
case the mode cannot cover it).

Construction runs in a numba kernel: one erf per interval edge, with the
flat tails of the CDF short-circuited.  The kernel output matches a
straightforward scipy.special.ndtr construction count-for-count; the test
suite pins that equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "SIGMA_FLOOR",
    "DEFAULT_PRECISION",
    "DEFAULT_SUPPORT",
    "GaussianPmfTable",
    "TableBatch",
    "discretize_gaussian",
    "gaussian_table_batch",
    "estimate_rate",
]

SIGMA_FLOOR = 0.11
DEFAULT_PRECISION = 16
DEFAULT_SUPPORT = (-127, 128)

# Beyond this many standard deviations the CDF is flat at double precision,
# so interval masses round to zero and the count floor takes over anyway.
_TAIL_CUTOFF = 8.3


@njit(cache=True)
def _fill_counts(mu, sigma, smin, n_sym, precision, counts):
    total = np.int64(1) << precision
    inv_sqrt2 = 0.7071067811865476
    for i in range(mu.shape[0]):
        m = mu[i]
        sd = sigma[i]
        inv_sd = 1.0 / sd
        ssum = np.int64(0)
        mode = 0
        mode_val = np.int64(-1)
        j_lo = int(math.floor(m - _TAIL_CUTOFF * sd) - smin)
        if j_lo < 0:
            j_lo = 0
        if j_lo > n_sym - 1:
            j_lo = n_sym - 1
        for j in range(j_lo):
            counts[i, j] = 1
        ssum += j_lo
        if j_lo > 0:
            mode_val = np.int64(1)
            mode = 0
        prev = 0.0
        j = j_lo
        while j < n_sym:
            if j == n_sym - 1:
                cur = 1.0
            else:
                arg = (smin + j + 0.5 - m) * inv_sd
                if arg <= -_TAIL_CUTOFF:
                    cur = 0.0
                elif arg >= _TAIL_CUTOFF:
                    cur = 1.0
                else:
                    cur = 0.5 * (1.0 + math.erf(arg * inv_sqrt2))
            c = np.int64(np.rint((cur - prev) * total))
            if c < 1:
                c = np.int64(1)
            counts[i, j] = c
            ssum += c
            if c > mode_val:
                mode_val = c
                mode = j
            prev = cur
            j += 1
            if cur == 1.0:
                break
        for jj in range(j, n_sym):
            counts[i, jj] = 1
        ssum += n_sym - j
        counts[i, mode] += total - ssum
        if counts[i, mode] < 1:
            need = np.int64(1) - counts[i, mode]
            counts[i, mode] = 1
            while need > 0:
                big = 0
                for jj in range(n_sym):
                    if counts[i, jj] > counts[i, big]:
                        big = jj
                take = counts[i, big] - 1
                if take > need:
                    take = need
                counts[i, big] -= take
                need -= take


@dataclass(frozen=True)
class TableBatch:
    """Per-element tables sharing one support range and precision."""

    counts: np.ndarray  # int64, shape (n, support size)
    support_min: int
    support_max: int
    precision: int
    n_clamped: int = 0

    @property
    def n_symbols(self) -> int:
        return self.support_max - self.support_min + 1

    def __len__(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class GaussianPmfTable:
    """A single element's table, with the parameters that produced it."""

    mu_hat: float
    sigma_hat: float
    support_min: int
    support_max: int
    precision: int
    pmf: np.ndarray  # integer counts, one per support symbol
    clamped: bool

    def mass(self, symbol: int) -> float:
        if not self.support_min <= symbol <= self.support_max:
            raise ValueError(f"symbol {symbol} outside support [{self.support_min}, {self.support_max}]")
        return float(self.pmf[symbol - self.support_min]) / float(1 << self.precision)


def _validate_table_args(support_min: int, support_max: int, precision: int) -> None:
    if support_min >= support_max:
        raise ValueError(f"support_min {support_min} must be below support_max {support_max}")
    if not 12 <= precision <= 18:
        raise ValueError(f"precision {precision} outside [12, 18]")
    if support_max - support_min + 1 > (1 << precision):
        raise ValueError("support larger than the count budget; tables would be invalid")


def gaussian_table_batch(
    mu_hat,
    sigma_hat,
    support=DEFAULT_SUPPORT,
    precision: int = DEFAULT_PRECISION,
) -> TableBatch:
    """Build one table per element of the broadcast (mu_hat, sigma_hat) pair.

    sigma below SIGMA_FLOOR is clamped, and the number of clamped elements
    is reported on the batch rather than raising; a learned prior head can
    legitimately drive sigma to the floor.
    """
    support_min, support_max = support
    _validate_table_args(support_min, support_max, precision)
    mu = np.ascontiguousarray(np.atleast_1d(np.asarray(mu_hat, dtype=np.float64)))
    sigma = np.ascontiguousarray(np.atleast_1d(np.asarray(sigma_hat, dtype=np.float64)))
    mu, sigma = np.broadcast_arrays(mu, sigma)
    mu = np.ascontiguousarray(mu)
    sigma = np.ascontiguousarray(sigma)
    if mu.ndim != 1:
        raise ValueError("table parameters must be scalars or 1-D arrays")
    if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(sigma)):
        raise ValueError("non-finite table parameters")
    n_clamped = int(np.count_nonzero(sigma < SIGMA_FLOOR))
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    n_sym = support_max - support_min + 1
    counts = np.empty((mu.shape[0], n_sym), dtype=np.int64)
    _fill_counts(mu, sigma, support_min, n_sym, precision, counts)
    return TableBatch(counts, support_min, support_max, precision, n_clamped)


def discretize_gaussian(
    mu_hat: float,
    sigma_hat: float,
    support_min: int = DEFAULT_SUPPORT[0],
    support_max: int = DEFAULT_SUPPORT[1],
    precision: int = DEFAULT_PRECISION,
) -> GaussianPmfTable:
    """Single-table convenience wrapper around gaussian_table_batch."""
    batch = gaussian_table_batch(
        np.float64(mu_hat), np.float64(sigma_hat), (support_min, support_max), precision
    )
    return GaussianPmfTable(
        mu_hat=float(mu_hat),
        sigma_hat=max(float(sigma_hat), SIGMA_FLOOR),
        support_min=support_min,
        support_max=support_max,
        precision=precision,
        pmf=batch.counts[0],
        clamped=bool(float(sigma_hat) < SIGMA_FLOOR),
    )


def as_table_batch(tables, expected_len: int | None = None) -> TableBatch:
    """Accept a TableBatch or a sequence of GaussianPmfTable as one batch."""
    if isinstance(tables, TableBatch):
        batch = tables
    else:
        tables = list(tables)
        if not tables:
            batch = TableBatch(
                np.zeros((0, DEFAULT_SUPPORT[1] - DEFAULT_SUPPORT[0] + 1), dtype=np.int64),
                DEFAULT_SUPPORT[0],
                DEFAULT_SUPPORT[1],
                DEFAULT_PRECISION,
            )
        else:
            first = tables[0]
            key = (first.support_min, first.support_max, first.precision)
            for t in tables[1:]:
                if (t.support_min, t.support_max, t.precision) != key:
                    raise ValueError("mixed table supports or precisions in one batch")
            counts = np.stack([np.asarray(t.pmf, dtype=np.int64) for t in tables])
            batch = TableBatch(counts, first.support_min, first.support_max, first.precision)
    if expected_len is not None and len(batch) != expected_len:
        raise ValueError(f"{len(batch)} tables for {expected_len} symbols")
    return batch


def estimate_rate(symbols, tables) -> float:
    """Ideal coded size in bits, sum of -log2(count_s / 2^precision).

    This is the Shannon rate of the quantized tables, the quantity the
    actual rANS payload tracks to within its small per-stream overhead.
    """
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    batch = as_table_batch(tables, symbols.shape[0])
    if symbols.size == 0:
        return 0.0
    idx = symbols - batch.support_min
    if idx.min() < 0 or idx.max() >= batch.n_symbols:
        bad = int(np.where((idx < 0) | (idx >= batch.n_symbols))[0][0])
        raise ValueError(f"symbol out of support at index {bad}: value {int(symbols[bad])}")
    picked = batch.counts[np.arange(symbols.shape[0]), idx].astype(np.float64)
    return float(batch.precision * symbols.shape[0] - np.sum(np.log2(picked)))
