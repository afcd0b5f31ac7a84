"""Agreement between predicted and radiologist scores: PLCC, SROCC, KROCC.

Spearman uses mid-ranks for ties; Kendall is tau-b (pairs tied in both
vectors count toward neither tie term).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class MetricError(ValueError):
    pass


class LengthMismatch(MetricError):
    pass


class DegenerateInput(MetricError):
    pass


@dataclass(frozen=True)
class MetricReport:
    plcc: float
    srocc: float
    krocc: float
    n: int

    @property
    def overall(self) -> float:
        return overall(self.plcc, self.srocc, self.krocc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overall"] = self.overall
        return d


def _check(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(truth, dtype=np.float64).ravel()
    y = np.asarray(pred, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"truth has {x.size} values, prediction has {y.size}")
    if x.size < 3:
        raise DegenerateInput(f"need at least 3 pairs, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateInput("non-finite value in input")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("constant input has no defined correlation")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = x - mx
    dy = y - my
    sxy = math.fsum(dx * dy)
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def midranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.size, dtype=np.float64)
    start = 0
    n = v.size
    while start < n:
        stop = start + 1
        while stop < n and sorted_v[stop] == sorted_v[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def plcc(truth, pred) -> float:
    x, y = _check(truth, pred)
    return _pearson(x, y)


def srocc(truth, pred) -> float:
    x, y = _check(truth, pred)
    rx, ry = midranks(x), midranks(y)
    n = x.size
    if np.unique(x).size == n and np.unique(y).size == n:
        d2 = math.fsum((rx - ry) ** 2)
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    return _pearson(rx, ry)


def _count_inversions(a: list) -> int:
    """Number of pairs i < j with a[i] > a[j] (merge sort; equal elements are not inversions)."""
    n = len(a)
    if n < 2:
        return 0
    buf = list(a)
    tmp = [0] * n
    swaps = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if buf[j] < buf[i]:
                    tmp[k] = buf[j]
                    swaps += mid - i
                    j += 1
                else:
                    tmp[k] = buf[i]
                    i += 1
                k += 1
            tmp[k : k + mid - i] = buf[i:mid]
            k += mid - i
            tmp[k : k + hi - j] = buf[j:hi]
        buf, tmp = tmp, buf
        width *= 2
    return swaps


def _tied_pairs(values) -> int:
    _, counts = np.unique(values, axis=0, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def krocc(truth, pred) -> float:
    """Kendall tau-b in O(n log n) (Knight's algorithm)."""
    x, y = _check(truth, pred)
    n = x.size
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]

    total = n * (n - 1) // 2
    ties_x = _tied_pairs(xs)
    ties_y = _tied_pairs(ys)
    joint = _tied_pairs(np.column_stack([xs, ys]))
    discordant = _count_inversions(ys.tolist())

    # concordant - discordant over pairs untied in both coordinates
    s = total - ties_x - ties_y + joint - 2 * discordant
    return s / math.sqrt((total - ties_x) * (total - ties_y))


def overall(plcc_value: float, srocc_value: float, krocc_value: float) -> float:
    return plcc_value + srocc_value + krocc_value


def evaluate(truth, pred) -> MetricReport:
    x, y = _check(truth, pred)
    return MetricReport(plcc(x, y), srocc(x, y), krocc(x, y), int(x.size))
