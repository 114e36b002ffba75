"""Monte Carlo aggregation and the small statistical toolbox of the harness.

Estimates are merged as (count, compensated sum, compensated sum of squares)
so replica results can be combined in any grouping; the harness always
reduces chunks in stream order, which makes aggregated output independent of
the worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import stats as _sstats


@dataclass(frozen=True)
class McEstimate:
    """A Monte Carlo estimate with replica provenance."""

    mean: float
    se: float
    n: int
    censored: int = 0
    seed: Optional[int] = None
    streams: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        if self.censored > self.n:
            raise ValueError("censored count exceeds replica count")

    def half_width(self, z: float = 3.0) -> float:
        return z * self.se


class RunningStat:
    """Compensated (count, sum, sum of squares) accumulator with merge."""

    __slots__ = ("n", "_s", "_cs", "_q", "_cq")

    def __init__(self) -> None:
        self.n = 0
        self._s = 0.0
        self._cs = 0.0
        self._q = 0.0
        self._cq = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        self._kahan_s(x)
        self._kahan_q(x * x)

    def add_many(self, xs: Iterable[float]) -> None:
        for x in xs:
            self.add(float(x))

    def add_moments(self, n: int, s: float, q: float) -> None:
        """Fold in a chunk summarized by its count, sum, and sum of squares."""
        self.n += int(n)
        self._kahan_s(s)
        self._kahan_q(q)

    def merge(self, other: "RunningStat") -> "RunningStat":
        self.add_moments(other.n, other.sum, other.sumsq)
        return self

    def _kahan_s(self, x: float) -> None:
        y = x - self._cs
        t = self._s + y
        self._cs = (t - self._s) - y
        self._s = t

    def _kahan_q(self, x: float) -> None:
        y = x - self._cq
        t = self._q + y
        self._cq = (t - self._q) - y
        self._q = t

    @property
    def sum(self) -> float:
        return self._s

    @property
    def sumsq(self) -> float:
        return self._q

    @property
    def mean(self) -> float:
        if self.n == 0:
            raise ValueError("no samples")
        return self._s / self.n

    @property
    def var(self) -> float:
        """Unbiased sample variance."""
        if self.n < 2:
            return 0.0
        v = (self._q - self._s * self._s / self.n) / (self.n - 1)
        return max(v, 0.0)

    @property
    def se(self) -> float:
        if self.n == 0:
            raise ValueError("no samples")
        return math.sqrt(self.var / self.n)

    def estimate(self, censored: int = 0, seed: Optional[int] = None,
                 streams: Optional[Tuple[int, int]] = None) -> McEstimate:
        return McEstimate(self.mean, self.se, self.n, censored, seed, streams)


def mean_ci(samples: Sequence[float], seed: Optional[int] = None,
            streams: Optional[Tuple[int, int]] = None) -> McEstimate:
    """Sample mean with SE = sample std / sqrt(n)."""
    arr = np.asarray(samples, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least 2 samples")
    st = RunningStat()
    st.add_moments(arr.size, float(arr.sum()), float(np.sum(arr * arr)))
    return st.estimate(seed=seed, streams=streams)


def pooled_se(a: McEstimate, b: McEstimate) -> float:
    return math.sqrt(a.se ** 2 + b.se ** 2)


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic with asymptotic p-value.

    Requires at least 25 points on each side for the asymptotic distribution
    to be trustworthy.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size < 25 or b.size < 25:
        raise ValueError("need >= 25 samples per side for the asymptotic KS p-value")
    res = _sstats.ks_2samp(a, b, method="asymp")
    return float(res.statistic), float(res.pvalue)


def loglog_slope(pairs: Sequence[Tuple[float, float]]) -> Tuple[float, float]:
    """Least-squares slope of log(y) against log(x), with its standard error."""
    pts = [(x, y) for x, y in pairs if x > 0.0 and y > 0.0]
    if len(pts) < 2:
        raise ValueError("need at least 2 positive pairs")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    n = lx.size
    xbar = lx.mean()
    sxx = float(np.sum((lx - xbar) ** 2))
    if sxx == 0.0:
        raise ValueError("degenerate abscissae")
    slope = float(np.sum((lx - xbar) * (ly - ly.mean())) / sxx)
    intercept = float(ly.mean() - slope * xbar)
    resid = ly - (intercept + slope * lx)
    if n == 2:
        return slope, 0.0
    s2 = float(np.sum(resid ** 2)) / (n - 2)
    return slope, math.sqrt(s2 / sxx)
