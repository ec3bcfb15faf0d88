"""Time-weighted stationary estimators, error bars, and trend diagnostics.

A continuous-time trajectory visits each state for an exponential holding
time, so stationary expectations are time averages: every observable here is
integrated against the holding times, never against event counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GROWING = "growing"
SATURATING = "saturating"
UNDECIDED = "undecided"


class EmptyAccumulatorError(ValueError):
    """No recorded time: estimators are undefined."""


class StatAccumulator:
    """Mergeable time integrals of the standard observables.

    Tracks the recorded time T, the integrals of total mass and particle
    count, a per-mass histogram of site-time (bin 0 counts empty-site time),
    the per-site mass integrals, and an optional fixed-period time series of
    the total mass.  merge() of two accumulators equals accumulation over the
    concatenated trajectories; integer fields merge exactly, float fields up
    to addition reordering.
    """

    __slots__ = (
        "n_sites",
        "T",
        "mass_time",
        "count_time",
        "hist",
        "site_mass_time",
        "n_records",
        "series",
        "series_period",
    )

    def __init__(self, n_sites: int, series_period: float | None = None):
        if n_sites < 1:
            raise ValueError("accumulator needs at least one site")
        self.n_sites = n_sites
        self.T = 0.0
        self.mass_time = 0.0
        self.count_time = 0.0
        self.hist: list[float] = [0.0]
        self.site_mass_time: list[float] = [0.0] * n_sites
        self.n_records = 0
        self.series: list[float] = []
        self.series_period = series_period

    def _ensure_bin(self, m: int) -> None:
        if m >= len(self.hist):
            self.hist.extend([0.0] * (max(m + 1, 2 * len(self.hist)) - len(self.hist)))

    def record(self, state, dt: float) -> "StatAccumulator":
        """Advance every integral by one holding interval of length dt."""
        if not dt > 0.0:
            raise ValueError(f"holding time must be positive, got dt={dt}")
        self.T += dt
        self.mass_time += state.total_mass * dt
        n = len(state.occupied)
        self.count_time += n * dt
        self.hist[0] += (self.n_sites - n) * dt
        mass = state.mass
        for x in state.occupied:
            m = mass[x]
            self._ensure_bin(m)
            self.hist[m] += dt
            self.site_mass_time[x] += m * dt
        self.n_records += 1
        return self

    def high_water_mass(self) -> int:
        for m in range(len(self.hist) - 1, -1, -1):
            if self.hist[m] > 0.0:
                return m
        return 0

    def copy(self) -> "StatAccumulator":
        out = StatAccumulator(self.n_sites, self.series_period)
        out.T = self.T
        out.mass_time = self.mass_time
        out.count_time = self.count_time
        out.hist = list(self.hist)
        out.site_mass_time = list(self.site_mass_time)
        out.n_records = self.n_records
        out.series = list(self.series)
        return out


def merge_accumulators(a: StatAccumulator, b: StatAccumulator) -> StatAccumulator:
    """Monoid operation: the merge of two disjoint trajectory segments."""
    if a.n_sites != b.n_sites:
        raise ValueError("cannot merge accumulators over different lattices")
    if a.series_period is not None and b.series_period is not None:
        if a.series_period != b.series_period:
            raise ValueError("cannot merge series with different sampling periods")
    out = StatAccumulator(a.n_sites, a.series_period or b.series_period)
    out.T = a.T + b.T
    out.mass_time = a.mass_time + b.mass_time
    out.count_time = a.count_time + b.count_time
    hist = [0.0] * max(len(a.hist), len(b.hist))
    for src in (a.hist, b.hist):
        for m, w in enumerate(src):
            hist[m] += w
    out.hist = hist
    out.site_mass_time = [u + v for u, v in zip(a.site_mass_time, b.site_mass_time)]
    out.n_records = a.n_records + b.n_records
    out.series = list(a.series) + list(b.series)
    return out


def _require_time(acc: StatAccumulator) -> None:
    if not acc.T > 0.0:
        raise EmptyAccumulatorError("accumulator holds no recorded time")


def mean_site_mass(acc: StatAccumulator) -> float:
    """Time-averaged mass per site, the phase-characterising quantity."""
    _require_time(acc)
    return acc.mass_time / (acc.T * acc.n_sites)


def occupied_density(acc: StatAccumulator) -> float:
    """Time-averaged fraction of occupied sites (equals q/p in stationarity)."""
    _require_time(acc)
    return acc.count_time / (acc.T * acc.n_sites)


def mass_histogram(acc: StatAccumulator) -> np.ndarray:
    """Normalized site-mass law P(m), m >= 0, with P(0) the empty fraction."""
    _require_time(acc)
    return np.asarray(acc.hist, dtype=float) / (acc.T * acc.n_sites)


def per_site_mean_mass(acc: StatAccumulator) -> np.ndarray:
    _require_time(acc)
    return np.asarray(acc.site_mass_time, dtype=float) / acc.T


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """TV distance between two pmfs over {0,1,...}; shorter one is zero-padded."""
    n = max(len(p), len(q))
    pp = np.zeros(n)
    qq = np.zeros(n)
    pp[: len(p)] = p
    qq[: len(q)] = q
    return 0.5 * float(np.abs(pp - qq).sum())


def batch_means_ci(series, n_batches: int = 16) -> tuple[float, float]:
    """Mean and standard error of an autocorrelated series via batch means.

    The series is split into ``n_batches`` contiguous equal batches (oldest
    remainder dropped); the spread of the batch means absorbs the
    autocorrelation that a naive i.i.d. error bar would ignore.
    """
    if n_batches < 2:
        raise ValueError("need at least 2 batches to estimate a variance")
    x = np.asarray(series, dtype=float)
    if x.size < 2 * n_batches:
        raise ValueError(
            f"series of length {x.size} too short for {n_batches} batches"
        )
    k = x.size // n_batches
    x = x[x.size - k * n_batches :]
    bm = x.reshape(n_batches, k).mean(axis=1)
    return float(bm.mean()), float(bm.std(ddof=1) / math.sqrt(n_batches))


@dataclass
class TailFit:
    """Weighted linear fit of log P(m) on [m_lo, m_hi]; lam is the decay rate."""

    lam: float
    intercept: float
    m_lo: int
    m_hi: int
    r_squared: float
    lam_se: float

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "intercept": self.intercept,
            "m_lo": self.m_lo,
            "m_hi": self.m_hi,
            "r_squared": self.r_squared,
            "lambda_se": self.lam_se,
        }


def tail_fit_exponential(probs, m_lo: int, m_hi: int, weights=None) -> TailFit:
    """Fit P(m) ~ exp(-lam*m) on m in [m_lo, m_hi] by weighted least squares.

    Bins are weighted by their time-integrated counts (so the log of a barely
    visited bin cannot dominate the fit); the default weights the bins by the
    probabilities themselves.  Raises on any empty bin in the range.
    """
    if m_hi < m_lo + 4:
        raise ValueError("fit range must span at least 5 mass values")
    probs = np.asarray(probs, dtype=float)
    if m_hi >= len(probs):
        raise ValueError(
            f"fit range [{m_lo},{m_hi}] exceeds histogram support {len(probs) - 1}"
        )
    pm = probs[m_lo : m_hi + 1]
    if np.any(pm <= 0.0):
        empty = [int(m) for m in range(m_lo, m_hi + 1) if probs[m] <= 0.0]
        raise ValueError(f"empty bins {empty} in fit range [{m_lo},{m_hi}]")
    if weights is None:
        w = pm.copy()
    else:
        w = np.asarray(weights, dtype=float)[m_lo : m_hi + 1]
        if np.any(w <= 0.0):
            raise ValueError("weights must be positive over the fit range")
    n = pm.size
    w = w * (n / w.sum())
    x = np.arange(m_lo, m_hi + 1, dtype=float)
    y = np.log(pm)
    wsum = w.sum()
    xb = float((w * x).sum() / wsum)
    yb = float((w * y).sum() / wsum)
    sxx = float((w * (x - xb) ** 2).sum())
    sxy = float((w * (x - xb) * (y - yb)).sum())
    slope = sxy / sxx
    intercept = yb - slope * xb
    resid = y - (intercept + slope * x)
    ssr = float((w * resid**2).sum())
    sst = float((w * (y - yb) ** 2).sum())
    r2 = 1.0 if sst == 0.0 else 1.0 - ssr / sst
    sigma2 = ssr / (n - 2) if n > 2 else 0.0
    lam_se = math.sqrt(sigma2 / sxx)
    lam = -slope
    if not math.isfinite(lam):
        raise ValueError("fit produced a non-finite decay rate")
    return TailFit(lam, intercept, m_lo, m_hi, r2, lam_se)


@dataclass
class GrowthResult:
    verdict: str
    early_mean: float
    late_mean: float
    combined_se: float
    rel_change: float

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "early_mean": self.early_mean,
            "late_mean": self.late_mean,
            "combined_se": self.combined_se,
            "rel_change": self.rel_change,
        }


def _half_mean_se(x: np.ndarray) -> tuple[float, float]:
    nb = min(8, x.size)
    if nb >= 2:
        return batch_means_ci(x, nb)
    return float(x.mean()), 0.0


def growth_diagnostic(series, window: int, theta_g: float = 0.05) -> GrowthResult:
    """Classify a total-mass series as growing, saturating, or undecided.

    Splits the final ``window`` samples into two halves and compares their
    means.  Growing needs both statistical significance (3 combined standard
    errors) and a relative increase above ``theta_g`` per half-window; a
    series flat or declining within errors saturates; significant but
    sub-threshold growth stays undecided.
    """
    x = np.asarray(series, dtype=float)
    if window < 4:
        raise ValueError("window must cover at least 4 samples")
    if x.size < 4 * window:
        raise ValueError(
            f"series of length {x.size} spans fewer than 4 windows of {window}"
        )
    tail = x[x.size - window :]
    half = window // 2
    early = tail[:half]
    late = tail[half:]
    e_mean, e_se = _half_mean_se(early)
    l_mean, l_se = _half_mean_se(late)
    se = math.hypot(e_se, l_se)
    diff = l_mean - e_mean
    rel = diff / e_mean if e_mean > 0.0 else (math.inf if diff > 0.0 else 0.0)
    if diff > 3.0 * se and rel > theta_g:
        verdict = GROWING
    elif abs(diff) <= 3.0 * se or diff < 0.0:
        verdict = SATURATING
    else:
        verdict = UNDECIDED
    return GrowthResult(verdict, e_mean, l_mean, se, rel)
