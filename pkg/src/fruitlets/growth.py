"""Growth rates and abscission risk from paired size measurements.

A fruitlet measured on two days gives a growth rate in mm/day.  Rates
for one cluster are cleaned with a single-pass z-score filter, then
summarised: the median growth of the fastest-growing fraction sets the
cluster's reference ("median fastest growth"), fruitlets growing slower
than half that reference are predicted to abscise, and the report gives
their percentage.
"""

import math
import statistics
import warnings
from dataclasses import dataclass
from datetime import date

import numpy as np

__all__ = [
    "GrowthRecord",
    "AbscissionReport",
    "day_gap",
    "growth_rates",
    "zscore_mask",
    "zscore_filter",
    "abscise_report",
]


@dataclass(frozen=True)
class GrowthRecord:
    fruitlet_id: str
    size_a_mm: float
    size_b_mm: float
    rate_mm_per_day: float


@dataclass(frozen=True)
class AbscissionReport:
    """Cluster-level abscission summary.

    ``median_fastest_growth`` is the median (lower middle on even
    counts) of the fastest-growing ``top_frac`` of surviving rates;
    the abscission threshold sits at half of it.
    """

    median_fastest_growth: float
    threshold: float
    abscise_percent: float
    n_input: int
    n_kept: int
    kept_rates: tuple
    removed_indices: tuple


def day_gap(day_a: str, day_b: str) -> float:
    """Days between two ISO dates; the second must be later."""
    gap = (date.fromisoformat(day_b) - date.fromisoformat(day_a)).days
    if gap <= 0:
        raise ValueError(f"day_b must be after day_a, got {day_a!r} .. {day_b!r}")
    return float(gap)


def growth_rates(sized_pairs, gap_days: float):
    """Per-fruitlet growth rates from (id, size_a_mm, size_b_mm) triples.

    Raises:
        ValueError: non-positive day gap, duplicate fruitlet id, or a
            non-finite or non-positive size.
    """
    if not gap_days > 0:
        raise ValueError(f"day gap must be positive, got {gap_days}")
    seen = set()
    records = []
    for fruitlet_id, size_a, size_b in sized_pairs:
        if fruitlet_id in seen:
            raise ValueError(f"duplicate fruitlet id {fruitlet_id!r}")
        seen.add(fruitlet_id)
        a, b = float(size_a), float(size_b)
        if not (math.isfinite(a) and math.isfinite(b) and a > 0 and b > 0):
            raise ValueError(f"bad sizes for {fruitlet_id!r}: {size_a}, {size_b}")
        records.append(
            GrowthRecord(
                fruitlet_id=str(fruitlet_id),
                size_a_mm=a,
                size_b_mm=b,
                rate_mm_per_day=(b - a) / gap_days,
            )
        )
    return tuple(records)


def zscore_mask(values, z_threshold: float = 3.0) -> np.ndarray:
    """Keep-mask over values whose |z| stays within the threshold.

    One pass against the population standard deviation of the full
    input; values strictly beyond the threshold are marked for removal.
    Fewer than two values, or zero spread, keeps everything (the filter
    has nothing to measure against).
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 1:
        raise ValueError(f"expected a 1-D value array, got shape {vals.shape}")
    if z_threshold <= 0:
        raise ValueError(f"z_threshold must be positive, got {z_threshold}")
    if vals.size < 2:
        warnings.warn("fewer than two values; z-score filter skipped", stacklevel=2)
        return np.ones(vals.size, dtype=bool)
    std = vals.std()
    if std == 0:
        return np.ones(vals.size, dtype=bool)
    return np.abs(vals - vals.mean()) / std <= z_threshold


def zscore_filter(values, z_threshold: float = 3.0) -> np.ndarray:
    """The values that survive :func:`zscore_mask`."""
    vals = np.asarray(values, dtype=np.float64)
    return vals[zscore_mask(vals, z_threshold)]


def abscise_report(
    rates, top_frac: float = 0.15, z_threshold: float = 3.0
) -> AbscissionReport:
    """Summarise abscission risk for one cluster's growth rates.

    Outliers are removed first; the fastest ceil(top_frac * n) surviving
    rates define the reference growth, and anything below half of it
    counts as likely to drop.

    Raises:
        ValueError: empty or non-finite rates, or top_frac outside (0, 1].
    """
    if not 0.0 < top_frac <= 1.0:
        raise ValueError(f"top_frac must lie in (0, 1], got {top_frac}")
    vals = np.asarray(rates, dtype=np.float64)
    if vals.ndim != 1 or vals.size == 0:
        raise ValueError("need a non-empty 1-D array of growth rates")
    if not np.all(np.isfinite(vals)):
        raise ValueError("growth rates must be finite")

    mask = zscore_mask(vals, z_threshold)
    kept = vals[mask]
    m = math.ceil(top_frac * kept.size)
    fastest = np.sort(kept)[::-1][:m]
    mfg = float(statistics.median_low([float(x) for x in fastest]))
    threshold = mfg / 2.0
    percent = 100.0 * int(np.count_nonzero(kept < threshold)) / kept.size
    return AbscissionReport(
        median_fastest_growth=mfg,
        threshold=threshold,
        abscise_percent=float(percent),
        n_input=int(vals.size),
        n_kept=int(kept.size),
        kept_rates=tuple(float(x) for x in kept),
        removed_indices=tuple(int(i) for i in np.flatnonzero(~mask)),
    )
