"""Masked error metrics and statistical checks on residual samples."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

# Pass thresholds for the assumption checks; echoed into every report.
SYMMETRY_SE_MULTIPLIER = 3.0
SYMMETRY_MAX_ABS_SKEW = 0.5
MIN_SYMMETRY_SAMPLES = 30
# Standard error of the sample median under normality is ~1.2533 sd / sqrt(n).
_MEDIAN_SE_FACTOR = math.sqrt(math.pi / 2.0)


def _masked(pred, target, mask):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mask = np.ones(pred.shape, bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), pred.shape)
    if not mask.any():
        raise ValueError("every entry is masked")
    return (pred - target)[mask]


def mae(pred, target, mask=None) -> float:
    return float(np.mean(np.abs(_masked(pred, target, mask))))


def rmse(pred, target, mask=None) -> float:
    d = _masked(pred, target, mask)
    return float(math.sqrt(np.mean(d * d)))


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    count: int
    dropped: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, target, mask) -> MetricsReport:
    """MAE/RMSE over entries with ``mask`` set; the rest are counted as dropped."""
    mask = np.asarray(mask, bool)
    count = int(mask.sum())
    return MetricsReport(mae(pred, target, mask), rmse(pred, target, mask), count, int(mask.size - count))


@dataclass
class SymmetryReport:
    samples: int
    mean: float
    median: float
    skewness: float
    se_mean: float
    se_median: float
    histogram_counts: list
    histogram_edges: list
    mean_ok: bool
    median_ok: bool
    skew_ok: bool
    passed: bool
    thresholds: dict

    def to_dict(self) -> dict:
        return asdict(self)


def check_symmetry(residuals, bins: int = 21) -> SymmetryReport:
    """Test residual samples for a distribution symmetric about zero.

    Passes when the mean and the median each lie within three standard
    errors of zero and the absolute sample skewness is below 0.5.
    NaN entries (unobserved cells) are ignored.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    r = r[np.isfinite(r)]
    if r.size < MIN_SYMMETRY_SAMPLES:
        raise ValueError(f"need at least {MIN_SYMMETRY_SAMPLES} samples, got {r.size}")
    sd = float(np.std(r, ddof=1))
    se = sd / math.sqrt(r.size)
    se_med = _MEDIAN_SE_FACTOR * se
    mean = float(np.mean(r))
    median = float(np.median(r))
    skew = float(stats.skew(r)) if sd > 0 else 0.0
    k = SYMMETRY_SE_MULTIPLIER
    mean_ok = abs(mean) <= k * se
    median_ok = abs(median) <= k * se_med
    skew_ok = abs(skew) < SYMMETRY_MAX_ABS_SKEW
    counts, edges = np.histogram(r, bins=bins)
    return SymmetryReport(
        samples=int(r.size), mean=mean, median=median, skewness=skew, se_mean=se, se_median=se_med,
        histogram_counts=counts.tolist(), histogram_edges=edges.tolist(),
        mean_ok=bool(mean_ok), median_ok=bool(median_ok), skew_ok=bool(skew_ok),
        passed=bool(mean_ok and median_ok and skew_ok),
        thresholds={"se_multiplier": k, "max_abs_skewness": SYMMETRY_MAX_ABS_SKEW,
                    "median_se_factor": _MEDIAN_SE_FACTOR},
    )


@dataclass
class CorrelationReport:
    samples: int
    mean_product: float
    se: float
    passed: bool
    rule: str = "pass when mean(g_s * g_t) <= 1 standard error"

    def to_dict(self) -> dict:
        return asdict(self)


def check_negative_correlation(g_s_samples, g_t_samples) -> CorrelationReport:
    """Estimate ``E[G_s G_t]`` from paired samples; pass when it is not above zero by more than one SE."""
    a = np.asarray(g_s_samples, dtype=float).ravel()
    b = np.asarray(g_t_samples, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"unpaired samples: {a.size} vs {b.size}")
    ok = np.isfinite(a) & np.isfinite(b)
    u = a[ok] * b[ok]
    if u.size < 2:
        raise ValueError("need at least two paired samples")
    mean = float(np.mean(u))
    se = float(np.std(u, ddof=1) / math.sqrt(u.size))
    return CorrelationReport(int(u.size), mean, se, bool(mean <= se))
