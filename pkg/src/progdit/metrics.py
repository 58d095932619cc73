"""Image fidelity metrics and paired significance tests."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

PSNR_INF = math.inf


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(a, b) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(err: float, max_val: float = 1.0) -> float:
    if err < 0:
        raise MetricError("negative MSE")
    if err == 0:
        return PSNR_INF
    return 10.0 * math.log10(max_val * max_val / err)


def psnr(a, b, max_val: float = 1.0) -> float:
    return psnr_from_mse(mse(a, b), max_val)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _valid_filter(x: np.ndarray, g1: np.ndarray) -> np.ndarray:
    # separable correlation keeping only fully covered windows
    k = len(g1)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g1
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g1


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
             max_val: float = 1.0) -> np.ndarray:
    x, y = _pair(a, b)
    if x.ndim != 2:
        raise MetricError(f"ssim expects a 2-D image, got shape {x.shape}")
    if min(x.shape) < window:
        warnings.warn(f"image {x.shape} smaller than the {window}x{window} window; reflect-padding",
                      RuntimeWarning, stacklevel=2)
        pad = [(max(0, (window - n + 1) // 2), max(0, (window - n) // 2)) for n in x.shape]
        x = np.pad(x, pad, mode="symmetric")
        y = np.pad(y, pad, mode="symmetric")
    r = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g1 = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g1 /= g1.sum()
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    mx, my = _valid_filter(x, g1), _valid_filter(y, g1)
    sxx = _valid_filter(x * x, g1) - mx * mx
    syy = _valid_filter(y * y, g1) - my * my
    sxy = _valid_filter(x * y, g1) - mx * my
    # 2 * (mx * my) rather than 2 * mx * my keeps the map bitwise symmetric in (a, b)
    num = (2.0 * (mx * my) + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         max_val: float = 1.0) -> float:
    """Mean local SSIM over all fully covered Gaussian windows."""
    x, y = _pair(a, b)
    if x.shape == y.shape and np.array_equal(x, y):
        return 1.0
    return float(np.mean(ssim_map(x, y, window, sigma, k1, k2, max_val)))


def absolute_error_map(a, b) -> np.ndarray:
    x, y = _pair(a, b)
    return np.abs(x - y)


# -- significance ------------------------------------------------------------------
@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_one_sided_ttest(x, y, direction: str = "greater") -> TTestResult:
    """H1: ``mean(x - y) > 0`` (``greater``) or ``< 0`` (``less``).

    Zero-variance differences give ``t = +-inf`` (or 0 when all differences
    vanish) and a p-value forced by the sign, with ``degenerate`` set.
    """
    a = np.asarray(x, dtype=np.float64).ravel()
    b = np.asarray(y, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise MetricError("paired t-test needs at least two pairs")
    if direction not in ("greater", "less"):
        raise MetricError(f"direction must be 'greater' or 'less', got {direction!r}")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 0.5, n - 1, True)
        t = math.copysign(math.inf, mean)
        p = 0.0 if (mean > 0) == (direction == "greater") else 1.0
        return TTestResult(t, p, n - 1, True)
    t = mean / (sd / math.sqrt(n))
    p = float(stats.t.sf(t, n - 1)) if direction == "greater" else float(stats.t.cdf(t, n - 1))
    return TTestResult(t, p, n - 1)


def mean_sd(values) -> tuple[float, float, int]:
    """Finite-value mean and sample SD (0 for a single value); the count excludes infinities."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan, 0
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), sd, int(v.size)


def spearman(x, y) -> float:
    """Rank correlation; NaN when either input is constant."""
    a, b = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    r = stats.spearmanr(a, b)
    return float(r.statistic)


@dataclass(frozen=True)
class MetricSample:
    pair_id: str
    subject_id: str
    ssim: float
    psnr_db: float
    mse: float
    delta_t: float
    progression_group: str

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.ssim <= 1.0 + 1e-12:
            raise MetricError(f"{self.pair_id}: ssim {self.ssim} outside [-1, 1]")
        if self.mse < 0:
            raise MetricError(f"{self.pair_id}: negative mse")


def score_pair(pair_id: str, subject_id: str, generated, target, delta_t: float, group: str,
               max_val: float = 1.0) -> MetricSample:
    err = mse(generated, target)
    return MetricSample(pair_id, subject_id, ssim(generated, target, max_val=max_val),
                        psnr_from_mse(err, max_val), err, float(delta_t), group)
