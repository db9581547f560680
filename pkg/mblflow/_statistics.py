from __future__ import annotations

import numpy as np
from scipy.stats import binomtest, linregress


def wilson_interval(
    hits: int, trials: int, confidence: float = 0.95
) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return (float("nan"), float("nan"))
    ci = binomtest(int(hits), int(trials)).proportion_ci(
        confidence_level=confidence, method="wilson"
    )
    return (float(ci.low), float(ci.high))


def wilson_intervals(
    hits: np.ndarray, trials: int, confidence: float = 0.95
) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(hits, dtype=np.int64).ravel()
    bounds = np.array([wilson_interval(h, trials, confidence) for h in flat])
    if bounds.size == 0:
        empty = np.zeros(np.shape(hits))
        return empty, empty.copy()
    shape = np.shape(hits)
    return bounds[:, 0].reshape(shape), bounds[:, 1].reshape(shape)


def log_slope_stats(
    x: np.ndarray,
    y: np.ndarray,
    *,
    log_x: bool = False,
    prefix: str = "",
) -> dict[str, float]:
    """
    Least-squares slope of log(y) against x (or log(x)) with its standard error,
    t-statistic and R². Non-positive y values are dropped; fewer than two usable
    points give NaN statistics.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    usable = np.isfinite(y) & (y > 0.0) & np.isfinite(x)
    if log_x:
        usable &= x > 0.0
    nan = float("nan")
    if np.count_nonzero(usable) < 2:
        return {
            f"{prefix}slope": nan,
            f"{prefix}slope_se": nan,
            f"{prefix}slope_tstat": nan,
            f"{prefix}r_squared": nan,
            f"{prefix}points": int(np.count_nonzero(usable)),
        }
    xs = np.log(x[usable]) if log_x else x[usable]
    ys = np.log(y[usable])
    if np.ptp(xs) == 0.0:
        raise ValueError("slope fit needs at least two distinct abscissae")

    res = linregress(xs, ys)
    slope, slope_se, r_squared = res.slope, res.stderr, res.rvalue**2

    eps = np.finfo(float).eps
    if slope_se <= eps:
        slope_tstat = np.inf if slope > 0 else (-np.inf if slope < 0 else 0.0)
    else:
        slope_tstat = slope / slope_se

    return {
        f"{prefix}slope": float(slope),
        f"{prefix}slope_se": float(slope_se),
        f"{prefix}slope_tstat": float(slope_tstat),
        f"{prefix}r_squared": float(r_squared),
        f"{prefix}points": int(np.count_nonzero(usable)),
    }
