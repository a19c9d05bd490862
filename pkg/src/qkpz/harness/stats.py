"""Estimators that always come with a standard error."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..process import RngStream

__all__ = [
    "Estimate",
    "mean_estimate",
    "variance_estimate",
    "norm_estimate",
    "bootstrap_deciles",
    "loglog_slope",
    "DECILES",
]

DECILES = np.arange(1, 10) / 10.0


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float

    def z_against(self, target: float) -> float:
        return abs(self.value - target) / self.se if self.se > 0 else math.inf

    def as_dict(self) -> dict:
        return {"value": self.value, "se": self.se}


def mean_estimate(samples) -> Estimate:
    x = np.asarray(samples, dtype=float)
    return Estimate(float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size)))


def variance_estimate(samples) -> Estimate:
    """Unbiased variance; the error uses the fourth central moment."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    d = x - x.mean()
    m2 = float(np.mean(d ** 2))
    m4 = float(np.mean(d ** 4))
    return Estimate(m2 * n / (n - 1), math.sqrt(max(m4 - m2 * m2, 0.0) / n))


def norm_estimate(samples, p: float, axis: int = 0):
    """``(E|X|^p)^{1/p}`` and a delta-method error, reduced along ``axis``."""
    x = np.abs(np.asarray(samples, dtype=float)) ** p
    n = x.shape[axis]
    m = x.mean(axis=axis)
    se_m = x.std(axis=axis, ddof=1) / math.sqrt(n)
    val = m ** (1.0 / p)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(m > 0, val / (p * m) * se_m, 0.0)
    return val, se


def bootstrap_deciles(samples, n_boot: int = 200, seed: int = 0, stream_id: int = 0):
    """The nine deciles and their bootstrap standard errors."""
    x = np.asarray(samples, dtype=float)
    rng = RngStream(seed, stream_id).generator()
    est = np.quantile(x, DECILES)
    boots = np.empty((n_boot, DECILES.size))
    for b in range(n_boot):
        boots[b] = np.quantile(x[rng.integers(0, x.size, x.size)], DECILES)
    return est, boots.std(axis=0, ddof=1)


def loglog_slope(x, y, y_se=None):
    """Least-squares slope of ``log y`` against ``log x``.

    With ``y_se`` the points are weighted by ``(y / y_se)^2`` and the slope
    error is the weighted-regression one.  Returns ``(slope, intercept, se)``.
    """
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    if y_se is None:
        w = np.ones_like(lx)
    else:
        rel = np.asarray(y_se, dtype=float) / np.asarray(y, dtype=float)
        w = 1.0 / np.maximum(rel, 1e-300) ** 2
    W = w.sum()
    mx = (w * lx).sum() / W
    my = (w * ly).sum() / W
    sxx = (w * (lx - mx) ** 2).sum()
    slope = (w * (lx - mx) * (ly - my)).sum() / sxx
    intercept = my - slope * mx
    if y_se is None:
        resid = ly - intercept - slope * lx
        dof = max(lx.size - 2, 1)
        se = math.sqrt((resid ** 2).sum() / dof / sxx)
    else:
        se = math.sqrt(1.0 / sxx)
    return float(slope), float(intercept), float(se)
