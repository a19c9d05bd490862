"""PNG figures for experiment reports (matplotlib, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["render"]

# keep library versions out of the files so identical runs give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def _convergence(rep, out):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    eps = np.array([r.eps for r in rep.rows])
    var = np.array([r.variance.value for r in rep.rows])
    vse = np.array([r.variance.se for r in rep.rows])
    ax1.errorbar(eps, var, yerr=2 * vse, fmt="o-", capsize=3, label="particle")
    ax1.axhline(rep.variance_target, color="k", ls="--", label="continuum")
    ax1.set_xscale("log")
    ax1.set_xlabel("eps")
    ax1.set_ylabel(f"Var at X=0, T={rep.T}")
    ax1.legend()
    levels = np.arange(1, 10) / 10
    for r in rep.rows:
        gap, gse = rep.decile_gaps(r)
        ax2.errorbar(levels, gap, yerr=2 * gse, fmt="o-", capsize=2, label=f"eps={r.eps:g}")
    ax2.axhline(0.0, color="k", lw=0.8)
    ax2.set_xlabel("decile")
    ax2.set_ylabel("particle - continuum")
    ax2.legend(fontsize=7)
    return [_save(fig, out / f"convergence_{rep.ic}.png")]


def _exact_mean(rep, out):
    t = rep.test
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.fill_between(t.xs, t.mean - 2 * t.stderr, t.mean + 2 * t.stderr, alpha=0.3, label="mean +- 2 se")
    ax.plot(t.xs, t.oracle, "k-", lw=1, label="heat-kernel mean")
    ax.set_xlabel("x")
    ax.set_ylabel("E Z_t(x)")
    ax.set_title(f"{rep.ic}, eps={rep.eps:g}")
    ax.legend()
    return [_save(fig, out / f"exact_mean_{rep.ic}_{rep.eps:g}.png")]


def _moments(rep, out):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for n in rep.orders:
        v, se = rep.spatial_norms[n]
        ax1.errorbar(rep.eps * rep.separations, v, yerr=2 * se, fmt="o-",
                     label=f"2n={2 * n}, slope {rep.spatial_slopes[n][0]:.3f}")
        v, se = rep.temporal_norms[n]
        ax2.errorbar(rep.eps ** 2 * rep.lags, v, yerr=2 * se, fmt="o-",
                     label=f"2n={2 * n}, slope {rep.temporal_slopes[n][0]:.3f}")
    for ax, lab in ((ax1, "eps |x - x'|"), (ax2, "eps^2 |t - t'|")):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel(lab)
        ax.legend(fontsize=7)
    ax1.set_ylabel("increment norm")
    return [_save(fig, out / f"moments_{rep.eps:g}.png")]


def _martingale(rep, out):
    fig, ax = plt.subplots(figsize=(5, 3.6))
    eps = np.array([r.eps for r in rep.rows])
    v = np.array([r.R2_sq.value for r in rep.rows])
    se = np.array([r.R2_sq.se for r in rep.rows])
    ax.errorbar(eps, v, yerr=2 * se, fmt="o-", capsize=3)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("eps")
    ax.set_ylabel("E R2^2")
    return [_save(fig, out / "martingale_R2.png")]


def render(report, out_dir) -> list:
    """Draw the figures for one report into ``out_dir``; returns the paths."""
    from .experiments import ConvergenceReport, ExactMeanReport, MartingaleReport, MomentReport
    kinds = {ConvergenceReport: _convergence, ExactMeanReport: _exact_mean,
             MomentReport: _moments, MartingaleReport: _martingale}
    return kinds[type(report)](report, out_dir)
