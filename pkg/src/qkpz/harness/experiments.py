"""Desk-scale Monte Carlo experiments built on the compiled ensemble engine.

Every experiment returns a report with ``tables()`` (name -> header, rows)
for CSV output and ``summary()`` for JSON.  Estimates carry standard errors.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..engine import EnsembleResult, EnsembleSpec, run_ensemble
from ..identities import (boundary_bias, boundary_safe_L, field_weights, fields_from_functionals,
                          martingale_mean_test, spin_ratio_defect)
from ..qcore import ScalingParameters, weak_asymmetry
from ..she import volterra_moment, she_solve
from ..testfunctions import raised_cosine
from ..transform import initial_gartner
from .config import ExperimentConfig
from .stats import (Estimate, bootstrap_deciles, loglog_slope, mean_estimate, norm_estimate,
                    variance_estimate)

__all__ = [
    "SEPARATIONS",
    "LAGS",
    "STEP_TIME_FACTORS",
    "lattice_size",
    "flat_moment_spec",
    "step_moment_spec",
    "exact_mean_check",
    "ExactMeanReport",
    "run_exact_mean_experiment",
    "MomentReport",
    "moment_report",
    "run_moment_experiment",
    "ConvergenceRow",
    "ConvergenceReport",
    "particle_point_samples",
    "run_convergence_experiment",
    "MartingaleRow",
    "MartingaleReport",
    "martingale_row",
    "run_martingale_experiment",
    "run_experiment",
]

# lattice separations and time lags for the Hoelder fits: below the diffusive
# scale sqrt(t) and the lognormal scale 1/eps at the default eps = 1e-2
SEPARATIONS = (1, 2, 4, 8, 16, 32)
LAGS = (8, 16, 32, 64, 128, 256)
# step-start observation times in units of eps^{-3/2}
STEP_TIME_FACTORS = (1.0, 1.5, 2.0, 2.5)
SPATIAL_POOL = 100
TEMPORAL_POOL = 50


def lattice_size(params, scaling: ScalingParameters, ic: str, T: float, window_sites: int,
                 L: int = 0, tol: float = 1e-6) -> int:
    """``L`` if given, else the smallest boundary-safe half-width."""
    if L:
        return int(L)
    return boundary_safe_L(params, ic, scaling.micro_time(T), window_sites, tol=tol)


def _sites(half: int) -> tuple:
    return tuple(range(-half, half + 1))


# -- exact mean ----------------------------------------------------------------------

def exact_mean_check(result: EnsembleResult, snap_index: int, ic: str):
    Z = result.Z()[:, snap_index, :]
    return martingale_mean_test(Z, result.sites, initial_gartner(ic, result.spec.params),
                                float(result.times[snap_index]))


@dataclass
class ExactMeanReport:
    eps: float
    spin: float
    ic: str
    L: int
    t: float
    boundary_bias: float
    test: object  # MeanTestResult

    @property
    def passed(self) -> bool:
        return self.test.max_z <= 4.0 and self.test.frac_within_2se >= 0.95

    def tables(self) -> dict:
        rows = [(int(x), m, s, o, z) for x, m, s, o, z in zip(
            self.test.xs, self.test.mean, self.test.stderr, self.test.oracle, self.test.z_scores)]
        return {f"exact_mean_{self.ic}": (("x", "mean", "stderr", "oracle", "z"), rows)}

    def summary(self) -> dict:
        return {"eps": self.eps, "spin": self.spin, "ic": self.ic, "L": self.L, "t": self.t,
                "boundary_bias": self.boundary_bias, "max_z": self.test.max_z,
                "frac_within_2se": self.test.frac_within_2se, "passed": self.passed}


def run_exact_mean_experiment(config: ExperimentConfig) -> list[ExactMeanReport]:
    reports = []
    for k, eps in enumerate(config.eps):
        params, scaling = weak_asymmetry(eps, config.spin_value)
        t = scaling.micro_time(config.T)
        window = int(config.window / scaling.eps_j)
        L = lattice_size(params, scaling, config.ic, config.T, window, config.L, config.boundary_tol)
        spec = EnsembleSpec(params, L, config.ic, (t,), _sites(window))
        res = run_ensemble(spec, config.n, config.seed + k, config.workers)
        reports.append(ExactMeanReport(eps, float(params.spin), config.ic, L, t,
                                       boundary_bias(params, config.ic, L, t, window),
                                       exact_mean_check(res, 0, config.ic)))
    return reports


# -- moment shapes -------------------------------------------------------------------

def flat_moment_spec(params, scaling: ScalingParameters, L: int, T: float, record_half: int,
                     lags=LAGS, extra_times=()) -> EnsembleSpec:
    """Flat start, snapshots at ``t - lag`` for every lag and at ``t``."""
    t = scaling.micro_time(T)
    snaps = sorted({0.0, *extra_times, *(t - lag for lag in lags), t})
    return EnsembleSpec(params, L, "flat_pairing", tuple(snaps), _sites(record_half))


def step_moment_spec(params, scaling: ScalingParameters, L: int,
                     factors=STEP_TIME_FACTORS) -> EnsembleSpec:
    t0 = scaling.epsilon ** -1.5
    return EnsembleSpec(params, L, "step", tuple(f * t0 for f in factors), (0,))


@dataclass
class MomentReport:
    eps: float
    orders: tuple
    separations: np.ndarray
    spatial_norms: dict          # n -> (values, se)
    spatial_slopes: dict         # n -> (slope, se)
    lags: np.ndarray
    temporal_norms: dict
    temporal_slopes: dict
    uniform_a: dict              # n -> fitted a
    uniform_C: dict              # n -> fitted C
    step_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    step_scaled: dict = field(default_factory=dict)   # n -> (values, se)
    step_ratio: dict = field(default_factory=dict)    # n -> max / min

    def spatial_ok(self, n: int) -> bool:
        return 0.35 <= self.spatial_slopes[n][0] <= 0.5

    def temporal_ok(self, n: int) -> bool:
        return 0.17 <= self.temporal_slopes[n][0] <= 0.27

    def step_ok(self, n: int) -> bool:
        return self.step_ratio.get(n, math.inf) <= 2.0

    def tables(self) -> dict:
        out = {}
        rows = [(int(s), *[v for n in self.orders for v in (self.spatial_norms[n][0][i],
                                                           self.spatial_norms[n][1][i])])
                for i, s in enumerate(self.separations)]
        head = tuple(f"{k}_n{n}" for n in self.orders for k in ("norm", "stderr"))
        out["holder_space"] = (("separation",) + head, rows)
        rows = [(int(s), *[v for n in self.orders for v in (self.temporal_norms[n][0][i],
                                                           self.temporal_norms[n][1][i])])
                for i, s in enumerate(self.lags)]
        out["holder_time"] = (("lag",) + head, rows)
        if self.step_times.size:
            rows = [(t, *[v for n in self.orders for v in (self.step_scaled[n][0][i],
                                                          self.step_scaled[n][1][i])])
                    for i, t in enumerate(self.step_times)]
            out["step_scaled_norm"] = (("t",) + head, rows)
        return out

    def summary(self) -> dict:
        s = {"eps": self.eps}
        for n in self.orders:
            s[f"n{n}"] = {
                "spatial_slope": self.spatial_slopes[n][0], "spatial_slope_se": self.spatial_slopes[n][1],
                "temporal_slope": self.temporal_slopes[n][0], "temporal_slope_se": self.temporal_slopes[n][1],
                "uniform_a": self.uniform_a[n], "uniform_C": self.uniform_C[n],
                "step_ratio": self.step_ratio.get(n),
                "spatial_ok": self.spatial_ok(n), "temporal_ok": self.temporal_ok(n),
                "step_ok": self.step_ok(n) if self.step_ratio else None,
            }
        return s


def _pooled_norm(diffs: np.ndarray, p: float):
    # diffs: (N, n_positions); average |d|^p over positions inside each replica
    per_rep = np.mean(np.abs(diffs) ** p, axis=1)
    m = mean_estimate(per_rep)
    val = m.value ** (1.0 / p)
    return val, val / (p * m.value) * m.se


def moment_report(flat: EnsembleResult, step: EnsembleResult | None, eps: float,
                  orders=(1, 2), separations=SEPARATIONS, lags=LAGS) -> MomentReport:
    """Moment and Hoelder estimates from a flat ensemble built by
    :func:`flat_moment_spec` (and optionally a step ensemble)."""
    Z = flat.Z()
    sites = flat.sites
    times = flat.times
    t_final = times[-1]
    col = {int(x): i for i, x in enumerate(sites)}
    base = np.arange(-SPATIAL_POOL, SPATIAL_POOL)
    seps = np.asarray(separations)
    if base[0] not in col or base[-1] + seps.max() not in col:
        raise ValueError("record window too small for the spatial pool")
    Zf = Z[:, -1, :]
    sp_norms, sp_slopes, tm_norms, tm_slopes, ua, uC = {}, {}, {}, {}, {}, {}
    i0 = np.array([col[x] for x in base])
    tpool = np.array([col[x] for x in range(-TEMPORAL_POOL, TEMPORAL_POOL + 1)])
    lag_idx = [int(np.argmin(np.abs(times - (t_final - lag)))) for lag in lags]
    if any(abs(times[k] - (t_final - lag)) > 1e-9 for k, lag in zip(lag_idx, lags)):
        raise ValueError("flat ensemble lacks the lag snapshots")
    central = np.abs(sites) <= SPATIAL_POOL
    for n in orders:
        p = 2 * n
        vals, ses = zip(*[_pooled_norm(Zf[:, i0 + s] - Zf[:, i0], p) for s in seps])
        sp_norms[n] = (np.array(vals), np.array(ses))
        sl, _, se = loglog_slope(eps * seps, vals)
        sp_slopes[n] = (sl, se)
        vals, ses = zip(*[_pooled_norm(Zf[:, tpool] - Z[:, k, :][:, tpool], p) for k in lag_idx])
        tm_norms[n] = (np.array(vals), np.array(ses))
        sl, _, se = loglog_slope(eps * eps * np.asarray(lags, float), vals)
        tm_slopes[n] = (sl, se)
        # envelope ||Z_t(x)|| <= C exp(a eps |x|) over every snapshot after time 0
        norms, _ = norm_estimate(Z[:, 1:, :][:, :, central], p)
        dist = eps * np.abs(sites[central])
        a = max(0.0, float(np.polyfit(np.tile(dist, norms.shape[0]), np.log(norms).ravel(), 1)[0]))
        env = norms * np.exp(-a * dist)
        ua[n] = a
        uC[n] = float(max(env.max(), 1.0 / env.min()))
    rep = MomentReport(eps, tuple(orders), seps, sp_norms, sp_slopes, np.asarray(lags), tm_norms,
                       tm_slopes, ua, uC)
    if step is not None:
        Zs = step.Z()[:, :, 0] / (2.0 * math.sqrt(eps))
        rep.step_times = step.times
        for n in orders:
            v, se = norm_estimate(Zs, 2 * n)
            scale = np.sqrt(eps * eps * step.times)
            rep.step_scaled[n] = (v * scale, se * scale)
            rep.step_ratio[n] = float((v * scale).max() / (v * scale).min())
    return rep


def run_moment_experiment(config: ExperimentConfig) -> list[MomentReport]:
    out = []
    for k, eps in enumerate(config.eps):
        params, scaling = weak_asymmetry(eps, config.spin_value)
        half = SPATIAL_POOL + max(SEPARATIONS)
        L = lattice_size(params, scaling, "flat_pairing", config.T, half, config.L, config.boundary_tol)
        flat = run_ensemble(flat_moment_spec(params, scaling, L, config.T, half),
                            config.n, config.seed + 2 * k, config.workers)
        Ls = max(L, 400)
        step = run_ensemble(step_moment_spec(params, scaling, Ls), config.n,
                            config.seed + 2 * k + 1, config.workers)
        out.append(moment_report(flat, step, eps))
    return out


# -- convergence to the continuum ----------------------------------------------------

@dataclass
class ConvergenceRow:
    eps: float
    n_requested: int
    n_done: int
    L: int
    t: float
    seconds_per_replica: float
    mean: Estimate
    variance: Estimate
    deciles: np.ndarray
    decile_se: np.ndarray

    @property
    def complete(self) -> bool:
        return self.n_done >= self.n_requested

    @property
    def projected_seconds(self) -> float:
        return self.seconds_per_replica * self.n_requested


@dataclass
class ConvergenceReport:
    ic: str
    T: float
    rows: list
    she_mean: Estimate
    she_variance: Estimate
    she_deciles: np.ndarray
    she_decile_se: np.ndarray
    mean_target: float
    variance_oracle: float | None  # exact continuum variance when known

    @property
    def variance_target(self) -> float:
        return self.variance_oracle if self.variance_oracle is not None else self.she_variance.value

    def variance_gaps(self) -> list[Estimate]:
        tse = 0.0 if self.variance_oracle is not None else self.she_variance.se
        return [Estimate(abs(r.variance.value - self.variance_target), math.hypot(r.variance.se, tse))
                for r in self.rows]

    def gap_decreasing(self) -> bool:
        g = [e.value for e in self.variance_gaps()]
        return all(b < a for a, b in zip(g, g[1:]))

    def decile_gaps(self, row: ConvergenceRow):
        return row.deciles - self.she_deciles, np.hypot(row.decile_se, self.she_decile_se)

    def tables(self) -> dict:
        rows = []
        for r, g in zip(self.rows, self.variance_gaps()):
            rows.append((r.eps, r.n_done, r.L, r.t, r.mean.value, r.mean.se, r.mean.z_against(self.mean_target),
                         r.variance.value, r.variance.se, self.variance_target, g.value, g.se))
        head = ("eps", "n", "L", "t", "mean", "mean_stderr", "mean_z", "variance", "variance_stderr",
                "continuum_variance", "variance_gap", "gap_stderr")
        dec_rows = []
        for r in self.rows:
            gap, gse = self.decile_gaps(r)
            for i in range(9):
                dec_rows.append((r.eps, (i + 1) / 10, r.deciles[i], r.decile_se[i],
                                 self.she_deciles[i], self.she_decile_se[i], gap[i], gse[i]))
        dec_head = ("eps", "level", "particle", "particle_stderr", "continuum", "continuum_stderr",
                    "gap", "gap_stderr")
        return {f"convergence_{self.ic}": (head, rows), f"deciles_{self.ic}": (dec_head, dec_rows)}

    def summary(self) -> dict:
        return {
            "ic": self.ic, "T": self.T, "mean_target": self.mean_target,
            "continuum_variance": self.variance_target,
            "continuum_variance_source": "volterra" if self.variance_oracle is not None else "ensemble",
            "she_mean": self.she_mean.as_dict(), "she_variance": self.she_variance.as_dict(),
            "rows": [{"eps": r.eps, "n_requested": r.n_requested, "n_done": r.n_done, "L": r.L,
                      "complete": r.complete,
                      "mean": r.mean.as_dict(), "variance": r.variance.as_dict(),
                      "variance_gap": g.as_dict()}
                     for r, g in zip(self.rows, self.variance_gaps())],
            "variance_gap_decreasing": self.gap_decreasing(),
        }


def particle_point_samples(eps: float, spin, ic: str, T: float, n: int, seed: int, workers: int = 1,
                           L: int = 0, tol: float = 1e-6, time_budget: float | None = None,
                           pilot: int = 4):
    """Samples of the rescaled field at ``X = 0``.

    With ``time_budget`` (seconds) a pilot of ``pilot`` replicas sets the cost
    per replica; if the full run would not fit, only as many replicas as fit
    are run.  Returns ``(samples, L, t, seconds_per_replica)``.
    """
    params, scaling = weak_asymmetry(eps, spin)
    t = scaling.micro_time(T)
    L = lattice_size(params, scaling, ic, T, 0, L, tol)
    spec = EnsembleSpec(params, L, ic, (t,), (0,))
    start = time.perf_counter()
    first = run_ensemble(spec, min(pilot, n), seed, 1)
    per = (time.perf_counter() - start) / first.replicas.size
    todo = n - first.replicas.size
    if time_budget is not None:
        todo = min(todo, max(0, int(time_budget / per) - first.replicas.size))
    parts = [first]
    if todo > 0:
        parts.append(run_ensemble(spec, todo, seed, workers, first_replica=first.replicas.size))
    res = EnsembleResult.concatenate(parts)
    Z = res.Z()[:, 0, 0]
    if ic == "step":
        Z = Z / (2.0 * math.sqrt(eps))
    return Z, L, t, per


def run_convergence_experiment(config: ExperimentConfig, time_budget: float | None = None,
                               she_n: int | None = None) -> ConvergenceReport:
    ic = "step" if config.preset == "step-convergence" else "flat_pairing"
    rows = []
    for k, eps in enumerate(config.eps):
        Z, L, t, per = particle_point_samples(eps, config.spin_value, ic, config.T, config.n,
                                              config.seed + k, config.workers, config.L,
                                              config.boundary_tol, time_budget)
        dec, dse = bootstrap_deciles(Z, seed=config.seed, stream_id=1000 + k)
        rows.append(ConvergenceRow(eps, config.n, Z.size, L, t, per, mean_estimate(Z),
                                   variance_estimate(Z), dec, dse))
    n_she = she_n or config.n
    she_ic = "delta" if ic == "step" else "flat"
    sol = she_solve(she_ic, config.T, dx=config.dx, n_replicas=n_she, seed=config.seed + 10**6,
                    X_out=[0.0])
    Zc = sol.fields[:, -1, 0]
    sdec, sse = bootstrap_deciles(Zc, seed=config.seed, stream_id=999)
    if ic == "step":
        target, oracle = 1.0 / math.sqrt(2.0 * math.pi * config.T), None
    else:
        h = config.T / 400.0
        target = 1.0
        oracle = volterra_moment(np.arange(401) * h).at(config.T) - 1.0
    return ConvergenceReport(ic, config.T, rows, mean_estimate(Zc), variance_estimate(Zc), sdec, sse,
                             target, oracle)


# -- martingale-problem fields -------------------------------------------------------

@dataclass
class MartingaleRow:
    eps: float
    n: int
    L: int
    t: float
    N_mean: Estimate
    R2_sq: Estimate
    quadratic: Estimate
    R1: Estimate
    R3: Estimate
    spin_defect_over_eps: float


@dataclass
class MartingaleReport:
    T: float
    phi: str
    rows: list

    def r2_decreasing(self) -> bool:
        v = [r.R2_sq.value for r in self.rows]
        return all(b < a for a, b in zip(v, v[1:]))

    def tables(self) -> dict:
        rows = [(r.eps, r.n, r.L, r.t, r.N_mean.value, r.N_mean.se, r.R2_sq.value, r.R2_sq.se,
                 r.quadratic.value, r.quadratic.se, r.R1.value, r.R1.se, r.R3.value, r.R3.se,
                 r.spin_defect_over_eps) for r in self.rows]
        head = ("eps", "n", "L", "t", "N_mean", "N_stderr", "R2_sq_mean", "R2_sq_stderr",
                "quadratic_mean", "quadratic_stderr", "R1_mean", "R1_stderr", "R3_mean", "R3_stderr",
                "spin_defect_over_eps")
        return {"martingale_fields": (head, rows)}

    def summary(self) -> dict:
        return {"T": self.T, "phi": self.phi, "R2_sq_decreasing": self.r2_decreasing(),
                "rows": [{"eps": r.eps, "n": r.n, "L": r.L, "N_mean": r.N_mean.as_dict(),
                          "N_z": r.N_mean.z_against(0.0), "R2_sq": r.R2_sq.as_dict(),
                          "spin_defect_over_eps": r.spin_defect_over_eps} for r in self.rows]}


def martingale_row(eps: float, spin, T: float, n: int, seed: int, workers: int = 1,
                   half_width: float = 1.0, L: int = 0, tol: float = 1e-6) -> MartingaleRow:
    """Fields for ``phi = raised_cosine(half_width)`` from a flat start."""
    params, scaling = weak_asymmetry(eps, spin)
    phi = raised_cosine(half_width)
    support = math.ceil(half_width / scaling.eps_j) + 2
    L = lattice_size(params, scaling, "flat_pairing", T, support, L, tol)
    w = field_weights(phi, scaling, L)
    t = scaling.micro_time(T)
    spec = EnsembleSpec(params, L, "flat_pairing", (0.0, t), (0,), tuple(w.psi0), tuple(w.psi1),
                        tuple(w.psi2))
    res = run_ensemble(spec, n, seed, workers)
    f = fields_from_functionals(res.functionals[:, 1], res.functionals[:, 0], params, scaling, T)
    return MartingaleRow(eps, n, L, t, mean_estimate(f.N), mean_estimate(f.R2 ** 2),
                         mean_estimate(f.quadratic), mean_estimate(f.R1), mean_estimate(f.R3),
                         abs(spin_ratio_defect(params)) / eps)


def run_martingale_experiment(config: ExperimentConfig) -> MartingaleReport:
    rows = [martingale_row(eps, config.spin_value, config.T, config.n, config.seed + k,
                           config.workers, config.window, config.L, config.boundary_tol)
            for k, eps in enumerate(sorted(config.eps, reverse=True))]
    return MartingaleReport(config.T, raised_cosine(config.window).name, rows)


def run_experiment(config: ExperimentConfig):
    """Dispatch on ``config.preset``; returns a list of reports."""
    if config.preset in ("flat-convergence", "step-convergence"):
        return [run_convergence_experiment(config)]
    if config.preset == "exact-mean":
        return run_exact_mean_experiment(config)
    if config.preset == "moments":
        return run_moment_experiment(config)
    if config.preset == "martingale":
        return [run_martingale_experiment(config)]
    raise ValueError(config.preset)
