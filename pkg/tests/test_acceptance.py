"""Acceptance criteria 1 to 11, each reported as one PASS/FAIL line.

Tolerances, ensemble sizes and seeds are pinned below.  Run with ``-s`` to
see the lines as they are produced; they are repeated in the terminal
summary either way.
"""
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from qkpz.engine import EnsembleSpec, run_ensemble
from qkpz.harness.cli import cli_main
from qkpz.harness.experiments import (ConvergenceReport, ConvergenceRow, flat_moment_spec,
                                      martingale_row, moment_report, particle_point_samples,
                                      step_moment_spec)
from qkpz.harness.stats import bootstrap_deciles, mean_estimate, norm_estimate, variance_estimate
from qkpz.identities import (boundary_bias, bracket_asymptotic_check, gradient_residuals_batch,
                             martingale_mean_test, qv_constant, spin_ratio_defect,
                             verify_bracket_forms, verify_drift_identity)
from qkpz.kernel import (abs_K_integral, bessel_kernel, heat_kernel, identity_general,
                         identity_zero)
from qkpz.qcore import QParameters, weak_asymmetry
from qkpz.she import scheme_second_moment, she_solve, volterra_moment
from qkpz.transform import initial_gartner, step_mass

ASEP_SPINS = (Fraction(1, 2), Fraction(1), Fraction(3, 2), Fraction(2))
Q_GRID = (0.3, 0.6, 0.9, 0.99)
ASIP_SPINS = (0.5, 1.0, 2.3)

DRIFT_TOL = 1e-12
BRACKET_TOL = 1e-12
QV_STABILITY = 0.2
GRADIENT_TOL = 1e-13
GRADIENT_SNAPSHOTS = 100_000
KERNEL_AGREEMENT = 1e-11
KERNEL_MASS_TOL = 1e-10
SEMIGROUP_TOL = 1e-10
SPACE_TIME_TOL = 1e-6
DECADE_RATIO = (0.25, 0.4)
MAX_Z = 4.0
FRAC_2SE = 0.95
MASS_BAND = (0.99, 1.01)
HOLDER_SPACE = (0.35, 0.5)
HOLDER_TIME = (0.17, 0.27)
STEP_FACTOR = 2.0
SPIN_DEFECT_SPREAD = 1.5

RUNTIME = {1: 1.0, 2: 10.0, 3: 5.0, 4: 120.0, 5: 900.0, 6: 600.0, 7: 1.0, 8: 2700.0, 9: 1200.0,
           10: 1200.0, 11: 120.0}

EPS_MAIN = 1e-2
SPIN_MC = 1                      # spin used for every Monte Carlo criterion
L_MAIN = 400
T_MAIN = 0.5
N_MAIN = 10_000
CONVERGENCE_EPS = (4e-2, 1e-2, 2.5e-3)
SMALLEST_EPS_BUDGET = 1500.0     # seconds allowed for the eps = 2.5e-3 ensemble
MARTINGALE_EPS_N = {4e-2: 10_000, 1e-2: 10_000, 2.5e-3: 1_000}
MARTINGALE_T = 0.1
STEP_MOMENT_N = 4_000
SHE_DX = 0.05
SHE_X_MAX = 4.0
SHE_TIMES = (0.25, 0.5, 1.0)

SEED_FLAT, SEED_STEP, SEED_SHE, SEED_STEP_MOMENTS, SEED_CONV, SEED_MART = 101, 102, 103, 104, 105, 106

_fixture_seconds = {}


def _timed(name, fn):
    start = time.perf_counter()
    out = fn()
    _fixture_seconds[name] = time.perf_counter() - start
    return out


def _verdict(number, checks, detail, seconds):
    within = seconds <= RUNTIME[number]
    passed = all(checks) and within
    record_criterion(number, passed, f"{detail}; runtime {seconds:.1f} s (limit {RUNTIME[number]:g} s)")
    return passed, within


# -- shared ensembles -------------------------------------------------------------------

@pytest.fixture(scope="session")
def main_scaling():
    return weak_asymmetry(EPS_MAIN, SPIN_MC)


@pytest.fixture(scope="session")
def flat_ensemble(main_scaling):
    params, scaling = main_scaling
    spec = flat_moment_spec(params, scaling, L_MAIN, T_MAIN, L_MAIN // 2)
    return _timed("flat", lambda: run_ensemble(spec, N_MAIN, SEED_FLAT))


@pytest.fixture(scope="session")
def step_ensemble(main_scaling):
    params, scaling = main_scaling
    t = scaling.micro_time(T_MAIN)
    spec = EnsembleSpec(params, L_MAIN, "step", (t,), tuple(range(-L_MAIN // 2, L_MAIN // 2 + 1)))
    return _timed("step", lambda: run_ensemble(spec, N_MAIN, SEED_STEP))


@pytest.fixture(scope="session")
def she_flat():
    return _timed("she", lambda: she_solve("flat", max(SHE_TIMES), dx=SHE_DX, X_max=SHE_X_MAX,
                                           n_replicas=N_MAIN, seed=SEED_SHE,
                                           snapshot_times=SHE_TIMES, X_out=[0.0]))


# -- 1 ----------------------------------------------------------------------------------

def test_criterion_01_drift_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    cases = 0
    for spin in ASEP_SPINS:
        for q in Q_GRID:
            rep = verify_drift_identity(QParameters(q, spin), "exhaustive", rng=rng)
            worst = max(worst, rep.max_rel_residual)
            cases += rep.cases
    for k in ASIP_SPINS:
        for q in Q_GRID:
            rep = verify_drift_identity(QParameters(q, k, "asip"), 25, rng=rng, n_max=20)
            worst = max(worst, rep.max_rel_residual)
            cases += rep.cases
    seconds = time.perf_counter() - start
    ok, within = _verdict(1, [worst <= DRIFT_TOL],
                          f"max relative residual {worst:.2e} (tol {DRIFT_TOL:g}) over {cases} states", seconds)
    assert worst <= DRIFT_TOL and within


# -- 2 ----------------------------------------------------------------------------------

def test_criterion_02_bracket_formulas():
    start = time.perf_counter()
    worst = 0.0
    for spin in ASEP_SPINS:
        for q in Q_GRID:
            worst = max(worst, verify_bracket_forms(QParameters(q, spin)).max_rel_residual)
    for k in ASIP_SPINS:
        for q in Q_GRID:
            worst = max(worst, verify_bracket_forms(QParameters(q, k, "asip")).max_rel_residual)
    asym = bracket_asymptotic_check([1e-2, 1e-3, 1e-4], spin=Fraction(1, 2))
    qv = {}
    for spin in ASEP_SPINS:
        j = float(spin)
        c3, c4 = qv_constant(1e-3, spin), qv_constant(1e-4, spin)
        qv[j] = (c3, c4, abs(c3 / c4 - 1.0), 8 * j * j + 1)
    qv_ok = all(c3 <= bound and c4 <= bound and drift <= QV_STABILITY for c3, c4, drift, bound in qv.values())
    seconds = time.perf_counter() - start
    defects = ", ".join(f"{v:.3e}" for v in asym["gradient_form"])
    qv_text = ", ".join(f"j={j:g}: C={c4:.4f} (change {d:.1%})" for j, (_, c4, d, _) in qv.items())
    checks = [worst <= BRACKET_TOL, asym["gradient_form_decreasing"], qv_ok]
    ok, within = _verdict(2, checks, f"form gap {worst:.2e} (tol {BRACKET_TOL:g}); D/eps = [{defects}] "
                          f"decreasing={asym['gradient_form_decreasing']}; QV {qv_text}", seconds)
    assert all(checks) and within


# -- 3 ----------------------------------------------------------------------------------

def test_criterion_03_gradient_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    models = [QParameters(q, s) for s in ASEP_SPINS for q in Q_GRID]
    models += [QParameters(q, k, "asip") for k in ASIP_SPINS for q in (0.6, 0.9, 0.99)]
    per = GRADIENT_SNAPSHOTS // len(models)
    total = 0
    worst = 0.0
    for i, p in enumerate(models):
        n = per + (GRADIENT_SNAPSHOTS - per * len(models) if i == 0 else 0)
        top = p.two_j if p.model.value == "asep" else 8
        occ = rng.integers(0, top + 1, (n, 33))
        rp, rm = gradient_residuals_batch(occ, rng.integers(-5, 6, n), rng.uniform(0.0, 5.0, n), p)
        worst = max(worst, rp.max(), rm.max())
        total += n
    seconds = time.perf_counter() - start
    ok, within = _verdict(3, [worst <= GRADIENT_TOL, total == GRADIENT_SNAPSHOTS],
                          f"max residual {worst:.2e} relative to max(Z(x), Z(x+1)) (tol {GRADIENT_TOL:g}) "
                          f"on {total} snapshots", seconds)
    assert worst <= GRADIENT_TOL and total == GRADIENT_SNAPSHOTS and within


# -- 4 ----------------------------------------------------------------------------------

def test_criterion_04_heat_kernel():
    start = time.perf_counter()
    xs = np.arange(-200, 201)
    agree = 0.0
    mass = 0.0
    for t in (0.01, 0.5, 1.0, 10.0, 100.0, 1000.0):
        tab = heat_kernel(t, window=200)
        agree = max(agree, np.max(np.abs(tab.at(xs) - bessel_kernel(t, xs))))
        mass = max(mass, abs(math.fsum(tab.values) - 1.0))
    semi = 0.0
    for a, b in ((0.5, 1.5), (3.0, 7.0), (40.0, 60.0)):
        pa, pb, pab = heat_kernel(a), heat_kernel(b), heat_kernel(a + b)
        X = pa.X_max + pb.X_max
        semi = max(semi, np.max(np.abs(np.convolve(pa.values, pb.values) - pab.at(np.arange(-X, X + 1)))))
    cases = [(0.0, 0.0, [0], [0], 1), (1.0, 1.0, [3], [3], 1), (0.0, 0.0, [0], [-1], 1),
             (0.0, 2.0, [0], [0], 1), (0.0, 0.0, [0, 0], [0, 0], 2), (0.0, 2.0, [1, 0], [0, 0], 2),
             (0.5, 1.0, [1, 1], [0, 1], 2)]
    space_time = max(abs(lhs - rhs) for lhs, rhs, _ in (identity_general(*c) for c in cases))
    partial = [abs(identity_zero(T)[0]) for T in (1e2, 1e3, 1e4)]
    ratios = [b / a for a, b in zip(partial, partial[1:])]
    trunc, tail = abs_K_integral(1e3)
    seconds = time.perf_counter() - start
    checks = [agree <= KERNEL_AGREEMENT, mass <= KERNEL_MASS_TOL, semi <= SEMIGROUP_TOL,
              space_time <= SPACE_TIME_TOL,
              all(DECADE_RATIO[0] <= r <= DECADE_RATIO[1] for r in ratios), trunc + tail < 1.0]
    ok, within = _verdict(4, checks,
                          f"Fourier-Bessel {agree:.1e}, mass {mass:.1e}, semigroup {semi:.1e}, "
                          f"space-time identity {space_time:.1e} on {len(cases)} cases, "
                          f"|S(T)| ratios {ratios[0]:.4f}, {ratios[1]:.4f}, "
                          f"sum |K| {trunc:.4f} + tail {tail:.4f}", seconds)
    assert all(checks) and within


# -- 5 ----------------------------------------------------------------------------------

def test_criterion_05_exact_mean(main_scaling, flat_ensemble, step_ensemble):
    params, scaling = main_scaling
    start = time.perf_counter()
    t = scaling.micro_time(T_MAIN)
    half = L_MAIN // 2
    results = {}
    for ic, ens in (("flat_pairing", flat_ensemble), ("step", step_ensemble)):
        keep = np.abs(ens.sites) <= half
        sub = ens.Z()[:, -1, :][:, keep]
        res = martingale_mean_test(sub, ens.sites[keep], initial_gartner(ic, params), t)
        results[ic] = (res, boundary_bias(params, ic, L_MAIN, t, half), ens.replicas.size)
    seconds = time.perf_counter() - start + _fixture_seconds["flat"] + _fixture_seconds["step"]
    checks = [r.max_z <= MAX_Z and r.frac_within_2se >= FRAC_2SE and n == N_MAIN
              for r, _, n in results.values()]
    detail = "; ".join(f"{ic}: N={n}, max z {r.max_z:.2f}, within 2 SE {r.frac_within_2se:.3f}, "
                       f"closed-segment bias {b:.1e}" for ic, (r, b, n) in results.items())
    ok, within = _verdict(5, checks, f"eps={EPS_MAIN:g}, j={SPIN_MC}, L={L_MAIN}, t={t:g}, |x|<={half}: {detail}",
                          seconds)
    assert all(checks) and within


# -- 6 ----------------------------------------------------------------------------------

def test_criterion_06_she_solver(she_flat):
    start = time.perf_counter()
    # zero noise: error against the exact Gaussian evolution, halving dx
    ic = lambda X: np.exp(-X * X)  # noqa: E731
    errs = []
    for dx in (0.2, 0.1, 0.05):
        sol = she_solve("custom", 1.0, dx=dx, X_max=SHE_X_MAX * 2, noise=False, custom=ic,
                        X_out=np.arange(-2.0, 2.01, 0.2))
        exact = np.exp(-sol.X ** 2 / 3.0) / math.sqrt(3.0)
        errs.append(np.max(np.abs(sol.fields[0, 0] - exact)))
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    # noisy ensemble mean against the heat semigroup applied to the same profile
    X_out = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    mean_sol = she_solve("custom", 1.0, dx=SHE_DX, X_max=SHE_X_MAX * 2, n_replicas=N_MAIN,
                         seed=SEED_SHE + 1, snapshot_times=SHE_TIMES, custom=ic, X_out=X_out)
    z_mean = 0.0
    for k, T in enumerate(SHE_TIMES):
        target = np.exp(-X_out ** 2 / (1 + 2 * T)) / math.sqrt(1 + 2 * T)
        f = mean_sol.fields[:, k, :]
        z_mean = max(z_mean, np.max(np.abs(f.mean(axis=0) - target) / (f.std(axis=0, ddof=1) / math.sqrt(N_MAIN))))
    # flat start second moment against the Volterra oracle
    oracle = volterra_moment(np.linspace(0.0, 1.0, 401))
    z_mom = []
    for k, T in enumerate(SHE_TIMES):
        sq = she_flat.fields[:, k, 0] ** 2
        z_mom.append(mean_estimate(sq).z_against(oracle.at(T)))
    scheme = [scheme_second_moment(T, SHE_DX) - oracle.at(T) for T in SHE_TIMES]
    seconds = time.perf_counter() - start + _fixture_seconds["she"]
    checks = [all(1.8 <= o <= 2.2 for o in orders), z_mean <= MAX_Z, max(z_mom) <= MAX_Z]
    ok, within = _verdict(6, checks,
                          f"zero-noise order {orders[0]:.2f}, {orders[1]:.2f} (errors {errs[-1]:.1e} at dx={SHE_DX}); "
                          f"mean max z {z_mean:.2f}; second moment z at T={SHE_TIMES}: "
                          + ", ".join(f"{z:.2f}" for z in z_mom)
                          + f" (scheme bias {', '.join(f'{b:+.3f}' for b in scheme)}; N={N_MAIN})", seconds)
    assert all(checks) and within


# -- 7 ----------------------------------------------------------------------------------

def test_criterion_07_step_mass():
    start = time.perf_counter()
    rows = []
    for spin in (0.5, 1.0):
        mass_j, mass_eps = step_mass(1e-4, spin)
        rows.append((spin, mass_j, mass_eps))
    seconds = time.perf_counter() - start
    checks = [MASS_BAND[0] <= mj <= MASS_BAND[1] for _, mj, _ in rows]
    checks += [abs(me - 1.0 / (2 * s)) <= 0.01 / (2 * s) for s, _, me in rows]
    ok, within = _verdict(7, checks, "eps=1e-4: " + "; ".join(
        f"j={s:g}: eps_j-normalized {mj:.5f}, eps-normalized {me:.5f} (1/(2j)={1 / (2 * s):g})"
        for s, mj, me in rows), seconds)
    assert all(checks) and within


# -- 8 ----------------------------------------------------------------------------------

def test_criterion_08_convergence_trend(flat_ensemble, she_flat):
    start = time.perf_counter()
    rows = []
    for k, eps in enumerate(CONVERGENCE_EPS):
        if eps == EPS_MAIN:
            # reuse the shared ensemble: site 0 at the final snapshot
            col = int(np.flatnonzero(flat_ensemble.sites == 0)[0])
            Z = flat_ensemble.Z()[:, -1, col]
            L, t, per = L_MAIN, float(flat_ensemble.times[-1]), float("nan")
        else:
            budget = SMALLEST_EPS_BUDGET if eps == min(CONVERGENCE_EPS) else None
            Z, L, t, per = particle_point_samples(eps, SPIN_MC, "flat_pairing", T_MAIN, N_MAIN,
                                                  SEED_CONV + k, time_budget=budget)
        dec, dse = bootstrap_deciles(Z, seed=SEED_CONV, stream_id=k)
        rows.append(ConvergenceRow(eps, N_MAIN, Z.size, L, t, per, mean_estimate(Z),
                                   variance_estimate(Z), dec, dse))
    Zc = she_flat.fields[:, SHE_TIMES.index(T_MAIN), 0]
    sdec, sse = bootstrap_deciles(Zc, seed=SEED_CONV, stream_id=99)
    oracle = volterra_moment(np.linspace(0.0, T_MAIN, 401)).at(T_MAIN) - 1.0
    rep = ConvergenceReport("flat_pairing", T_MAIN, rows, mean_estimate(Zc), variance_estimate(Zc),
                            sdec, sse, 1.0, oracle)
    gaps = rep.variance_gaps()
    gap, gse = rep.decile_gaps(rows[-1])
    seconds = time.perf_counter() - start
    complete = all(r.complete for r in rows)
    checks = [rep.gap_decreasing(), complete]
    detail = (f"continuum variance {oracle:.4f}; "
              + "; ".join(f"eps={r.eps:g}: N={r.n_done}, L={r.L}, Var={r.variance.value:.4f}+-{r.variance.se:.4f}, "
                          f"gap {g.value:.4f}+-{g.se:.4f}" for r, g in zip(rows, gaps))
              + f"; decreasing={rep.gap_decreasing()}; decile gaps at eps={rows[-1].eps:g}: "
              + ", ".join(f"{v:+.3f}+-{s:.3f}" for v, s in zip(gap, gse)))
    if not complete:
        short = rows[-1]
        detail += (f"; N={N_MAIN} at eps={short.eps:g} needs about {short.projected_seconds / 60:.0f} min "
                   f"({short.seconds_per_replica:.2f} s per replica), beyond the budget")
    ok, within = _verdict(8, checks, detail, seconds)
    assert all(checks) and within


# -- 9 ----------------------------------------------------------------------------------

def test_criterion_09_moment_shapes(main_scaling, flat_ensemble):
    params, scaling = main_scaling
    start = time.perf_counter()
    step = run_ensemble(step_moment_spec(params, scaling, L_MAIN), STEP_MOMENT_N, SEED_STEP_MOMENTS)
    rep = moment_report(flat_ensemble, step, EPS_MAIN)
    # diagnostic only: earlier times down to eps^{-1/2}, before the scaling regime sets in
    early_t = (EPS_MAIN ** -0.5, 10 * EPS_MAIN ** -0.5)
    early = run_ensemble(EnsembleSpec(params, L_MAIN, "step", early_t, (0,)), 1000, SEED_STEP_MOMENTS + 1)
    v, _ = norm_estimate(early.Z()[:, :, 0] / (2 * math.sqrt(EPS_MAIN)), 2)
    early_scaled = v * np.sqrt(EPS_MAIN ** 2 * np.asarray(early_t))
    seconds = time.perf_counter() - start
    checks = []
    parts = []
    for n in rep.orders:
        s_ok = HOLDER_SPACE[0] <= rep.spatial_slopes[n][0] <= HOLDER_SPACE[1]
        t_ok = HOLDER_TIME[0] <= rep.temporal_slopes[n][0] <= HOLDER_TIME[1]
        checks += [s_ok, t_ok]
        parts.append(f"n={n}: space {rep.spatial_slopes[n][0]:.3f}+-{rep.spatial_slopes[n][1]:.3f}, "
                     f"time {rep.temporal_slopes[n][0]:.3f}+-{rep.temporal_slopes[n][1]:.3f}")
    checks.append(rep.step_ratio[1] <= STEP_FACTOR)
    scaled = rep.step_scaled[1][0]
    parts.append(f"step ||Z*||_2 sqrt(eps^2 t) at t={', '.join(f'{t:g}' for t in rep.step_times)}: "
                 f"{', '.join(f'{v:.3f}' for v in scaled)} (max/min {rep.step_ratio[1]:.2f}, limit {STEP_FACTOR:g}); "
                 f"earlier t={', '.join(f'{t:g}' for t in early_t)} gives {', '.join(f'{v:.3f}' for v in early_scaled)}")
    ok, within = _verdict(9, checks, "; ".join(parts), seconds)
    assert all(checks) and within


# -- 10 ---------------------------------------------------------------------------------

def test_criterion_10_martingale_fields():
    start = time.perf_counter()
    rows = [martingale_row(eps, SPIN_MC, MARTINGALE_T, n, SEED_MART + k)
            for k, (eps, n) in enumerate(MARTINGALE_EPS_N.items())]
    n_ok = [r.N_mean.z_against(0.0) <= MAX_Z for r in rows]
    r2 = [r.R2_sq.value for r in rows]
    r2_dec = all(b < a for a, b in zip(r2, r2[1:]))
    spread = {}
    for two_j in (2, 3, 4):
        vals = [abs(spin_ratio_defect(weak_asymmetry(e, Fraction(two_j, 2))[0])) / e
                for e in (1e-2, 1e-3, 1e-4, 1e-5)]
        spread[two_j / 2] = (max(vals), max(vals) / min(vals))
    spin_ok = all(s <= SPIN_DEFECT_SPREAD for _, s in spread.values())
    seconds = time.perf_counter() - start
    checks = n_ok + [r2_dec, spin_ok]
    detail = ("; ".join(f"eps={r.eps:g}: N={r.n}, L={r.L}, N-mean z {r.N_mean.z_against(0.0):.2f}, "
                        f"E R2^2 {r.R2_sq.value:.3e}+-{r.R2_sq.se:.1e}" for r in rows)
              + f"; decreasing={r2_dec}; |2j/[2j]-1|/eps max (max/min) "
              + ", ".join(f"j={j:g}: {m:.4f} ({s:.3f})" for j, (m, s) in spread.items()))
    ok, within = _verdict(10, checks, detail, seconds)
    assert all(checks) and within


# -- 11 ---------------------------------------------------------------------------------

def _artifacts(path: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_criterion_11_determinism(tmp_path):
    start = time.perf_counter()
    args = ["experiment", "--preset", "step-convergence", "--eps", "0.04", "--j", "1", "--T", "0.1",
            "--n", "600", "--seed", "11", "--report"]
    codes = [cli_main(args + ["--out-dir", str(tmp_path / "serial1")]),
             cli_main(args + ["--out-dir", str(tmp_path / "serial2")]),
             cli_main(args + ["--workers", "2", "--out-dir", str(tmp_path / "parallel")])]
    runs = [_artifacts(tmp_path / d) for d in ("serial1", "serial2", "parallel")]
    seconds = time.perf_counter() - start
    same = runs[0] == runs[1] == runs[2]
    checks = [codes == [0, 0, 0], same, any(n.endswith(".png") for n in runs[0])]
    ok, within = _verdict(11, checks, f"{len(runs[0])} artifacts identical across two serial runs and "
                          f"one 2-worker run: {same}", seconds)
    assert all(checks) and within
