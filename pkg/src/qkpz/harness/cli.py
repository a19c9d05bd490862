"""Command line entry point: ``qkpz {verify,simulate,kernel,she,experiment}``.

Exit codes: 0 success, 1 an identity residual above tolerance, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from ..identities import IdentityReport, gradient_residuals, verify_bracket_forms, verify_drift_identity
from ..kernel import (abs_K_integral, bessel_kernel, heat_kernel, identity_general, identity_zero,
                      kernel_gradients)
from ..process import RngStream, initial_condition, simulate_until, write_binary, write_csv
from ..qcore import QParameters, weak_asymmetry
from ..she import she_solve
from .config import ConfigError, ExperimentConfig, PRESETS
from .experiments import run_experiment
from .figures import render
from .manifest import write_json, write_manifest, write_table

__all__ = ["cli_main", "main", "TOLERANCES"]

TOLERANCES = {"drift": 1e-12, "bracket_forms": 1e-12, "gradient": 1e-13}
DEFAULT_Q = "0.3,0.6,0.9,0.99"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _spin(args):
    if args.model == "asep":
        return Fraction(args.j) if args.j is not None else Fraction(1, 2)
    return float(Fraction(args.k)) if args.k is not None else 0.5


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qkpz", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def model_flags(sp):
        sp.add_argument("--model", choices=("asep", "asip"), default="asep")
        sp.add_argument("--j", help="ASEP spin, e.g. 1/2 or 0.5 (default 1/2)")
        sp.add_argument("--k", help="ASIP spin (default 0.5)")

    v = sub.add_parser("verify", help="check the exact identities, JSON report")
    model_flags(v)
    v.add_argument("--q", type=_floats, default=_floats(DEFAULT_Q))
    v.add_argument("--cases", default=None, help="'exhaustive' (ASEP) or a number of random cases")
    v.add_argument("--identity", choices=("drift", "bracket", "gradient", "all"), default="all")
    v.add_argument("--precision", choices=("extended", "double"), default="extended")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="JSON file (default: stdout)")

    s = sub.add_parser("simulate", help="one trajectory with the reference sampler")
    model_flags(s)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--eps", type=float, help="weak asymmetry, q = exp(-sqrt(eps))")
    g.add_argument("--q", type=float)
    s.add_argument("--L", type=int, default=100)
    s.add_argument("--t", type=float, default=10.0, help="microscopic end time")
    s.add_argument("--samples", type=int, default=11)
    s.add_argument("--ic", default="flat_pairing",
                   choices=("step", "flat_pairing", "bernoulli_product"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stream", type=int, default=0)
    s.add_argument("--format", choices=("csv", "binary", "both"), default="both")
    s.add_argument("--out-dir", default="out")

    k = sub.add_parser("kernel", help="heat-kernel tables and integral identities")
    k.add_argument("--t", type=_floats, default=(1.0, 10.0, 100.0))
    k.add_argument("--T", type=_floats, default=(100.0, 1000.0), help="horizons for the zero-sum identity")
    k.add_argument("--out-dir", default="out")

    h = sub.add_parser("she", help="continuum reference ensemble")
    h.add_argument("--ic", choices=("flat", "delta"), default="flat")
    h.add_argument("--dx", type=float, default=0.05)
    h.add_argument("--T", type=float, default=1.0)
    h.add_argument("--snapshots", type=int, default=4)
    h.add_argument("--X-max", type=float, default=8.0)
    h.add_argument("--n", type=int, default=1000)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--no-noise", action="store_true")
    h.add_argument("--out-dir", default="out")

    e = sub.add_parser("experiment", help="Monte Carlo experiments")
    e.add_argument("--config", help="key = value config file; flags override it")
    e.add_argument("--preset", choices=PRESETS)
    e.add_argument("--eps", type=_floats)
    e.add_argument("--j", dest="spin")
    e.add_argument("--T", type=float)
    e.add_argument("--L", type=int)
    e.add_argument("--ic")
    e.add_argument("--n", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--window", type=float)
    e.add_argument("--dx", type=float)
    e.add_argument("--workers", type=int)
    e.add_argument("--out-dir", dest="output_dir")
    e.add_argument("--report", action="store_true", default=None, help="also render PNG figures")
    return p


def _verify(args) -> int:
    spin = _spin(args)
    reports = []
    rng = RngStream(args.seed, 0).generator()
    for q in args.q:
        params = QParameters(q, spin, args.model)
        if args.identity in ("drift", "all"):
            cases = args.cases or ("exhaustive" if args.model == "asep" else "200")
            n_cases = cases if cases == "exhaustive" else int(cases)
            reports.append(verify_drift_identity(params, n_cases, rng=rng, precision=args.precision))
        if args.identity in ("bracket", "all"):
            reports.append(verify_bracket_forms(params))
        if args.identity in ("gradient", "all"):
            n = 1000 if args.cases in (None, "exhaustive") else int(args.cases)
            worst = 0.0
            for _ in range(n):
                cfg = initial_condition("bernoulli_product", 16, params, rng=rng) if args.model == "asep" \
                    else initial_condition("custom", 16, params, custom=rng.integers(0, 8, 33))
                cfg.flow_counter = int(rng.integers(-5, 6))
                worst = max(worst, *gradient_residuals(cfg, params, float(rng.uniform(0, 5))))
            reports.append(IdentityReport("gradient", n, worst, worst,
                                          {"model": params.model.value, "q": q, "spin": float(spin),
                                           "normalization": "max(Z(x), Z(x+1))"}))
    out = []
    ok = True
    for r in reports:
        d = json.loads(r.to_json())
        d["tolerance"] = TOLERANCES[r.identity]
        d["passed"] = bool(r.max_rel_residual <= d["tolerance"])
        ok &= d["passed"]
        out.append(d)
    text = json.dumps({"passed": ok, "reports": out}, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0 if ok else 1


def _simulate(args) -> int:
    spin = _spin(args)
    if args.q is not None:
        params = QParameters(args.q, spin, args.model)
    else:
        params, _ = weak_asymmetry(args.eps if args.eps is not None else 1e-2, spin, args.model)
    rng = RngStream(args.seed, args.stream).generator()
    if params.model.value == "asip":
        cfg = initial_condition("flat_pairing", args.L, params)
    else:
        cfg = initial_condition(args.ic, args.L, params, rng=rng)
    times = np.linspace(0.0, args.t, max(args.samples, 1))
    traj = simulate_until(cfg, params, args.t, times, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if args.format in ("csv", "both"):
        write_csv(traj, out / "trajectory.csv")
        files.append("trajectory.csv")
    if args.format in ("binary", "both"):
        write_binary(traj, out / "trajectory.qkpz")
        files.append("trajectory.qkpz")
    write_manifest(out, _hash_args(args), args.seed, files)
    return 0


def _hash_args(args) -> str:
    d = {k: v for k, v in vars(args).items() if k not in ("out_dir", "out", "workers")}
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()


def _kernel(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for t in args.t:
        tab = heat_kernel(t)
        gr = kernel_gradients(tab)
        inner = tab.values[1:-1]
        rows = zip(gr.xs, inner, bessel_kernel(t, gr.xs), gr.grad_plus, gr.grad_minus, gr.K)
        name = f"heat_kernel_t{t:g}.csv"
        write_table(out / name, ("x", "p_fourier", "p_bessel", "grad_plus", "grad_minus", "K"), rows)
        files.append(name)
    report = {"zero_sum": [], "abs_integral": [], "space_time": []}
    for T in args.T:
        S, err = identity_zero(T)
        report["zero_sum"].append({"T": T, "S": S, "quadrature_error": err})
    val, tail = abs_K_integral(max(args.T))
    report["abs_integral"].append({"T": max(args.T), "truncated": val, "tail_bound": tail,
                                   "total_below_one": val + tail < 1.0})
    for s, sp, y, yp, d in ((0, 0, [0], [0], 1), (0, 2, [0], [0], 1), (1, 3, [2], [0], 1),
                            (0, 2, [1, 0], [0, 0], 2)):
        lhs, rhs, tail = identity_general(s, sp, y, yp, d)
        report["space_time"].append({"s": s, "s_prime": sp, "y": y, "y_prime": yp, "d": d,
                                     "lhs": lhs, "rhs": rhs, "tail": tail})
    write_json(out / "kernel_identities.json", report)
    files.append("kernel_identities.json")
    write_manifest(out, _hash_args(args), 0, files)
    return 0


def _she(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dt = args.dx ** 2 / 2
    n_steps = round(args.T / dt)
    snaps = [dt * round(k * n_steps / args.snapshots) for k in range(1, args.snapshots + 1)]
    sol = she_solve(args.ic, dt * n_steps, dx=args.dx, X_max=args.X_max, n_replicas=args.n,
                    seed=args.seed, snapshot_times=snaps, noise=not args.no_noise)
    mean = sol.mean()
    var = sol.fields.var(axis=0, ddof=1) if args.n > 1 else np.zeros_like(mean)
    se = sol.stderr() if args.n > 1 else np.zeros_like(mean)
    rows = [(T, X, mean[i, k], var[i, k], se[i, k])
            for i, T in enumerate(sol.times) for k, X in enumerate(sol.X)]
    write_table(out / "she.csv", ("T", "X", "mean", "variance", "stderr"), rows)
    write_json(out / "she_meta.json", {**sol.meta, "clip_rate": sol.clip_rate, "n": args.n})
    write_manifest(out, _hash_args(args), args.seed, ["she.csv", "she_meta.json"])
    return 0


def _experiment(args) -> int:
    overrides = {k: getattr(args, k) for k in ("preset", "eps", "spin", "T", "L", "ic", "n", "seed",
                                               "window", "dx", "workers", "output_dir", "report")}
    if args.config:
        cfg = ExperimentConfig.load(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.ic is None and cfg.preset == "step-convergence":
        cfg = cfg.replace(ic="step")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(semantic_only=True))
    files = ["config.txt"]
    summaries = []
    for rep in run_experiment(cfg):
        for name, (head, rows) in rep.tables().items():
            fname = f"{name}.csv" if name + ".csv" not in files else f"{name}_{len(files)}.csv"
            write_table(out / fname, head, rows)
            files.append(fname)
        summaries.append(rep.summary())
        if cfg.report:
            files.extend(p.name for p in render(rep, out))
    write_json(out / "report.json", {"preset": cfg.preset, "reports": summaries})
    files.append("report.json")
    write_manifest(out, cfg.semantic_hash(), cfg.seed, files)
    return 0


_COMMANDS = {"verify": _verify, "simulate": _simulate, "kernel": _kernel, "she": _she,
             "experiment": _experiment}


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError, OverflowError) as exc:
        print(f"qkpz {args.command}: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())
