"""Checks of the exact algebra behind the discrete stochastic heat equation.

Every residual is normalized by ``Z(x)`` (or ``Z(x)^2`` for brackets) so the
tolerances do not depend on the height level.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import mpmath
import numpy as np
from scipy.integrate import trapezoid
from scipy.sparse import diags
from scipy.sparse.linalg import expm_multiply

from .kernel import bessel_kernel, heat_kernel_window
from .process import Configuration, bond_rates
from .qcore import Model, QParameters, ScalingParameters, q_number, weak_asymmetry
from .testfunctions import TestFunction
from .transform import LOG_OVERFLOW, doubled_heights, gartner, height_from_config, initial_gartner

__all__ = [
    "IdentityReport",
    "InsufficientEnsembleError",
    "SupportOverflowError",
    "drift_coefficient",
    "local_drift_residual",
    "verify_drift_identity",
    "bracket_exact",
    "bracket_rate_form",
    "bracket_closed_form",
    "verify_bracket_forms",
    "bracket_asymptotic_check",
    "qv_constant",
    "gradient_residuals",
    "gradient_residuals_batch",
    "MeanTestResult",
    "martingale_mean_test",
    "segment_mean",
    "infinite_mean",
    "FieldWeights",
    "field_weights",
    "MicroscopicFields",
    "fields_from_functionals",
    "microscopic_fields",
    "spin_ratio_defect",
    "key_term_decay",
    "boundary_bias",
    "boundary_safe_L",
]


class InsufficientEnsembleError(ValueError):
    pass


class SupportOverflowError(ValueError):
    pass


@dataclass
class IdentityReport:
    identity: str
    cases: int
    max_abs_residual: float
    max_rel_residual: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cases <= 0:
            raise ValueError("a report needs at least one case")

    def to_json(self) -> str:
        d = asdict(self)
        d["max_rel_residual"] = float(d["max_rel_residual"])
        d["max_abs_residual"] = float(d["max_abs_residual"])
        return json.dumps(d, sort_keys=True)


# -- drift --------------------------------------------------------------------

def _local_config(n_left: int, n_mid: int, n_right: int) -> Configuration:
    # three sites x-1, x, x+1 with x at the origin of a lattice of half-width 1
    return Configuration(np.array([n_left, n_mid, n_right]))


def drift_coefficient(config: Configuration, x: int, params: QParameters, nu_shift: float = 0.0) -> float:
    """``(q^2 - 1) c_plus + (q^-2 - 1) c_minus + nu ln q`` on bond ``x``."""
    cp, cm = bond_rates(config, x, params)
    q = params.q
    return (q * q - 1.0) * cp + (q ** -2 - 1.0) * cm + (params.nu + nu_shift) * params.ln_q


def local_drift_residual(n_prev: int, n_x: int, n_next: int, params: QParameters,
                         h0: int = 0, t: float = 0.0, nu_shift: float = 0.0):
    """``|Omega Z(x) - Delta Z(x) / 2| / Z(x)`` built from an actual height profile.

    The three occupations fill sites ``x-1, x, x+1``; heights follow from the
    occupations and the anchor ``h0``; ``Z`` from the transform at time ``t``.
    Returns ``(relative residual, Z(x))``.
    """
    cfg = _local_config(n_prev, n_x, n_next)
    cfg.flow_counter = h0
    Z = gartner(height_from_config(cfg, params), t, params).values
    lap = Z[2] + Z[0] - 2.0 * Z[1]
    omega = drift_coefficient(cfg, 0, params, nu_shift)
    return abs(omega * Z[1] - 0.5 * lap) / Z[1], Z[1]


def _mp_drift_residual(n_prev, n_x, n_next, params, h0, t, nu_shift):
    # the whole identity in 50-digit arithmetic, rates in the signed-spin form
    with mpmath.workdps(50):
        q = mpmath.mpf(params.q)
        s = mpmath.mpf(params.signed_spin) if params.model is Model.ASEP \
            else -mpmath.mpf(float(params.spin))
        qn = lambda n: (q ** n - q ** -n) / (q - 1 / q)  # noqa: E731
        e_prev, e_x, e_next = (mpmath.mpf(n) - s for n in (n_prev, n_x, n_next))
        pre = 1 / (2 * qn(2 * s))
        cp = pre * q ** (e_x - e_next - (2 * s + 1)) * qn(s + e_x) * qn(s - e_next)
        cm = pre * q ** (e_x - e_next + (2 * s + 1)) * qn(s - e_x) * qn(s + e_next)
        nu = (qn(4 * s) / (2 * qn(2 * s)) - 1) / mpmath.log(q) + nu_shift
        h_x = mpmath.mpf(h0)
        h_prev = h_x - e_x
        h_next = h_x + e_next
        Z = [q ** (-2 * h + nu * t) for h in (h_prev, h_x, h_next)]
        omega = (q * q - 1) * cp + (q ** -2 - 1) * cm + nu * mpmath.log(q)
        res = abs(omega * Z[1] - (Z[2] + Z[0] - 2 * Z[1]) / 2) / Z[1]
        return float(res)


def verify_drift_identity(params: QParameters, n_cases: int | str = "exhaustive",
                          rng: np.random.Generator | None = None, n_max: int = 20,
                          nu_shift: float = 0.0, precision: str = "extended") -> IdentityReport:
    """Residual of the drift identity over local states.

    ``"exhaustive"`` enumerates every ``(n(x), n(x+1))`` for ASEP; otherwise
    ``n_cases`` states are drawn (ASIP occupations up to ``n_max``).  The
    occupation of ``x-1``, the anchor height and the time only shift ``Z``
    and are drawn at random.

    With ``precision="extended"`` the identity is evaluated in 50-digit
    arithmetic.  ``"double"`` runs the library's float64 rates and transform;
    its residual relative to ``Z`` is limited by rounding in terms as large
    as ``q^{-2 eta} Z``, so ``params["max_rel_to_terms"]`` also reports the
    residual relative to the largest term.
    """
    if precision not in ("extended", "double"):
        raise ValueError("precision must be 'extended' or 'double'")
    rng = rng if rng is not None else np.random.default_rng(0)
    top = params.two_j if params.model is Model.ASEP else n_max
    if n_cases == "exhaustive":
        if params.model is not Model.ASEP:
            raise ValueError("exhaustive sweeps are defined for ASEP only")
        states = list(itertools.product(range(top + 1), repeat=2))
    else:
        states = [tuple(int(v) for v in rng.integers(0, top + 1, size=2)) for _ in range(int(n_cases))]
    worst = 0.0
    worst_abs = 0.0
    worst_terms = 0.0
    for a, c in states:
        n_prev = int(rng.integers(0, top + 1))
        h0 = int(rng.integers(-3, 4))
        t = float(rng.uniform(0.0, 5.0))
        if precision == "extended":
            r = _mp_drift_residual(n_prev, a, c, params, h0, t, nu_shift)
            z = 1.0
        else:
            r, z, scale = _double_drift_residual(n_prev, a, c, params, h0, t, nu_shift)
            worst_terms = max(worst_terms, r * z / scale)
        worst = max(worst, r)
        worst_abs = max(worst_abs, r * z)
    extra = {"max_rel_to_terms": worst_terms} if precision == "double" else {}
    return IdentityReport("drift", len(states), worst_abs, worst,
                          {"model": params.model.value, "q": params.q, "spin": float(params.spin),
                           "nu_shift": nu_shift, "precision": precision, **extra})


def _double_drift_residual(n_prev, n_x, n_next, params, h0, t, nu_shift):
    cfg = _local_config(n_prev, n_x, n_next)
    cfg.flow_counter = h0
    Z = gartner(height_from_config(cfg, params), t, params).values
    cp, cm = bond_rates(cfg, 0, params)
    q = params.q
    terms = [(q * q - 1.0) * cp * Z[1], (q ** -2 - 1.0) * cm * Z[1],
             (params.nu + nu_shift) * params.ln_q * Z[1], Z[2], Z[0], Z[1]]
    r, z = local_drift_residual(n_prev, n_x, n_next, params, h0, t, nu_shift)
    return r, z, max(abs(v) for v in terms)


# -- brackets -----------------------------------------------------------------

def bracket_rate_form(eta_x: float, eta_next: float, params: QParameters) -> float:
    """Bracket rate divided by ``Z(x)^2`` from the jump rates."""
    cp, cm = _rates_from_eta(eta_x, eta_next, params)
    q = params.q
    return (q * q - 1.0) ** 2 * cp + (q ** -2 - 1.0) ** 2 * cm


def _rates_from_eta(eta_x, eta_next, params):
    n_x = eta_x + params.signed_spin
    n_next = eta_next + params.signed_spin
    cfg = Configuration(np.array([int(round(n_x)), int(round(n_next)), 0]))
    return bond_rates(cfg, -1, params)


def bracket_closed_form(eta_x: float, eta_next: float, params: QParameters) -> float:
    """The same rate written as a difference of two products, divided by ``Z^2``."""
    q, j = params.q, params.signed_spin
    d = q - 1.0 / q
    pre = 1.0 / (2.0 * q_number(2 * j, q))
    t1 = (q * q - 1.0) / d * (q ** (2 * eta_x) - q ** (-2 * j)) * (q ** (-2 * eta_next) - q ** (-2 * j))
    t2 = (q ** -2 - 1.0) / d * (q ** (2 * j) - q ** (2 * eta_x)) * (q ** (2 * j) - q ** (-2 * eta_next))
    return pre * (t1 - t2)


def bracket_exact(config: Configuration, x: int, params: QParameters, t: float = 0.0) -> float:
    """``((q^2-1)^2 c_plus + (q^-2-1)^2 c_minus) Z(x)^2`` on bond ``x``."""
    cp, cm = bond_rates(config, x, params)
    q = params.q
    Z = gartner(height_from_config(config, params), t, params).values[config.index(x)]
    return ((q * q - 1.0) ** 2 * cp + (q ** -2 - 1.0) ** 2 * cm) * Z * Z


def _eta_states(params: QParameters, n_max: int = 20):
    top = params.two_j if params.model is Model.ASEP else n_max
    s = params.signed_spin
    return [(a - s, c - s) for a in range(top + 1) for c in range(top + 1)]


def verify_bracket_forms(params: QParameters, n_max: int = 20) -> IdentityReport:
    worst = 0.0
    worst_abs = 0.0
    states = _eta_states(params, n_max)
    for ex, en in states:
        a = bracket_rate_form(ex, en, params)
        b = bracket_closed_form(ex, en, params)
        scale = max(abs(a), abs(b))
        diff = abs(a - b)
        worst_abs = max(worst_abs, diff)
        if scale > 0:
            worst = max(worst, diff / scale)
    return IdentityReport("bracket_forms", len(states), worst_abs, worst,
                          {"model": params.model.value, "q": params.q, "spin": float(params.spin)})


def _gradgrad(eta_x, eta_next, q):
    # grad+ Z(x) grad- Z(x) / Z(x)^2
    return (q ** (-2 * eta_next) - 1.0) * (1.0 - q ** (2 * eta_x))


def bracket_asymptotic_check(eps_grid, spin=0.5):
    """Defects of the two asymptotic bracket forms along a decreasing ``eps`` grid.

    For each ``eps`` returns the largest, over all local ASEP states, of

    * ``D1 = |b - (4 eps j^2/[2j]) + grad+ Z grad- Z / ([2j] Z^2)|``
    * ``D2 = |b - (4 eps/[2j]) (j^2 - eta(x) eta(x+1))|``

    where ``b`` is the exact bracket rate over ``Z^2``.  Both are divided by
    ``eps``.  Returns a dict with the two sequences and whether each strictly
    decreases.
    """
    eps_grid = list(eps_grid)
    if len(eps_grid) < 3 or any(b >= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise ValueError("need a decreasing grid of at least three values")
    d1, d2 = [], []
    for eps in eps_grid:
        p, _ = weak_asymmetry(eps, spin)
        j = float(p.spin)
        qn = q_number(2 * j, p.q)
        m1 = m2 = 0.0
        for ex, en in _eta_states(p):
            b = bracket_rate_form(ex, en, p)
            m1 = max(m1, abs(b - 4 * eps * j * j / qn + _gradgrad(ex, en, p.q) / qn))
            m2 = max(m2, abs(b - 4 * eps / qn * (j * j - ex * en)))
        d1.append(m1 / eps)
        d2.append(m2 / eps)
    dec = lambda s: all(b < a for a, b in zip(s, s[1:]))  # noqa: E731
    return {"eps": eps_grid, "gradient_form": d1, "product_form": d2,
            "gradient_form_decreasing": dec(d1), "product_form_decreasing": dec(d2)}


def qv_constant(eps: float, spin=0.5) -> float:
    """Largest bracket rate over ``eps Z^2`` across all local states."""
    p, _ = weak_asymmetry(eps, spin)
    return max(bracket_rate_form(ex, en, p) for ex, en in _eta_states(p)) / eps


# -- gradients ----------------------------------------------------------------

def gradient_residuals(config: Configuration, params: QParameters, t: float = 0.0):
    """Residuals of the two gradient identities on a whole configuration.

    ``grad+ Z(x) = (q^{-2 eta(x+1)} - 1) Z(x)`` and
    ``grad- Z(x+1) = (1 - q^{2 eta(x+1)}) Z(x+1)``.  Returns the maxima of
    ``|lhs - rhs| / max(Z(x), Z(x+1))`` for each.
    """
    rp, rm = gradient_residuals_batch(config.sites[None, :], [config.flow_counter], [t], params)
    return float(rp[0]), float(rm[0])


def gradient_residuals_batch(occupations, flow_counters, times, params: QParameters):
    """Row-wise version of :func:`gradient_residuals` for many snapshots.

    The residual is scaled by the larger of the two neighbouring values,
    the size of the terms in the identity; dividing by ``Z(x)`` alone would
    magnify the rounding of ``exp`` by ``q^{-2 eta}``.
    """
    occ = np.atleast_2d(np.asarray(occupations))
    H2 = doubled_heights(occ, np.asarray(flow_counters), params)
    t = np.asarray(times, dtype=float)[:, None]
    logZ = (-H2 + params.nu * t) * params.ln_q
    if np.any(np.abs(logZ) > LOG_OVERFLOW):
        raise OverflowError(f"|log Z| exceeds {LOG_OVERFLOW}")
    Z = np.exp(logZ)
    eta_next = params.centered(occ[:, 1:].astype(float))
    q = params.q
    grad = Z[:, 1:] - Z[:, :-1]
    scale = np.maximum(Z[:, 1:], Z[:, :-1])
    rp = np.abs(grad - (q ** (-2 * eta_next) - 1.0) * Z[:, :-1]) / scale
    rm = np.abs(grad - (1.0 - q ** (2 * eta_next)) * Z[:, 1:]) / scale
    return rp.max(axis=1), rm.max(axis=1)


# -- exact mean -----------------------------------------------------------------

@dataclass
class MeanTestResult:
    xs: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    oracle: np.ndarray
    max_z: float
    frac_within_2se: float

    @property
    def z_scores(self) -> np.ndarray:
        return (self.mean - self.oracle) / self.stderr


def infinite_mean(Z0, t: float, xs) -> np.ndarray:
    """``(p_t * Z_0)(x)`` on the infinite lattice; ``Z0`` is a callable on integers.

    Kernel values come from the scaled Bessel function, which keeps relative
    accuracy deep in the tails where decaying profiles pick up their mass.
    """
    xs = np.asarray(xs)
    if t == 0.0:
        return np.asarray(Z0(xs), dtype=float)
    ys = heat_kernel_window(t)
    vals = bessel_kernel(t, ys)
    return np.array([np.dot(vals, Z0(x - ys)) for x in xs])


def martingale_mean_test(Z_samples, xs, Z0, t: float) -> MeanTestResult:
    """Compare the ensemble mean of ``Z_t`` with ``p_t * Z_0``.

    ``Z_samples`` has shape ``(N, len(xs))``.  Raises
    :class:`InsufficientEnsembleError` below 100 replicas.
    """
    Z_samples = np.asarray(Z_samples, dtype=float)
    N = Z_samples.shape[0]
    if N < 100:
        raise InsufficientEnsembleError(f"need at least 100 replicas, got {N}")
    mean = Z_samples.mean(axis=0)
    se = Z_samples.std(axis=0, ddof=1) / math.sqrt(N)
    oracle = infinite_mean(Z0, t, xs)
    if t == 0.0:
        dev = np.abs(mean - oracle)
        z = np.where(dev == 0.0, 0.0, np.inf)
    else:
        z = np.abs(mean - oracle) / se
    return MeanTestResult(np.asarray(xs), mean, se, oracle, float(np.max(z)),
                          float(np.mean(z <= 2.0)))


def segment_mean(Z0_segment: np.ndarray, params: QParameters, t: float) -> np.ndarray:
    """Exact ``E Z_t`` on the closed segment.

    The array holds ``Z_0`` on ``x = -L-1, ..., L``.  Interior sites follow
    ``dm/dt = Delta m / 2``.  ``Z(L)`` and the formal value ``Z(-L-1)`` have
    frozen heights, so they only grow like ``exp(nu t ln q)``.
    """
    n = Z0_segment.size
    main = np.full(n, -1.0)
    off = np.full(n - 1, 0.5)
    A = diags([off, main, off], [-1, 0, 1], format="lil")
    lam = params.growth_rate
    for i in (0, n - 1):
        A[i, :] = 0.0
        A[i, i] = lam
    return expm_multiply(A.tocsr() * t, Z0_segment)


def boundary_bias(params: QParameters, kind: str, L: int, t: float, window: int) -> float:
    """Largest relative gap on ``|x| <= window`` between the exact mean on
    the closed segment of half-width ``L`` and the infinite-lattice mean."""
    Z0 = initial_gartner(kind, params)
    seg = segment_mean(Z0(np.arange(-L - 1, L + 1)), params, t)
    xs = np.arange(-window, window + 1)
    inner = seg[xs + L + 1]
    ref = infinite_mean(Z0, t, xs)
    return float(np.max(np.abs(inner - ref) / ref))


def boundary_safe_L(params: QParameters, kind: str, t: float, window: int,
                    tol: float = 1e-6, start: int = 0, step: int = 50,
                    L_cap: int = 50000) -> int:
    """Smallest ``L`` (a multiple of ``step``, at least ``start``) for which
    the closed segment changes the mean on ``|x| <= window`` by at most
    ``tol`` relative.  Doubling then bisection; the bias falls with ``L``."""
    lo = step * math.ceil(max(start, window + 2) / step)
    if boundary_bias(params, kind, lo, t, window) <= tol:
        return lo
    hi = 2 * lo
    while boundary_bias(params, kind, hi, t, window) > tol:
        lo, hi = hi, 2 * hi
        if hi > L_cap:
            raise ValueError(f"no boundary-safe L up to {L_cap}")
    while hi - lo > step:
        mid = step * ((lo + hi) // (2 * step))
        if boundary_bias(params, kind, mid, t, window) <= tol:
            hi = mid
        else:
            lo = mid
    return hi


# -- martingale-problem fields ----------------------------------------------------

@dataclass(frozen=True)
class FieldWeights:
    """Site weights for the engine functionals of one test function."""

    psi0: np.ndarray  # eps_j phi(eps_j x)
    psi1: np.ndarray  # eps_j (discrete Laplacian of phi(eps_j .))(x)
    psi2: np.ndarray  # eps_j phi(eps_j x)^2


def field_weights(phi: TestFunction, scaling: ScalingParameters, L: int) -> FieldWeights:
    ej = scaling.eps_j
    a, b = phi.support
    if max(abs(a), abs(b)) / ej > L - 2:
        raise SupportOverflowError("test function support exceeds the lattice")
    xs = np.arange(-L, L + 1)
    f = phi(ej * xs)
    lap = phi(ej * (xs + 1)) + phi(ej * (xs - 1)) - 2 * f
    return FieldWeights(ej * f, ej * lap, ej * f * f)


@dataclass
class MicroscopicFields:
    """Martingale-problem quantities at one macroscopic time.

    ``N`` is the martingale ``(Z_T, phi) - (Z_0, phi) - 1/2 int (Z, Delta phi)``;
    ``quadratic`` is ``eps_j^2 int (Z^2, phi^2)``; ``R1`` and ``R2`` the two
    explicit correction terms; ``bracket`` the exact predictable bracket of
    ``N``; ``R3`` whatever is left, ``bracket - quadratic - R1 + R2``.
    All entries are arrays over replicas.
    """

    T: float
    N: np.ndarray
    quadratic: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    R3: np.ndarray
    bracket: np.ndarray

    @property
    def Lambda(self) -> np.ndarray:
        return self.N ** 2 - self.bracket


def spin_ratio_defect(params: QParameters) -> float:
    """``2j / [2j]_q - 1``."""
    j2 = 2 * float(params.spin)
    return j2 / q_number(j2, params.q) - 1.0


def fields_from_functionals(fun: np.ndarray, fun0: np.ndarray, params: QParameters,
                            scaling: ScalingParameters, T: float) -> MicroscopicFields:
    """Assemble the fields from exact engine integrals.

    ``fun`` has shape ``(N, 5)`` (the snapshot at ``T``) and ``fun0`` the
    snapshot at time zero.
    """
    ej = scaling.eps_j
    qn = q_number(2 * float(params.spin), params.q)
    N = fun[:, 0] - fun0[:, 0] - 0.5 * (fun[:, 1] - fun0[:, 1])
    A2 = fun[:, 2] - fun0[:, 2]
    A3 = fun[:, 3] - fun0[:, 3]
    A4 = fun[:, 4] - fun0[:, 4]
    quad = ej * ej * A2
    R1 = spin_ratio_defect(params) * quad
    R2 = ej / qn * A3
    bracket = ej * A4
    return MicroscopicFields(T, N, quad, R1, R2, bracket - quad - R1 + R2, bracket)


def microscopic_fields(trajectory, phi: TestFunction, scaling: ScalingParameters) -> MicroscopicFields:
    """Trapezoid-rule version on the snapshot grid of a single trajectory.

    Returns the fields at the last snapshot as length-one arrays.
    """
    p = trajectory.params
    if p.model is not Model.ASEP:
        raise ValueError("fields are assembled for ASEP")
    w = field_weights(phi, scaling, trajectory.L)
    t = trajectory.times
    Z = trajectory.gartner()
    eta = trajectory.eta()
    q = p.q
    s0 = Z @ w.psi0
    s1 = Z @ w.psi1
    s2 = (Z * Z) @ w.psi2
    gg = np.zeros_like(Z)
    gg[:, :-1] = _gradgrad(eta[:, :-1], eta[:, 1:], q) * Z[:, :-1] ** 2
    s3 = gg @ w.psi2
    br = np.zeros_like(Z)
    for k in range(t.size):
        cfg = trajectory.configuration(k)
        for b in range(Z.shape[1] - 1):
            if w.psi2[b] != 0.0:
                cp, cm = bond_rates(cfg, b - trajectory.L, p)
                br[k, b] = ((q * q - 1) ** 2 * cp + (q ** -2 - 1) ** 2 * cm) * Z[k, b] ** 2
    s4 = br @ w.psi2
    trap = lambda y: float(trapezoid(y, t))  # noqa: E731
    fun = np.array([[s0[-1], trap(s1), trap(s2), trap(s3), trap(s4)]])
    fun0 = np.array([[s0[0], 0.0, 0.0, 0.0, 0.0]])
    T = t[-1] * scaling.eps_j ** 2
    return fields_from_functionals(fun, fun0, p, scaling, T)


def key_term_decay(r2_by_eps: dict):
    """Monte Carlo estimates of ``E R2^2`` per ``eps`` with standard errors.

    ``r2_by_eps`` maps ``eps`` to an array of ``R2`` samples.  Rows come out
    ordered by decreasing ``eps``; ``decreasing`` reports whether the point
    estimates fall monotonically.
    """
    rows = []
    for eps in sorted(r2_by_eps, reverse=True):
        r = np.asarray(r2_by_eps[eps], dtype=float)
        if r.size < 2:
            raise InsufficientEnsembleError("need at least two samples per eps")
        sq = r * r
        rows.append({"eps": eps, "n": int(r.size), "mean_R2_sq": float(sq.mean()),
                     "stderr": float(sq.std(ddof=1) / math.sqrt(r.size))})
    dec = all(b["mean_R2_sq"] < a["mean_R2_sq"] for a, b in zip(rows, rows[1:]))
    return {"rows": rows, "decreasing": dec}
