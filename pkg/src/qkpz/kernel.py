"""Heat kernel of the continuous-time simple random walk and related sums.

The walk jumps to each neighbour at rate 1/2 (generator ``Delta / 2``), so

    p_t(x) = (1/pi) int_0^pi exp(t (cos th - 1)) cos(th x) d th = e^{-t} I_|x|(t).

The Fourier integral is the primary evaluation (Gauss-Legendre, node count
doubled until stable).  ``scipy.special.ive`` supplies the Bessel form, used
only as an independent cross-check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

__all__ = [
    "HeatKernelTable",
    "KernelGradients",
    "WindowTooSmallError",
    "heat_kernel",
    "bessel_kernel",
    "heat_kernel_window",
    "kernel_gradients",
    "tail_probability_bound",
    "sum_K",
    "sum_K_fourier",
    "identity_zero",
    "abs_K_integral",
    "identity_general",
    "gaussian_kernel",
]

MAX_NODES = 1 << 15
MAX_WINDOW = 200_000


class WindowTooSmallError(RuntimeError):
    pass


@lru_cache(maxsize=32)
def _gl(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    theta = 0.5 * math.pi * (x + 1.0)
    return theta, 0.5 * math.pi * w


def _fourier_values(t: float, xs: np.ndarray, tol: float = 1e-12):
    """Evaluate the Fourier integral, doubling nodes until two passes agree.

    The start is sized to resolve ``cos(th x)`` across the window; rounding
    puts a floor near 1e-13 on the pass-to-pass difference.
    """
    n = 64
    while n < 1.5 * float(np.max(np.abs(xs))) + 64:
        n *= 2
    prev = None
    while n <= MAX_NODES:
        th, w = _gl(n)
        weights = w * np.exp(t * (np.cos(th) - 1.0)) / math.pi
        vals = weights @ np.cos(np.outer(th, xs))
        if prev is not None and np.max(np.abs(vals - prev)) <= tol:
            return vals
        prev = vals
        n *= 2
    raise RuntimeError(f"Fourier quadrature did not settle at t={t}")


def _cramer_rate(v: float) -> float:
    # large-deviation rate of R(t)/t for the rate-1 walk
    return v * math.asinh(v) - math.sqrt(1.0 + v * v) + 1.0


def tail_probability_bound(t: float, X: int) -> float:
    """Chernoff bound on ``P(|R(t)| > X)``."""
    if t == 0.0:
        return 0.0
    return min(1.0, 2.0 * math.exp(-t * _cramer_rate((X + 1) / t)))


def _auto_window(t: float, tail: float) -> int:
    X = int(math.ceil(4.0 * (1.0 + math.sqrt(t)) * 2.0))
    while X <= MAX_WINDOW and tail_probability_bound(t, X) > tail:
        X = int(X * 1.25) + 1
    if X > MAX_WINDOW:
        raise WindowTooSmallError(f"window for t={t} would exceed {MAX_WINDOW}")
    return X


@dataclass(frozen=True)
class HeatKernelTable:
    t: float
    xs: np.ndarray
    values: np.ndarray
    tail_bound: float

    @property
    def X_max(self) -> int:
        return int(self.xs[-1])

    def at(self, x) -> np.ndarray:
        x = np.asarray(x)
        out = np.zeros(x.shape)
        inside = np.abs(x) <= self.X_max
        out[inside] = self.values[x[inside] + self.X_max]
        return out


def heat_kernel(t: float, window: int | None = None, tail: float = 1e-12) -> HeatKernelTable:
    """``p_t(x)`` for ``|x| <= window``.

    The window is enlarged until the Chernoff bound on the mass outside it
    is below ``tail``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    auto = _auto_window(t, tail)
    X = auto if window is None else max(int(window), auto)
    xs = np.arange(-X, X + 1)
    if t == 0.0:
        vals = (xs == 0).astype(float)
    else:
        half = _fourier_values(float(t), np.arange(0, X + 1))
        vals = np.concatenate([half[:0:-1], half])
    return HeatKernelTable(float(t), xs, vals, tail_probability_bound(t, X))


def heat_kernel_window(t: float, tail: float = 1e-12) -> np.ndarray:
    """Sites ``-X..X`` outside of which ``p_t`` carries mass below ``tail``."""
    X = _auto_window(t, tail)
    return np.arange(-X, X + 1)


def bessel_kernel(t: float, xs) -> np.ndarray:
    """Independent evaluation ``e^{-t} I_|x|(t)``."""
    xs = np.abs(np.asarray(xs))
    if t == 0.0:
        return (xs == 0).astype(float)
    return special.ive(xs, t)


@dataclass(frozen=True)
class KernelGradients:
    """Forward and backward differences of ``p_t`` and their product ``K_t``.

    All arrays live on ``xs`` (the table window shrunk by one site per side).
    """

    t: float
    xs: np.ndarray
    grad_plus: np.ndarray
    grad_minus: np.ndarray

    @property
    def K(self) -> np.ndarray:
        return self.grad_plus * self.grad_minus


def kernel_gradients(table: HeatKernelTable) -> KernelGradients:
    p = table.values
    return KernelGradients(table.t, table.xs[1:-1], p[2:] - p[1:-1], p[1:-1] - p[:-2])


def sum_K(t: float) -> float:
    """``sum_x K_t(x)`` by direct summation over a Fourier table."""
    return math.fsum(kernel_gradients(heat_kernel(t)).K)


def sum_K_fourier(t: float) -> float:
    """``sum_x K_t(x)`` through Parseval.

    The symbols of the two differences multiply to ``-(1 - e^{-i th})^2``,
    whose real part is ``-(1 - 2 cos th + cos 2 th)``, against the squared
    symbol ``exp(2t (cos th - 1))``.
    """
    n = 64
    prev = None
    while n <= MAX_NODES:
        th, w = _gl(n)
        val = -np.sum(w * (1.0 - 2.0 * np.cos(th) + np.cos(2 * th))
                      * np.exp(2.0 * t * (np.cos(th) - 1.0))) / math.pi
        if prev is not None and abs(val - prev) <= 1e-14:
            return float(val)
        prev = val
        n *= 2
    return float(prev)


def _panels(T: float):
    edges = [0.0, 0.25, 0.5, 1.0]
    while edges[-1] < T:
        edges.append(min(2.0 * edges[-1], T))
    return [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _time_integral(f, T: float, rtol: float = 1e-12):
    total = 0.0
    err = 0.0
    for a, b in _panels(T):
        v, e = integrate.quad(f, a, b, epsabs=1e-14, epsrel=rtol, limit=200)
        total += v
        err += e
    return total, err


def identity_zero(T: float):
    """``S(T) = sum_x int_0^T K_t(x) dt`` by adaptive quadrature in ``t``.

    The spatial sum at each quadrature node is taken over a Fourier table.
    Returns ``(S, quadrature_error_estimate)``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    return _time_integral(sum_K, T, rtol=1e-10)


def abs_K_integral(T: float):
    """``sum_x int_0^T |K_t(x)| dt`` and a tail bound for ``int_T^inf``.

    The tail uses ``sum_x |K_t(x)| <= C t^{-3/2}`` with ``C`` taken as the
    largest value of ``t^{3/2} sum_x |K_t|`` on ``[T/4, T]``, giving
    ``2 C T^{-1/2}``.
    """
    f = lambda t: math.fsum(np.abs(kernel_gradients(heat_kernel(t)).K))  # noqa: E731
    val, _ = _time_integral(f, T, rtol=1e-8)
    ts = np.geomspace(T / 4.0, T, 9)
    C = max(t ** 1.5 * f(t) for t in ts)
    return val, 2.0 * C / math.sqrt(T)


def _grad_overlap_1d(a: float, b: float, dy: int) -> float:
    # sum_x grad+ p_a(x + y) grad+ p_b(x + y') with dy = y - y'
    ta = heat_kernel(a)
    tb = heat_kernel(b)
    X = max(ta.X_max, tb.X_max) + abs(dy) + 1
    xs = np.arange(-X, X + 1)
    ga = ta.at(xs + 1 + dy) - ta.at(xs + dy)
    gb = tb.at(xs + 1) - tb.at(xs)
    return math.fsum(ga * gb)


def _overlap_1d(a: float, b: float, dy: int) -> float:
    ta = heat_kernel(a)
    tb = heat_kernel(b)
    X = max(ta.X_max, tb.X_max) + abs(dy)
    xs = np.arange(-X, X + 1)
    return math.fsum(ta.at(xs + dy) * tb.at(xs))


def _lhs_integrand(u: float, s0: float, s1: float, dy: tuple, d: int) -> float:
    a, b = u + s0, u + s1
    if d == 1:
        return _grad_overlap_1d(a, b, dy[0])
    # the d-dimensional walk with generator Delta/(2d) factorizes into
    # independent one-dimensional walks run at time t/d
    g = [_grad_overlap_1d(a / d, b / d, dy[n]) for n in range(d)]
    o = [_overlap_1d(a / d, b / d, dy[n]) for n in range(d)]
    total = 0.0
    for n in range(d):
        term = g[n]
        for m in range(d):
            if m != n:
                term *= o[m]
        total += term
    return total / d


def _lhs_tail(T: float, s0: float, s1: float, dy: tuple, d: int) -> float:
    # int_T^inf of the integrand, evaluated in Fourier space: integrating
    # exp((2u + s0 + s1) lam_k) over u >= T gives exp((2T + s0 + s1) lam_k) / (-2 lam_k)
    n = 256
    th, w = _gl(n)
    c = np.cos(th)
    if d == 1:
        lam = c - 1.0
        sym = 2.0 * (1.0 - c)
        integrand = sym * np.exp((2 * T + s0 + s1) * lam) / (-2.0 * lam) * np.cos(th * dy[0])
        return float(np.sum(w * integrand) / math.pi)
    c1, c2 = np.meshgrid(c, c, indexing="ij")
    th1, th2 = np.meshgrid(th, th, indexing="ij")
    W = np.outer(w, w)
    lam = (c1 + c2 - 2.0) / 2.0
    sym = (2.0 * (1.0 - c1) + 2.0 * (1.0 - c2)) / d
    integrand = sym * np.exp((2 * T + s0 + s1) * lam) / (-2.0 * lam)
    integrand *= np.cos(th1 * dy[0]) * np.cos(th2 * dy[1])
    return float(np.sum(W * integrand) / math.pi ** 2)


def identity_general(s: float, s_prime: float, y, y_prime, d: int = 1, T_max: float = 256.0):
    """Both sides of the space-time gradient identity for the heat kernel.

    ``lhs = (1/d) sum_x sum_n int grad_n p_{t+s}(x+y) grad_n p_{t+s'}(x+y') dt``
    over all real ``t`` (with ``p`` zero at negative times) and
    ``rhs = p_{|s-s'|}(y - y')``.  The time integral runs by quadrature over
    ``[0, T_max]`` after shifting ``t``; the remainder ``[T_max, inf)`` is
    integrated in closed form in Fourier space.  Returns
    ``(lhs, rhs, tail)`` where ``tail`` is the part of ``lhs`` beyond ``T_max``.
    """
    if d not in (1, 2):
        raise ValueError("d must be 1 or 2")
    if abs(s - s_prime) > 1e3:
        raise ValueError("|s - s'| must not exceed 1e3")
    y = np.atleast_1d(np.asarray(y, dtype=int))
    yp = np.atleast_1d(np.asarray(y_prime, dtype=int))
    if y.size != d or yp.size != d:
        raise ValueError("y and y' must have d components")
    dy = tuple(int(v) for v in (y - yp))
    m = min(s, s_prime)
    s0, s1 = s - m, s_prime - m
    f = lambda u: _lhs_integrand(u, s0, s1, dy, d)  # noqa: E731
    head, _ = _time_integral(f, T_max, rtol=1e-10)
    tail = _lhs_tail(T_max, s0, s1, dy, d)
    delta = abs(s - s_prime)
    if d == 1:
        rhs = float(heat_kernel(delta).at(np.array([dy[0]]))[0])
    else:
        # p^{(2)}_t(x) = p_{t/2}(x_1) p_{t/2}(x_2)
        tab = heat_kernel(delta / 2.0)
        rhs = float(tab.at(np.array([dy[0]]))[0] * tab.at(np.array([dy[1]]))[0])
    return head + tail, rhs, tail


def gaussian_kernel(T: float, X) -> np.ndarray:
    if not T > 0:
        raise ValueError("T must be positive")
    X = np.asarray(X, dtype=float)
    return np.exp(-X * X / (2.0 * T)) / math.sqrt(2.0 * math.pi * T)
