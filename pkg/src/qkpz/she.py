"""Reference solver for the stochastic heat equation ``dZ = Z''/2 dT + Z dW``.

Explicit Euler-Maruyama in Ito form on a uniform grid; several independent
replicas are advanced together as rows of one array.  A zero-noise copy of
the field is evolved alongside and supplies the Dirichlet boundary values.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .process import RngStream

__all__ = [
    "InitialProfile",
    "SHEGrid",
    "SHEBlowUpError",
    "SHESolution",
    "MomentOracle",
    "she_step",
    "she_solve",
    "volterra_moment",
    "scheme_second_moment",
]


class SHEBlowUpError(RuntimeError):
    pass


class InitialProfile(enum.Enum):
    FLAT = "flat"
    DELTA = "delta"
    CUSTOM = "custom"


@dataclass
class SHEGrid:
    """State of a batch of replicas on ``[-X_max, X_max]``.

    ``values`` has shape ``(batch, n)``; ``reference`` is the zero-noise
    field on the same grid.
    """

    dx: float
    dt: float
    X_max: float
    values: np.ndarray
    reference: np.ndarray
    T: float = 0.0
    clipped: int = 0
    site_steps: int = 0
    cap: float = 1e200

    def __post_init__(self):
        if self.dt > self.dx ** 2 * (1 + 1e-12):
            raise ValueError("explicit scheme needs dt <= dx^2")
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))

    @property
    def X(self) -> np.ndarray:
        n = self.values.shape[1]
        return self.dx * (np.arange(n) - (n - 1) // 2)

    @property
    def noise_variance(self) -> float:
        return self.dt / self.dx

    @property
    def clip_rate(self) -> float:
        return self.clipped / self.site_steps if self.site_steps else 0.0


def _laplacian_step(z: np.ndarray, r: float) -> np.ndarray:
    out = z.copy()
    out[..., 1:-1] += r * (z[..., 2:] + z[..., :-2] - 2.0 * z[..., 1:-1])
    return out


def she_step(grid: SHEGrid, rng: np.random.Generator | None, noise: bool = True) -> SHEGrid:
    """Advance every replica by one time step, in place.

    ``Z <- Z + (dt / 2 dx^2) (Z(i+1) + Z(i-1) - 2 Z(i)) + Z xi`` with
    ``xi ~ N(0, dt / dx)`` independently per site and replica.  Negative
    values are set to zero and counted.
    """
    r = grid.dt / (2.0 * grid.dx ** 2)
    z = grid.values
    new = _laplacian_step(z, r)
    if noise:
        xi = rng.standard_normal(z.shape)
        xi *= math.sqrt(grid.noise_variance)
        new[:, 1:-1] += z[:, 1:-1] * xi[:, 1:-1]
    grid.reference = _laplacian_step(grid.reference, r)
    new[:, 0] = grid.reference[0]
    new[:, -1] = grid.reference[-1]
    neg = new < 0.0
    n_neg = int(np.count_nonzero(neg))
    if n_neg:
        new[neg] = 0.0
        grid.clipped += n_neg
    grid.site_steps += new.shape[0] * (new.shape[1] - 2)
    if np.max(new) > grid.cap:
        raise SHEBlowUpError(f"field exceeded {grid.cap} at T={grid.T}")
    grid.values = new
    grid.T += grid.dt
    return grid


def _initial_row(ic: InitialProfile, n: int, dx: float, custom) -> np.ndarray:
    if ic is InitialProfile.FLAT:
        return np.ones(n)
    if ic is InitialProfile.DELTA:
        row = np.zeros(n)
        row[(n - 1) // 2] = 1.0 / dx
        return row
    if custom is None:
        raise ValueError("custom initial profile needs values")
    X = dx * (np.arange(n) - (n - 1) // 2)
    row = np.asarray(custom(X) if callable(custom) else custom, dtype=float)
    if row.shape != (n,):
        raise ValueError("custom profile has the wrong length")
    return row


@dataclass
class SHESolution:
    times: np.ndarray
    X: np.ndarray
    fields: np.ndarray        # (n_replicas, n_times, n_X)
    reference: np.ndarray     # (n_times, n_X) zero-noise fields
    clip_rate: float
    meta: dict = field(default_factory=dict)

    def mean(self) -> np.ndarray:
        return self.fields.mean(axis=0)

    def stderr(self) -> np.ndarray:
        return self.fields.std(axis=0, ddof=1) / math.sqrt(self.fields.shape[0])


def she_solve(ic, T_end: float, dx: float = 0.05, X_max: float = 8.0, n_replicas: int = 1,
              seed: int = 0, snapshot_times=None, dt: float | None = None, batch: int = 500,
              noise: bool = True, custom=None, X_out=None, cap: float = 1e200) -> SHESolution:
    """Solve on ``[-X_max, X_max]`` and return snapshots.

    Replicas are processed in batches of ``batch`` rows; batch ``b`` draws
    from stream ``(seed, b)``, so results depend on ``batch`` but not on how
    batches are scheduled.  ``X_out`` restricts the stored grid points.
    """
    ic = InitialProfile(ic)
    dt = dx * dx / 2.0 if dt is None else dt
    n_half = int(round(X_max / dx))
    n = 2 * n_half + 1
    n_steps = int(round(T_end / dt))
    if not math.isclose(n_steps * dt, T_end, rel_tol=1e-9):
        raise ValueError("T_end must be a multiple of dt")
    snaps = np.asarray([T_end] if snapshot_times is None else snapshot_times, dtype=float)
    snap_steps = np.rint(snaps / dt).astype(int)
    if np.any(np.abs(snap_steps * dt - snaps) > 1e-9 * np.maximum(snaps, 1.0)) or np.any(snap_steps > n_steps):
        raise ValueError("snapshot times must be multiples of dt within [0, T_end]")
    X = dx * (np.arange(n) - n_half)
    if X_out is None:
        idx = np.arange(n)
    else:
        idx = np.rint(np.asarray(X_out) / dx).astype(int) + n_half
        if np.any(idx < 0) or np.any(idx >= n):
            raise ValueError("X_out outside the domain")
    row = _initial_row(ic, n, dx, custom)
    fields = np.empty((n_replicas, snaps.size, idx.size))
    ref_out = np.empty((snaps.size, idx.size))
    clipped = 0
    site_steps = 0
    for b, start in enumerate(range(0, n_replicas, batch)):
        m = min(batch, n_replicas - start)
        rng = RngStream(seed, b).generator()
        grid = SHEGrid(dx, dt, X_max, np.tile(row, (m, 1)), row.copy(), cap=cap)
        k = 0
        for step_no in range(n_steps + 1):
            while k < snaps.size and snap_steps[k] == step_no:
                fields[start:start + m, k] = grid.values[:, idx]
                ref_out[k] = grid.reference[idx]
                k += 1
            if step_no < n_steps:
                she_step(grid, rng, noise)
        clipped += grid.clipped
        site_steps += grid.site_steps
    return SHESolution(snaps, X[idx], fields, ref_out,
                       clipped / site_steps if site_steps else 0.0,
                       {"dx": dx, "dt": dt, "X_max": X_max, "seed": seed, "batch": batch})


@dataclass(frozen=True)
class MomentOracle:
    """Flat-start second moment ``m(T) = E Z_T(X)^2`` on a uniform grid."""

    T: np.ndarray
    m: np.ndarray

    def at(self, T: float) -> float:
        i = int(round(T / (self.T[1] - self.T[0])))
        if not math.isclose(self.T[i], T, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("T is not a grid point")
        return float(self.m[i])


def _product_trapezoid(T_end: float, h: float) -> np.ndarray:
    # m linear on each cell; the weight (4 pi (T - S))^{-1/2} integrated exactly
    c = 1.0 / math.sqrt(4.0 * math.pi)
    n = int(round(T_end / h))
    m = np.ones(n + 1)
    for i in range(1, n + 1):
        k = np.arange(i)
        a = (i - k) * h
        b = (i - k - 1) * h
        I0 = 2.0 * (np.sqrt(a) - np.sqrt(b))
        I1 = (2.0 / 3.0) * (a ** 1.5 - b ** 1.5)
        w_right = (a * I0 - I1) / h
        w_left = I0 - w_right
        rhs = 1.0 + c * (np.dot(w_left, m[:i]) + np.dot(w_right[:-1], m[1:i]))
        m[i] = rhs / (1.0 - c * w_right[-1])
    return m


def volterra_moment(T_grid) -> MomentOracle:
    """Solve ``m(T) = 1 + int_0^T m(S) (4 pi (T - S))^{-1/2} dS``.

    Product trapezoid integration has error ``O(h^{3/2}) + O(h^2)``; runs at
    ``h``, ``h/2`` and ``h/4`` are combined by two Richardson steps that
    remove both terms.
    """
    T_grid = np.asarray(T_grid, dtype=float)
    if T_grid[0] != 0.0 or T_grid.size < 2:
        raise ValueError("T grid must start at 0 and have at least two points")
    h = T_grid[1] - T_grid[0]
    if not np.allclose(np.diff(T_grid), h, rtol=1e-9, atol=0):
        raise ValueError("T grid must be uniform")
    T_end = T_grid[-1]
    m1 = _product_trapezoid(T_end, h)
    m2 = _product_trapezoid(T_end, h / 2)[::2]
    m3 = _product_trapezoid(T_end, h / 4)[::4]
    a = 2.0 ** 1.5
    r1 = (a * m2 - m1) / (a - 1.0)
    r2 = (a * m3 - m2) / (a - 1.0)
    return MomentOracle(T_grid, (4.0 * r2 - r1) / 3.0)


def scheme_second_moment(T_end: float, dx: float, dt: float | None = None, half_width: int = 400):
    """Exact ``E Z^2`` of the discrete flat-start scheme on the infinite grid.

    The spatial covariance ``C(k) = E Z(i) Z(i+k)`` obeys a closed linear
    recursion: each step applies the stencil in both arguments and adds
    ``(dt / dx) C(0)`` at ``k = 0``.  Clipping and boundaries are ignored.
    Returns the value of ``C(0)`` at ``T_end``.
    """
    dt = dx * dx / 2.0 if dt is None else dt
    r = dt / (2.0 * dx * dx)
    n_steps = int(round(T_end / dt))
    # the product stencil acting on C(k) is the stencil convolved with itself
    s = np.array([r, 1.0 - 2.0 * r, r])
    s2 = np.convolve(s, s)
    C = np.ones(2 * half_width + 1)
    sig2 = dt / dx
    for _ in range(n_steps):
        c0 = C[half_width]
        new = np.convolve(C, s2, mode="same")
        # flat start stays translation invariant; edges see a constant extension
        new[:2] = new[2]
        new[-2:] = new[-3]
        new[half_width] += sig2 * c0
        C = new
    return float(C[half_width])
