"""Height function, the microscopic Gartner transform and diffusive rescaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .process import Configuration
from .qcore import Model, QParameters, ScalingParameters

__all__ = [
    "HeightField",
    "GartnerField",
    "ScaledField",
    "LOG_OVERFLOW",
    "height_from_config",
    "doubled_heights",
    "gartner",
    "rescale",
    "default_X_grid",
    "step_mass",
    "initial_gartner",
]

LOG_OVERFLOW = 700.0


@dataclass(frozen=True)
class HeightField:
    """Heights on ``{-L, ..., L}`` anchored at ``h(0) = flow_counter``.

    ``doubled`` holds ``2h``; it is an exact integer array for ASEP.
    """

    doubled: np.ndarray
    flow_counter: int

    @property
    def L(self) -> int:
        return (self.doubled.size - 1) // 2

    @property
    def values(self) -> np.ndarray:
        return self.doubled / 2.0

    @property
    def xs(self) -> np.ndarray:
        return np.arange(-self.L, self.L + 1)

    def increments(self) -> np.ndarray:
        """``h(x+1) - h(x)`` for ``x = -L .. L-1``; equals ``eta(x+1)``."""
        return np.diff(self.doubled) / 2.0


def height_from_config(config: Configuration, params: QParameters) -> HeightField:
    """Integrate the occupations outward from the anchor ``h(0)``.

    ``h(x) = h(0) + sum_{0<y<=x} eta(y)`` for ``x >= 0`` and
    ``h(x) = h(0) - sum_{x<y<=0} eta(y)`` for ``x < 0``.
    """
    out = doubled_heights(config.sites, config.flow_counter, params)
    return HeightField(out, int(config.flow_counter))


def doubled_heights(occupations, flow_counters, params: QParameters) -> np.ndarray:
    """``2h`` along the last axis of ``occupations`` (one row per configuration)."""
    occ = np.asarray(occupations)
    n = occ.shape[-1]
    L = (n - 1) // 2
    d_eta = _doubled_eta(occ, params)
    anchor = 2 * np.asarray(flow_counters)[..., None]
    out = np.empty(occ.shape, dtype=d_eta.dtype)
    out[..., L:L + 1] = anchor
    out[..., L + 1:] = anchor + np.cumsum(d_eta[..., L + 1:], axis=-1)
    # sum over x < y <= 0 for x = -1, -2, ...
    left = np.cumsum(d_eta[..., 1:L + 1][..., ::-1], axis=-1)[..., ::-1]
    out[..., :L] = anchor - left
    return out


def _doubled_eta(occ: np.ndarray, params: QParameters) -> np.ndarray:
    if params.model is Model.ASEP:
        return 2 * occ.astype(np.int64) - params.two_j
    return 2.0 * occ + 2.0 * float(params.spin)


@dataclass(frozen=True)
class GartnerField:
    """``Z(x) = q^{-2h(x) + nu t}`` stored through its logarithm."""

    log_values: np.ndarray
    time: float
    params: QParameters

    @property
    def L(self) -> int:
        return (self.log_values.size - 1) // 2

    @property
    def xs(self) -> np.ndarray:
        return np.arange(-self.L, self.L + 1)

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def at(self, x) -> np.ndarray:
        """Piecewise-linear interpolation in ``x``; exact at lattice points."""
        x = np.asarray(x, dtype=float)
        if np.any(np.abs(x) > self.L):
            raise IndexError("evaluation point outside the lattice")
        i = np.floor(x).astype(np.int64)
        i = np.minimum(i, self.L - 1)
        w = x - i
        z = self.values
        lo = z[i + self.L]
        hi = z[i + 1 + self.L]
        return np.where(w == 0.0, lo, (1.0 - w) * lo + w * hi)

    def grad_plus(self) -> np.ndarray:
        """``Z(x+1) - Z(x)`` for ``x = -L .. L-1``."""
        return np.diff(self.values)

    def grad_minus(self) -> np.ndarray:
        """``Z(x) - Z(x-1)`` for ``x = -L+1 .. L``."""
        return np.diff(self.values)


def gartner(height: HeightField, t: float, params: QParameters) -> GartnerField:
    log_z = (-height.doubled + params.nu * t) * params.ln_q
    if np.any(np.abs(log_z) > LOG_OVERFLOW):
        raise OverflowError(f"|log Z| exceeds {LOG_OVERFLOW} at t={t}")
    return GartnerField(np.asarray(log_z, dtype=float), float(t), params)


@dataclass(frozen=True)
class ScaledField:
    T: float
    X: np.ndarray
    values: np.ndarray
    step_normalized: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["T", "X", "Z"])
            for X, z in zip(self.X, self.values):
                w.writerow([repr(self.T), repr(float(X)), repr(float(z))])


def default_X_grid(window: float, scaling: ScalingParameters) -> np.ndarray:
    dx = max(scaling.eps_j, window / 512.0)
    n = int(math.floor(window / dx + 1e-9))
    return dx * np.arange(-n, n + 1)


def rescale(field: GartnerField, scaling: ScalingParameters, X_grid, T: float,
            step_normalized: bool = False) -> ScaledField:
    """Sample ``Z(X / eps_j)`` at microscopic time ``T / eps_j^2``.

    With ``step_normalized`` the values carry the factor ``1 / (2 sqrt(eps))``.
    """
    t_micro = scaling.micro_time(T)
    if not math.isclose(field.time, t_micro, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"field time {field.time} does not match T/eps_j^2 = {t_micro}")
    X = np.asarray(X_grid, dtype=float)
    x = scaling.micro_space(X)
    if np.any(np.abs(x) > field.L + 1e-9):
        raise IndexError("macroscopic window exceeds the lattice")
    vals = field.at(np.clip(x, -field.L, field.L))
    if step_normalized:
        vals = vals / (2.0 * math.sqrt(scaling.epsilon))
    return ScaledField(float(T), X, vals, step_normalized)


def step_mass(epsilon: float, spin, L: int | None = None):
    """Total mass of the normalized step transform at time zero.

    Returns ``(mass_eps_j, mass_eps)``: the lattice sum of
    ``Z(x) / (2 sqrt(eps))`` weighted by ``eps_j = 2 j eps`` and by ``eps``.
    With ``L=None`` the infinite geometric series is summed in closed form,
    otherwise the sum runs over ``|x| <= L``.
    """
    j = float(spin)
    r = math.exp(-2.0 * j * math.sqrt(epsilon))
    if L is None:
        total = (1.0 + r) / (1.0 - r)
    else:
        xs = np.arange(-L, L + 1)
        total = math.fsum(np.exp(-2.0 * j * math.sqrt(epsilon) * np.abs(xs)))
    base = total / (2.0 * math.sqrt(epsilon))
    return 2.0 * j * epsilon * base, epsilon * base


def initial_gartner(kind: str, params: QParameters):
    """``Z_0`` on all of the integers for the deterministic ASEP starts.

    Returns a vectorized callable on integer arrays.  ``step`` gives
    ``q^{2j|x|}``; ``flat_pairing`` gives 1, or for half-odd ``j`` the
    alternating profile ``1, q, 1, q, ...`` (value ``q`` at odd sites).
    """
    if params.model is not Model.ASEP:
        raise ValueError("closed-form initial profiles exist for ASEP only")
    j = float(params.spin)
    q = params.q
    if kind == "step":
        return lambda x: q ** (2.0 * j * np.abs(np.asarray(x, dtype=float)))
    if kind == "flat_pairing":
        if params.two_j % 2 == 0:
            return lambda x: np.ones(np.shape(x))
        return lambda x: np.where(np.asarray(x) % 2 == 0, 1.0, q)
    raise ValueError(f"no closed-form profile for {kind!r}")
