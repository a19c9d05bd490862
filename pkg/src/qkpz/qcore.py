"""q-deformed arithmetic, model parameters and weak-asymmetry scaling.

All q-numbers are evaluated in the hyperbolic form

    [n]_q = sinh(n ln q) / sinh(ln q),

which is algebraically identical to (q^n - q^-n) / (q - q^-1) but does not
lose digits when q is close to 1.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

__all__ = [
    "Model",
    "QParameters",
    "ScalingParameters",
    "EPS_MIN",
    "EPS_MAX",
    "q_number",
    "drift_constant",
    "weak_asymmetry",
]

# Numeric envelope for the weak-asymmetry parameter.  Below EPS_MIN the
# transform q^{-2h} overflows for heights reachable on desk-scale lattices.
EPS_MIN = 1e-8
EPS_MAX = 0.5


class Model(enum.Enum):
    ASEP = "asep"
    ASIP = "asip"

    @classmethod
    def parse(cls, value: "Model | str") -> "Model":
        if isinstance(value, Model):
            return value
        return cls(str(value).lower())


def _check_q(q: float) -> None:
    if not (0.0 < q < 1.0):
        raise ValueError(f"q must lie in (0, 1), got {q!r}")


def q_number(n: float, q: float) -> float:
    """Return the q-number ``[n]_q = (q^n - q^-n) / (q - q^-1)``.

    ``n`` may be any real number (ASIP rates use non-integer arguments).
    Raises ``ValueError`` if ``q`` is outside ``(0, 1)``.
    """
    _check_q(q)
    if n == 0:
        return 0.0
    a = math.log(q)
    return math.sinh(n * a) / math.sinh(a)


def _as_spin(model: Model, spin) -> Fraction | float:
    if model is Model.ASEP:
        j = Fraction(spin).limit_denominator(2) if not isinstance(spin, Fraction) else spin
        if j <= 0 or (2 * j).denominator != 1 or abs(float(j) - float(spin)) > 1e-12:
            raise ValueError(f"ASEP spin must be a positive half-integer, got {spin!r}")
        return j
    k = float(spin)
    if not (k > 0.0 and math.isfinite(k)):
        raise ValueError(f"ASIP spin must be a positive real, got {spin!r}")
    return k


@dataclass(frozen=True)
class QParameters:
    """Asymmetry ``q``, spin (``j`` for ASEP, ``k`` for ASIP) and model tag."""

    q: float
    spin: Fraction | float
    model: Model = Model.ASEP

    def __post_init__(self) -> None:
        _check_q(self.q)
        model = Model.parse(self.model)
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "spin", _as_spin(model, self.spin))

    @property
    def two_j(self) -> int:
        """``2j`` as an exact integer (ASEP only)."""
        if self.model is not Model.ASEP:
            raise AttributeError("two_j is defined for ASEP only")
        return int(2 * self.spin)

    @property
    def signed_spin(self) -> float:
        """``j`` for ASEP and ``-k`` for ASIP.

        With this value in place of ``j`` the ASEP formulas turn into the ASIP
        ones (the substitution j -> -k).
        """
        return float(self.spin) if self.model is Model.ASEP else -float(self.spin)

    @property
    def ln_q(self) -> float:
        return math.log(self.q)

    @cached_property
    def nu(self) -> float:
        return drift_constant(self)

    @property
    def growth_rate(self) -> float:
        """``nu * ln q``, the exponential rate of the ``q^{nu t}`` factor."""
        return self.nu * self.ln_q

    def centered(self, occupation):
        """Centered occupation ``eta``: ``n - j`` (ASEP) or ``n + k`` (ASIP)."""
        return occupation - self.signed_spin


@dataclass(frozen=True)
class ScalingParameters:
    epsilon: float
    q_eps: float = field(init=False)
    eps_j: float = field(init=False)
    spin: float = 0.5

    def __post_init__(self) -> None:
        if not (self.epsilon > 0.0):
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "q_eps", math.exp(-math.sqrt(self.epsilon)))
        object.__setattr__(self, "eps_j", 2.0 * float(self.spin) * self.epsilon)

    def micro_time(self, T: float) -> float:
        """Microscopic time ``eps_j^-2 T`` for macroscopic time ``T``."""
        return T / self.eps_j**2

    def micro_space(self, X):
        return X / self.eps_j


def drift_constant(params: QParameters) -> float:
    """Drift constant ``nu = ([4s]_q / (2 [2s]_q) - 1) / ln q``.

    ``s`` is ``j`` for ASEP and ``k`` for ASIP.  Since
    ``[4s]_q / [2s]_q = 2 cosh(2 s ln q)`` the bracket equals
    ``2 sinh(s ln q)^2``, which is what is evaluated here.
    """
    a = params.ln_q
    s = params.signed_spin
    return 2.0 * math.sinh(s * a) ** 2 / a


def weak_asymmetry(epsilon: float, spin=Fraction(1, 2), model: Model | str = Model.ASEP):
    """Bundle ``q = exp(-sqrt(eps))`` with the diffusive scaling ``eps_j = 2 j eps``."""
    if not (EPS_MIN <= epsilon <= EPS_MAX):
        raise ValueError(
            f"epsilon={epsilon!r} outside the supported range [{EPS_MIN}, {EPS_MAX}]"
        )
    model = Model.parse(model)
    scaling = ScalingParameters(epsilon, spin=float(spin))
    params = QParameters(scaling.q_eps, spin, model)
    return params, scaling
