"""Experiment configuration and its ``key = value`` text format.

One setting per line, ``#`` starts a comment, lists are comma separated::

    preset = flat-convergence
    model = asep
    spin = 1
    eps = 0.04, 0.01
    T = 0.5
    n = 10000
    seed = 7

Floats are written with ``repr`` so that reading back gives the same bits.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from fractions import Fraction

__all__ = ["ExperimentConfig", "ConfigError", "PRESETS"]

PRESETS = ("flat-convergence", "step-convergence", "exact-mean", "moments", "martingale")

# settings that change how work is scheduled or where it lands, never the numbers
_NON_SEMANTIC = ("workers", "output_dir", "report")


class ConfigError(ValueError):
    pass


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "flat-convergence"
    model: str = "asep"
    spin: str = "1"
    eps: tuple = (0.04, 0.01)
    L: int = 0                 # 0 picks the smallest boundary-safe size
    T: float = 0.5             # macroscopic horizon
    times: tuple = ()          # extra macroscopic observation times
    ic: str = "flat_pairing"
    n: int = 1000
    seed: int = 0
    window: float = 1.0        # macroscopic half-width of the observation window
    dx: float = 0.05           # reference solver grid
    boundary_tol: float = 1e-6
    workers: int = 1
    output_dir: str = "out"
    report: bool = False

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.model not in ("asep", "asip"):
            raise ConfigError(f"unknown model {self.model!r}")
        try:
            Fraction(self.spin)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad spin {self.spin!r}") from exc
        if not self.eps or any(not (0 < e <= 0.5) for e in self.eps):
            raise ConfigError("eps values must lie in (0, 0.5]")
        if self.n < 1 or self.T <= 0 or self.L < 0 or self.workers < 1:
            raise ConfigError("n, T and workers must be positive and L non-negative")

    @property
    def spin_value(self) -> Fraction | float:
        return Fraction(self.spin) if self.model == "asep" else float(Fraction(self.spin))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self, semantic_only: bool = False) -> str:
        """The config file text; ``semantic_only`` drops scheduling and paths."""
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self)
                       if not (semantic_only and f.name in _NON_SEMANTIC))

    def semantic_hash(self) -> str:
        """SHA-256 over every setting that can change a number in the output."""
        return hashlib.sha256(self.to_text(semantic_only=True).encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(kinds[key], val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


def _parse(f: dataclasses.Field, text: str):
    default = f.default
    try:
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(",") if v.strip())
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name}: {text!r}") from exc
    return text
