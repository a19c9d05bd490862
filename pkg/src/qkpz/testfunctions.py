"""Compactly supported test functions with exact first and second derivatives."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = ["TestFunction", "gaussian_bump", "raised_cosine", "check_second_derivative"]


@dataclass(frozen=True)
class TestFunction:
    name: str
    support: tuple
    _f: Callable
    _d1: Callable
    _d2: Callable

    __test__ = False  # keep pytest from collecting the class

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        return self._masked(self._f, X)

    def d1(self, X):
        return self._masked(self._d1, np.asarray(X, dtype=float))

    def d2(self, X):
        return self._masked(self._d2, np.asarray(X, dtype=float))

    def _masked(self, fn, X):
        a, b = self.support
        inside = (X > a) & (X < b)
        out = np.zeros(X.shape)
        out[inside] = fn(X[inside])
        return out


def _f(u):
    return np.exp(-1.0 / u)


def _fp(u):
    return _f(u) / u ** 2


def _fpp(u):
    return _f(u) * (1.0 / u ** 4 - 2.0 / u ** 3)


def _smooth_down(u):
    """1 at u <= 0, 0 at u >= 1, C-infinity in between; with two derivatives."""
    u = np.asarray(u, dtype=float)
    g = np.where(u <= 0, 1.0, 0.0)
    g1 = np.zeros(u.shape)
    g2 = np.zeros(u.shape)
    mid = (u > 0) & (u < 1)
    v = u[mid]
    A, A1, A2 = _f(1 - v), -_fp(1 - v), _fpp(1 - v)
    B, B1, B2 = _f(v), _fp(v), _fpp(v)
    D, D1, D2 = A + B, A1 + B1, A2 + B2
    g[mid] = A / D
    g1[mid] = (A1 * D - A * D1) / D ** 2
    g2[mid] = A2 / D - 2 * A1 * D1 / D ** 2 - A * D2 / D ** 2 + 2 * A * D1 ** 2 / D ** 3
    return g, g1, g2


def gaussian_bump(sigma: float = 0.5, center: float = 0.0) -> TestFunction:
    """Gaussian of width ``sigma``, switched off smoothly between 6 and 8 sigma."""

    def parts(X):
        Y = X - center
        G = np.exp(-Y * Y / (2 * sigma ** 2))
        G1 = -Y / sigma ** 2 * G
        G2 = (Y * Y / sigma ** 4 - 1 / sigma ** 2) * G
        r = np.abs(Y)
        c, c1, c2 = _smooth_down((r - 6 * sigma) / (2 * sigma))
        s = np.sign(Y)
        return G, G1, G2, c, s * c1 / (2 * sigma), c2 / (2 * sigma) ** 2

    def f(X):
        G, _, _, c, _, _ = parts(X)
        return G * c

    def d1(X):
        G, G1, _, c, c1, _ = parts(X)
        return G1 * c + G * c1

    def d2(X):
        G, G1, G2, c, c1, c2 = parts(X)
        return G2 * c + 2 * G1 * c1 + G * c2

    return TestFunction(f"gaussian_bump(sigma={sigma})",
                        (center - 8 * sigma, center + 8 * sigma), f, d1, d2)


def raised_cosine(half_width: float = 1.0, center: float = 0.0) -> TestFunction:
    """``((1 + cos(pi X / a)) / 2)^2`` on ``|X| < a``, i.e. ``cos^4(pi X / 2a)``."""
    k = math.pi / (2 * half_width)

    def f(X):
        return np.cos(k * (X - center)) ** 4

    def d1(X):
        y = k * (X - center)
        return -4 * k * np.cos(y) ** 3 * np.sin(y)

    def d2(X):
        y = k * (X - center)
        c, s = np.cos(y), np.sin(y)
        return k * k * (12 * c * c * s * s - 4 * c ** 4)

    return TestFunction(f"raised_cosine(a={half_width})",
                        (center - half_width, center + half_width), f, d1, d2)


def check_second_derivative(phi: TestFunction, h: float = 1e-4, n: int = 2001) -> float:
    """Largest gap between ``phi''`` and a central difference on the support."""
    a, b = phi.support
    X = np.linspace(a - 0.1 * (b - a), b + 0.1 * (b - a), n)
    fd = (phi(X + h) - 2 * phi(X) + phi(X - h)) / (h * h)
    return float(np.max(np.abs(fd - phi.d2(X))))
