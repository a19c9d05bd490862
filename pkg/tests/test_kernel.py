import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from qkpz.kernel import (WindowTooSmallError, abs_K_integral, bessel_kernel, gaussian_kernel,
                         heat_kernel, heat_kernel_window, identity_general, kernel_gradients,
                         sum_K, sum_K_fourier, tail_probability_bound)


@pytest.mark.parametrize("t", [0.0, 0.3, 1.0, 17.0, 250.0])
def test_fourier_matches_bessel(t):
    tab = heat_kernel(t, window=60)
    assert np.max(np.abs(tab.values - bessel_kernel(t, tab.xs))) <= 1e-12


def test_mass_symmetry_and_window():
    for t in (0.5, 10.0, 400.0):
        tab = heat_kernel(t)
        assert math.fsum(tab.values) == pytest.approx(1.0, abs=1e-11)
        assert np.allclose(tab.values, tab.values[::-1], rtol=0, atol=1e-16)
        assert tab.tail_bound <= 1e-12
        assert heat_kernel_window(t).size == tab.xs.size


def test_small_time_expansion():
    t = 1e-4
    tab = heat_kernel(t)
    assert tab.at(np.array([1]))[0] == pytest.approx(t / 2, rel=1e-3)
    assert tab.at(np.array([0]))[0] == pytest.approx(1 - t, rel=1e-7)


def test_semigroup_property():
    a, b = 3.0, 5.5
    pa, pb, pab = heat_kernel(a), heat_kernel(b), heat_kernel(a + b)
    conv = np.convolve(pa.values, pb.values)
    X = pa.X_max + pb.X_max
    xs = np.arange(-X, X + 1)
    assert np.max(np.abs(conv - pab.at(xs))) <= 1e-12


def test_gaussian_limit():
    t = 2000.0
    tab = heat_kernel(t)
    xs = np.arange(-100, 101)
    assert np.max(np.abs(tab.at(xs) - gaussian_kernel(t, xs))) <= t ** -1.5


def test_tail_bound_and_window_cap():
    assert tail_probability_bound(0.0, 3) == 0.0
    assert tail_probability_bound(10.0, 1) == 1.0
    assert tail_probability_bound(10.0, 80) < 1e-30
    with pytest.raises(WindowTooSmallError):
        heat_kernel(1e11)
    with pytest.raises(ValueError):
        heat_kernel(-1.0)


def test_sum_K_parseval_and_sign():
    for t in (0.2, 1.0, 30.0):
        assert sum_K(t) == pytest.approx(sum_K_fourier(t), abs=1e-13)
    g = kernel_gradients(heat_kernel(4.0))
    assert np.all(g.K[g.xs == 0] < 0)
    # the product is antisymmetric-free: even in x
    assert np.allclose(g.K, g.K[::-1], atol=1e-17)


def test_abs_K_integral_finite():
    val, tail = abs_K_integral(64.0)
    assert 0 < val < 1 and 0 < tail < 1


def test_identity_general_one_dimension():
    lhs, rhs, tail = identity_general(0.0, 0.0, [0], [0])
    assert lhs == pytest.approx(rhs, abs=1e-6)
    lhs, rhs, _ = identity_general(1.5, 0.5, [2], [1])
    assert lhs == pytest.approx(rhs, abs=1e-6)
    with pytest.raises(ValueError):
        identity_general(0, 0, [0, 0], [0], d=1)
    with pytest.raises(ValueError):
        identity_general(0, 2000, [0], [0])


def test_gaussian_kernel_rejects_bad_time():
    with pytest.raises(ValueError):
        gaussian_kernel(0.0, [0.0])


def test_reference_values():
    assert heat_kernel(1.0).at(np.array([0]))[0] == pytest.approx(0.4657596, abs=1e-7)
    t0 = heat_kernel(0.0)
    assert t0.at(np.array([0, 1, -1])).tolist() == [1.0, 0.0, 0.0]
    g = kernel_gradients(t0)
    nz = {int(x): v for x, v in zip(g.xs, g.grad_plus) if v != 0}
    assert nz == {-1: 1.0, 0: -1.0}
    assert gaussian_kernel(1.0, [0.0])[0] == pytest.approx(0.3989423, abs=1e-7)
    X = np.linspace(-40, 40, 400001)
    assert trapezoid(gaussian_kernel(2.0, X), X) == pytest.approx(1.0, abs=1e-10)


def test_kernel_sum_decays():
    vals = [abs(sum_K(t)) for t in (1.0, 4.0, 16.0, 64.0)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    # bounded by C t^{-3/2} with C fitted at the last point
    C = vals[-1] * 64.0 ** 1.5
    assert all(v <= 1.5 * C * max(1.0, t) ** -1.5 for v, t in zip(vals, (1.0, 4.0, 16.0, 64.0)))


def test_local_limit_theorem():
    ej, T = 1e-2, 1.0
    tab = heat_kernel(T / ej ** 2)
    X = np.linspace(-3, 3, 61)
    discrete = tab.at(np.rint(X / ej).astype(int)) / ej
    assert np.max(np.abs(discrete - gaussian_kernel(T, X))) <= 1e-2
