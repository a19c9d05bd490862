import numpy as np
import pytest

from qkpz.testfunctions import check_second_derivative, gaussian_bump, raised_cosine


@pytest.mark.parametrize("phi", [gaussian_bump(0.5), gaussian_bump(0.2, center=0.3), raised_cosine(1.0)])
def test_derivatives_and_support(phi):
    assert check_second_derivative(phi) < 1e-4 * max(1.0, np.max(np.abs(phi.d2(np.linspace(*phi.support, 999)))))
    a, b = phi.support
    outside = np.array([a - 1.0, a, b, b + 0.5])
    assert np.all(phi(outside) == 0) and np.all(phi.d1(outside) == 0)


def test_raised_cosine_values():
    phi = raised_cosine(2.0)
    assert phi(np.array([0.0]))[0] == 1.0
    assert phi(np.array([1.0]))[0] == pytest.approx(0.25)
