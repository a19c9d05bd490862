import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.linalg import expm

from qkpz.identities import (InsufficientEnsembleError, SupportOverflowError, boundary_bias,
                             bracket_asymptotic_check, bracket_closed_form, bracket_exact,
                             bracket_rate_form, drift_coefficient, field_weights, infinite_mean,
                             key_term_decay, martingale_mean_test, qv_constant, segment_mean,
                             spin_ratio_defect, verify_bracket_forms, verify_drift_identity,
                             gradient_residuals)
from qkpz.process import Configuration, bond_rates, initial_condition
from qkpz.qcore import QParameters, q_number, weak_asymmetry
from qkpz.testfunctions import gaussian_bump, raised_cosine
from qkpz.transform import gartner, height_from_config, initial_gartner


@pytest.mark.parametrize("two_j", [1, 2, 3, 4])
def test_drift_identity_extended(two_j):
    rep = verify_drift_identity(QParameters(0.6, Fraction(two_j, 2)), rng=np.random.default_rng(two_j))
    assert rep.cases == (two_j + 1) ** 2
    assert rep.max_rel_residual <= 1e-12
    assert json.loads(rep.to_json())["identity"] == "drift"


def test_drift_identity_double_precision_is_rounding_limited():
    rep = verify_drift_identity(QParameters(0.9, 1), precision="double")
    assert rep.params["max_rel_to_terms"] <= 1e-14


def test_drift_identity_detects_wrong_constant():
    p = QParameters(0.6, 1)
    rep = verify_drift_identity(p, nu_shift=1e-3)
    assert rep.max_rel_residual == pytest.approx(1e-3 * abs(p.ln_q), rel=1e-6)


def test_drift_coefficient_vanishing_term():
    # an isolated empty neighbourhood has no jumps, so only the tilt remains
    p = QParameters(0.7, Fraction(1, 2))
    c = Configuration(np.zeros(3, dtype=int))
    assert drift_coefficient(c, 0, p) == pytest.approx(p.growth_rate)


def test_asip_drift_identity_sampled():
    for k in (0.5, 1.0, 2.3):
        rep = verify_drift_identity(QParameters(0.9, k, "asip"), n_cases=50, n_max=12)
        assert rep.max_rel_residual <= 1e-12


@pytest.mark.parametrize("two_j", [1, 2, 3])
def test_bracket_forms_agree(two_j):
    p = QParameters(0.75, Fraction(two_j, 2))
    assert verify_bracket_forms(p).max_rel_residual <= 1e-12
    c = Configuration(np.array([0, two_j, 0, two_j, 1]), flow_counter=2)
    Z = gartner(height_from_config(c, p), 1.0, p).values
    eta = c.eta(p)
    assert bracket_exact(c, 0, p, 1.0) == pytest.approx(
        bracket_rate_form(eta[2], eta[3], p) * Z[2] ** 2, rel=1e-13)
    assert bracket_closed_form(eta[2], eta[3], p) >= -1e-15


def test_bracket_zero_when_frozen():
    p = QParameters(0.75, Fraction(1, 2))
    assert bracket_rate_form(0.5, 0.5, p) == 0.0
    assert bracket_rate_form(-0.5, -0.5, p) == 0.0


def test_bracket_asymptotics():
    res = bracket_asymptotic_check([1e-2, 1e-3, 1e-4], spin=1)
    assert res["gradient_form_decreasing"]
    c_small = [qv_constant(e, 1) for e in (1e-3, 1e-4)]
    assert abs(c_small[0] / c_small[1] - 1) < 0.2
    with pytest.raises(ValueError):
        bracket_asymptotic_check([1e-3, 1e-2, 1e-4])


def test_gradient_identities():
    rng = np.random.default_rng(0)
    for two_j in (1, 2):
        p = QParameters(0.8, Fraction(two_j, 2))
        c = Configuration(rng.integers(0, two_j + 1, 41), flow_counter=-3)
        rp, rm = gradient_residuals(c, p, 2.0)
        assert rp <= 1e-13 and rm <= 1e-13


def _tilted_mean(params, L, start, t, sites):
    """E Z_t(x) on the closed segment from the tilted generator over configurations."""
    two_j = params.two_j
    q = params.q
    states = list(itertools.product(range(two_j + 1), repeat=2 * L + 1))
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    G = np.zeros((n, n))
    for s in states:
        i = index[s]
        c = Configuration(np.array(s))
        for b in range(-L, L):
            cp, cm = bond_rates(c, b, params)
            k = b + L
            for rate, src, dst, direction in ((cp, k, k + 1, 1), (cm, k + 1, k, -1)):
                if rate == 0.0:
                    continue
                t_s = list(s)
                t_s[src] -= 1
                t_s[dst] += 1
                # crossing bond 0 shifts h(0) by -direction
                tilt = q ** (2 * direction) if b == 0 else 1.0
                G[i, index[tuple(t_s)]] += rate * tilt
                G[i, i] -= rate
    f = np.zeros((n, len(sites)))
    for s in states:
        eta = np.array(s) - two_j / 2
        for m, x in enumerate(sites):
            if x > 0:
                h = eta[L + 1:L + 1 + x].sum()
            else:
                h = -eta[L + x + 1:L + 1].sum()
            f[index[s], m] = q ** (-2 * h)
    return math.exp(params.growth_rate * t) * (expm(G * t) @ f)[index[tuple(start)]]


@pytest.mark.parametrize("two_j,L,start", [(1, 2, (1, 1, 0, 1, 0)), (2, 1, (2, 0, 1))])
def test_segment_mean_matches_tilted_generator(two_j, L, start):
    p = QParameters(0.7, Fraction(two_j, 2))
    sites = list(range(-L - 1, L + 1))
    t = 1.3
    exact = _tilted_mean(p, L, start, t, sites)
    c = Configuration(np.array(start))
    h = height_from_config(c, p)
    z0 = gartner(h, 0.0, p).values
    ghost = z0[0] * p.q ** (2 * c.eta(p)[0])
    seg = segment_mean(np.concatenate([[ghost], z0]), p, t)
    assert np.allclose(seg, exact, rtol=1e-10, atol=0)


def test_infinite_mean_and_boundary_bias():
    p = QParameters(0.9, 1)
    flat = initial_gartner("flat_pairing", p)
    assert np.allclose(infinite_mean(flat, 50.0, [0, 3]), 1.0, rtol=1e-12)
    step = initial_gartner("step", p)
    t = 40.0
    assert infinite_mean(step, 0.0, [2])[0] == pytest.approx(p.q ** 4)
    # far from the corner the profile is a pure exponential, whose mean is explicit
    far = infinite_mean(step, t, [300])[0]
    assert far == pytest.approx(p.q ** 600 * math.exp(t * (math.cosh(2 * p.ln_q) - 1)), rel=1e-12)
    b1 = boundary_bias(p, "flat_pairing", 20, t, 5)
    b2 = boundary_bias(p, "flat_pairing", 60, t, 5)
    assert b1 > 1e-3 and b2 < 1e-12


def test_martingale_mean_test_guards():
    p = QParameters(0.9, 1)
    flat = initial_gartner("flat_pairing", p)
    with pytest.raises(InsufficientEnsembleError):
        martingale_mean_test(np.ones((10, 2)), [0, 1], flat, 1.0)
    rng = np.random.default_rng(0)
    res = martingale_mean_test(1 + 0.1 * rng.standard_normal((400, 50)), np.arange(50), flat, 2.0)
    assert res.frac_within_2se > 0.8 and np.all(np.isfinite(res.z_scores))


def test_field_weights_and_support_guard():
    _, scaling = weak_asymmetry(1e-2, 1)
    phi = raised_cosine(1.0)
    w = field_weights(phi, scaling, 100)
    assert math.fsum(w.psi0) == pytest.approx(0.75, rel=1e-3)
    assert abs(math.fsum(w.psi1)) < 1e-12
    with pytest.raises(SupportOverflowError):
        field_weights(gaussian_bump(0.5), scaling, 100)


def test_spin_ratio_defect_limit():
    for two_j in (2, 3, 4):
        j = two_j / 2
        vals = [spin_ratio_defect(weak_asymmetry(e, j)[0]) / e for e in (1e-3, 1e-4)]
        assert vals[1] == pytest.approx(-((2 * j) ** 2 - 1) / 6, rel=1e-3)
    assert spin_ratio_defect(QParameters(0.5, Fraction(1, 2))) == pytest.approx(0.0, abs=1e-15)


def test_key_term_decay():
    rng = np.random.default_rng(1)
    out = key_term_decay({1e-2: rng.normal(0, 1, 100), 1e-3: rng.normal(0, 0.1, 100)})
    assert out["decreasing"] and out["rows"][0]["eps"] == 1e-2
    with pytest.raises(InsufficientEnsembleError):
        key_term_decay({1e-2: [1.0]})
