import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pointscatter.errors import DomainError, UsageError
from pointscatter.identity_lab import (_solve_pair, adjoint_pairing_check, ball_integral, ball_rule,
                                       kernel_k, pairing_integrand, prop22_residual, smooth_cutoff,
                                       verification_report, write_report)
from pointscatter.potential import RadialBump, Zero
from pointscatter.sphere_geometry import SourcePoint

from conftest import A_NORTH, COARSE

Q1, Q2 = RadialBump(0.3, 2), RadialBump(0.2, 3)


@pytest.fixture(scope="module")
def pair():
    return _solve_pair(Q1, Q2, SourcePoint(A_NORTH), 0.7, COARSE)


@pytest.fixture(scope="module")
def zero_pair():
    return _solve_pair(Zero(), Zero(), SourcePoint(A_NORTH), 0.5, COARSE)


def points_near_source(rng, n, tau):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d = np.where((d @ A_NORTH)[:, None] > 0, -d, d)
    return A_NORTH + tau * rng.uniform(0.05, 1.0, (n, 1)) * d


# --- cutoff and kernel -----------------------------------------------------------

@given(st.floats(0.001, 0.1), st.floats(0.0, 0.5))
def test_cutoff_range(r_cut, r):
    c = float(smooth_cutoff(r, r_cut))
    assert 0.0 <= c <= 1.0
    if r <= r_cut:
        assert c == 0.0
    if r >= 2 * r_cut:
        assert c == 1.0


def test_kernel_of_zero_fields(zero_pair, rng):
    x = points_near_source(rng, 20, 0.5)
    assert np.all(kernel_k(x, 0.5, A_NORTH, *zero_pair).value == 0.0)


def test_kernel_vanishes_inside_cutoff(pair):
    x = A_NORTH - np.array([[0.0, 0.0, 0.01], [0.005, 0.0, 0.015]])
    assert np.all(kernel_k(x, 0.5, A_NORTH, *pair, r_cut=0.02).value == 0.0)


def test_kernel_is_symmetric_in_the_pair(pair, rng):
    x = points_near_source(rng, 30, 0.6)
    k12 = kernel_k(x, 0.6, A_NORTH, pair[0], pair[1]).value
    k21 = kernel_k(x, 0.6, A_NORTH, pair[1], pair[0]).value
    np.testing.assert_allclose(k12, k21, rtol=1e-10, atol=1e-16)


def test_kernel_domain_checks(pair, zero_pair):
    with pytest.raises(DomainError):
        kernel_k(A_NORTH - [0, 0, 0.6], 0.5, A_NORTH, *pair)
    with pytest.raises(UsageError):
        kernel_k(A_NORTH - [0, 0, 0.3], 0.5, [1.0, 0.0, 0.0], *pair)


def test_ball_rule_volume():
    # the rule integrates 1 over the lens {|x-a| <= tau} ∩ B
    for tau in (0.3, 0.7, 1.0):
        rule = ball_rule(A_NORTH, tau, n_r=32, n_mu=16, n_az=8)
        vol = rule.weights.sum()
        exact = np.pi * tau ** 3 * (2.0 / 3.0 - tau / 4.0)
        assert vol == pytest.approx(exact, rel=1e-12)
        assert np.all(np.linalg.norm(rule.points, axis=-1) <= 1.0 + 1e-12)


# --- identity --------------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.3, 0.5, 0.7])
def test_identity_holds_at_coarse_resolution(pair, tau):
    rep = prop22_residual(Q1, Q2, A_NORTH, tau, fields=pair)
    assert rep.relative <= 0.02
    assert rep.kernel_term != 0.0


def test_identity_for_zero_partner():
    fields = _solve_pair(Q1, Zero(), SourcePoint(A_NORTH), 0.5, COARSE)
    rep = prop22_residual(Q1, Zero(), A_NORTH, 0.5, fields=fields)
    assert rep.relative <= 0.02


def test_residual_is_antisymmetric_under_swap(pair):
    r12 = prop22_residual(Q1, Q2, A_NORTH, 0.5, fields=pair)
    r21 = prop22_residual(Q2, Q1, A_NORTH, 0.5, fields=pair[::-1])
    assert r21.lhs == pytest.approx(-r12.lhs, rel=1e-12)
    assert r21.rhs == pytest.approx(-r12.rhs, rel=1e-10)
    assert r21.relative == pytest.approx(r12.relative, rel=1e-6)


def test_cutoff_insensitivity(pair):
    p = Q1 - Q2
    vals = [ball_integral(p, 0.5, *pair, r_cut=rc, rule=ball_rule(A_NORTH, 0.5, 64, 24, 16))
            for rc in (0.01, 0.02, 0.05)]
    assert max(vals) - min(vals) <= 1e-3 * abs(vals[1])


# --- adjoint pairing -------------------------------------------------------------

def test_pairing_is_zero_outside_double_cone(pair):
    rep = adjoint_pairing_check(Q1, Q2, A_NORTH, 0.5, fields=pair, n_outside=500)
    assert rep.max_outside == 0.0
    assert rep.absolute <= 0.02 * abs(rep.lhs)


def test_pairing_vanishes_without_second_field():
    fields = _solve_pair(Q1, Zero(), SourcePoint(A_NORTH), 0.5, COARSE)
    rep = adjoint_pairing_check(Q1, Zero(), A_NORTH, 0.5, fields=fields, n_outside=100)
    assert rep.pairing == 0.0


def test_pairing_scales_cubically():
    vals = []
    for c in (1.0, 0.5):
        q1, q2 = RadialBump(0.3 * c, 2), RadialBump(0.2 * c, 3)
        f = _solve_pair(q1, q2, SourcePoint(A_NORTH), 0.5, COARSE)
        vals.append(adjoint_pairing_check(q1, q2, A_NORTH, 0.5, fields=f, n_outside=10).pairing)
    assert vals[0] / vals[1] == pytest.approx(8.0, rel=0.1)


def test_pairing_integrand_inside_cone_nonzero(pair, rng):
    x = points_near_source(rng, 50, 0.4)
    r = np.linalg.norm(x - A_NORTH, axis=1)
    t = 0.5 + 0.0 * r
    vals = pairing_integrand(x, t, 0.5, *pair, Q1 - Q2)
    assert np.any(vals != 0.0)


def test_verification_report(tmp_path):
    rep = verification_report(Q1, Q2, [A_NORTH], [0.3], COARSE, inputs={"x": 1})
    assert len(rep["rows"]) == 1 and rep["max_relative"] <= 0.02
    write_report(rep, tmp_path / "v.json")
    assert json.loads((tmp_path / "v.json").read_text())["inputs"] == {"x": 1}
