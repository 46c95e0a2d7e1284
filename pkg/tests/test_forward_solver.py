import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st

from pointscatter.errors import ConvergenceError, DomainError, WindowRangeError
from pointscatter.forward_solver import (BackscatterData, SolverConfig, acquire_data, born_first_term,
                                         picard_solve, trace_at_source)
from pointscatter.potential import HarmonicModulated, RadialBump, TabulatedRadial, Zero, char_line_integral
from pointscatter.spherical_means import spherical_mean

from conftest import A_NORTH, COARSE


def ball_points(rng, n, radius=0.95):
    x = rng.normal(size=(n, 3))
    x *= (radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3)) / np.linalg.norm(x, axis=1, keepdims=True)
    return x


# --- configuration -------------------------------------------------------------

def test_config_validation():
    with pytest.raises(DomainError):
        SolverConfig(h=0).validate()
    with pytest.raises(DomainError):
        SolverConfig(t_max=3.0).validate()
    fine = COARSE.refined(2)
    assert fine.h == COARSE.h / 2 and fine.ds == COARSE.ds / 2
    assert fine.n_zeta == 2 * COARSE.n_zeta


# --- first Picard term -----------------------------------------------------------

def test_born_is_causal(rng):
    q = RadialBump(1.0, 2)
    x = ball_points(rng, 20)
    d = np.linalg.norm(x - A_NORTH, axis=1)
    assert np.all(born_first_term(q, A_NORTH, x, 0.9 * d) == 0.0)


def test_born_on_the_cone_is_line_integral(rng):
    q = RadialBump(1.0, 2)
    x = ball_points(rng, 10)
    d = np.linalg.norm(x - A_NORTH, axis=1)
    np.testing.assert_allclose(born_first_term(q, A_NORTH, x, d), char_line_integral(q, A_NORTH, x),
                               rtol=1e-8, atol=1e-14)


def test_born_antipode_closed_form():
    # line integral of (1 - s^2)^2 along the diameter, divided by 16 pi
    val = born_first_term(RadialBump(1.0, 2), A_NORTH, -A_NORTH, 2.0)
    assert val == pytest.approx(1.0 / (15.0 * np.pi), rel=1e-10)


@pytest.mark.parametrize("t", [0.4, 1.0, 1.6])
def test_born_at_source_is_spherical_mean(t):
    q = RadialBump(1.0, 2)
    val = born_first_term(q, A_NORTH, A_NORTH, t, n_zeta=64, n_psi=64)
    assert val == pytest.approx(spherical_mean(q, A_NORTH, t / 2) / (8 * np.pi), rel=1e-3)


# --- solver ----------------------------------------------------------------------

def test_zero_potential_gives_zero_field():
    f = picard_solve(Zero(), A_NORTH, COARSE)
    assert f.iterations == 1
    assert np.all(f.values == 0.0)


def test_trace_domain():
    f = picard_solve(RadialBump(0.5, 2), A_NORTH, replace(COARSE, t_max=1.0))
    assert trace_at_source(f, -0.1) == 0.0 and trace_at_source(f, 0.0) == 0.0
    with pytest.raises(WindowRangeError):
        trace_at_source(f, 1.5)


def test_nonconvergence_raises_with_history():
    with pytest.raises(ConvergenceError) as exc:
        picard_solve(RadialBump(1.0, 2), A_NORTH, replace(COARSE, max_iter=1, tol=1e-14))
    assert len(exc.value.history) == 1


def test_char_trace_matches_line_integral(bump_field, rng):
    q = RadialBump(0.5, 2)
    x = ball_points(rng, 200)
    err = np.abs(bump_field.char_trace(x) - char_line_integral(q, A_NORTH, x))
    assert err.max() <= 1e-3 * q.sup_norm


def test_harmonic_char_trace_cartesian(rng):
    q = HarmonicModulated(1.0, 2, 7)
    cfg = SolverConfig(h=1 / 8, ds=1 / 16, t_max=1.0, n_zeta=6, n_psi=8, n_zeta_source=16, n_psi_source=8)
    f = picard_solve(q, A_NORTH, cfg)
    assert f.lattice.__class__.__name__ == "CartesianLattice"
    x = ball_points(rng, 100)
    assert np.abs(f.char_trace(x) - char_line_integral(q, A_NORTH, x)).max() <= 2e-3 * q.sup_norm


def test_pruning_is_exact():
    q = RadialBump(0.5, 2)
    f0 = picard_solve(q, A_NORTH, COARSE)
    f1 = picard_solve(q, A_NORTH, replace(COARSE, prune=False))
    t = np.linspace(0.01, 2.0, 97)
    np.testing.assert_allclose(trace_at_source(f0, t), trace_at_source(f1, t), rtol=1e-8, atol=1e-14)


def test_domain_of_dependence():
    """Changing q on |x| <= 0.3 is invisible in the trace up to t = 2 * 0.5."""
    q = RadialBump(0.5, 2)
    bump = TabulatedRadial([0.0, 0.25, 0.3, 1.0], [3.0, 3.0, 0.0, 0.0])
    f0, f1 = picard_solve(q, A_NORTH, COARSE), picard_solve(q + bump, A_NORTH, COARSE)
    t = np.linspace(0.01, 1.0, 50)
    assert np.abs(trace_at_source(f0, t) - trace_at_source(f1, t)).max() <= 1e-14
    assert np.abs(f0.values - f1.values).max() > 1e-3


def test_cartesian_matches_axisymmetric():
    q = RadialBump(0.5, 2)
    cfg = SolverConfig(h=1 / 8, ds=1 / 16, t_max=1.0, n_zeta=6, n_psi=8, n_zeta_source=16, n_psi_source=8)
    fa = picard_solve(q, A_NORTH, cfg)
    fc = picard_solve(q, A_NORTH, replace(cfg, geometry="cartesian"))
    t = np.linspace(0.1, 1.0, 10)
    np.testing.assert_allclose(trace_at_source(fc, t), trace_at_source(fa, t), rtol=1e-4)


def test_nonlinear_part_scales_quadratically():
    defects = []
    for c in (0.8, 0.4):
        u1 = picard_solve(RadialBump(c, 2), A_NORTH, COARSE).values
        u2 = picard_solve(RadialBump(c / 2, 2), A_NORTH, COARSE).values
        defects.append(np.linalg.norm(u1 - 2 * u2) / np.linalg.norm(u1))
    assert defects[1] == pytest.approx(defects[0] / 2, rel=0.1)


def test_pde_residual_is_small(bump_field, rng):
    q = RadialBump(0.5, 2)
    r, s = bump_field.pde_residual(q, ball_points(rng, 200, 0.7))
    ok = np.isfinite(r)
    assert ok.sum() >= 10
    assert np.median(np.abs(r[ok]) / s[ok]) < 0.05


# --- acquisition -----------------------------------------------------------------

def test_radial_data_is_source_independent():
    srcs = [A_NORTH, [1.0, 0.0, 0.0], [0.0, -0.6, 0.8]]
    times = np.linspace(0.1, 1.0, 10)
    data = acquire_data(RadialBump(0.5, 2), srcs, times, replace(COARSE, t_max=1.0))
    assert np.abs(data.values - data.values[0]).max() <= 1e-6 * np.abs(data.values).max()


def test_zero_potential_data():
    data = acquire_data(Zero(), [A_NORTH], [0.5, 1.0], COARSE)
    assert np.all(data.values == 0.0)


def test_failure_gives_nan_row():
    data = acquire_data(RadialBump(1.0, 2), [A_NORTH], [0.5], replace(COARSE, max_iter=1, tol=1e-14))
    assert np.all(np.isnan(data.values[0])) and "ConvergenceError" in data.errors[0]


def test_bad_times():
    with pytest.raises(DomainError):
        acquire_data(Zero(), [A_NORTH], [0.0, 1.0])


def test_thread_count_does_not_change_results():
    srcs = [A_NORTH, [1.0, 0.0, 0.0]]
    cfg = replace(COARSE, t_max=0.5)
    q = HarmonicModulated(0.5, 1, 3)
    d1 = acquire_data(q, srcs, [0.25, 0.5], cfg, threads=1)
    d2 = acquire_data(q, srcs, [0.25, 0.5], cfg, threads=2)
    assert np.array_equal(d1.values, d2.values)


def test_small_amplitude_is_born():
    t = np.array([0.5, 1.0, 1.5])
    cfg = COARSE
    d1 = acquire_data(RadialBump(0.05, 2), [A_NORTH], t, cfg).values[0]
    d2 = acquire_data(RadialBump(0.1, 2), [A_NORTH], t, cfg).values[0]
    np.testing.assert_allclose(d2, 2 * d1, rtol=0.05)


def test_csv_roundtrip(tmp_path):
    data = acquire_data(RadialBump(0.5, 2), [A_NORTH, [1.0, 0, 0]], [0.25, 0.5], replace(COARSE, t_max=0.5))
    data.to_csv(tmp_path / "d.csv")
    back = BackscatterData.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.values, data.values) and np.array_equal(back.times, data.times)
    assert all(np.array_equal(s.a, b.a) for s, b in zip(data.sources, back.sources))


@given(st.floats(0.05, 1.95))
def test_born_at_source_is_nonnegative_for_positive_q(t):
    assert born_first_term(RadialBump(1.0, 2), A_NORTH, A_NORTH, t, n_zeta=8, n_psi=8) >= 0.0
