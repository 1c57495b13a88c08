import numpy as np
import pytest

from sgdlab.domain import Ball, Box
from sgdlab.exit_time import (assumption_probe, barrier_height, barrier_slope, kramers_estimate,
                              met_1d_quadrature, met_bounds, met_lower_bound, met_upper_bound,
                              saddle_scan_1d, solve_met_1d)
from sgdlab.model import DiffusionField, LossModel, PartialLoss, double_well, quadratic


def flat1():
    return LossModel(1, [PartialLoss(lambda X: np.zeros(X.shape[:-1]), lambda X: np.zeros_like(X),
                                     lambda X: np.zeros(X.shape + (1,)))])


def test_pure_diffusion_exit_time_is_parabola():
    eps, q, R = 0.4, 1.5, 2.0
    x, u = solve_met_1d(flat1(), q, eps, (-R, R), 400)
    exact = (R ** 2 - x ** 2) / (2 * eps ** 2 * q)
    assert np.max(np.abs(u - exact)) <= 1e-3 * exact.max()
    # in one dimension the lower bound is attained
    assert met_lower_bound(R, 0.5, eps, q, 1) == pytest.approx(np.interp(0.5, x, u), rel=1e-3)


def test_fd_solver_agrees_with_quadrature():
    m = double_well(1, scale=0.25)
    eps = np.sqrt(0.1)
    x, u = solve_met_1d(m, 1.0, eps, (-2.0, 0.0), 4000)
    xq, uq = met_1d_quadrature(m, eps, -2.0, 0.0)
    np.testing.assert_allclose(np.interp(-1.0, x, u), np.interp(-1.0, xq, uq), rtol=1e-3)


def test_quadrature_reflecting_end():
    # L = 0, reflecting at 0, absorbing at 1: u = (1 - x^2) / (2 eps^2)
    x, u = met_1d_quadrature(flat1(), 0.5, 0.0, 1.0, left="reflecting")
    np.testing.assert_allclose(u, (1 - x ** 2) / 0.5, atol=1e-6)
    with pytest.raises(ValueError):
        met_1d_quadrature(flat1(), 0.5, 0.0, 1.0, left="sticky")


def test_kramers_value_double_well():
    m = double_well(1, scale=0.25)
    assert kramers_estimate(m, [-1.0], [0.0], np.sqrt(0.05)) == pytest.approx(659.3822923750206,
                                                                              rel=1e-12)
    assert barrier_height(m, [-1.0], [0.0]) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        kramers_estimate(m, [0.0], [-1.0], 0.2)


def test_kramers_matches_quadrature_to_leading_order():
    # transition time to the other minimum vs Kramers: ratio -> 1 as eps -> 0
    m = double_well(1, scale=0.25)
    ratios = []
    for e2 in (0.05, 0.02, 0.01):
        x, u = met_1d_quadrature(m, np.sqrt(e2), -6.0, 1.0, left="reflecting")
        ratios.append(np.interp(-1.0, x, u) / kramers_estimate(m, [-1.0], [0.0], np.sqrt(e2)))
    assert np.all(np.diff(np.abs(np.array(ratios) - 1)) < 0)
    assert abs(ratios[-1] - 1) < 0.03


def test_saddle_scan():
    m = double_well(1)
    z = saddle_scan_1d(m, [-1.0], [1.0])
    assert abs(z[0]) < 1e-10
    m2 = double_well(2)
    z2 = saddle_scan_1d(m2, [-1.0, 0.0], [1.0, 0.0])
    np.testing.assert_allclose(z2, [0.0, 0.0], atol=1e-10)
    with pytest.raises(ValueError):
        saddle_scan_1d(quadratic(1.0, 1), [0.0], [1.0])


def test_barrier_slope_recovers_height():
    e2 = np.array([0.1, 0.05, 0.02])
    assert barrier_slope(e2, 3.0 * np.exp(0.25 / e2)) == pytest.approx(0.25)


def test_upper_bound_limit():
    assert met_upper_bound(1.0, 0.0, 0.5, 1.0, 0) == pytest.approx(4.0)
    assert met_upper_bound(1.0, 0.0, 0.5, 1.0, 1e-9) == pytest.approx(4.0, rel=1e-6)


def test_probe_passes_and_fails_with_witness():
    m = quadratic(1.0, 2)
    f = DiffusionField(m, covariance=np.eye(2))
    ball = Ball([0.0, 0.0], 1.0)
    good = assumption_probe(m, f, 0.5, ball, [1.0, 0.0], 1.0, 1.0)
    assert good.holds and good.witness is None
    bad = assumption_probe(m, f, 0.5, ball, [1.0, 0.0], 1.0, 0.5)
    assert not bad.holds and bad.witness is not None
    assert abs(bad.witness[0]) > 0.5
    noisy = assumption_probe(m, f, 0.5, ball, [1.0, 0.0], 2.0, 1.0)
    assert not noisy.noise_ok


def test_met_bounds_bracket_known_value():
    m = quadratic(1.0, 2)
    f = DiffusionField(m, covariance=np.eye(2))
    b = met_bounds(m, f, 0.5, Ball([0.0, 0.0], 1.0), [0.0, 0.0], [0.0, 0.0], 1.0, [1.0, 0.0],
                   1.0, 1.0)
    assert b.lower == pytest.approx(1.0)
    assert b.upper == pytest.approx(2 * (np.exp(2.0) - 1))
    assert b.upper_certified
    # a box gives no lower bound; the half-width is taken over the corners
    bb = met_bounds(m, f, 0.5, Box([-1.0, -2.0], [1.0, 2.0]), [0.0, 0.0], [0.0, 0.0], 1.0,
                    [1.0, 0.0], 1.0, 1.0)
    assert bb.lower is None and bb.constants["Rv"] == pytest.approx(1.0)
