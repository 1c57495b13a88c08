import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgdlab.domain import Box
from sgdlab.fokker_planck import (CFLError, DomainTooSmallError, FokkerPlanckSolver,
                                  GaussianState, GridDensity, ProductDatum, ResolutionError,
                                  degenerate_product_solution, gibbs_steady_state,
                                  hormander_condition, init_grid, lyapunov_solve,
                                  ou_closed_form, step_fp)
from sgdlab.model import DiffusionField, anisotropic_quadratic, double_well, quadratic


def ou_setup(cells=200, eps=0.3):
    m = quadratic(1.0, 1)
    f = DiffusionField(m, covariance=np.eye(1))
    g = init_grid(Box([-2.0], [2.0]), cells, GaussianState([0.5], [[0.04]]))
    return m, f, g, FokkerPlanckSolver(m, f, eps, g.axes)


def test_init_grid_normalizes_and_checks_resolution():
    g = init_grid(Box([-1.0], [1.0]), 100, GaussianState([0.0], [[0.01]]))
    assert g.mass() == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(ResolutionError):
        init_grid(Box([-1.0], [1.0]), 10, GaussianState([0.0], [[0.001]]))
    with pytest.raises(DomainTooSmallError):
        init_grid(Box([-1.0], [1.0]), 100, GaussianState([0.9], [[0.04]]))


def test_mass_conservation_and_positivity():
    m, f, g, s = ou_setup()
    gT, snaps = s.evolve(g, 1.0, record_every=0.25)
    for x in snaps:
        assert abs(x.mass() - 1.0) < 1e-12
        assert x.values.min() >= 0
    assert s.clipped_mass <= 1e-8


def test_step_beyond_cfl_is_refused():
    m, f, g, s = ou_setup()
    with pytest.raises(CFLError):
        s.step(g, 2 * s.cfl_limit)
    step_fp(g, m, f, 0.3, s.cfl_limit)


def test_symmetric_double_well_stays_symmetric():
    m = double_well(1)
    f = DiffusionField(m, covariance=np.eye(1))
    g = init_grid(Box([-2.0], [2.0]), 201,
                  lambda X: np.exp(-(X[..., 0] ** 2 - 0.25) ** 2 / 0.02), boundary_tol=None)
    s = FokkerPlanckSolver(m, f, 0.4, g.axes)
    for _ in range(200):
        g = s.step(g, s.cfl_limit)
        np.testing.assert_allclose(g.values, g.values[::-1], rtol=0, atol=1e-9)


def test_gibbs_density_is_a_discrete_equilibrium():
    m = double_well(1, scale=0.25)
    f = DiffusionField(m, covariance=0.5 * np.eye(1))
    box = Box([-3.0], [3.0])
    rho = gibbs_steady_state(m, 0.6, 0.5, box, 150)
    s = FokkerPlanckSolver(m, f, 0.6, rho.axes)
    assert np.max(np.abs(s.rhs(rho.values))) < 1e-10 * rho.values.max() / s.cfl_limit


def test_ou_grid_matches_closed_form():
    m, f, g, s = ou_setup(cells=400)
    gT = s.evolve(g, 1.0)
    exact = ou_closed_form(0.09 * np.eye(1), np.eye(1), GaussianState([0.5], [[0.04]]), 1.0)
    assert gT.l1_distance(exact.pdf) < 0.01
    assert gT.mean()[0] == pytest.approx(0.5 * np.exp(-1.0), abs=1e-3)


def test_ou_closed_form_limits():
    rho0 = GaussianState([1.0, -1.0], np.diag([0.2, 0.3]))
    C = np.array([[1.0, 0.2], [0.0, 2.0]])
    Q0 = np.diag([0.5, 0.1])
    late = ou_closed_form(Q0, C, rho0, 30.0)
    np.testing.assert_allclose(late.cov, lyapunov_solve(Q0, C).K, atol=1e-10)
    np.testing.assert_allclose(late.mean, 0.0, atol=1e-12)
    same = ou_closed_form(Q0, C, rho0, 0.0)
    np.testing.assert_allclose(same.cov, rho0.cov)


def test_isotropic_moments():
    # Q0 = eps^2 sigma/d I, C = lam I: per-axis variance eps^2 sigma/(lam d)
    eps2, sigma, lam, d = 0.04, 1.5, 2.0, 3
    K = lyapunov_solve(eps2 * sigma / d * np.eye(d), lam * np.eye(d)).K
    np.testing.assert_allclose(np.diag(K), eps2 * sigma / (lam * d))
    assert np.trace(K) == pytest.approx(eps2 * sigma / lam)


def random_stable_pair(rng, d):
    A = rng.normal(size=(d, d))
    C = A @ A.T / d + 0.5 * np.eye(d) + 0.3 * rng.normal(size=(d, d))
    C = C + (0.1 - min(np.linalg.eigvals(C).real.min(), 0.1)) * np.eye(d)
    B = rng.normal(size=(d, d))
    return B @ B.T, C


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 5))
def test_lyapunov_residual_and_definiteness(seed, d):
    Q0, C = random_stable_pair(np.random.default_rng(seed), d)
    sol = lyapunov_solve(Q0, C)
    r = np.linalg.norm(2 * Q0 - C @ sol.K - sol.K @ C.T)
    assert r <= 1e-10 * (1 + np.linalg.norm(Q0))
    assert sol.hormander and not sol.singular
    assert np.linalg.eigvalsh(sol.K).min() > 0


def test_degenerate_diffusion_is_flagged_singular():
    sol = lyapunov_solve(np.diag([1.0, 0.0]), 2.0 * np.eye(2))
    assert sol.singular and not sol.hormander
    # C K + K C^T = 2 Q0 with C = 2 I gives K = Q0 / 2
    np.testing.assert_allclose(sol.K, np.diag([0.5, 0.0]), atol=1e-14)
    # same kernel, but the drift couples the axes: non-degenerate steady state
    ok, _ = hormander_condition(np.diag([1.0, 0.0]), np.array([[1.0, 1.0], [-1.0, 1.0]]))
    assert ok


def test_unstable_drift_is_rejected():
    with pytest.raises(ValueError):
        lyapunov_solve(np.eye(2), np.diag([1.0, -1.0]))


def test_degenerate_product_solution():
    rho0 = ProductDatum(GaussianState([1.0], [[0.5]]), np.array([2.0]), np.array([[0.1]]))
    u = degenerate_product_solution({"Q0": [[1.0]], "C0": [[1.0]]}, {"C3": [[0.5]]}, rho0, 2.0)
    np.testing.assert_allclose(u.y_mean, [2.0 * np.exp(-1.0)])
    np.testing.assert_allclose(u.y_cov, [[0.1 * np.exp(-2.0)]])
    assert u.jacobian == pytest.approx(np.exp(1.0))
    assert u.x.cov[0, 0] == pytest.approx(1.0 - 0.5 * np.exp(-4.0), rel=1e-8)
    with pytest.raises(ValueError):
        degenerate_product_solution({"Q0": [[1.0]], "C0": [[1.0]], "C1": [[0.3]]},
                                    {"C3": [[0.5]]}, rho0, 1.0)


def test_late_time_second_moment_tends_to_one():
    rho0 = ProductDatum(GaussianState([1.0], [[0.5]]), np.array([2.0]), np.array([[0.1]]))
    u = degenerate_product_solution({"Q0": [[1.0]], "C0": [[1.0]]}, {"C3": [[1.0]]}, rho0, 40.0)
    assert u.second_moment() == pytest.approx(1.0, abs=1e-12)


def test_two_dimensional_grid_moments():
    m = anisotropic_quadratic(np.diag([1.0, 2.0]))
    f = DiffusionField(m, covariance=np.eye(2))
    g = init_grid(Box([-1.5, -1.5], [1.5, 1.5]), 60, GaussianState([0.2, 0.0], np.diag([0.05, 0.05])))
    s = FokkerPlanckSolver(m, f, 0.3, g.axes)
    gT = s.evolve(g, 8.0)
    np.testing.assert_allclose(np.diag(gT.covariance()), [0.09, 0.045], rtol=0.02)
    assert gT.mass() == pytest.approx(1.0, abs=1e-12)


def test_grid_binary_round_trip(tmp_path):
    g = init_grid(Box([-1.0, -1.0], [1.0, 1.0]), (8, 10), GaussianState([0.0, 0.0], np.eye(2) * 0.1),
                  boundary_tol=None)
    g.to_binary(tmp_path / "g.bin")
    back = GridDensity.from_binary(tmp_path / "g.bin")
    np.testing.assert_array_equal(back.values, g.values)
    assert back.t == g.t


def test_gaussian_point_axes_have_zero_variance():
    gs = GaussianState([1.0, 2.0], np.eye(2), point_axes=(1,))
    np.testing.assert_array_equal(gs.cov, np.diag([1.0, 0.0]))
