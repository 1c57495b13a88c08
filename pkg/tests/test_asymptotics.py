import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgdlab.asymptotics import (EntropyUndefinedError, entropy_decay_rate, entropy_trace, fit_rate,
                                gaussian_w2, grid_difference, linearize_at_minimum, mass_partition,
                                matching_w2, moment_norm, product_w2_bound, relative_entropy,
                                transport_w2_bound, wasserstein2_1d)
from sgdlab.domain import Box
from sgdlab.fokker_planck import (FokkerPlanckSolver, GaussianState, GridDensity,
                                  gibbs_steady_state, init_grid)
from sgdlab.model import DiffusionField, anisotropic_quadratic, double_well, quadratic

small = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(-10, 10), min_size=n, max_size=n),
    st.lists(st.floats(-10, 10), min_size=n, max_size=n))))
def test_sorted_matching_is_optimal(pair):
    a, b = map(np.array, pair)
    assert wasserstein2_1d(a, b) == pytest.approx(matching_w2(a, b), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(small, small)
def test_w2_is_symmetric_for_unequal_sizes(a, b):
    A = (np.array(a), np.full(len(a), 1 / len(a)))
    B = (np.array(b), np.full(len(b), 1 / len(b)))
    assert wasserstein2_1d(A, B) == pytest.approx(wasserstein2_1d(B, A), rel=1e-9, abs=1e-12)


def test_w2_weighted_atoms():
    # half a unit mass moves distance 2
    assert wasserstein2_1d(([0.0, 1.0], [0.5, 0.5]), ([0.0], [1.0])) == pytest.approx(np.sqrt(0.5))
    assert wasserstein2_1d(([0.0], [1.0]), ([0.0, 2.0], [0.75, 0.25])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        wasserstein2_1d(([0.0], [0.5]), ([0.0], [1.0]))


def test_gaussian_w2_cases():
    A = GaussianState([0.0, 0.0], np.eye(2))
    B = GaussianState([3.0, 4.0], np.eye(2))
    assert gaussian_w2(A, B) == pytest.approx(5.0)
    C = GaussianState([0.0, 0.0], 4 * np.eye(2))
    assert gaussian_w2(A, C) == pytest.approx(np.sqrt(2.0))
    D = GaussianState([0.0, 0.0], np.diag([1.0, 0.0]))
    assert gaussian_w2(A, D) == pytest.approx(1.0)


def test_product_and_transport_bounds():
    assert product_w2_bound(3.0, 16.0) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        product_w2_bound(-1.0, 0.0)
    np.testing.assert_allclose(transport_w2_bound([0.0, 1.0], 1.0, 2.0), [2.0, 2 * np.exp(-1.0)])
    t = np.linspace(0, 2, 9)
    assert fit_rate(t, 3 * np.exp(-1.5 * t)) == pytest.approx(1.5)


def test_relative_entropy_zero_at_reference_and_undefined_off_support():
    box = Box([-3.0], [3.0])
    ref = gibbs_steady_state(quadratic(1.0, 1), 0.5, 1.0, box, 100)
    assert relative_entropy(ref, ref) == 0.0
    v = ref.values.copy()
    v[0] += 1.0
    ref.values[0] = 0.0
    with pytest.raises(EntropyUndefinedError):
        relative_entropy(GridDensity(ref.axes, v), ref)


def test_entropy_decays_monotonically_for_ou():
    m = quadratic(1.0, 1)
    f = DiffusionField(m, covariance=np.eye(1))
    eps = 0.4
    box = Box([-2.5], [2.5])
    ref = gibbs_steady_state(m, eps, 1.0, box, 200)
    rho0 = init_grid(box, 200, GaussianState([0.5], [[0.1]]))
    tr = entropy_trace(FokkerPlanckSolver(m, f, eps, rho0.axes), rho0, ref, f, 4.0, 0.1)
    assert np.all(np.diff(tr.entropy) < 0)
    rate = entropy_decay_rate(tr)
    # slowest mode of this entropy decays at twice the curvature
    assert rate == pytest.approx(2.0, rel=0.05)
    assert tr.production_residual(eps, (0.5, 3.5)) < 0.05


def test_moment_norm_and_difference():
    box = Box([-1.0], [1.0])
    a = init_grid(box, 50, GaussianState([0.0], [[0.02]]))
    assert moment_norm(grid_difference(a, a)) == 0.0
    assert moment_norm(([[0.0], [1.0]], [0.5, -0.5]), k=2) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        moment_norm(a, k=-1)


def test_linearize_kinds():
    m = anisotropic_quadratic(np.diag([1.0, 2.0]))
    f = DiffusionField(m, covariance=np.eye(2))
    lin = linearize_at_minimum(m, f, [0.0, 0.0], 0.5)
    assert lin.kind == "gaussian"
    np.testing.assert_allclose(lin.steady_state.cov, 0.25 * np.diag([1.0, 0.5]))
    deg = linearize_at_minimum(m, DiffusionField(m, covariance=np.diag([1.0, 0.0])), [0.0, 0.0], 0.5)
    assert deg.kind == "degenerate-product"
    np.testing.assert_allclose(deg.steady_state.cov, np.diag([0.25, 0.0]), atol=1e-14)
    assert deg.steady_state.point_axes == (1,)
    pm = linearize_at_minimum(m, DiffusionField(m), [0.0, 0.0], 0.5)
    assert pm.kind == "point-mass"
    with pytest.raises(ValueError):
        linearize_at_minimum(m, f, [1.0, 0.0], 0.5)


def test_coupled_drift_breaks_product_structure():
    m = anisotropic_quadratic(np.array([[2.0, 1.0], [1.0, 2.0]]))
    f = DiffusionField(m, covariance=np.diag([1.0, 0.0]))
    # the Hessian mixes the noisy axis into the other one, so the steady state is a full Gaussian
    assert linearize_at_minimum(m, f, [0.0, 0.0], 0.5).kind == "gaussian"


def test_mass_partition_symmetric():
    m = double_well(1)
    X = np.concatenate([np.linspace(-1.8, -0.1, 50), np.linspace(0.1, 1.8, 50)])[:, None]
    p = mass_partition(X, [[-1.0], [1.0]], m)
    np.testing.assert_allclose(p.weights, [0.5, 0.5])
    assert p.reliable and p.unassigned == 0.0
    # the saddle itself never reaches a minimum
    q = mass_partition(np.zeros((4, 1)), [[-1.0], [1.0]], m, max_iter=50)
    assert q.unassigned == 1.0 and not q.reliable
