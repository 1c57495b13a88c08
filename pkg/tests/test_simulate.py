import numpy as np
import pytest

from sgdlab.domain import Ball, Box
from sgdlab.model import (ConfigError, DatasetQuadratic, DiffusionField, Hyperparams, LossModel,
                          PartialLoss, quadratic)
from sgdlab.simulate import (DivergenceError, EnsembleTrace, ExitTimeStats, draw_batches,
                             em_step, gaussian_ensemble, nsgd_step, run_ensemble,
                             sample_exit_times, sgd_step, weak_error_curve)
from sgdlab.streams import block_generator, block_layout, map_blocks


def dataset(n=5, d=2, seed=0):
    rng = np.random.default_rng(seed)
    return DatasetQuadratic(rng.normal(size=(n, d)), rng.normal(size=n))


def flat(dim=1):
    return LossModel(dim, [PartialLoss(lambda X: np.zeros(X.shape[:-1]), lambda X: np.zeros_like(X),
                                       lambda X: np.zeros(X.shape + (X.shape[-1],)))])


def test_nsgd_without_noise_equals_sgd_draw_for_draw():
    m = dataset()
    hp = Hyperparams(0.1, 2)
    X = np.random.default_rng(1).normal(size=(7, 2))
    a = sgd_step(X, m, hp, np.random.default_rng(5))
    b = nsgd_step(X, m, hp, 0.0, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_full_batch_is_gradient_descent_and_draws_nothing():
    m = dataset()
    hp = Hyperparams(0.1, 5)
    x = np.array([0.2, -0.4])
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    np.testing.assert_allclose(sgd_step(x, m, hp, rng), x - 0.1 * m.gradient(x))
    assert rng.bit_generator.state == state


def test_minibatch_noise_matches_sampling_without_replacement():
    # covariance of a without-replacement batch mean: Q / m (N - m) / (N - 1)
    m = dataset(n=6, d=2, seed=2)
    x = np.array([0.5, 0.1])
    X = np.broadcast_to(x, (200000, 2))
    idx = draw_batches(np.random.default_rng(3), X.shape[0], 6, 2)
    G = m.batch_gradient(X, idx)
    Q = DiffusionField(m).covariance(x)
    np.testing.assert_allclose(G.mean(axis=0), m.gradient(x), atol=5 * np.sqrt(Q.max() / 2e5))
    np.testing.assert_allclose(np.cov(G.T), Q / 2 * 4 / 5, rtol=0.02, atol=1e-4)


def test_batches_are_distinct_indices():
    idx = draw_batches(np.random.default_rng(0), 500, 10, 4)
    assert idx.shape == (500, 4)
    assert all(len(set(r)) == 4 for r in idx)
    assert draw_batches(np.random.default_rng(0), 5, 10, 10) is None


def test_batch_larger_than_dataset_is_rejected():
    with pytest.raises(ConfigError):
        sgd_step(np.zeros(2), dataset(n=3), Hyperparams(0.1, 4), np.random.default_rng(0))


def test_em_one_step_covariance():
    m = flat(2)
    Q = np.array([[1.0, 0.3], [0.3, 0.5]])
    f = DiffusionField(m, covariance=Q)
    X = em_step(np.zeros((100000, 2)), m, f, 0.3, 0.01, np.random.default_rng(0))
    np.testing.assert_allclose(np.cov(X.T), 2 * 0.09 * 0.01 * Q, rtol=0.02)


def test_divergence_raises_in_step_and_is_flagged_in_runs():
    m = quadratic(1.0, 1)
    with pytest.raises(DivergenceError):
        sgd_step(np.array([1e308]), m, Hyperparams(3.0, 1), np.random.default_rng(0))
    tr = run_ensemble(m, DiffusionField(m), np.array([1.0]), "sgd", 1100, 3, 0,
                      Hyperparams(3.0, 1), stride=100)
    assert np.all(tr.diverged > 0)
    assert np.all(np.isfinite(tr.final))


def test_run_ensemble_deterministic_and_thread_independent():
    m = dataset(n=8)
    f = DiffusionField(m, delta=0.1, batch_size=2)
    hp = Hyperparams(0.05, 2)
    a = run_ensemble(m, f, np.zeros(2), "nsgd", 30, 2500, 42, hp, stride=10)
    b = run_ensemble(m, f, np.zeros(2), "nsgd", 30, 2500, 42, hp, stride=10, n_jobs=3)
    np.testing.assert_array_equal(a.positions, b.positions)
    c = run_ensemble(m, f, np.zeros(2), "nsgd", 30, 2500, 43, hp, stride=10)
    assert not np.array_equal(a.final, c.final)


def test_trajectory_streams_do_not_depend_on_later_blocks():
    m = quadratic(1.0, 1)
    f = DiffusionField(m, covariance=np.eye(1))
    hp = Hyperparams(0.02, 1)
    a = run_ensemble(m, f, np.zeros(1), "em", 20, 1500, 9, hp)
    b = run_ensemble(m, f, np.zeros(1), "em", 20, 3000, 9, hp)
    np.testing.assert_array_equal(a.positions[:, :1024], b.positions[:, :1024])
    np.testing.assert_array_equal(a.streams[1025], [1, 1])


def test_recorded_times_and_initial_snapshot():
    m = quadratic(1.0, 1)
    tr = run_ensemble(m, DiffusionField(m), np.ones(1), "sgd", 10, 2, 0, Hyperparams(0.1, 1),
                      stride=4)
    np.testing.assert_allclose(tr.times, [0.0, 0.4, 0.8, 1.0])
    np.testing.assert_allclose(tr.positions[:, 0, 0], 0.9 ** np.array([0, 4, 8, 10]))


def test_gaussian_ensemble_moments():
    X = gaussian_ensemble([1.0, -1.0], [[0.5, 0.1], [0.1, 0.2]], 50000, 0)
    np.testing.assert_allclose(X.mean(axis=0), [1.0, -1.0], atol=0.02)
    np.testing.assert_allclose(np.cov(X.T), [[0.5, 0.1], [0.1, 0.2]], atol=0.02)


def test_ensemble_binary_and_csv_round_trip(tmp_path):
    m = quadratic(1.0, 2)
    f = DiffusionField(m, covariance=np.eye(2))
    tr = run_ensemble(m, f, np.zeros(2), "em", 5, 4, 1, Hyperparams(0.1, 1))
    tr.to_binary(tmp_path / "e.bin")
    back = EnsembleTrace.from_binary(tmp_path / "e.bin")
    np.testing.assert_array_equal(back.positions, tr.positions)
    np.testing.assert_array_equal(back.times, tr.times)
    tr.to_csv(tmp_path / "e.csv")
    rows = np.loadtxt(tmp_path / "e.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 2:].reshape(tr.positions.shape), tr.positions)


def test_exit_time_of_brownian_motion_from_interval():
    # E tau = (1 - x^2) / (2 eps^2) for pure diffusion on (-1, 1)
    m = flat(1)
    f = DiffusionField(m, covariance=np.eye(1))
    st = sample_exit_times(m, f, 1.0, Box([-1.0], [1.0]), [0.5], 4000, 1e-3, 10.0, 3)
    assert st.censored_fraction == 0
    assert abs(st.mean - 0.375) < 3 * st.se + 0.005
    assert np.all(np.abs(st.exit_points[:, 0]) == pytest.approx(1.0, abs=1e-12))


def test_exit_time_step_refinement_moves_mean_less_than_one_se():
    m = quadratic(1.0, 2)
    f = DiffusionField(m, covariance=np.eye(2))
    ball = Ball([0.0, 0.0], 1.0)
    a = sample_exit_times(m, f, 0.5, ball, [0.0, 0.0], 2000, 4e-3, 100.0, 1, substeps=4)
    b = sample_exit_times(m, f, 0.5, ball, [0.0, 0.0], 2000, 1e-3, 100.0, 1)
    assert abs(a.mean - b.mean) < max(a.se, b.se)


def test_exit_time_censoring_semantics():
    st = ExitTimeStats(np.array([1.0, 2.0, 5.0, 5.0, 5.0]),
                       np.array([False, False, True, True, True]), np.zeros((5, 1)), 5.0, 0)
    assert st.censored_fraction == pytest.approx(0.6)
    assert st.lower_bound_only
    assert st.mean == pytest.approx(1.5)
    assert st.censored_mean == pytest.approx(3.6)


def test_exit_time_rejects_start_outside():
    m = flat(1)
    f = DiffusionField(m, covariance=np.eye(1))
    with pytest.raises(ValueError):
        sample_exit_times(m, f, 1.0, Box([-1.0], [1.0]), [2.0], 10, 0.01, 1.0, 0)


def test_weak_error_shrinks_with_eta():
    m = quadratic(1.0, 1)
    f = DiffusionField(m, delta=0.5)
    c = weak_error_curve(m, f, lambda X: X[..., 0] ** 2, [0.2, 0.1, 0.05], 1.0, 4000, 0,
                         np.array([1.0]), substeps=10)
    assert np.all(np.diff(c.errors) < 0)
    assert 0.7 < c.slope < 1.3


def test_block_layout_and_generators():
    assert block_layout(2500) == [(0, 1024), (1024, 2048), (2048, 2500)]
    assert block_layout(10) == [(0, 10)]
    a = block_generator(1, 2, 0).random(3)
    np.testing.assert_array_equal(a, block_generator(1, 2, 0).random(3))
    assert not np.array_equal(a, block_generator(1, 2, 1).random(3))
    out = map_blocks(lambda s, e, rng: (s, e), 3000, 0, n_jobs=2)
    assert out == block_layout(3000)
