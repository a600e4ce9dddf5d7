import numpy as np
import pytest

from dynrecon.dynsys import ObservationMap, SystemSpec, generate_trajectory
from dynrecon.embed import DelayParams, delay_embed
from dynrecon.learn import (FeatureMap, FeedbackModel, RankDeficientError, build_feature_map,
                            fit_feedback, fit_horizon_models, project_empirical, projection_error,
                            training_pairs)


def fd_jacobian(fmap, Y, eps=1e-6):
    cols = []
    for j in range(Y.shape[1]):
        e = np.zeros(Y.shape[1])
        e[j] = eps
        cols.append((fmap(Y + e) - fmap(Y - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def test_affine_definition():
    f = build_feature_map("affine", 2)
    assert f.M == 3
    assert np.array_equal(f(np.array([[2.0, -3.0]])), [[1, 2, -3]])


def test_fourier_definition():
    f = build_feature_map("fourier", 1, frequencies=[1])
    th = 0.7
    assert np.allclose(f(np.array([[th]])), [[1, np.cos(th), np.sin(th)]])


def test_rbf_at_center():
    c = np.array([[0.5, -1.0]])
    f = build_feature_map("rbf", 2, centers=c, bandwidth=0.3)
    assert np.allclose(f(c), [[1, 1]])


@pytest.mark.parametrize("kind,kw", [("affine", {}), ("fourier", dict(frequencies=[1, 2])),
                                     ("fourier", dict(frequencies=[1, 3], angles="pairs")),
                                     ("rbf", dict(n_centers=20, linear=True)), ("poly", dict(degree=3))])
def test_feature_jacobians_match_finite_differences(kind, kw, rng):
    Y = rng.uniform(-1.5, 1.5, (200, 4))
    f = build_feature_map(kind, 4, Y, **kw)
    assert np.allclose(f(Y)[:, 0], 1.0)
    J = f.jacobian(Y[:30])
    assert J.shape == (30, f.M, 4)
    assert np.allclose(J, fd_jacobian(f, Y[:30]), atol=1e-6, rtol=1e-6)
    g = FeatureMap.from_description(f.describe())
    assert np.array_equal(g(Y), f(Y))


def test_affine_targets_recovered_exactly(rng):
    Y = rng.standard_normal((400, 3))
    A = rng.standard_normal((3, 2))
    T = Y @ A + np.array([0.5, -2.0])
    m = fit_feedback(Y, T, build_feature_map("affine", 3), ridge=0)
    assert m.delta <= 1e-9 and m.train_rmse <= 1e-9
    assert np.allclose(m.coef[1:], A, atol=1e-10)
    J = m.jacobian(Y[:5])
    assert np.allclose(J, np.broadcast_to(A.T, (5, 2, 3)), atol=1e-10)


def test_constant_targets(rng):
    Y = rng.standard_normal((100, 2))
    m = fit_feedback(Y, np.full((100, 1), 3.5), build_feature_map("rbf", 2, Y, n_centers=10), ridge=0)
    assert np.allclose(m.predict(rng.standard_normal((7, 2))), 3.5, atol=1e-9)


def test_rank_deficient_without_ridge(rng):
    y = rng.standard_normal((50, 1))
    Y = np.hstack([y, 2 * y])
    with pytest.raises(RankDeficientError):
        fit_feedback(Y, y, build_feature_map("affine", 2), ridge=0)
    fit_feedback(Y, y, build_feature_map("affine", 2))    # default ridge copes


def test_model_json_roundtrip(rng):
    Y = rng.standard_normal((200, 2))
    m = fit_feedback(Y, np.sin(Y), build_feature_map("poly", 2, Y, degree=3))
    m2 = FeedbackModel.from_json(m.to_json())
    assert np.array_equal(m2.predict(Y), m.predict(Y)) and m2.delta == m.delta


def test_torus_rotation_fourier_exact(torus_bundle):
    orbit = delay_embed(torus_bundle, DelayParams(2, 2))
    fmap = build_feature_map("fourier", 4, frequencies=[1], angles="pairs")
    m = fit_horizon_models(torus_bundle, orbit, fmap, [1])[0]
    assert m.delta < 1e-6


def test_horizon_models_agree_with_single_fits(l63_bundle):
    orbit = delay_embed(l63_bundle, DelayParams(1, 3))
    fmap = build_feature_map("poly", 3, orbit, degree=2)
    ms = fit_horizon_models(l63_bundle, orbit, fmap, [0, 5, 40], ridge=1e-6, chunk=2)
    Y, T = training_pairs(l63_bundle, orbit, [0, 5, 40])
    for j, m in enumerate(ms):
        ref = fit_feedback(Y, T[:, j], fmap, ridge=1e-6, k=m.horizon)
        assert np.allclose(m.coef, ref.coef, rtol=1e-9, atol=1e-12)
        assert m.delta == pytest.approx(ref.delta, rel=1e-9)


def test_projection_in_span_and_mean_removal(rng):
    Y = rng.standard_normal((300, 2))
    f = build_feature_map("affine", 2)
    v = 1 + Y @ [2.0, -1.0]
    fitted, res = project_empirical(f, Y, v)
    assert res <= 1e-9 and np.allclose(fitted, v)
    w = rng.standard_normal(300)
    w -= w.mean()
    const = build_feature_map("poly", 2, degree=0)
    _, res0 = project_empirical(const, Y, w)
    assert res0 == pytest.approx(np.sqrt(np.mean(w ** 2)), rel=1e-12)


def test_projection_far_horizon_is_variance():
    spec = SystemSpec("lorenz63")
    obs = ObservationMap("coordinate-projection", coords=(0,))
    b = generate_trajectory(spec, n_steps=100_000, obs=obs, seed=11)
    orbit = delay_embed(b, DelayParams(3, 1))
    Y, T = training_pairs(b, orbit, [1500])
    _, res = project_empirical(build_feature_map("affine", 3), Y, T[:, 0, 0])
    assert abs(res - T.std()) <= 0.1 * T.std()


def test_delta_bounds(l63_bundle):
    orbit = delay_embed(l63_bundle, DelayParams(1, 3))
    Y, T = training_pairs(l63_bundle, orbit, [30])
    m = fit_feedback(Y, T[:, 0], build_feature_map("affine", 3), k=30)
    held = T[m.n_train:, 0]
    assert 0 <= projection_error(m)
    assert m.delta <= np.sqrt(np.mean(np.sum((held - held.mean(0)) ** 2, axis=1))) * 1.05


def test_nested_fourier_monotone():
    spec = SystemSpec("torus", rho=(0.3, 0.7))
    b = generate_trajectory(spec, n_steps=4000, n_transient=0, seed=2)
    target = np.exp(np.cos(b.states[1:, 0])) + np.sin(2 * b.states[1:, 1])
    Y = b.states[:-1]
    deltas = [fit_feedback(Y, target, build_feature_map("fourier", 2, frequencies=list(range(1, k + 1))),
                           ridge=0).delta for k in (1, 2, 3, 4)]
    assert all(b2 <= a + 1e-9 for a, b2 in zip(deltas, deltas[1:]))


def test_ridge_monotone_training_residual(rng):
    Y = rng.standard_normal((300, 3))
    t = np.tanh(Y[:, 0] * Y[:, 1]) + 0.1 * rng.standard_normal(300)
    f = build_feature_map("poly", 3, Y, degree=3)
    r = [fit_feedback(Y, t, f, ridge=lam).train_rmse for lam in (0, 1e-4, 1e-2, 1, 100)]
    assert all(b2 >= a - 1e-12 for a, b2 in zip(r, r[1:]))
