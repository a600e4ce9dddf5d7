import math

import numpy as np
import pytest

from dynrecon.dynsys import ObservationMap, SystemSpec, generate_trajectory, step_system
from dynrecon.embed import DelayParams, delay_embed, delay_g, drive, reservoir_g, reservoir_init
from dynrecon.forecast import (AutocorrCurve, ExactDelayFeedback, ReconstructedSystem, ZeroFeedback,
                               autocorrelation, decorrelation_time, direct_bound, error_direct,
                               error_iterative, guard_ball, iterate_reconstruction,
                               mixed_spectrum_diagnostic)
from dynrecon.learn import build_feature_map, fit_horizon_models


@pytest.fixture(scope="module")
def l63_q1(l63_bundle):
    orbit = delay_embed(l63_bundle, DelayParams(1, 3))
    return orbit, ReconstructedSystem(orbit.params, ExactDelayFeedback(l63_bundle.spec, l63_bundle.obs))


def test_single_step_definition(l63_bundle, rng):
    orbit = delay_embed(l63_bundle, DelayParams(2, 3))
    fmap = build_feature_map("affine", 6)
    m = fit_horizon_models(l63_bundle, orbit, fmap, [1])[0]
    sysm = ReconstructedSystem(orbit.params, m)
    u, y = rng.standard_normal(3), rng.standard_normal(6)
    u1, y1 = sysm.step(u, y)
    assert np.array_equal(u1, m.predict(y[None])[0])
    assert np.array_equal(y1, delay_g(u, y, orbit.params))


def test_iterate_zero_steps(l63_q1, l63_bundle):
    orbit, sysm = l63_q1
    it = iterate_reconstruction(sysm, (l63_bundle.observations[1], orbit.states[0]), 0)
    assert it.u.shape == (1, 3) and it.diverged_at is None


def test_exact_feedback_conjugacy(l63_q1, l63_bundle):
    orbit, sysm = l63_q1
    i = 100
    it = iterate_reconstruction(sysm, (l63_bundle.observations[orbit.offset + i], orbit.states[i]), 40)
    truth = l63_bundle.observations[orbit.offset + i:orbit.offset + i + 41]
    assert np.max(np.abs(it.u - truth)) <= 1e-8
    assert np.max(np.abs(it.y[1:] - orbit.states[i + 1:i + 41])) <= 1e-8


def test_exact_feedback_jacobian_fd(l63_bundle, rng):
    w = ExactDelayFeedback(l63_bundle.spec, l63_bundle.obs)
    Y = l63_bundle.observations[rng.choice(5000, 5)]
    J = w.jacobian(Y)
    eps = 1e-6
    fd = np.stack([(w(Y + eps * e) - w(Y - eps * e)) / (2 * eps) for e in np.eye(3)], axis=-1)
    assert np.allclose(J, fd, rtol=1e-6, atol=1e-6)


def test_reservoir_zero_feedback(l63_bundle):
    p = reservoir_init(40, 3, 0.9, seed=1)
    orb = drive(p, l63_bundle.observations[:800], washout=300)
    sysm = ReconstructedSystem(p, ZeroFeedback(3, 40))
    it = iterate_reconstruction(sysm, (l63_bundle.observations[300], orb.states[0]), 10)
    assert not it.u[1:].any()
    assert np.array_equal(it.y[1], reservoir_g(p, l63_bundle.observations[300], orb.states[0]))


def test_iterative_curve_exact_feedback(l63_q1, l63_bundle):
    orbit, sysm = l63_q1
    c = error_iterative(sysm, l63_bundle, orbit, np.arange(0, 15000, 150), 50)
    assert c.values[0] == 0.0
    assert np.max(c.values) <= 1e-6


def test_iterative_curve_threads_and_permutation(l63_bundle):
    orbit = delay_embed(l63_bundle, DelayParams(1, 3))
    fmap = build_feature_map("poly", 3, orbit.states[:8000], degree=2)
    m = fit_horizon_models(l63_bundle, type(orbit)("delay", orbit.states[:8000].copy(), 1, 0, orbit.params),
                           fmap, [1])[0]
    sysm = ReconstructedSystem(orbit.params, m)
    ens = np.arange(9000, 15000, 23)
    a = error_iterative(sysm, l63_bundle, orbit, ens, 200, guard=guard_ball(l63_bundle, orbit))
    b = error_iterative(sysm, l63_bundle, orbit, ens, 200, guard=guard_ball(l63_bundle, orbit), threads=4)
    assert np.array_equal(a.values, b.values)
    c = error_iterative(sysm, l63_bundle, orbit, ens[::-1], 200, guard=guard_ball(l63_bundle, orbit))
    assert np.allclose(a.values, c.values, rtol=1e-12)


def test_direct_curve_matches_holdout_residuals(l63_bundle):
    orbit = delay_embed(l63_bundle, DelayParams(1, 3))
    fmap = build_feature_map("poly", 3, orbit, degree=2)
    ms = fit_horizon_models(l63_bundle, orbit, fmap, range(31))
    c = error_direct(ms, l63_bundle, orbit)
    assert np.allclose(c.values, [m.delta for m in ms], rtol=1e-9, atol=1e-12)
    assert np.all(c.values <= 1.05 * c.phi_norm)


def test_direct_constant_space(l63_bundle):
    orbit = delay_embed(l63_bundle, DelayParams(1, 3))
    fmap = build_feature_map("poly", 3, degree=0)
    ms = fit_horizon_models(l63_bundle, orbit, fmap, range(11))
    c = error_direct(ms, l63_bundle, orbit)
    for n, m in enumerate(ms):
        held = l63_bundle.observations[orbit.offset + m.n_train + n:orbit.offset + m.n_train + m.n_holdout + n]
        assert c.values[n] == pytest.approx(np.sqrt(np.mean(np.sum((held - m.coef[0]) ** 2, axis=1))), rel=1e-10)
        assert c.values[n] == pytest.approx(np.sqrt(np.mean(np.sum((held - held.mean(0)) ** 2, axis=1))), rel=0.05)


def test_autocorrelation_torus_closed_form():
    spec = SystemSpec("torus", rho=(0.3, 0.7))
    obs = ObservationMap("custom-smooth", coords=(0,), name="trig")
    b = generate_trajectory(spec, n_steps=50000, n_transient=0, seed=3)
    ac = autocorrelation(np.cos(b.states[:, 0]), 100)
    assert ac.values[0] == 1.0
    assert np.allclose(ac.values, np.cos(0.3 * np.arange(101)), atol=1e-3)


def test_autocorrelation_l63_decays():
    spec = SystemSpec("lorenz63")
    b = generate_trajectory(spec, n_steps=100000, obs=ObservationMap("coordinate-projection", coords=(0,)),
                            seed=4)
    ac = autocorrelation(b, 1500, centered=True)
    tau = decorrelation_time(ac)
    assert tau is not None
    assert np.all(np.abs(ac.values[4 * tau:]) < 0.1)


def test_direct_bound_cases():
    one = AutocorrCurve(np.ones(5), False, 1.0)
    zero = AutocorrCurve(np.r_[1.0, np.zeros(4)], False, 1.0)
    assert not direct_bound(one, 2.0).any()
    assert np.allclose(direct_bound(zero, 2.0)[1:], 2.0)


def test_torus_direct_bound_shape():
    spec = SystemSpec("torus", rho=(0.3, 0.7))
    obs = ObservationMap("custom-smooth", coords=(0,), name="trig")
    b = generate_trajectory(spec, n_steps=6000, n_transient=0, obs=obs, seed=1)
    ac = autocorrelation(b, 50)
    bound = direct_bound(ac, ac.norm)
    assert np.allclose(bound, ac.norm * np.abs(np.sin(0.3 * np.arange(51))), atol=2e-3)


def test_periodogram_constant_and_sine():
    rep = mixed_spectrum_diagnostic(np.full(200, 0.7))
    assert rep.ratio == 1.0
    rho = 2 * math.pi * 0.05
    x = 1 + 0.1 * np.sin(rho * np.arange(400))
    rep = mixed_spectrum_diagnostic(x, rho)
    assert rep.within_one_bin and rep.peak_bin == 20 and rep.ratio > 100
    with pytest.raises(ValueError):
        mixed_spectrum_diagnostic(x[:30], rho)


def test_curve_csv(tmp_path, l63_q1, l63_bundle):
    orbit, sysm = l63_q1
    c = error_iterative(sysm, l63_bundle, orbit, np.arange(0, 1000, 100), 5)
    c.to_csv(tmp_path / "c.csv", tmp_path / "c.json")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "n,t,rms_error,n_diverged,bound" and len(lines) == 7
