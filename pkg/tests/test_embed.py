import numpy as np
import pytest

from dynrecon.dynsys import ObservationMap, SystemSpec, generate_trajectory
from dynrecon.embed import (DelayParams, ReservoirParams, delay_embed, delay_g, delay_jacobians, drive,
                            fixed_point, injectivity_diagnostic, reservoir_g, reservoir_init,
                            reservoir_jacobians)


def power_iteration_sigma_max(A, iters=5000, seed=0):
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    for _ in range(iters):
        v = A.T @ (A @ v)
        v /= np.linalg.norm(v)
    return np.linalg.norm(A @ v)


def test_reservoir_norms():
    p = reservoir_init(300, 3, 0.9, seed=1)
    assert np.linalg.norm(p.W_Y, 2) == pytest.approx(0.9, abs=1e-10)
    assert np.linalg.norm(p.W_in, 2) == pytest.approx(1.0, abs=1e-10)
    assert power_iteration_sigma_max(p.W_Y) == pytest.approx(0.9, abs=1e-8)
    assert np.all(np.abs(p.v_bias) <= 1)


def test_reservoir_seeded():
    a, b = reservoir_init(40, 2, 0.5, seed=8), reservoir_init(40, 2, 0.5, seed=8)
    assert np.array_equal(a.W_Y, b.W_Y) and np.array_equal(a.W_in, b.W_in)
    assert np.array_equal(a.v_bias, b.v_bias)


@pytest.mark.parametrize("lam", [0.0, 1.0, 1.2])
def test_reservoir_rejects_bad_lambda(lam):
    with pytest.raises(ValueError, match="contraction factor"):
        reservoir_init(10, 1, lam)


def test_reservoir_zero_params():
    z = ReservoirParams(5, 2, 0.5, np.zeros((5, 2)), np.zeros((5, 5)), np.zeros(5))
    assert np.array_equal(reservoir_g(z, [3.0, -2.0], np.ones(5)), np.zeros(5))


def test_reservoir_lipschitz_in_y(rng):
    p = reservoir_init(50, 2, 0.9, seed=2)
    for _ in range(1000):
        u = rng.standard_normal(2) * 3
        y, y2 = rng.standard_normal(50), rng.standard_normal(50)
        g1, g2 = reservoir_g(p, u, y), reservoir_g(p, u, y2)
        assert np.max(np.abs(g1)) < 1
        assert np.linalg.norm(g1 - g2) <= 0.9 * np.linalg.norm(y - y2) + 1e-15


def test_reservoir_jacobian_bounds(l63_bundle):
    p = reservoir_init(100, 3, 0.9, seed=3)
    orb = drive(p, l63_bundle.observations[:2000], washout=200)
    idx = np.linspace(0, len(orb) - 2, 100).astype(int)
    u = l63_bundle.observations[orb.offset + idx]
    Gu, Gy = reservoir_jacobians(p, u, orb.states[idx])
    assert np.all(np.linalg.norm(Gy, 2, axis=(1, 2)) <= 0.9 + 1e-12)
    assert np.all(np.linalg.norm(Gu, 2, axis=(1, 2)) <= 1 + 1e-12)


def test_drive_consecutive_and_boundary(rng):
    p = reservoir_init(30, 1, 0.8, seed=4)
    u = rng.standard_normal((40, 1))
    orb = drive(p, u, washout=10)
    for i in range(len(orb) - 1):
        assert np.array_equal(orb.states[i + 1], reservoir_g(p, u[orb.offset + i], orb.states[i]))
    assert len(drive(p, u, washout=39)) == 1


def test_drive_contraction_telescoping(rng):
    p = reservoir_init(60, 2, 0.9, seed=5)
    u = rng.standard_normal((300, 2))
    y0, y1 = rng.uniform(-1, 1, 60), rng.uniform(-1, 1, 60)
    a, b = drive(p, u, y0, washout=0), drive(p, u, y1, washout=0)
    gap = np.linalg.norm(a.states - b.states, axis=1)
    assert np.all(gap <= 0.9 ** np.arange(300) * gap[0] * (1 + 1e-12) + 1e-300)
    w = 100
    aw, bw = drive(p, u, y0, washout=w), drive(p, u, y1, washout=w)
    assert np.linalg.norm(aw.states[0] - bw.states[0]) <= 0.9 ** w * np.linalg.norm(y0 - y1)


def test_constant_input_fixed_point(rng):
    p = reservoir_init(40, 1, 0.7, seed=6)
    u = np.array([0.4])
    ystar = fixed_point(p, u)
    assert np.allclose(reservoir_g(p, u, ystar), ystar, atol=1e-13)
    y0 = rng.uniform(-1, 1, 40)
    orb = drive(p, np.tile(u, (60, 1)), y0, washout=0)
    err = np.linalg.norm(orb.states - ystar, axis=1)
    assert np.all(err <= 0.7 ** np.arange(60) * err[0] + 1e-13)


def test_delay_windows():
    o = delay_embed(np.arange(1.0, 6.0), DelayParams(3, 1))
    assert np.array_equal(o.states, [[3, 2, 1], [4, 3, 2]])
    assert o.offset == 3


def test_delay_q1_is_phi(l63_bundle):
    o = delay_embed(l63_bundle, DelayParams(1, 3))
    assert np.array_equal(o.states, l63_bundle.observations[:-1])


def test_delay_identity_and_blocks(l63_bundle):
    prm = DelayParams(4, 3)
    o = delay_embed(l63_bundle, prm)
    phi = l63_bundle.observations
    nxt = delay_g(phi[o.offset:o.offset + len(o) - 1], o.states[:-1], prm)
    assert np.array_equal(nxt, o.states[1:])
    for j in range(4):
        assert np.array_equal(o.states[:, 3 * j:3 * j + 3], phi[o.offset - 1 - j:o.offset - 1 - j + len(o)])


def test_delay_g_cases():
    p1 = DelayParams(1, 2)
    assert np.array_equal(delay_g([5.0, 6.0], [1.0, 2.0], p1), [5, 6])
    p = DelayParams(3, 2)
    out = delay_g(np.zeros(2), np.array([1.0, 0, 0, 0, 0, 0]), p)
    assert np.array_equal(out, [0, 0, 1, 0, 0, 0])


def test_delay_jacobians_equal_the_linear_map(rng):
    p = DelayParams(3, 2)
    G1, G2 = delay_jacobians(p)
    assert np.array_equal(G1[:2], np.eye(2)) and not G1[2:].any()
    u, y = rng.standard_normal(2), rng.standard_normal(6)
    assert np.array_equal(G1 @ u + G2 @ y, delay_g(u, y, p))


def test_injectivity_full_state(l63_bundle):
    o = delay_embed(l63_bundle, DelayParams(1, 3))
    rep = injectivity_diagnostic(o, l63_bundle, tol=0.02)
    assert rep.n_pairs > 0 and rep.n_false == 0


@pytest.fixture(scope="module")
def x_bundle():
    spec = SystemSpec("lorenz63")
    obs = ObservationMap("coordinate-projection", coords=(0,))
    b = generate_trajectory(spec, n_steps=100_000, obs=obs, seed=7)
    return b.with_observation(obs.normalized(b.states))


def test_injectivity_x_only_fails(x_bundle):
    o = delay_embed(x_bundle, DelayParams(1, 1))
    rep = injectivity_diagnostic(o, x_bundle, tol=1e-3, max_points=20000)
    assert rep.n_false > 0


def test_injectivity_x_delays_with_lag(x_bundle):
    sub = x_bundle.subsample(10)
    o = delay_embed(sub, DelayParams(8, 1))
    rep = injectivity_diagnostic(o, sub, tol=0.05, theiler=5)
    assert rep.n_pairs > 50
    assert rep.false_fraction < 0.01
