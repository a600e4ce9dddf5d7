"""Randomised property suites, 1000 cases each."""
import tempfile
from pathlib import Path

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from dynrecon.cocycle import CocycleGenerator, cocycle_product, graph_transform
from dynrecon.embed import DelayParams, delay_embed, delay_g
from dynrecon.expcli.config import parse_config_text, with_overrides
from dynrecon.expcli.runner import run_experiment
from dynrecon.learn import build_feature_map, project_empirical

CASES = settings(max_examples=1000, deadline=None, derandomize=True,
                 suppress_health_check=[HealthCheck.too_slow])

seeds = st.integers(0, 2 ** 32 - 1)


def gen_from(seed, n, k, spread):
    rng = np.random.default_rng(seed)
    return CocycleGenerator(np.eye(k) + spread * rng.standard_normal((n, k, k)) / np.sqrt(k), "synthetic")


@CASES
@given(seed=seeds, k=st.integers(1, 6), m=st.integers(0, 20), n=st.integers(0, 20),
       spread=st.floats(0.05, 1.0))
def test_cocycle_composition(seed, k, m, n, spread):
    gen = gen_from(seed, m + n, k, spread)
    whole = cocycle_product(gen, m + n).matrix()
    split = cocycle_product(gen, n, start=m).matrix() @ cocycle_product(gen, m).matrix()
    assert np.linalg.norm(whole - split) <= 1e-8 * np.linalg.norm(whole)


@CASES
@given(seed=seeds, L=st.integers(1, 4), kind=st.sampled_from(["affine", "poly", "rbf", "fourier"]),
       n=st.integers(40, 200), d=st.integers(1, 3))
def test_projection_idempotent(seed, L, kind, n, d):
    rng = np.random.default_rng(seed)
    Y = rng.uniform(-2, 2, (n, L))
    kw = {"poly": dict(degree=2), "rbf": dict(n_centers=8), "fourier": dict(frequencies=[1]),
          "affine": {}}[kind]
    fmap = build_feature_map(kind, L, Y, **kw)
    V = rng.standard_normal((n, d)) * rng.uniform(0.1, 10)
    once, _ = project_empirical(fmap, Y, V)
    twice, res = project_empirical(fmap, Y, once)
    scale = max(1.0, np.abs(once).max())
    assert np.max(np.abs(twice - once)) <= 1e-10 * scale
    assert res <= 1e-10 * scale
    assert np.linalg.norm(once) <= np.linalg.norm(V) * (1 + 1e-12)


@CASES
@given(seed=seeds, k=st.integers(1, 5), n=st.integers(0, 30), alpha=st.floats(-10, 10),
       beta=st.floats(-10, 10))
def test_graph_transform_linear(seed, k, n, alpha, beta):
    rng = np.random.default_rng(seed)
    gen = gen_from(seed, max(n, 1), k, 0.3)
    d1, d2 = rng.standard_normal((2, n + 1, k))
    lhs = graph_transform(gen, alpha * d1 + beta * d2, n)
    rhs = alpha * graph_transform(gen, d1, n) + beta * graph_transform(gen, d2, n)
    scale = max(1.0, abs(alpha) * np.linalg.norm(graph_transform(gen, d1, n))
                + abs(beta) * np.linalg.norm(graph_transform(gen, d2, n)))
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * scale


@CASES
@given(seed=seeds, Q=st.integers(1, 8), d=st.integers(1, 4), N=st.integers(10, 60),
       scale=st.floats(1e-6, 1e6))
def test_delay_identity_exact(seed, Q, d, N, scale):
    phi = np.random.default_rng(seed).standard_normal((N + Q, d)) * scale
    prm = DelayParams(Q, d)
    orb = delay_embed(phi, prm)
    nxt = delay_g(phi[orb.offset:orb.offset + len(orb) - 1], orb.states[:-1], prm)
    assert np.array_equal(nxt, orb.states[1:])


PIPELINE = """
[run]
seed = 1
[system]
kind = "torus"
steps = 700
transient = 0
[observation]
kind = "custom-smooth"
name = "trig"
coords = [0]
normalize = false
[embedding]
paradigm = ["delay", "reservoir"]
Q = 2
L = 8
washout = 50
[hypothesis]
kind = "fourier"
frequencies = [1]
angles = "pairs"
[hypothesis.reservoir]
kind = "affine"
[forecast]
horizon = 20
ensemble = 150
train = 300
[analyses]
bounds = true
slopes = true
"""
_BASE = parse_config_text(PIPELINE, "pipeline.toml")


def _outputs(d: Path):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".json") and p.name != "report.json"}


@CASES
@given(seed=st.integers(0, 2 ** 31), threads=st.integers(2, 6))
def test_pipeline_bytes_independent_of_threads(seed, threads):
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp, "a"), Path(tmp, "b")
        ra = run_experiment(with_overrides(_BASE, seed=seed, out=str(a), threads=1))
        rb = run_experiment(with_overrides(_BASE, seed=seed, out=str(b), threads=threads))
        assert _outputs(a) == _outputs(b)
        assert ra.summary == rb.summary
