import numpy as np
import pytest

from dynrecon.dynsys import ObservationMap, SystemSpec, generate_trajectory


@pytest.fixture(scope="session")
def l63():
    return SystemSpec("lorenz63")


@pytest.fixture(scope="session")
def l63_bundle(l63):
    obs = ObservationMap("full-state")
    b = generate_trajectory(l63, n_steps=20000, obs=obs, seed=3)
    return b.with_observation(obs.normalized(b.states))


@pytest.fixture(scope="session")
def torus_bundle():
    spec = SystemSpec("torus", rho=(0.3, 0.7))
    obs = ObservationMap("custom-smooth", coords=(0,), name="trig")
    return generate_trajectory(spec, n_steps=6000, n_transient=0, obs=obs, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, printed in the terminal summary
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    n = mark.args[0]
    detail = dict(item.user_properties).get("detail", "")
    ok, prev_detail = _CRITERIA.get(n, (True, ""))
    _CRITERIA[n] = (ok and rep.passed, "; ".join(x for x in (prev_detail, detail) if x))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
