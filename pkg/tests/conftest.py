import sys
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")

finite = st.floats(min_value=-10, max_value=10, allow_nan=False, allow_infinity=False)


@st.composite
def unit_quats(draw):
    q = np.array([draw(st.floats(-1, 1)) for _ in range(4)])
    n = np.linalg.norm(q)
    if n < 1e-3:
        q, n = np.array([1.0, 0, 0, 0]), 1.0
    return q / n


@st.composite
def rigid_dqs(draw):
    from qrbs.dualquat import dq_from_rt, quat_to_matrix

    R = quat_to_matrix(draw(unit_quats()))
    t = np.array([draw(finite) for _ in range(3)])
    return dq_from_rt(R, t)


@st.composite
def simplex(draw, n):
    w = np.array([draw(st.floats(0, 1)) for _ in range(n)])
    if w.sum() < 1e-6:
        w = np.ones(n)
    return w / w.sum()


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


def random_dqs(rng, n):
    from qrbs.dualquat import dq_from_rt, quat_to_matrix

    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return np.stack([dq_from_rt(quat_to_matrix(qi), rng.normal(size=3)) for qi in q])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        title, ok, dt, budget = mod.RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}  {title}  ({dt:.1f}s / {budget:g}s)")
