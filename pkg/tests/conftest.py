import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from ehrstream.events import Event, PatientTimeline

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CODES = ["A", "B", "C", "LAB1", "LAB2", "DX9"]


@st.composite
def events_lists(draw, max_size=40):
    n = draw(st.integers(0, max_size))
    out = []
    for _ in range(n):
        t = draw(st.integers(0, 10**8))
        code = draw(st.sampled_from(CODES))
        kind = draw(st.integers(0, 2))
        if kind == 0:
            value = None
        elif kind == 1:
            value = draw(st.sampled_from(["low", "normal", "high"]))
        else:
            value = draw(st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))
        visit = draw(st.one_of(st.none(), st.sampled_from(["v1", "v2", "v3"])))
        out.append(Event(t, code, value, visit))
    return out


@st.composite
def timelines(draw, pid="p1", max_size=40):
    evs = draw(events_lists(max_size=max_size))
    evs.sort(key=lambda e: e.time)
    return PatientTimeline(pid, tuple(evs))


def random_timeline(rng: np.random.Generator, pid: str, n: int, n_codes: int = 30,
                    visit_len: float = 4.0) -> PatientTimeline:
    """Visit-structured timeline with mixed gaps, values and visit ids."""
    evs = []
    t = int(rng.integers(0, 10**9))
    v = 0
    left_in_visit = 0
    for i in range(n):
        if left_in_visit == 0:
            v += 1
            left_in_visit = 1 + rng.poisson(visit_len - 1)
            if i:
                t += int(rng.choice([0, 3600, 86400, 3 * 86400, 10 * 86400, 40 * 86400, 500 * 86400]))
        else:
            t += int(rng.integers(0, 600))
        left_in_visit -= 1
        c = int(rng.integers(0, n_codes))
        u = rng.random()
        value = None if u < 0.6 else (str(rng.choice(["lo", "hi"])) if u < 0.8 else float(rng.normal(50, 10)))
        evs.append(Event(t, f"X{c}", value, f"v{v}"))
    return PatientTimeline(pid, tuple(evs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
