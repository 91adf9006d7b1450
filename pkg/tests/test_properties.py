import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehrstream.events import Event, PatientTimeline, TaskLabel
from ehrstream.properties import (
    UndefinedMetricError,
    histogram,
    irregularity,
    metric_rows,
    patient_metrics,
    quartile_split,
    repetition_rate,
    task_metric_values,
)

from oracles import irregularity_oracle, rr_oracle


@pytest.mark.parametrize(
    "seq,n,want",
    [("abc", 1, 0.0), ("aaa", 1, 1.0), ("abacb", 1, 2 / 3), ("ababc", 2, 1 / 3), ("", 1, None), ("ab", 3, None)],
)
def test_repetition_examples(seq, n, want):
    assert repetition_rate(list(seq), n) == want


def test_repetition_rejects_bad_n():
    with pytest.raises(ValueError):
        repetition_rate([1, 2], 0)


def test_repetition_matches_oracle_on_random_sequences():
    rng = np.random.default_rng(2024)
    for _ in range(300):
        m = int(rng.integers(0, 120))
        seq = list(rng.integers(0, int(rng.integers(1, 51)), m))
        for n in (1, 2, 3, 4):
            assert repetition_rate(seq, n) == rr_oracle(seq, n)


@given(st.lists(st.integers(0, 6), max_size=60), st.integers(1, 4), st.permutations(range(7)))
def test_repetition_invariant_under_relabeling(seq, n, perm):
    rr = repetition_rate(seq, n)
    assert rr == repetition_rate([perm[s] for s in seq], n)
    if rr is not None:
        assert 0.0 <= rr <= 1.0


@given(st.lists(st.integers(0, 6), min_size=1, max_size=60))
def test_fresh_symbol_never_increases_rr1(seq):
    assert repetition_rate(seq + [99], 1) <= repetition_rate(seq, 1)


def test_irregularity_examples():
    s = irregularity([0, 10, 20, 30])
    assert (s.mean_s, s.std_s, s.iqr_s) == (10.0, 0.0, 0.0)
    s = irregularity([0, 10, 40])
    assert (s.mean_s, s.std_s, s.iqr_s) == (20.0, 10.0, 10.0)
    with pytest.raises(UndefinedMetricError):
        irregularity([5])
    tl = PatientTimeline("p", (Event(0, "A"), Event(10, "B"), Event(40, "C")))
    assert irregularity(tl) == s


def test_irregularity_matches_oracle():
    rng = np.random.default_rng(99)
    for _ in range(300):
        m = int(rng.integers(2, 200))
        times = np.cumsum(rng.choice([0, 1, 60, 3600, 86400 * 30], m) * rng.integers(0, 5, m)).tolist()
        got = irregularity(times)
        want = irregularity_oracle(times)
        for g, w in zip((got.mean_s, got.std_s, got.iqr_s), want):
            assert g == pytest.approx(w, rel=1e-9, abs=1e-9)


@given(st.lists(st.integers(0, 10**6), min_size=2, max_size=50), st.integers(0, 10**6), st.integers(1, 50))
def test_irregularity_translation_and_dilation(gaps, c, a):
    times = np.cumsum(gaps).tolist()
    base = irregularity(times)
    shifted = irregularity([t + c for t in times])
    dilated = irregularity([a * t for t in times])
    for x, y, z in zip((base.mean_s, base.std_s, base.iqr_s),
                       (shifted.mean_s, shifted.std_s, shifted.iqr_s),
                       (dilated.mean_s, dilated.std_s, dilated.iqr_s)):
        assert y == pytest.approx(x, rel=1e-9, abs=1e-6)
        assert z == pytest.approx(a * x, rel=1e-9, abs=1e-6)
        assert x >= 0


def test_quartile_examples():
    q = quartile_split({f"p{i}": float(i) for i in range(8)})
    assert [sum(1 for v in q.values() if v == name) for name in ("Q1", "Q2", "Q3", "Q4")] == [2, 2, 2, 2]
    assert q["p0"] == q["p1"] == "Q1"
    q = quartile_split({f"p{i}": float(i) for i in range(10)})
    assert [sum(1 for v in q.values() if v == name) for name in ("Q1", "Q2", "Q3", "Q4")] == [3, 3, 2, 2]
    q = quartile_split({pid: 1.0 for pid in ["d", "c", "b", "a"]})
    assert q == {"a": "Q1", "b": "Q2", "c": "Q3", "d": "Q4"}
    with pytest.raises(UndefinedMetricError):
        quartile_split({"a": 1.0, "b": 2.0, "c": float("nan"), "d": 3.0})


@given(st.dictionaries(st.text(min_size=1, max_size=4), st.floats(-10, 10, allow_nan=False), min_size=4, max_size=60))
def test_quartiles_partition(values):
    q = quartile_split(values)
    assert set(q) == set(values)
    sizes = [sum(1 for v in q.values() if v == name) for name in ("Q1", "Q2", "Q3", "Q4")]
    assert max(sizes) - min(sizes) <= 1
    rank = {"Q1": 0, "Q2": 1, "Q3": 2, "Q4": 3}
    for a in values:
        for b in values:
            if values[a] < values[b]:
                assert rank[q[a]] <= rank[q[b]]


def test_histogram_examples():
    h = histogram([1, 10, 100], bins=2, scale="log10")
    assert list(h.counts) == [1, 2]
    assert h.edges == pytest.approx([1, 10, 100])
    assert list(histogram([3.0], bins=1).counts) == [1]
    assert list(histogram([], bins=4).counts) == [0, 0, 0, 0]
    with pytest.raises(ValueError):
        histogram([0.0, 1.0], scale="log10")


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), max_size=100), st.integers(1, 30))
def test_histogram_counts_sum(values, bins):
    h = histogram(values, bins)
    assert h.counts.sum() == len(values)
    assert len(h.rows()) == bins


def test_metric_rows_fixture():
    tls = [
        PatientTimeline("p1", (Event(0, "A"), Event(10, "A"), Event(40, "B"))),
        PatientTimeline("p2", (Event(0, "A"), Event(5, "B"), Event(6, "C"), Event(100, "D"))),
        PatientTimeline("p3", (Event(0, "A"),)),
    ]
    rows = metric_rows(tls)
    per = {}
    for pid, task, name, v in rows:
        per.setdefault(name, {})[pid] = v
    assert per["rr1"] == {"p1": 0.5, "p2": 0.0, "p3": 0.0}
    assert per["irregularity_std"] == {"p1": 10.0, "p2": pytest.approx(np.std([5, 1, 94]))}
    assert "p3" not in per["irregularity_mean"]
    assert set(per["rr4"]) == {"p2"}
    assert metric_rows(tls, min_events=4) == [r for r in rows if r[0] == "p2"]
    assert set(patient_metrics(["A"], [0])) == {"rr1"}


def test_task_metric_values_use_prefix():
    tl = PatientTimeline("p", (Event(0, "A"), Event(10, "A"), Event(20, "B"), Event(30, "B")))
    labels = [TaskLabel("p", 10, True, "t"), TaskLabel("p", 30, True, "u"), TaskLabel("zz", 5, False, "t")]
    vals = task_metric_values({"p": tl}, labels, "rr1")
    assert vals == {"t": {"p": 1.0}, "u": {"p": 1.0}}
    vals = task_metric_values({"p": tl}, labels, "rr2")
    assert vals == {"t": {"p": 0.0}, "u": {"p": 0.0}}
    assert task_metric_values({"p": tl}, labels, "rr1", min_events=3) == {"u": {"p": 1.0}}
