import io
import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehrstream.events import (
    DatasetSplit,
    Event,
    IngestError,
    PatientTimeline,
    TaskLabel,
    dumps_events,
    ingest,
    iter_csv_rows,
    iter_jsonl_rows,
    parse_json_row,
    read_events,
    read_labels,
    slice_before,
    split,
    write_labels,
)

from conftest import timelines


def rows(*triples):
    return [(pid, Event(t, code)) for pid, t, code in triples]


def test_empty_stream_gives_empty_collection():
    assert ingest([]) == []
    assert ingest(iter_jsonl_rows(io.StringIO(""))) == []


def test_unsorted_rows_are_sorted():
    (tl,) = ingest(rows(("p1", 20, "A"), ("p1", 10, "B")))
    assert tl.codes == ["B", "A"]
    assert tl.times == [10, 20]


def test_equal_times_keep_input_order_for_every_permutation():
    for perm in itertools.permutations("ABC"):
        (tl,) = ingest(rows(*[("p1", 5, c) for c in perm]))
        assert tl.codes == list(perm)


@given(st.lists(st.tuples(st.sampled_from(["p1", "p2", "p3"]), st.integers(0, 5), st.sampled_from("ABCDE")),
                max_size=60))
def test_ingest_matches_brute_force_stable_sort(triples):
    got = ingest(rows(*triples))
    # oracle: insertion sort, which is stable by construction
    expected = {}
    for pid, t, c in triples:
        lst = expected.setdefault(pid, [])
        j = len(lst)
        while j > 0 and lst[j - 1][0] > t:
            j -= 1
        lst.insert(j, (t, c))
    assert [tl.patient_id for tl in got] == sorted(expected)
    for tl in got:
        assert [(e.time, e.code) for e in tl.events] == expected[tl.patient_id]
    assert sum(len(tl) for tl in got) == len(triples)


def test_strict_mode_rejects_out_of_order():
    with pytest.raises(IngestError) as ei:
        ingest(rows(("p1", 20, "A"), ("p1", 10, "B")), strict=True)
    assert ei.value.row == 2


@pytest.mark.parametrize(
    "obj",
    [
        {"time": 1, "code": "A"},
        {"patient_id": "p", "time": 1},
        {"patient_id": "p", "time": "soon", "code": "A"},
        {"patient_id": "p", "time": 1.5, "code": "A"},
        {"patient_id": "p", "time": -3, "code": "A"},
        {"patient_id": "p", "time": 1, "code": "A", "value": {"num": float("inf")}},
        {"patient_id": "p", "time": 1, "code": "A", "value": {"num": "nan"}},
        {"patient_id": "p", "time": 1, "code": "A", "value": 3},
        {"patient_id": "p", "time": 1, "code": "A", "value": {"cat": 3}},
    ],
)
def test_malformed_rows_rejected(obj):
    with pytest.raises(IngestError):
        parse_json_row(obj, 7)


def test_rejection_carries_row_number():
    text = '{"patient_id":"p","time":1,"code":"A"}\n\n{"patient_id":"p","time":"x","code":"A"}\n'
    with pytest.raises(IngestError) as ei:
        ingest(iter_jsonl_rows(io.StringIO(text)))
    assert ei.value.row == 3
    csv_text = "patient_id,time,code,value_type,value,visit_id\np,1,A,,,\np,2,A,num,abc,\n"
    with pytest.raises(IngestError) as ei:
        ingest(iter_csv_rows(io.StringIO(csv_text)))
    assert ei.value.row == 3


@given(st.lists(timelines(), max_size=3))
def test_jsonl_and_csv_round_trip(tls):
    tls = [PatientTimeline(f"p{i}", tl.events) for i, tl in enumerate(tls) if len(tl)]
    for fmt, reader in (("jsonl", iter_jsonl_rows), ("csv", iter_csv_rows)):
        back = ingest(reader(io.StringIO(dumps_events(tls, fmt))))
        assert back == tls


def test_read_events_by_suffix(tmp_path):
    tl = PatientTimeline("p", (Event(1, "A", 2.5, "v"), Event(2, "B", "hi")))
    for fmt in ("jsonl", "csv"):
        p = tmp_path / f"e.{fmt}"
        p.write_text(dumps_events([tl], fmt))
        assert read_events(p) == [tl]


def test_wire_format_fields():
    tl = PatientTimeline("p", (Event(1, "A", 2.5, "v"), Event(2, "B", "hi"), Event(3, "C")))
    lines = [json.loads(x) for x in dumps_events([tl]).splitlines()]
    assert lines[0] == {"patient_id": "p", "time": 1, "code": "A", "value": {"num": 2.5}, "visit_id": "v"}
    assert lines[1]["value"] == {"cat": "hi"}
    assert lines[2]["value"] is None and lines[2]["visit_id"] is None


def test_labels_round_trip(tmp_path):
    labs = [TaskLabel("p1", 100, True, "t"), TaskLabel("p2", 5, False, "u")]
    p = tmp_path / "labels.csv"
    with open(p, "w", newline="") as fh:
        write_labels(labs, fh)
    assert p.read_text().splitlines()[0] == "patient_id,prediction_time,label,task_name"
    assert read_labels(p) == labs


def test_slice_before_examples():
    tl = PatientTimeline("p", tuple(Event(t, "A") for t in (10, 20, 30)))
    assert slice_before(tl, 25).times == [10, 20]
    assert slice_before(tl, 5).times == []
    assert slice_before(tl, 20).times == [10, 20]


@given(timelines(), st.integers(-5, 10**8 + 5))
def test_slice_before_matches_filter(tl, cut):
    assert slice_before(tl, cut).events == tuple(e for e in tl.events if e.time <= cut)
    if len(tl):
        assert slice_before(tl, max(tl.times)) == tl
    assert len(slice_before(tl, -1)) == 0


def test_split_sizes():
    ids = [f"p{i}" for i in range(10)]
    sp = split(ids, (0.8, 0.1, 0.1), seed=1)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (8, 1, 1)
    sp7 = split(ids[:7], (0.5, 0.25, 0.25), seed=1)
    assert (len(sp7.train), len(sp7.val), len(sp7.test)) == (4, 2, 1)


@given(st.integers(0, 200), st.integers(0, 2**63 - 1),
       st.sampled_from([(0.8, 0.1, 0.1), (0.5, 0.25, 0.25), (1 / 3, 1 / 3, 1 / 3), (1.0, 0.0, 0.0)]))
def test_split_rule_and_determinism(n, seed, fr):
    ids = [f"p{i}" for i in range(n)]
    sp = split(ids, fr, seed)
    # oracle for the remainder rule
    sizes = [int(np.floor(f * n + 1e-9)) for f in fr]
    for i in range(n - sum(sizes)):
        sizes[i % 3] += 1
    assert [len(sp.train), len(sp.val), len(sp.test)] == sizes
    assert sp.train | sp.val | sp.test == set(ids)
    assert split(list(reversed(ids)), fr, seed) == sp


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        split(["a"], (0.5, 0.5, 0.5), 0)
    with pytest.raises(ValueError):
        split(["a"], (1.2, -0.2, 0.0), 0)


def test_split_json_round_trip():
    sp = split([f"p{i}" for i in range(20)], seed=3)
    assert DatasetSplit.from_json(json.loads(json.dumps(sp.to_json()))) == sp
    with pytest.raises(ValueError):
        DatasetSplit({"a"}, {"a"}, set())


def test_event_validation():
    with pytest.raises(ValueError):
        Event(-1, "A")
    with pytest.raises(TypeError):
        Event(1.5, "A")
    with pytest.raises(ValueError):
        Event(1, "A", float("nan"))
    with pytest.raises(ValueError):
        PatientTimeline("p", (Event(2, "A"), Event(1, "B")))
