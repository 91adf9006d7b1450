"""Event-stream data model, wire-format ingestion and serialization.

A patient timeline is a time-sorted sequence of coded events.  Each event
carries an integer epoch-second timestamp, an opaque code, an optional value
(categorical string or finite float) and an optional visit identifier.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

Value = Union[None, str, float]


class IngestError(ValueError):
    """A source row violates the event wire format."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row
        self.reason = message


@dataclass(frozen=True, slots=True)
class Event:
    time: int
    code: str
    value: Value = None
    visit_id: str | None = None

    def __post_init__(self):
        if isinstance(self.time, bool) or not isinstance(self.time, (int, np.integer)):
            raise TypeError(f"event time must be an integer, got {self.time!r}")
        if self.time < 0:
            raise ValueError(f"event time must be >= 0, got {self.time}")
        if isinstance(self.value, float) and not math.isfinite(self.value):
            raise ValueError(f"numeric value must be finite, got {self.value}")

    @property
    def is_numeric(self) -> bool:
        return isinstance(self.value, float)

    @property
    def is_categorical(self) -> bool:
        return isinstance(self.value, str)


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if not isinstance(self.events, tuple):
            object.__setattr__(self, "events", tuple(self.events))
        ev = self.events
        for j in range(len(ev) - 1):
            if ev[j].time > ev[j + 1].time:
                raise ValueError(
                    f"patient {self.patient_id}: events not sorted at index {j}"
                )

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    @property
    def times(self) -> list[int]:
        return [e.time for e in self.events]

    @property
    def codes(self) -> list[str]:
        return [e.code for e in self.events]


@dataclass(frozen=True)
class TaskLabel:
    patient_id: str
    prediction_time: int
    label: bool
    task_name: str

    def __post_init__(self):
        if not self.task_name:
            raise ValueError("task_name must be nonempty")
        if not math.isfinite(self.prediction_time):
            raise ValueError("prediction_time must be finite")


@dataclass(frozen=True)
class DatasetSplit:
    train: frozenset[str] = field(default_factory=frozenset)
    val: frozenset[str] = field(default_factory=frozenset)
    test: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValueError("split parts must be pairwise disjoint")

    def part_of(self, patient_id: str) -> str | None:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, name):
                return name
        return None

    def to_json(self) -> dict[str, list[str]]:
        return {k: sorted(getattr(self, k)) for k in ("train", "val", "test")}

    @classmethod
    def from_json(cls, obj: Mapping[str, Sequence[str]]) -> "DatasetSplit":
        return cls(frozenset(obj["train"]), frozenset(obj["val"]), frozenset(obj["test"]))


# ---------------------------------------------------------------------------
# row parsing


def _parse_time(raw: Any, row: int) -> int:
    if isinstance(raw, bool) or raw is None:
        raise IngestError(row, f"unparseable time {raw!r}")
    if isinstance(raw, int):
        t = raw
    elif isinstance(raw, float):
        if not math.isfinite(raw) or raw != int(raw):
            raise IngestError(row, f"unparseable time {raw!r}")
        t = int(raw)
    elif isinstance(raw, str):
        try:
            t = int(raw.strip())
        except ValueError:
            raise IngestError(row, f"unparseable time {raw!r}") from None
    else:
        raise IngestError(row, f"unparseable time {raw!r}")
    if t < 0:
        raise IngestError(row, f"negative time {t}")
    return t


def _parse_num(raw: Any, row: int) -> float:
    if isinstance(raw, bool):
        raise IngestError(row, f"numeric value {raw!r} is not a number")
    try:
        v = float(raw)
    except (TypeError, ValueError):
        raise IngestError(row, f"numeric value {raw!r} is not a number") from None
    if not math.isfinite(v):
        raise IngestError(row, f"non-finite numeric value {raw!r}")
    return v


def _require_str(obj: Mapping[str, Any], key: str, row: int) -> str:
    raw = obj.get(key)
    if raw is None or raw == "":
        raise IngestError(row, f"missing {key}")
    if not isinstance(raw, str):
        raise IngestError(row, f"{key} must be a string, got {raw!r}")
    return raw


def parse_json_row(obj: Mapping[str, Any], row: int) -> tuple[str, Event]:
    """Parse one JSONL wire row into ``(patient_id, Event)``."""
    if not isinstance(obj, dict):
        raise IngestError(row, "row is not a JSON object")
    pid = _require_str(obj, "patient_id", row)
    code = _require_str(obj, "code", row)
    time = _parse_time(obj.get("time"), row)
    raw = obj.get("value")
    value: Value
    if raw is None:
        value = None
    elif isinstance(raw, dict) and len(raw) == 1 and "cat" in raw:
        if not isinstance(raw["cat"], str):
            raise IngestError(row, "categorical value must be a string")
        value = raw["cat"]
    elif isinstance(raw, dict) and len(raw) == 1 and "num" in raw:
        value = _parse_num(raw["num"], row)
    else:
        raise IngestError(row, f"malformed value {raw!r}")
    visit = obj.get("visit_id")
    if visit is not None and not isinstance(visit, str):
        raise IngestError(row, "visit_id must be a string or null")
    return pid, Event(time, code, value, visit or None)


def parse_csv_row(rec: Mapping[str, str], row: int) -> tuple[str, Event]:
    """Parse one CSV wire row into ``(patient_id, Event)``."""
    pid = _require_str(rec, "patient_id", row)
    code = _require_str(rec, "code", row)
    time = _parse_time(rec.get("time"), row)
    vtype = (rec.get("value_type") or "").strip()
    raw = rec.get("value")
    value: Value
    if vtype == "":
        value = None
    elif vtype == "cat":
        value = raw if raw is not None else ""
    elif vtype == "num":
        value = _parse_num(raw, row)
    else:
        raise IngestError(row, f"unknown value_type {vtype!r}")
    visit = rec.get("visit_id") or None
    return pid, Event(time, code, value, visit)


# ---------------------------------------------------------------------------
# ingestion


def ingest(
    rows: Iterable[tuple[str, Event]], *, strict: bool = False
) -> list[PatientTimeline]:
    """Group parsed ``(patient_id, Event)`` rows into sorted timelines.

    Events are sorted stably by time, so rows sharing a timestamp keep their
    input order.  With ``strict=True`` an out-of-order row is rejected instead.
    The result is ordered by patient_id.
    """
    by_patient: dict[str, list[Event]] = defaultdict(list)
    last_time: dict[str, int] = {}
    for i, (pid, ev) in enumerate(rows, start=1):
        if strict and pid in last_time and ev.time < last_time[pid]:
            raise IngestError(i, f"patient {pid}: time {ev.time} precedes {last_time[pid]}")
        last_time[pid] = ev.time
        by_patient[pid].append(ev)
    out = []
    for pid in sorted(by_patient):
        evs = by_patient[pid]
        # list.sort is stable
        evs.sort(key=lambda e: e.time)
        out.append(PatientTimeline(pid, tuple(evs)))
    return out


_DECODER = json.JSONDecoder()


def iter_jsonl_rows(fh: IO[str]) -> Iterator[tuple[str, Event]]:
    decode = _DECODER.raw_decode
    for i, line in enumerate(fh, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj, end = decode(line)
        except json.JSONDecodeError as exc:
            raise IngestError(i, f"invalid JSON: {exc.msg}") from None
        if end != len(line):
            raise IngestError(i, "invalid JSON: extra data")
        yield parse_json_row(obj, i)


def iter_csv_rows(fh: IO[str]) -> Iterator[tuple[str, Event]]:
    reader = csv.DictReader(fh)
    missing = {"patient_id", "time", "code"} - set(reader.fieldnames or ())
    if reader.fieldnames is not None and missing:
        raise IngestError(1, f"missing columns {sorted(missing)}")
    # row 1 is the header
    for i, rec in enumerate(reader, start=2):
        yield parse_csv_row(rec, i)


def read_events(path: str | Path, *, strict: bool = False) -> list[PatientTimeline]:
    """Read an events file (``.jsonl``/``.json`` or ``.csv``) into timelines."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        if path.suffix.lower() == ".csv":
            return ingest(iter_csv_rows(fh), strict=strict)
        return ingest(iter_jsonl_rows(fh), strict=strict)


def event_to_json(patient_id: str, ev: Event) -> dict[str, Any]:
    if ev.value is None:
        value = None
    elif isinstance(ev.value, str):
        value = {"cat": ev.value}
    else:
        value = {"num": ev.value}
    return {
        "patient_id": patient_id,
        "time": int(ev.time),
        "code": ev.code,
        "value": value,
        "visit_id": ev.visit_id,
    }


def write_events_jsonl(timelines: Iterable[PatientTimeline], fh: IO[str]) -> int:
    n = 0
    dumps = json.dumps
    for tl in timelines:
        pid = tl.patient_id
        for ev in tl.events:
            fh.write(dumps(event_to_json(pid, ev), allow_nan=False))
            fh.write("\n")
            n += 1
    return n


CSV_EVENT_COLUMNS = ["patient_id", "time", "code", "value_type", "value", "visit_id"]


def write_events_csv(timelines: Iterable[PatientTimeline], fh: IO[str]) -> int:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_EVENT_COLUMNS)
    n = 0
    for tl in timelines:
        for ev in tl.events:
            if ev.value is None:
                vt, v = "", ""
            elif isinstance(ev.value, str):
                vt, v = "cat", ev.value
            else:
                vt, v = "num", repr(ev.value)
            w.writerow([tl.patient_id, int(ev.time), ev.code, vt, v, ev.visit_id or ""])
            n += 1
    return n


def dumps_events(timelines: Iterable[PatientTimeline], fmt: str = "jsonl") -> str:
    buf = io.StringIO()
    if fmt == "csv":
        write_events_csv(timelines, buf)
    else:
        write_events_jsonl(timelines, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# labels


LABEL_COLUMNS = ["patient_id", "prediction_time", "label", "task_name"]


def read_labels(path: str | Path) -> list[TaskLabel]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(LABEL_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise IngestError(1, f"label file missing columns {sorted(missing)}")
        for i, rec in enumerate(reader, start=2):
            pid = _require_str(rec, "patient_id", i)
            task = _require_str(rec, "task_name", i)
            t = _parse_time(rec["prediction_time"], i)
            lab = rec["label"].strip()
            if lab not in ("0", "1"):
                raise IngestError(i, f"label must be 0 or 1, got {lab!r}")
            out.append(TaskLabel(pid, t, lab == "1", task))
    return out


def write_labels(labels: Iterable[TaskLabel], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(LABEL_COLUMNS)
    for lab in labels:
        w.writerow([lab.patient_id, int(lab.prediction_time), int(lab.label), lab.task_name])


# ---------------------------------------------------------------------------
# operations


def slice_before(timeline: PatientTimeline, prediction_time: int) -> PatientTimeline:
    """Events at or before ``prediction_time`` (the boundary is inclusive)."""
    ev = timeline.events
    # events are sorted, so bisect on time
    lo, hi = 0, len(ev)
    while lo < hi:
        mid = (lo + hi) // 2
        if ev[mid].time <= prediction_time:
            lo = mid + 1
        else:
            hi = mid
    return PatientTimeline(timeline.patient_id, ev[:lo])


def split(
    patients: Iterable[str],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Seeded train/val/test assignment.

    Part sizes are ``floor(f * n)``; leftover patients go one at a time to
    train, val, then test.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 or not math.isfinite(f) for f in fr):
        raise ValueError(f"invalid fractions {fractions!r}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fr)!r}")
    ids = sorted(set(patients))
    n = len(ids)
    sizes = [math.floor(f * n + 1e-9) for f in fr]
    rem = n - sum(sizes)
    i = 0
    while rem > 0:
        sizes[i % 3] += 1
        rem -= 1
        i += 1
    perm = np.random.default_rng(seed).permutation(n)
    order = [ids[j] for j in perm]
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(frozenset(order[:a]), frozenset(order[a:b]), frozenset(order[b:]))
