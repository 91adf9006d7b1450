"""Per-patient EHR property metrics: n-gram repetition, inter-event
irregularity, quartile stratification and histogram data."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import IO, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .events import PatientTimeline, slice_before

QUARTILES = ("Q1", "Q2", "Q3", "Q4")


class UndefinedMetricError(ValueError):
    """Input too short for the requested metric."""


def percentile(values: Sequence[float] | np.ndarray, q) -> np.ndarray | float:
    """Linear-interpolation percentile: rank ``(q/100)(m-1)`` over sorted values."""
    return np.percentile(np.asarray(values, dtype=np.float64), q, method="linear")


def repetition_rate(symbols: Sequence[Hashable], n: int = 1) -> float | None:
    """Fraction of distinct contiguous n-grams occurring more than once.

    Returns None when the sequence has fewer than ``n`` elements.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    m = len(symbols)
    if m < n:
        return None
    if n == 1:
        counts = Counter(symbols)
    else:
        seq = list(symbols)
        counts = Counter(zip(*(seq[i : m - n + 1 + i] for i in range(n))))
    repeated = sum(1 for c in counts.values() if c > 1)
    return repeated / len(counts)


@dataclass(frozen=True)
class IrregularityStats:
    mean_s: float
    std_s: float
    iqr_s: float


def irregularity(timeline: PatientTimeline | Sequence[int]) -> IrregularityStats:
    """Mean, population std and IQR of consecutive inter-event gaps (seconds)."""
    times = timeline.times if isinstance(timeline, PatientTimeline) else timeline
    if len(times) < 2:
        raise UndefinedMetricError("irregularity needs at least 2 events")
    deltas = np.diff(np.asarray(times, dtype=np.float64))
    mu = float(deltas.mean())
    std = float(np.sqrt(np.mean((deltas - mu) ** 2)))
    q25, q75 = percentile(deltas, [25, 75])
    return IrregularityStats(mu, std, float(q75 - q25))


def quartile_split(values: Mapping[str, float]) -> dict[str, str]:
    """Assign patients to Q1..Q4 by ascending value (ties broken by patient_id).

    Group sizes are ``ceil(n/4)`` for the first ``n % 4`` groups and
    ``floor(n/4)`` for the rest.
    """
    defined = {k: v for k, v in values.items() if v is not None and not math.isnan(v)}
    n = len(defined)
    if n < 4:
        raise UndefinedMetricError(f"quartile split needs >= 4 defined values, got {n}")
    order = sorted(defined, key=lambda k: (defined[k], k))
    base, extra = divmod(n, 4)
    out: dict[str, str] = {}
    pos = 0
    for qi, name in enumerate(QUARTILES):
        size = base + (1 if qi < extra else 0)
        for pid in order[pos : pos + size]:
            out[pid] = name
        pos += size
    return out


def quartiles_by_task(values: Mapping[str, Mapping[str, float]]) -> dict[str, dict[str, str]]:
    """Quartile assignment computed independently within each task."""
    return {task: quartile_split(vals) for task, vals in sorted(values.items())}


@dataclass(frozen=True)
class HistogramReport:
    metric: str
    edges: np.ndarray
    counts: np.ndarray
    scale: str = "linear"

    def rows(self) -> list[tuple[float, float, int]]:
        return [
            (float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
            for i in range(len(self.counts))
        ]

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in self.rows():
            w.writerow([repr(lo), repr(hi), c])


def histogram(
    values: Iterable[float], bins: int = 50, scale: str = "linear", metric: str = ""
) -> HistogramReport:
    """Equal-width bins over [min, max] in linear or log10 space.

    Bins are right-open except the last, which also holds the maximum.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if scale not in ("linear", "log10"):
        raise ValueError(f"unknown scale {scale!r}")
    x = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if scale == "log10":
        if np.any(x <= 0):
            raise ValueError("log10 histogram requires strictly positive values")
        sx = np.log10(x)
    else:
        sx = x
    if sx.size == 0:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(sx.min()), float(sx.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    s_edges = np.linspace(lo, hi, bins + 1)
    idx = np.floor((sx - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    edges = 10.0**s_edges if scale == "log10" else s_edges
    return HistogramReport(metric, edges, counts, scale)


# ---------------------------------------------------------------------------
# corpus-level metric table

METRIC_NAMES = ("rr1", "rr2", "rr3", "rr4", "irregularity_mean", "irregularity_std", "irregularity_iqr")


def patient_metrics(symbols: Sequence[Hashable], times: Sequence[int]) -> dict[str, float]:
    """All defined metrics for one sequence; undefined ones are omitted."""
    out: dict[str, float] = {}
    for n in (1, 2, 3, 4):
        rr = repetition_rate(symbols, n)
        if rr is not None:
            out[f"rr{n}"] = rr
    if len(times) >= 2:
        st = irregularity(times)
        out["irregularity_mean"] = st.mean_s
        out["irregularity_std"] = st.std_s
        out["irregularity_iqr"] = st.iqr_s
    return out


def metric_rows(
    timelines: Iterable[PatientTimeline],
    *,
    task: str = "all",
    min_events: int = 0,
) -> list[tuple[str, str, str, float]]:
    """``(patient_id, task, metric_name, value)`` rows over event codes."""
    rows = []
    for tl in timelines:
        if len(tl) < min_events:
            continue
        for name, v in patient_metrics(tl.codes, tl.times).items():
            rows.append((tl.patient_id, task, name, v))
    return rows


def task_metric_table(
    timelines: Mapping[str, PatientTimeline],
    labels: Iterable,
    min_events: int = 0,
) -> dict[str, dict[str, dict[str, float]]]:
    """``task -> patient -> {metric: value}`` on each timeline up to its prediction time."""
    out: dict[str, dict[str, dict[str, float]]] = {}
    for lab in labels:
        tl = timelines.get(lab.patient_id)
        if tl is None:
            continue
        sl = slice_before(tl, lab.prediction_time)
        if len(sl) < min_events:
            continue
        out.setdefault(lab.task_name, {})[lab.patient_id] = patient_metrics(sl.codes, sl.times)
    return out


def task_metric_values(
    timelines: Mapping[str, PatientTimeline],
    labels: Iterable,
    metric: str,
    min_events: int = 0,
) -> dict[str, dict[str, float]]:
    """Per-task values of one metric; patients where it is undefined are left out."""
    out: dict[str, dict[str, float]] = {}
    for task, by_pid in task_metric_table(timelines, labels, min_events).items():
        vals = {pid: m[metric] for pid, m in by_pid.items() if metric in m}
        if vals:
            out[task] = vals
    return out


def write_metric_rows(rows: Iterable[tuple[str, str, str, float]], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["patient_id", "task", "metric_name", "value"])
    for pid, task, name, v in rows:
        w.writerow([pid, task, name, repr(float(v))])
