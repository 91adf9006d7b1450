"""Seeded synthetic patient corpora and labels.

Patients draw a working set of codes from a Zipf popularity law and emit
them in visits.  Knobs control copy-forwarding (a visit re-emitting an
earlier visit's block), drift (rotating never-used, hence progressively
rarer, codes into the working set), inter-event timing and the heavy-tailed
number of events per patient.  Labels come from a logistic or threshold
model over known timeline features, optionally with noise that grows with a
patient's repetition or irregularity.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm, rankdata

from .events import Event, PatientTimeline, TaskLabel, slice_before
from .properties import irregularity, repetition_rate

SECONDS_PER_DAY = 86400
CATEGORIES = ("low", "normal", "high")
CATEGORY_PROBS = (0.2, 0.6, 0.2)
NOISE_METRICS = ("rr1", "irregularity_std")


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_patients: int = 1000
    vocab_size: int = 2000
    zipf_exponent: float = 1.1
    # events per patient: log-normal with this median and mean
    events_median: float = 121.0
    events_mean: float = 1364.0
    max_events: int = 890_048
    # events per visit: 1 + Poisson(visit_events_mean - 1)
    visit_events_mean: float = 8.0
    within_gap_median_s: float = 120.0
    within_gap_sigma: float = 1.0
    between_gap_median_days: float = 30.0
    between_gap_sigma: float = 1.5
    active_set_size: int = 40
    copy_forward_prob: float = 0.3
    drift_rate: float = 0.0
    drift_fraction: float = 0.25
    numeric_code_fraction: float = 0.15
    categorical_code_fraction: float = 0.1
    start_time: int = 946_684_800
    start_spread_days: float = 3650.0

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(msg)

        if self.n_patients < 0:
            bad("n_patients must be >= 0")
        if self.vocab_size < 1:
            bad("vocab_size must be >= 1")
        if self.zipf_exponent < 0:
            bad("zipf_exponent must be >= 0")
        if not (1 <= self.events_median <= self.events_mean):
            bad("need 1 <= events_median <= events_mean")
        if self.max_events < 1:
            bad("max_events must be >= 1")
        if self.visit_events_mean < 1:
            bad("visit_events_mean must be >= 1")
        for name in ("within_gap_median_s", "between_gap_median_days"):
            if getattr(self, name) <= 0:
                bad(f"{name} must be > 0")
        for name in ("within_gap_sigma", "between_gap_sigma", "start_spread_days"):
            if getattr(self, name) < 0:
                bad(f"{name} must be >= 0")
        for name in ("copy_forward_prob", "drift_rate", "drift_fraction",
                     "numeric_code_fraction", "categorical_code_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad(f"{name} must lie in [0, 1]")
        if self.numeric_code_fraction + self.categorical_code_fraction > 1.0:
            bad("numeric and categorical code fractions exceed 1")
        if not 1 <= self.active_set_size <= self.vocab_size:
            bad("active_set_size must lie in [1, vocab_size]")
        if self.start_time < 0:
            bad("start_time must be >= 0")

    @property
    def events_sigma(self) -> float:
        return math.sqrt(2.0 * math.log(self.events_mean / self.events_median))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys {sorted(unknown)}")
        cfg = cls(**obj)
        cfg.validate()
        return cfg


def code_name(i: int) -> str:
    return f"C{i:05d}"


@dataclass(frozen=True)
class CodeBook:
    """Per-code value kind and value distribution; fixed for a vocab size."""

    kinds: np.ndarray  # 0 valueless, 1 numeric, 2 categorical
    means: np.ndarray
    sds: np.ndarray
    popularity_cdf: np.ndarray
    names: list[str]

    @classmethod
    def build(cls, cfg: SynthConfig) -> "CodeBook":
        v = cfg.vocab_size
        rng = np.random.default_rng([0x5EED, v])
        u = rng.random(v)
        kinds = np.zeros(v, dtype=np.int8)
        kinds[u < cfg.numeric_code_fraction] = 1
        kinds[(u >= cfg.numeric_code_fraction)
              & (u < cfg.numeric_code_fraction + cfg.categorical_code_fraction)] = 2
        means = 10.0 + 90.0 * rng.random(v)
        sds = 1.0 + 0.2 * means * rng.random(v)
        w = (np.arange(v) + 1.0) ** (-cfg.zipf_exponent)
        cdf = np.cumsum(w)
        cdf /= cdf[-1]
        return cls(kinds, means, sds, cdf, [code_name(i) for i in range(v)])


def sample_event_counts(cfg: SynthConfig, seed: int) -> np.ndarray:
    """Per-patient event counts from stratified log-normal quantiles.

    Each patient takes one stratum of [0, 1) in random order, which keeps the
    heavy-tailed corpus mean close to its target at moderate corpus sizes.
    """
    n = cfg.n_patients
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng([seed, 0])
    u = (rng.permutation(n) + rng.random(n)) / n
    u = np.clip(u, 1e-12, 1 - 1e-12)
    x = np.exp(math.log(cfg.events_median) + cfg.events_sigma * norm.ppf(u))
    return np.clip(np.round(x), 1, cfg.max_events).astype(np.int64)


class _PatientGenerator:
    def __init__(self, cfg: SynthConfig, book: CodeBook, rng: np.random.Generator):
        self.cfg = cfg
        self.book = book
        self.rng = rng
        self.used: set[int] = set()

    def _popular(self) -> int:
        return int(np.searchsorted(self.book.popularity_cdf, self.rng.random(), side="right"))

    def fresh_codes(self, k: int) -> list[int]:
        """k codes this patient has never used, drawn by popularity."""
        out: list[int] = []
        v = self.cfg.vocab_size
        while len(out) < k:
            c = None
            for _ in range(64):
                cand = min(self._popular(), v - 1)
                if cand not in self.used:
                    c = cand
                    break
            if c is None:
                unused = np.setdiff1d(np.arange(v), np.fromiter(self.used, dtype=np.int64))
                if unused.size == 0:
                    c = min(self._popular(), v - 1)
                else:
                    p = np.diff(np.concatenate([[0.0], self.book.popularity_cdf]))[unused]
                    c = int(self.rng.choice(unused, p=p / p.sum()))
            self.used.add(c)
            out.append(c)
        return out

    def generate(self, pid: str, n_events: int) -> PatientTimeline:
        cfg, rng, book = self.cfg, self.rng, self.book
        k = cfg.active_set_size
        active = np.array(self.fresh_codes(k), dtype=np.int64)
        n_rotate = max(1, int(round(cfg.drift_fraction * k)))
        start = cfg.start_time + int(rng.random() * cfg.start_spread_days * SECONDS_PER_DAY)
        blocks: list[np.ndarray] = []
        between: list[float] = []
        remaining = n_events
        v = 0
        while remaining > 0:
            if v > 0:
                if cfg.drift_rate > 0 and rng.random() < cfg.drift_rate:
                    slots = rng.choice(k, size=min(n_rotate, k), replace=False)
                    active[slots] = self.fresh_codes(len(slots))
            if v > 0 and cfg.copy_forward_prob > 0 and rng.random() < cfg.copy_forward_prob:
                block = blocks[int(rng.integers(v))][:remaining]
            else:
                size = 1 + int(rng.poisson(cfg.visit_events_mean - 1.0))
                block = active[rng.integers(0, k, size=min(size, remaining))]
            blocks.append(block)
            remaining -= len(block)
            v += 1
        n_visits = v
        codes = np.concatenate(blocks)
        sizes = np.fromiter((len(b) for b in blocks), dtype=np.int64, count=n_visits)
        visit_of = np.repeat(np.arange(n_visits), sizes)
        first = np.concatenate([[0], np.cumsum(sizes)[:-1]])

        # gap before each event: within-visit gaps, replaced by the
        # between-visit gap at each visit start
        gaps = rng.lognormal(math.log(cfg.within_gap_median_s), cfg.within_gap_sigma, len(codes))
        between = rng.lognormal(
            math.log(cfg.between_gap_median_days * SECONDS_PER_DAY), cfg.between_gap_sigma, n_visits
        )
        gaps[first] = between
        gaps = np.maximum(1, np.round(gaps)).astype(np.int64)
        gaps[0] = 0
        times = start + np.cumsum(gaps)

        kinds = book.kinds[codes]
        z = rng.standard_normal(len(codes))
        nums = np.round(book.means[codes] + book.sds[codes] * z, 3)
        cats = np.searchsorted(np.cumsum(CATEGORY_PROBS), rng.random(len(codes)), side="right")
        visit_ids = [f"{pid}_v{i}" for i in range(n_visits)]
        names = book.names
        events = []
        append = events.append
        for c, tt, kind, x, ci, vi in zip(codes.tolist(), times.tolist(), kinds.tolist(),
                                          nums.tolist(), cats.tolist(), visit_of.tolist()):
            if kind == 1:
                value = x
            elif kind == 2:
                value = CATEGORIES[min(ci, len(CATEGORIES) - 1)]
            else:
                value = None
            append(Event(tt, names[c], value, visit_ids[vi]))
        return PatientTimeline(pid, tuple(events))


def patient_id(i: int) -> str:
    return f"P{i:07d}"


def generate_patient(cfg: SynthConfig, seed: int, index: int, n_events: int,
                     book: CodeBook | None = None) -> PatientTimeline:
    """One patient from its own RNG stream keyed by (seed, index)."""
    book = book or CodeBook.build(cfg)
    rng = np.random.default_rng([seed, 1, index])
    return _PatientGenerator(cfg, book, rng).generate(patient_id(index), int(n_events))


def generate_corpus(cfg: SynthConfig, seed: int) -> list[PatientTimeline]:
    cfg.validate()
    book = CodeBook.build(cfg)
    counts = sample_event_counts(cfg, seed)
    return [generate_patient(cfg, seed, i, counts[i], book) for i in range(cfg.n_patients)]


# ---------------------------------------------------------------------------
# labels


@dataclass
class LabelModel:
    task_name: str = "task"
    n_risk_codes: int = 10
    risk_rank_range: tuple[int, int] = (5, 200)
    coef_risk: float = 1.5
    coef_length: float = 0.0
    intercept: float | None = None  # None centres the signal at its median
    noise_sd: float = 0.5
    noise_metric: str | None = None
    noise_slope: float = 0.0
    mode: str = "logistic"  # or "threshold"
    min_events: int = 2
    lookback_events: int | None = None
    # "log_count": sum of log1p(count) over risk codes; "any": 1 if any risk
    # code is visible.  "any" keeps the signal bounded for long histories.
    risk_feature: str = "log_count"

    def validate(self) -> None:
        if self.risk_feature not in ("log_count", "any"):
            raise ConfigError(f"unknown risk feature {self.risk_feature!r}")
        if self.mode not in ("logistic", "threshold"):
            raise ConfigError(f"unknown label mode {self.mode!r}")
        if self.noise_metric is not None and self.noise_metric not in NOISE_METRICS:
            raise ConfigError(f"unknown noise metric {self.noise_metric!r}")
        if self.noise_sd < 0 or self.noise_slope < 0:
            raise ConfigError("noise parameters must be >= 0")
        if self.min_events < 1 or self.n_risk_codes < 0:
            raise ConfigError("min_events must be >= 1 and n_risk_codes >= 0")
        if not self.task_name:
            raise ConfigError("task_name must be nonempty")

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "LabelModel":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown label model keys {sorted(unknown)}")
        d = dict(obj)
        if "risk_rank_range" in d:
            d["risk_rank_range"] = tuple(d["risk_rank_range"])
        m = cls(**d)
        m.validate()
        return m

    def to_json(self) -> dict:
        d = asdict(self)
        d["risk_rank_range"] = list(self.risk_rank_range)
        return d


@dataclass
class LabelSet:
    labels: list[TaskLabel]
    truth: dict[str, dict] = field(default_factory=dict)

    def true_features(self, task: str) -> tuple[list[str], np.ndarray, np.ndarray]:
        t = self.truth[task]
        return t["patient_ids"], np.asarray(t["features"]), np.asarray(t["labels"], dtype=bool)

    def truth_json(self) -> str:
        return json.dumps(self.truth, sort_keys=True, indent=1) + "\n"


def _risk_codes(model: LabelModel, book: CodeBook, rng: np.random.Generator) -> list[str]:
    lo, hi = model.risk_rank_range
    hi = min(hi, len(book.kinds))
    pool = [c for c in range(lo, hi) if book.kinds[c] == 0]
    if not pool or model.n_risk_codes == 0:
        return []
    pick = rng.choice(len(pool), size=min(model.n_risk_codes, len(pool)), replace=False)
    return sorted(code_name(pool[i]) for i in pick)


def timeline_features(
    tl: PatientTimeline, risk: frozenset[str], lookback: int | None, kind: str = "log_count"
) -> list[float]:
    """``[risk feature, log1p(n_events)]`` on the visible events.

    The risk feature is the sum over risk codes of log1p(count), or with
    ``kind="any"`` the indicator that some risk code is visible.
    """
    codes = tl.codes if lookback is None else tl.codes[-lookback:]
    counts: dict[str, int] = {}
    for c in codes:
        if c in risk:
            counts[c] = counts.get(c, 0) + 1
    if kind == "any":
        r = 1.0 if counts else 0.0
    else:
        r = float(sum(math.log1p(v) for v in counts.values()))
    return [r, math.log1p(len(codes))]


def noise_metric_value(tl: PatientTimeline, metric: str) -> float:
    if metric == "rr1":
        return float(repetition_rate(tl.codes, 1))
    return irregularity(tl).std_s


def generate_labels(
    corpus: Sequence[PatientTimeline],
    models: LabelModel | Sequence[LabelModel],
    seed: int,
    cfg: SynthConfig | None = None,
) -> LabelSet:
    """One label per eligible patient per task, with ground truth recorded."""
    if isinstance(models, LabelModel):
        models = [models]
    book = CodeBook.build(cfg or SynthConfig())
    labels: list[TaskLabel] = []
    truth: dict[str, dict] = {}
    for ti, model in enumerate(models):
        model.validate()
        risk = _risk_codes(model, book, np.random.default_rng([seed, 2, ti]))
        risk_set = frozenset(risk)
        pids, times, feats, metric_vals = [], [], [], []
        for pi, tl in enumerate(corpus):
            if len(tl) < model.min_events:
                continue
            rng = np.random.default_rng([seed, 3, ti, pi])
            j = int(rng.integers(model.min_events - 1, len(tl)))
            t_pred = tl.events[j].time
            prefix = slice_before(tl, t_pred)
            pids.append(tl.patient_id)
            times.append(t_pred)
            feats.append(timeline_features(prefix, risk_set, model.lookback_events, model.risk_feature))
            if model.noise_metric:
                metric_vals.append(noise_metric_value(prefix, model.noise_metric))
        if not pids:
            truth[model.task_name] = {"model": model.to_json(), "risk_codes": risk, "patient_ids": [],
                                      "features": [], "labels": [], "intercept": 0.0}
            continue
        X = np.asarray(feats)
        signal = model.coef_risk * X[:, 0] + model.coef_length * X[:, 1]
        intercept = -float(np.median(signal)) if model.intercept is None else float(model.intercept)
        if model.noise_metric:
            z = (rankdata(metric_vals) - 1) / max(1, len(metric_vals) - 1)
        else:
            z = np.zeros(len(pids))
        sd = model.noise_sd + model.noise_slope * z
        ys = []
        for i in range(len(pids)):
            rng = np.random.default_rng([seed, 4, ti, i])
            latent = signal[i] + intercept + sd[i] * rng.standard_normal()
            if model.mode == "threshold":
                y = latent > 0
            else:
                y = rng.random() < expit(latent)
            ys.append(bool(y))
            labels.append(TaskLabel(pids[i], int(times[i]), bool(y), model.task_name))
        truth[model.task_name] = {
            "model": model.to_json(),
            "risk_codes": risk,
            "intercept": intercept,
            "coefficients": [model.coef_risk, model.coef_length],
            "patient_ids": pids,
            "prediction_times": [int(t) for t in times],
            "features": X.tolist(),
            "noise_sd": sd.tolist(),
            "labels": ys,
        }
    return LabelSet(labels, truth)


# ---------------------------------------------------------------------------
# reference Markov process for context-length checks


def markov_sequences(
    vocab_size: int,
    order: int,
    n_sequences: int,
    length: int,
    seed: int,
    concentration: float = 0.1,
) -> list[list[int]]:
    """Sequences from a random order-``order`` Markov chain.

    The next-token distribution for each context is Dirichlet(concentration)
    drawn from a stream keyed by (seed, context), so it is fixed per seed.
    """
    tables: dict[tuple, np.ndarray] = {}

    def cdf_for(ctx: tuple) -> np.ndarray:
        c = tables.get(ctx)
        if c is None:
            r = np.random.default_rng([seed, 9, *[x + 1 for x in ctx]])
            p = r.dirichlet(np.full(vocab_size, concentration))
            c = np.cumsum(p)
            c /= c[-1]
            tables[ctx] = c
        return c

    rng = np.random.default_rng([seed, 10])
    out = []
    m1 = order - 1
    for _ in range(n_sequences):
        seq: list[int] = []
        for _ in range(length):
            ctx = tuple([-1] * max(0, m1 - len(seq)) + seq[max(0, len(seq) - m1):]) if m1 else ()
            tok = min(int(np.searchsorted(cdf_for(ctx), rng.random(), side="right")), vocab_size - 1)
            seq.append(tok)
        out.append(seq)
    return out
