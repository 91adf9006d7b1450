"""Vocabulary construction and timeline encoding.

Each event maps to at most one token: a code token for valueless events, a
(code, category) token for categorical values, or a (code, decile) token for
numeric values.  Candidates are ranked by training frequency and the top
``top_k`` kept, followed by seven special tokens and, optionally, the
artificial time tokens used to mark visit boundaries and inter-visit gaps.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .events import PatientTimeline

SPECIAL_TOKENS = ("[BOS]", "[EOS]", "[UNK]", "[SEP]", "[PAD]", "[CLS]", "[MASK]")
ATT_TOKENS = (
    tuple(f"D_{i}" for i in range(1, 7))
    + tuple(f"W_{i}" for i in range(1, 5))
    + tuple(f"M_{i}" for i in range(1, 13))
    + ("LT", "VS", "VE")
)
VOCAB_FORMAT_VERSION = 1
SECONDS_PER_DAY = 86400

KIND_CODE = "code"
KIND_CAT = "categorical"
KIND_NUM = "numeric_decile"
KIND_SPECIAL = "special"
KIND_ATT = "att"


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class TokenDef:
    id: int
    kind: str
    code: str | None = None
    value: str | None = None
    decile: int | None = None
    name: str | None = None
    freq: int = 0

    @property
    def key(self) -> tuple:
        if self.kind == KIND_CODE:
            return (KIND_CODE, self.code)
        if self.kind == KIND_CAT:
            return (KIND_CAT, self.code, self.value)
        if self.kind == KIND_NUM:
            return (KIND_NUM, self.code, self.decile)
        return (self.kind, self.name)

    def label(self) -> str:
        if self.kind == KIND_CODE:
            return self.code
        if self.kind == KIND_CAT:
            return f"{self.code}={self.value}"
        if self.kind == KIND_NUM:
            return f"{self.code}#d{self.decile}"
        return self.name

    def to_json(self) -> dict:
        d = {"id": self.id, "kind": self.kind}
        for k in ("code", "value", "decile", "name"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        d["freq"] = self.freq
        return d


@dataclass
class Vocabulary:
    tokens: list[TokenDef]
    decile_cutpoints: dict[str, list[float]]
    top_k: int
    _index: dict[tuple, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for i, tok in enumerate(self.tokens):
            if tok.id != i:
                raise ValueError(f"token ids must be dense; position {i} has id {tok.id}")
        n_special = sum(1 for t in self.tokens if t.kind == KIND_SPECIAL)
        if n_special != len(SPECIAL_TOKENS):
            raise ValueError(f"expected {len(SPECIAL_TOKENS)} special tokens, found {n_special}")
        for code, cuts in self.decile_cutpoints.items():
            if len(cuts) != 9 or any(cuts[i] > cuts[i + 1] for i in range(8)):
                raise ValueError(f"bad cutpoints for {code!r}")
        self._index = {t.key: t.id for t in self.tokens}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate token keys")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def has_att(self) -> bool:
        return (KIND_ATT, "VS") in self._index

    def lookup(self, key: tuple) -> int | None:
        return self._index.get(key)

    def special(self, name: str) -> int:
        return self._index[(KIND_SPECIAL, name)]

    def att(self, name: str) -> int:
        try:
            return self._index[(KIND_ATT, name)]
        except KeyError:
            raise EncodingError("vocabulary was built without ATT tokens") from None

    def ids_for_code(self, code: str) -> list[int]:
        """All token ids derived from ``code`` (any value kind)."""
        return [t.id for t in self.tokens if t.code == code]

    def to_json(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "top_k": self.top_k,
            "tokens": [t.to_json() for t in self.tokens],
            "cutpoints": {c: list(v) for c, v in sorted(self.decile_cutpoints.items())},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary version {obj.get('version')!r}")
        toks = [
            TokenDef(
                id=t["id"],
                kind=t["kind"],
                code=t.get("code"),
                value=t.get("value"),
                decile=t.get("decile"),
                name=t.get("name"),
                freq=t.get("freq", 0),
            )
            for t in obj["tokens"]
        ]
        cuts = {c: [float(x) for x in v] for c, v in obj["cutpoints"].items()}
        return cls(toks, cuts, int(obj["top_k"]))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _decile(cuts: Sequence[float], value: float) -> int:
    return bisect_right(cuts, value)


def decile_of(vocab: Vocabulary, code: str, value: float) -> int:
    """Number of the code's cutpoints at or below ``value`` (0..9)."""
    try:
        cuts = vocab.decile_cutpoints[code]
    except KeyError:
        raise KeyError(f"no decile cutpoints for code {code!r}") from None
    return _decile(cuts, value)


def _candidate_sort_key(item: tuple[tuple, int]):
    key, freq = item
    # kind is part of the key, so the ordering is total even across kinds
    return (-freq, tuple("" if x is None else str(x) for x in key))


def build_vocabulary(
    train: Iterable[PatientTimeline], top_k: int, with_att: bool = False
) -> Vocabulary:
    """Rank candidate tokens by training frequency and keep the top ``top_k``."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    code_counts: Counter = Counter()
    cat_counts: Counter = Counter()
    num_values: dict[str, list[float]] = defaultdict(list)
    n_events = 0
    for tl in train:
        for ev in tl.events:
            n_events += 1
            v = ev.value
            if v is None:
                code_counts[ev.code] += 1
            elif isinstance(v, str):
                cat_counts[(ev.code, v)] += 1
            else:
                num_values[ev.code].append(v)
    if n_events == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    candidates: dict[tuple, int] = {}
    for code, c in code_counts.items():
        candidates[(KIND_CODE, code)] = c
    for (code, val), c in cat_counts.items():
        candidates[(KIND_CAT, code, val)] = c
    all_cuts: dict[str, list[float]] = {}
    for code, vals in num_values.items():
        arr = np.sort(np.asarray(vals, dtype=np.float64))
        # cutpoint i is the order statistic at rank floor(i*n/10), so with
        # distinct values decile i holds exactly floor((i+1)n/10) - floor(in/10)
        cuts = arr[(np.arange(1, 10) * arr.size) // 10]
        all_cuts[code] = [float(x) for x in cuts]
        bins = np.searchsorted(cuts, arr, side="right")
        per_bin = np.bincount(bins, minlength=10)
        for d in range(10):
            candidates[(KIND_NUM, code, d)] = int(per_bin[d])

    ranked = sorted(candidates.items(), key=_candidate_sort_key)[:top_k]
    tokens: list[TokenDef] = []
    kept_numeric = set()
    for key, freq in ranked:
        i = len(tokens)
        if key[0] == KIND_CODE:
            tokens.append(TokenDef(i, KIND_CODE, code=key[1], freq=freq))
        elif key[0] == KIND_CAT:
            tokens.append(TokenDef(i, KIND_CAT, code=key[1], value=key[2], freq=freq))
        else:
            tokens.append(TokenDef(i, KIND_NUM, code=key[1], decile=key[2], freq=freq))
            kept_numeric.add(key[1])
    for name in SPECIAL_TOKENS:
        tokens.append(TokenDef(len(tokens), KIND_SPECIAL, name=name))
    if with_att:
        for name in ATT_TOKENS:
            tokens.append(TokenDef(len(tokens), KIND_ATT, name=name))
    cutpoints = {c: all_cuts[c] for c in sorted(kept_numeric)}
    return Vocabulary(tokens, cutpoints, top_k)


# ---------------------------------------------------------------------------
# encoding


@dataclass(frozen=True)
class TokenSequence:
    patient_id: str
    token_ids: tuple[int, ...]
    source_times: tuple[int, ...]

    def __post_init__(self):
        if len(self.token_ids) != len(self.source_times):
            raise ValueError("token_ids and source_times must have equal length")

    def __len__(self) -> int:
        return len(self.token_ids)

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "tokens": list(self.token_ids),
            "times": list(self.source_times),
        }


class _Encoder:
    """Caches per-code cutpoint arrays for repeated encoding."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.cuts = {c: list(v) for c, v in vocab.decile_cutpoints.items()}
        self.index = vocab._index

    def token(self, ev) -> int | None:
        v = ev.value
        if v is None:
            return self.index.get((KIND_CODE, ev.code))
        if isinstance(v, str):
            return self.index.get((KIND_CAT, ev.code, v))
        cuts = self.cuts.get(ev.code)
        if cuts is None:
            return None
        return self.index.get((KIND_NUM, ev.code, _decile(cuts, v)))


def encode(timeline: PatientTimeline, vocab: Vocabulary, _enc: _Encoder | None = None) -> TokenSequence:
    """Map events to tokens in order; events without a vocabulary token are dropped."""
    enc = _enc or _Encoder(vocab)
    ids, times = [], []
    for ev in timeline.events:
        t = enc.token(ev)
        if t is not None:
            ids.append(t)
            times.append(ev.time)
    return TokenSequence(timeline.patient_id, tuple(ids), tuple(times))


def att_for_gap(gap_seconds: float) -> str | None:
    """ATT token name for an inter-visit gap, or None for same-day gaps."""
    d = int(gap_seconds // SECONDS_PER_DAY)
    if d < 1:
        return None
    if d < 7:
        return f"D_{d}"
    if d < 28:
        return f"W_{min(4, d // 7)}"
    if d < 365:
        return f"M_{min(12, d // 28)}"
    return "LT"


def att_days(name: str) -> int:
    """Lower bound, in days, of the gap an ATT token stands for."""
    if name == "LT":
        return 365
    kind, _, n = name.partition("_")
    mult = {"D": 1, "W": 7, "M": 28}.get(kind)
    if mult is None or not n:
        raise ValueError(f"{name!r} is not a gap token")
    return mult * int(n)


def visits_of(timeline: PatientTimeline) -> list[list]:
    """Split events into visits: maximal runs of consecutive events sharing a visit_id."""
    visits: list[list] = []
    prev = object()
    for j, ev in enumerate(timeline.events):
        if ev.visit_id is None:
            raise EncodingError(
                f"patient {timeline.patient_id}: event {j} has no visit_id"
            )
        if ev.visit_id != prev:
            visits.append([])
            prev = ev.visit_id
        visits[-1].append(ev)
    return visits


def encode_with_att(
    timeline: PatientTimeline, vocab: Vocabulary, _enc: _Encoder | None = None
) -> TokenSequence:
    """Encode as ``VS v1 VE [ATT] VS v2 VE ...`` with gap tokens between visits.

    The gap is measured from the previous visit's last event to the next
    visit's first event.  VS/VE carry the visit start/end time; a gap token
    carries the start time of the visit it precedes.
    """
    enc = _enc or _Encoder(vocab)
    vs, ve = vocab.att("VS"), vocab.att("VE")
    ids: list[int] = []
    times: list[int] = []
    prev_end = None
    for visit in visits_of(timeline):
        start, end = visit[0].time, visit[-1].time
        if prev_end is not None:
            name = att_for_gap(start - prev_end)
            if name is not None:
                ids.append(vocab.att(name))
                times.append(start)
        ids.append(vs)
        times.append(start)
        for ev in visit:
            t = enc.token(ev)
            if t is not None:
                ids.append(t)
                times.append(ev.time)
        ids.append(ve)
        times.append(end)
        prev_end = end
    return TokenSequence(timeline.patient_id, tuple(ids), tuple(times))


def encode_corpus(
    timelines: Iterable[PatientTimeline], vocab: Vocabulary, with_att: bool = False
) -> list[TokenSequence]:
    enc = _Encoder(vocab)
    fn = encode_with_att if with_att else encode
    return [fn(tl, vocab, enc) for tl in timelines]


def write_token_sequences(seqs: Iterable[TokenSequence], fh: IO[str]) -> None:
    for s in seqs:
        fh.write(json.dumps(s.to_json(), separators=(",", ":")))
        fh.write("\n")


def iter_token_sequences(path: str | Path) -> Iterator[TokenSequence]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                yield TokenSequence(obj["patient_id"], tuple(obj["tokens"]), tuple(obj["times"]))


def read_token_sequences(path: str | Path) -> list[TokenSequence]:
    return list(iter_token_sequences(path))


def strip_att(token_ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    att_ids = {t.id for t in vocab.tokens if t.kind == KIND_ATT}
    return [t for t in token_ids if t not in att_ids]
