"""Per-position perplexity curves: per-token PPL, strided long-sequence
scoring, cross-patient median per position and EMA smoothing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from .ngram import Scorer

DEFAULT_STRIDE = 32
DEFAULT_EMA_SPAN = 250
LN2 = math.log(2.0)


def _bits(logprobs) -> np.ndarray:
    lp = np.asarray(logprobs, dtype=np.float64)
    if np.any(lp > 0) or np.any(np.isnan(lp)):
        raise ValueError("log-probabilities must be <= 0")
    return -lp / LN2


def per_token_ppl(logprobs: Sequence[float] | np.ndarray) -> np.ndarray:
    """exp(-log p) per token, evaluated as 2**bits.

    Going through base 2 keeps power-of-two perplexities exact (a uniform
    model over 16 tokens gives exactly 16.0, where exp(-log(1/16)) does not).
    """
    return np.exp2(_bits(logprobs))


def perplexity(logprobs: Sequence[float] | np.ndarray) -> float:
    """Sequence perplexity: 2 ** (mean bits per token)."""
    b = _bits(logprobs)
    if b.size == 0:
        raise ValueError("empty sequence")
    return float(np.exp2(b.mean()))


def window_plan(n: int, context_len: int, stride: int = DEFAULT_STRIDE) -> list[tuple[int, int, int]]:
    """``(window_start, target_start, target_end)`` triples covering ``range(n)``.

    The first window scores positions ``[0, min(L, n))`` with full context.
    Later windows advance by ``stride``; each scores its trailing ``stride``
    positions given the ``L - stride`` tokens before them.
    """
    if stride < 1 or context_len < stride:
        raise ValueError("need context_len >= stride >= 1")
    if n <= 0:
        return []
    plan = [(0, 0, min(context_len, n))]
    b = context_len
    while b < n:
        e = min(b + stride, n)
        plan.append((b - (context_len - stride), b, e))
        b = e
    return plan


def strided_scores(
    scorer: Scorer, sequence: Sequence[int], context_len: int, stride: int = DEFAULT_STRIDE
) -> np.ndarray:
    seq = list(sequence)
    out = np.empty(len(seq))
    for ws, ts, te in window_plan(len(seq), context_len, stride):
        out[ts:te] = scorer.score_tail(seq[ws:te], te - ts)
    return out


@dataclass(frozen=True)
class PositionPPLCurve:
    median: np.ndarray
    support: np.ndarray
    ema: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.median)

    def write_csv(self, fh: IO[str]) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position", "median_ppl", "support", "ema"])
        for p in range(len(self.median)):
            e = "" if self.ema is None else repr(float(self.ema[p]))
            w.writerow([p, repr(float(self.median[p])), int(self.support[p]), e])


def median_by_position(vectors: Iterable[Sequence[float]], ema_span: int | None = None) -> PositionPPLCurve:
    """Median across patients at each position, over patients long enough to reach it."""
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vecs:
        raise ValueError("empty corpus")
    lengths = np.array([len(v) for v in vecs], dtype=np.int64)
    n_pos = int(lengths.max()) if len(lengths) else 0
    if n_pos == 0:
        return PositionPPLCurve(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0) if ema_span else None)
    values = np.concatenate(vecs)
    positions = np.concatenate([np.arange(n, dtype=np.int64) for n in lengths])
    order = np.lexsort((values, positions))
    values = values[order]
    support = np.bincount(positions, minlength=n_pos)
    starts = np.concatenate([[0], np.cumsum(support)[:-1]])
    lo = starts + (support - 1) // 2
    hi = starts + support // 2
    med = (values[lo] + values[hi]) / 2.0
    sm = ema(med, ema_span) if ema_span else None
    return PositionPPLCurve(med, support, sm)


def ema(series: Sequence[float], span: int = DEFAULT_EMA_SPAN) -> np.ndarray:
    """s_0 = x_0; s_t = a*x_t + (1-a)*s_{t-1} with a = 2/(span+1)."""
    if span < 1:
        raise ValueError("span must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty series")
    a = 2.0 / (span + 1)
    out = np.empty_like(x)
    s = x[0]
    out[0] = s
    for t in range(1, len(x)):
        s = a * x[t] + (1 - a) * s
        out[t] = s
    return out
