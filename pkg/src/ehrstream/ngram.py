"""Interpolated add-k n-gram language model over token ids.

    P(t | c) = sum_j lambda_j * (count_j(c_j, t) + kappa) / (count_j(c_j) + kappa * |V|)

where ``c_j`` is the length-(j-1) suffix of the context.  Contexts shorter
than ``order - 1`` are left-padded with the BOS id.  The model only serves as
a valid autoregressive score provider: per-token log-probs, next-token
distributions and seeded sampling.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from collections import Counter
from pathlib import Path
from typing import IO, Iterable, Iterator, Protocol, Sequence

import numpy as np

MODEL_FORMAT = "ngram-lm"
MODEL_FORMAT_VERSION = 1
# BOS sentinel used when the vocabulary has no BOS token of its own
NO_BOS = -1


class Scorer(Protocol):
    """Anything that can score the trailing tokens of a window."""

    def score_tail(self, window: Sequence[int], n_targets: int) -> np.ndarray: ...


class NGramModel:
    def __init__(
        self,
        order: int,
        vocab_size: int,
        kappa: float = 0.1,
        lambdas: Sequence[float] | None = None,
        tables: list[dict[tuple, dict[int, int]]] | None = None,
        bos_id: int | None = None,
        eos_id: int | None = None,
    ):
        if order < 1:
            raise ValueError("order must be >= 1")
        if vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if not (kappa > 0 and math.isfinite(kappa)):
            raise ValueError("kappa must be a positive finite number")
        if lambdas is None:
            lambdas = [1.0 / order] * order
        lambdas = [float(x) for x in lambdas]
        if len(lambdas) != order or any(x < 0 for x in lambdas):
            raise ValueError("need one nonnegative lambda per order")
        if abs(sum(lambdas) - 1.0) > 1e-9:
            raise ValueError("lambdas must sum to 1")
        self.order = order
        self.vocab_size = vocab_size
        self.kappa = float(kappa)
        self.lambdas = lambdas
        self.bos_id = NO_BOS if bos_id is None else bos_id
        self.eos_id = eos_id
        # tables[j][context of length j][token] = count
        self.tables = tables if tables is not None else [dict() for _ in range(order)]
        self.totals = [
            {ctx: sum(row.values()) for ctx, row in tab.items()} for tab in self.tables
        ]
        self._kv = self.kappa * vocab_size
        self._cdf_cache: dict[tuple, np.ndarray] = {}

    # -- fitting ----------------------------------------------------------

    @classmethod
    def fit(
        cls,
        sequences: Iterable[Sequence[int]],
        order: int = 3,
        vocab_size: int | None = None,
        kappa: float = 0.1,
        lambdas: Sequence[float] | None = None,
        bos_id: int | None = None,
        eos_id: int | None = None,
    ) -> "NGramModel":
        """Count all n-grams up to ``order`` over BOS-padded sequences."""
        if order < 1:
            raise ValueError("order must be >= 1")
        bos = NO_BOS if bos_id is None else bos_id
        flat = [Counter() for _ in range(order)]
        n_tokens = 0
        max_id = -1
        pad = [bos] * (order - 1)
        for seq in sequences:
            seq = [int(x) for x in seq]
            if not seq:
                continue
            n_tokens += len(seq)
            max_id = max(max_id, max(seq))
            padded = pad + seq
            n = len(seq)
            for j in range(order):
                # (ctx_1..ctx_j, token) tuples for every position
                start = order - 1 - j
                cols = [padded[start + k : start + k + n] for k in range(j + 1)]
                flat[j].update(zip(*cols))
        if n_tokens == 0:
            raise ValueError("cannot fit a language model on an empty corpus")
        if vocab_size is None:
            vocab_size = max_id + 1
        if max_id >= vocab_size:
            raise ValueError(f"token id {max_id} out of range for vocab_size {vocab_size}")
        tables: list[dict[tuple, dict[int, int]]] = []
        for j in range(order):
            tab: dict[tuple, dict[int, int]] = {}
            for gram, c in flat[j].items():
                tab.setdefault(gram[:-1], {})[gram[-1]] = c
            tables.append(tab)
        return cls(order, vocab_size, kappa, lambdas, tables, bos_id, eos_id)

    # -- scoring ----------------------------------------------------------

    def _check(self, token: int) -> None:
        if not 0 <= token < self.vocab_size:
            raise ValueError(f"token {token} out of range [0, {self.vocab_size})")

    def _ctx(self, context: Sequence[int]) -> tuple:
        m1 = self.order - 1
        if m1 == 0:
            return ()
        tail = tuple(context[-m1:]) if len(context) else ()
        if len(tail) < m1:
            tail = (self.bos_id,) * (m1 - len(tail)) + tail
        return tail

    def _prob(self, ctx: tuple, token: int) -> float:
        p = 0.0
        kappa, kv = self.kappa, self._kv
        m1 = self.order - 1
        for j in range(self.order):
            lam = self.lambdas[j]
            if lam == 0.0:
                continue
            cj = ctx[m1 - j :] if j else ()
            row = self.tables[j].get(cj)
            if row is None:
                p += lam * (kappa / kv)
            else:
                p += lam * ((row.get(token, 0) + kappa) / (self.totals[j][cj] + kv))
        return p

    def prob(self, context: Sequence[int], token: int) -> float:
        self._check(token)
        return self._prob(self._ctx(context), token)

    def log_prob(self, context: Sequence[int], token: int) -> float:
        """log P(token | last order-1 tokens of context)."""
        return math.log(self.prob(context, token))

    def distribution(self, context: Sequence[int]) -> np.ndarray:
        """Full next-token distribution as a length-|V| array."""
        return self._distribution(self._ctx(context))

    def _distribution(self, ctx: tuple) -> np.ndarray:
        out = np.zeros(self.vocab_size)
        kappa, kv = self.kappa, self._kv
        m1 = self.order - 1
        for j in range(self.order):
            lam = self.lambdas[j]
            if lam == 0.0:
                continue
            cj = ctx[m1 - j :] if j else ()
            row = self.tables[j].get(cj)
            if row is None:
                out += lam * (kappa / kv)
                continue
            denom = self.totals[j][cj] + kv
            part = np.full(self.vocab_size, kappa)
            idx = np.fromiter(row.keys(), dtype=np.int64, count=len(row))
            part[idx] += np.fromiter(row.values(), dtype=np.float64, count=len(row))
            out += lam * (part / denom)
        return out

    def sequence_log_probs(self, sequence: Sequence[int]) -> np.ndarray:
        """log P(x_i | x_<i) for every position; early positions see BOS padding."""
        seq = list(sequence)
        for t in seq:
            self._check(t)
        return self._score_positions(seq, 0, len(seq))

    def score_tail(self, window: Sequence[int], n_targets: int) -> np.ndarray:
        """Log-probs of the last ``n_targets`` tokens, conditioned only on the window."""
        seq = list(window)
        if not 0 <= n_targets <= len(seq):
            raise ValueError("n_targets out of range")
        return self._score_positions(seq, len(seq) - n_targets, len(seq))

    def _score_positions(self, seq: list[int], lo: int, hi: int) -> np.ndarray:
        m1 = self.order - 1
        padded = [self.bos_id] * m1 + seq
        out = np.empty(hi - lo)
        prob = self._prob
        log = math.log
        for i in range(lo, hi):
            t = padded[i + m1]
            if not 0 <= t < self.vocab_size:
                raise ValueError(f"token {t} out of range [0, {self.vocab_size})")
            out[i - lo] = log(prob(tuple(padded[i : i + m1]), t))
        return out

    # -- sampling ---------------------------------------------------------

    def _cdf(self, ctx: tuple, temperature: float) -> np.ndarray:
        key = (ctx, temperature)
        cdf = self._cdf_cache.get(key)
        if cdf is None:
            p = self._distribution(ctx)
            if temperature != 1.0:
                logp = np.log(p) / temperature
                p = np.exp(logp - logp.max())
            cdf = np.cumsum(p)
            cdf /= cdf[-1]
            if len(self._cdf_cache) > 100_000:
                self._cdf_cache.clear()
            self._cdf_cache[key] = cdf
        return cdf

    def sample_next(self, context: Sequence[int], rng: np.random.Generator, temperature: float = 1.0) -> int:
        cdf = self._cdf(self._ctx(context), temperature)
        return min(int(np.searchsorted(cdf, rng.random(), side="right")), self.vocab_size - 1)

    def iter_sample(
        self, prefix: Sequence[int], rng: np.random.Generator, temperature: float = 1.0
    ) -> Iterator[int]:
        """Endless stream of sampled continuation tokens (stops at EOS if set)."""
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        m1 = self.order - 1
        ctx = list(self._ctx(prefix))
        while True:
            cdf = self._cdf(tuple(ctx[len(ctx) - m1 :]) if m1 else (), temperature)
            u = rng.random()
            tok = min(bisect_right(cdf, u), self.vocab_size - 1)
            yield tok
            if self.eos_id is not None and tok == self.eos_id:
                return
            if m1:
                ctx.append(tok)
                del ctx[0]

    def generate(
        self, prefix: Sequence[int], steps: int, seed: int, temperature: float = 1.0
    ) -> list[int]:
        """Autoregressive sampling; deterministic given (seed, prefix, steps)."""
        if steps < 0:
            raise ValueError("steps must be >= 0")
        out = list(prefix)
        if steps == 0:
            return out
        rng = np.random.default_rng(seed)
        for i, tok in enumerate(self.iter_sample(prefix, rng, temperature)):
            out.append(tok)
            if i + 1 >= steps:
                break
        return out

    # -- persistence ------------------------------------------------------

    def to_json(self) -> dict:
        tables = []
        for tab in self.tables:
            rows = []
            for ctx in sorted(tab):
                row = tab[ctx]
                for tok in sorted(row):
                    rows.append([*ctx, tok, row[tok]])
            tables.append(rows)
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "order": self.order,
            "vocab_size": self.vocab_size,
            "kappa": self.kappa,
            "lambdas": self.lambdas,
            "bos_id": None if self.bos_id == NO_BOS else self.bos_id,
            "eos_id": self.eos_id,
            "tables": tables,
        }

    def dump(self, fh: IO[str]) -> None:
        json.dump(self.to_json(), fh, separators=(",", ":"), allow_nan=False)
        fh.write("\n")

    @classmethod
    def from_json(cls, obj: dict) -> "NGramModel":
        if obj.get("format") != MODEL_FORMAT or obj.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError("not an ngram-lm v1 model file")
        order = obj["order"]
        tables: list[dict[tuple, dict[int, int]]] = []
        for j, rows in enumerate(obj["tables"]):
            tab: dict[tuple, dict[int, int]] = {}
            for r in rows:
                tab.setdefault(tuple(r[:j]), {})[r[j]] = r[j + 1]
            tables.append(tab)
        if len(tables) != order:
            raise ValueError("table count does not match order")
        return cls(order, obj["vocab_size"], obj["kappa"], obj["lambdas"], tables, obj["bos_id"], obj["eos_id"])

    @classmethod
    def load(cls, path: str | Path) -> "NGramModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def write_logprobs(rows: Iterable[tuple[str, Sequence[float]]], fh: IO[str]) -> None:
    """Per-token log-prob export, one ``{"patient_id", "logprobs"}`` object per line."""
    for pid, lp in rows:
        fh.write(json.dumps({"patient_id": pid, "logprobs": [float(x) for x in lp]}, allow_nan=False))
        fh.write("\n")


def read_logprobs(path: str | Path) -> list[tuple[str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append((obj["patient_id"], np.asarray(obj["logprobs"], dtype=np.float64)))
    return out
