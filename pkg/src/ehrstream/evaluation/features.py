"""Context windows and frozen feature vectors for the logistic head."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..ngram import NGramModel
from ..tokenizer import TokenSequence

log = logging.getLogger(__name__)

MODES = ("bag", "lm", "external")


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    featurizer: str
    empty: bool = False


def context_window(seq: TokenSequence, prediction_time: int, context_len: int) -> list[int]:
    """The last ``min(L, available)`` tokens whose source time is <= prediction_time."""
    if context_len < 1:
        raise ValueError("context_len must be >= 1")
    ids = [t for t, s in zip(seq.token_ids, seq.source_times) if s <= prediction_time]
    return ids[-context_len:]


def featurize(
    window: Sequence[int],
    vocab_size: int,
    mode: str = "bag",
    lm: NGramModel | None = None,
    external: np.ndarray | None = None,
) -> FeatureVector:
    """Feature vector for one window.

    ``bag``: log(1 + count) per token id.  ``lm``: the model's next-token
    distribution after the window.  ``external``: a precomputed vector.
    Empty windows give the zero vector, flagged as empty.
    """
    if mode == "external":
        if external is None:
            raise ValueError("external mode needs a vector")
        return FeatureVector(np.asarray(external, dtype=np.float64), "external", len(window) == 0)
    if mode == "lm" and lm is None:
        raise ValueError("lm mode needs a language model")
    if mode not in MODES:
        raise ValueError(f"unknown featurizer {mode!r}")
    if len(window) == 0:
        log.debug("empty context window; using zero features")
        return FeatureVector(np.zeros(vocab_size), mode, True)
    if mode == "bag":
        counts = np.bincount(np.asarray(window, dtype=np.int64), minlength=vocab_size)
        return FeatureVector(np.log1p(counts[:vocab_size].astype(np.float64)), "bag")
    return FeatureVector(lm.distribution(window), "lm")


def featurize_many(
    windows: Sequence[Sequence[int]],
    vocab_size: int,
    mode: str = "bag",
    lm: NGramModel | None = None,
    external: Sequence[np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked feature matrix plus a boolean empty-window mask."""
    rows, empty = [], []
    for i, w in enumerate(windows):
        fv = featurize(w, vocab_size, mode, lm, None if external is None else external[i])
        rows.append(fv.values)
        empty.append(fv.empty)
    if not rows:
        return np.zeros((0, vocab_size)), np.zeros(0, dtype=bool)
    return np.vstack(rows), np.asarray(empty)


def read_embeddings(path: str | Path) -> dict[tuple[str, int], np.ndarray]:
    """External embedding JSONL: ``{"patient_id", "prediction_time", "vector"}`` per line."""
    out: dict[tuple[str, int], np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            vec = np.asarray(obj["vector"], dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"line {i}: non-finite embedding")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValueError(f"line {i}: embedding dimension {vec.size} != {dim}")
            out[(obj["patient_id"], int(obj["prediction_time"]))] = vec
    return out


def write_embeddings(rows: Mapping[tuple[str, int], Sequence[float]], fh) -> None:
    for (pid, t), vec in sorted(rows.items()):
        fh.write(json.dumps({"patient_id": pid, "prediction_time": int(t), "vector": [float(x) for x in vec]}))
        fh.write("\n")
