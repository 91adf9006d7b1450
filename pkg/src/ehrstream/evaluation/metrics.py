"""AUROC (rank-based Mann-Whitney) and Brier score."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class SingleClassError(ValueError):
    """AUROC is undefined when only one class is present."""


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """(wins + 0.5 * ties) / (n_pos * n_neg), via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_rows(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Row-wise AUROC of 2-D arrays; NaN for single-class rows."""
    ranks = rankdata(scores, method="average", axis=1)
    y = labels.astype(bool)
    n_pos = y.sum(axis=1).astype(np.float64)
    n_neg = y.shape[1] - n_pos
    rank_sum = np.where(y, ranks, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    out[(n_pos == 0) | (n_neg == 0)] = np.nan
    return out


def brier(probs: Sequence[float], labels: Sequence[bool]) -> float:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("probs and labels must have the same length")
    if p.size == 0:
        raise ValueError("empty input")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(np.mean((p - y) ** 2))


def brier_rows(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.mean((probs - labels) ** 2, axis=1)
