"""Paired bootstrap over test examples.

Resample ``i`` draws its indices from ``default_rng([seed, i])`` so results
do not depend on how resamples are scheduled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .metrics import auroc, auroc_rows, brier, brier_rows

HIGHER_IS_BETTER = {"auroc": True, "brier": False}


def resample_indices(n_examples: int, n_resamples: int, seed: int) -> np.ndarray:
    """``(n_resamples, n_examples)`` index matrix; row i depends only on (seed, i)."""
    if n_examples < 1:
        raise ValueError("empty test set")
    out = np.empty((n_resamples, n_examples), dtype=np.int64)
    for i in range(n_resamples):
        out[i] = np.random.default_rng([seed, i]).integers(0, n_examples, n_examples)
    return out


def _metric_rows(metric: str, scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    if metric == "auroc":
        return auroc_rows(scores, labels)
    if metric == "brier":
        return brier_rows(scores, labels)
    raise ValueError(f"unknown metric {metric!r}")


def _point(metric: str, scores, labels) -> float:
    return auroc(scores, labels) if metric == "auroc" else brier(scores, labels)


def percentile_ci(samples: np.ndarray, level: float = 0.95) -> tuple[float, float]:
    s = samples[~np.isnan(samples)]
    if s.size == 0:
        return (float("nan"), float("nan"))
    a = (1 - level) / 2 * 100
    lo, hi = np.percentile(s, [a, 100 - a])
    return float(lo), float(hi)


@dataclass(frozen=True)
class BootstrapResult:
    metric: str
    n_resamples: int
    n_valid: int
    point_a: float
    point_b: float
    ci_a: tuple[float, float]
    ci_b: tuple[float, float]
    diff_point: float
    diff_ci: tuple[float, float]
    win_rate: float
    significant: bool

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("ci_a", "ci_b", "diff_ci"):
            d[k] = list(d[k])
        return d


def bootstrap_ci(
    scores: Sequence[float], labels: Sequence[bool], metric: str = "auroc", n: int = 1000, seed: int = 0
) -> tuple[float, float]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    idx = resample_indices(len(s), n, seed)
    return percentile_ci(_metric_rows(metric, s[idx], y[idx]))


def bootstrap_compare(
    pred_a: Sequence[float],
    pred_b: Sequence[float],
    labels: Sequence[bool],
    metric: str = "auroc",
    n: int = 1000,
    seed: int = 0,
) -> BootstrapResult:
    """Paired comparison of model b against model a.

    ``win_rate`` is the fraction of valid resamples where b is strictly
    better (higher AUROC / lower Brier).  ``significant`` requires a win
    rate of at least 0.5 and a 95% difference interval excluding 0.
    Resamples where the metric is undefined are skipped.
    """
    a = np.asarray(pred_a, dtype=np.float64)
    b = np.asarray(pred_b, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if not (a.shape == b.shape == y.shape):
        raise ValueError("paired predictions and labels must align")
    if metric not in HIGHER_IS_BETTER:
        raise ValueError(f"unknown metric {metric!r}")
    idx = resample_indices(len(y), n, seed)
    ys = y[idx]
    ma = _metric_rows(metric, a[idx], ys)
    mb = _metric_rows(metric, b[idx], ys)
    valid = ~(np.isnan(ma) | np.isnan(mb))
    diff = mb[valid] - ma[valid]
    if HIGHER_IS_BETTER[metric]:
        wins = diff > 0
    else:
        wins = diff < 0
    n_valid = int(valid.sum())
    win_rate = float(wins.mean()) if n_valid else float("nan")
    dci = percentile_ci(diff)
    pa, pb = _point(metric, a, y), _point(metric, b, y)
    significant = bool(n_valid and win_rate >= 0.5 and (dci[0] > 0 or dci[1] < 0))
    return BootstrapResult(
        metric=metric,
        n_resamples=n,
        n_valid=n_valid,
        point_a=pa,
        point_b=pb,
        ci_a=percentile_ci(ma),
        ci_b=percentile_ci(mb),
        diff_point=pb - pa,
        diff_ci=dci,
        win_rate=win_rate,
        significant=significant,
    )
