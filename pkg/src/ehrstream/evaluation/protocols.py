"""Evaluation protocols: full-data report, quartile-stratified Brier,
k-shot sampling and generation-based zero-shot probabilities."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..ngram import NGramModel
from ..properties import QUARTILES
from .bootstrap import bootstrap_ci, percentile_ci, resample_indices
from .head import DEFAULT_L2_GRID, train_head
from .metrics import SingleClassError, auroc, brier

FEW_SHOT_KS = (8, 16, 32, 64, 128)


@dataclass
class EvalReport:
    task: str
    model_id: str
    auroc: float | None
    brier: float
    n_test: int
    ci: dict[str, list[float]] = field(default_factory=dict)
    quartile_table: dict[str, float] | None = None
    win_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {
            "task": self.task,
            "model_id": self.model_id,
            "auroc": self.auroc,
            "brier": self.brier,
            "ci": self.ci,
            "n": self.n_test,
        }
        if self.quartile_table is not None:
            d["quartile_table"] = self.quartile_table
        if self.win_rate is not None:
            d["win_rate"] = self.win_rate
        d.update(self.extra)
        return d


def _ci_around(point: float, ci: tuple[float, float]) -> list[float]:
    # percentile intervals can miss a skewed point estimate; widen to cover it
    return [min(ci[0], point), max(ci[1], point)]


def evaluate_predictions(
    probs: Sequence[float],
    labels: Sequence[bool],
    *,
    task: str,
    model_id: str,
    n_bootstrap: int = 1000,
    seed: int = 0,
) -> EvalReport:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if p.size == 0:
        raise ValueError("empty test set")
    try:
        au = auroc(p, y)
    except SingleClassError:
        au = None
    br = brier(p, y)
    ci: dict[str, list[float]] = {}
    if n_bootstrap > 0:
        if au is not None:
            ci["auroc"] = _ci_around(au, bootstrap_ci(p, y, "auroc", n_bootstrap, seed))
        ci["brier"] = _ci_around(br, bootstrap_ci(p, y, "brier", n_bootstrap, seed))
    return EvalReport(task, model_id, au, br, int(p.size), ci)


# ---------------------------------------------------------------------------
# stratification


@dataclass
class StratifiedTable:
    cells: dict[str, float]
    per_task: dict[str, dict[str, float]]
    excluded: dict[str, list[str]]

    def to_json(self) -> dict:
        return {"cells": self.cells, "per_task": self.per_task, "excluded": self.excluded}


def stratified_brier(
    rows: Iterable[tuple[str, str, float, bool]],
    quartiles: Mapping[str, Mapping[str, str]],
) -> StratifiedTable:
    """Two-level average Brier per quartile.

    ``rows`` are ``(task, patient_id, prob, label)``.  Within each task the
    mean Brier of each quartile is taken; a quartile cell is then the
    unweighted mean of those per-task means.  Tasks with an empty quartile
    are left out of that cell and listed in ``excluded``.
    """
    sums: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for task, pid, prob, label in rows:
        try:
            q = quartiles[task][pid]
        except KeyError:
            raise KeyError(f"no quartile for patient {pid!r} in task {task!r}") from None
        if not 0.0 <= prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        sums[task][q].append((prob - float(label)) ** 2)
    per_task: dict[str, dict[str, float]] = {}
    excluded: dict[str, list[str]] = {q: [] for q in QUARTILES}
    for task in sorted(quartiles):
        per_task[task] = {}
        for q in QUARTILES:
            vals = sums.get(task, {}).get(q)
            if vals:
                per_task[task][q] = float(np.mean(vals))
            else:
                excluded[q].append(task)
    cells = {}
    for q in QUARTILES:
        means = [per_task[t][q] for t in sorted(per_task) if q in per_task[t]]
        cells[q] = float(np.mean(means)) if means else float("nan")
    return StratifiedTable(cells, per_task, excluded)


def stratified_compare(
    rows_a: Sequence[tuple[str, str, float, bool]],
    rows_b: Sequence[tuple[str, str, float, bool]],
    quartiles: Mapping[str, Mapping[str, str]],
    n: int = 1000,
    seed: int = 0,
) -> dict[str, dict]:
    """Paired bootstrap of the two-level quartile Brier, one quartile at a time.

    Rows of both models must refer to the same (task, patient) pairs in the
    same order.  Resamples draw rows of the quartile with replacement.
    """
    if len(rows_a) != len(rows_b):
        raise ValueError("paired rows must align")
    for ra, rb in zip(rows_a, rows_b):
        if ra[0] != rb[0] or ra[1] != rb[1]:
            raise ValueError("paired rows must align")
    tasks = sorted({r[0] for r in rows_a})
    tix = {t: i for i, t in enumerate(tasks)}
    out = {}
    for qi, q in enumerate(QUARTILES):
        sel = [i for i, r in enumerate(rows_a) if quartiles[r[0]][r[1]] == q]
        if not sel:
            out[q] = {"n": 0}
            continue
        t_idx = np.array([tix[rows_a[i][0]] for i in sel])
        y = np.array([float(rows_a[i][3]) for i in sel])
        se_a = (np.array([rows_a[i][2] for i in sel]) - y) ** 2
        se_b = (np.array([rows_b[i][2] for i in sel]) - y) ** 2
        idx = resample_indices(len(sel), n, seed * 4 + qi)
        ma = np.empty(n)
        mb = np.empty(n)
        for r in range(n):
            ti = t_idx[idx[r]]
            cnt = np.bincount(ti, minlength=len(tasks))
            have = cnt > 0
            ma[r] = np.mean(np.bincount(ti, weights=se_a[idx[r]], minlength=len(tasks))[have] / cnt[have])
            mb[r] = np.mean(np.bincount(ti, weights=se_b[idx[r]], minlength=len(tasks))[have] / cnt[have])
        diff = mb - ma
        dci = percentile_ci(diff)
        win = float(np.mean(diff < 0))
        out[q] = {
            "n": len(sel),
            "win_rate": win,
            "diff_ci": list(dci),
            "significant": bool(win >= 0.5 and (dci[0] > 0 or dci[1] < 0)),
        }
    return out


# ---------------------------------------------------------------------------
# few-shot


@dataclass
class TaskData:
    """Feature matrices and labels for one task's train/val/test splits."""

    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray


def sample_k_shot(labels: Sequence[bool], k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of k positives and k negatives.

    A class with fewer than k examples contributes all of them, topped up
    with draws (with replacement) from the same class.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    y = np.asarray(labels, dtype=bool)
    picked = []
    for cls in (True, False):
        pool = np.flatnonzero(y == cls)
        if pool.size == 0:
            raise SingleClassError(f"no {'positive' if cls else 'negative'} examples to sample")
        if pool.size >= k:
            picked.append(rng.choice(pool, size=k, replace=False))
        else:
            picked.append(np.concatenate([pool, rng.choice(pool, size=k - pool.size, replace=True)]))
    return np.concatenate(picked)


def few_shot(
    task: TaskData,
    k: int,
    seed: int,
    l2_grid: Sequence[float] = DEFAULT_L2_GRID,
    *,
    model_id: str = "model",
    n_bootstrap: int = 0,
) -> EvalReport:
    """Train on k+k sampled train examples, tune on k+k val examples, test on all."""
    if not (np.any(task.y_train) or np.any(task.y_val) or np.any(task.y_test)):
        raise SingleClassError(f"task {task.name!r} has no positive examples")
    rng = np.random.default_rng(seed)
    tr = sample_k_shot(task.y_train, k, rng)
    va = sample_k_shot(task.y_val, k, rng)
    head = train_head(task.X_train[tr], task.y_train[tr], task.X_val[va], task.y_val[va], l2_grid)
    probs = head.predict_proba(task.X_test)
    rep = evaluate_predictions(
        probs, task.y_test, task=task.name, model_id=model_id, n_bootstrap=n_bootstrap, seed=seed
    )
    rep.extra = {"k": k, "seed": seed, "l2_lambda": head.l2_lambda}
    return rep


# ---------------------------------------------------------------------------
# zero-shot


def zero_shot_prob(
    lm: NGramModel,
    window: Sequence[int],
    positive_tokens: Iterable[int],
    *,
    horizon_tokens: int | None = None,
    horizon_days: float | None = None,
    att_days: Mapping[int, int] | None = None,
    n_timelines: int = 20,
    seed: int = 0,
    temperature: float = 1.0,
    max_tokens: int = 4096,
) -> float:
    """Fraction of sampled continuations containing a positive token within the horizon.

    With ``horizon_tokens`` the horizon counts generated tokens.  With
    ``horizon_days`` elapsed time advances by ``att_days[token]`` whenever a
    gap token is generated; the continuation ends once elapsed time exceeds
    the horizon (or after ``max_tokens``).  Timeline ``i`` samples from
    ``default_rng([seed, i])``.
    """
    pos = frozenset(positive_tokens)
    if not pos:
        raise ValueError("positive token set is empty")
    if n_timelines < 1:
        raise ValueError("n_timelines must be >= 1")
    if (horizon_tokens is None) == (horizon_days is None):
        raise ValueError("give exactly one of horizon_tokens or horizon_days")
    gaps = dict(att_days or {})
    if horizon_days is not None and not gaps:
        raise ValueError("a time horizon needs ATT gap tokens")
    budget = horizon_tokens if horizon_tokens is not None else max_tokens
    if budget <= 0:
        return 0.0
    hits = 0
    for i in range(n_timelines):
        rng = np.random.default_rng([seed, i])
        elapsed = 0.0
        for step, tok in enumerate(lm.iter_sample(window, rng, temperature), start=1):
            if horizon_days is not None and tok in gaps:
                elapsed += gaps[tok]
                if elapsed > horizon_days:
                    break
            if tok in pos:
                hits += 1
                break
            if step >= budget:
                break
    return hits / n_timelines
