"""L2-regularised logistic regression head trained by full-batch gradient descent."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sps
from scipy.special import expit

from .metrics import SingleClassError, auroc, brier

DEFAULT_L2_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
GRAD_TOL = 1e-7
MAX_ITER = 10_000
SPARSE_DENSITY = 0.25


@dataclass
class LogisticHead:
    weights: np.ndarray
    bias: float
    l2_lambda: float
    n_iter: int = 0
    grad_norm: float = float("nan")
    val_scores: dict[float, float] = field(default_factory=dict)

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return expit(self.decision(X))


def objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, lam: float):
    """Mean log-loss + lam * ||w||^2 and its gradient ``(grad_w, grad_b)``."""
    z = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + lam * (w @ w))
    r = expit(z) - y
    n = X.shape[0]
    return loss, X.T @ r / n + 2.0 * lam * w, float(r.mean())


def _lipschitz_sq_norm(X: np.ndarray, iters: int = 100) -> float:
    """Squared spectral norm of [X, 1] by power iteration."""
    n, d = X.shape
    v = np.ones(d + 1) / np.sqrt(d + 1)
    s = 0.0
    for _ in range(iters):
        u = X @ v[:d] + v[d]
        g = np.concatenate([X.T @ u, [u.sum()]])
        s_new = float(np.linalg.norm(g))
        if s_new == 0.0:
            return 0.0
        v = g / s_new
        if abs(s_new - s) <= 1e-10 * s_new:
            s = s_new
            break
        s = s_new
    return s


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    *,
    w0: np.ndarray | None = None,
    b0: float = 0.0,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
    sq_norm: float | None = None,
) -> LogisticHead:
    """Minimise the regularised log-loss.

    Uses Nesterov-accelerated gradient steps (separate safe step sizes for
    the weights and the bias) with an adaptive momentum restart; stops when the full gradient norm (weights and bias)
    drops to ``tol`` or after ``max_iter`` iterations.
    """
    if not sps.issparse(X):
        X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if sq_norm is None:
        sq_norm = _lipschitz_sq_norm(X)
    # Block-diagonal step sizes.  The Hessian is at most
    # 2 * diag(0.25 ||X||^2 / n + 2 lam, 0.25), so the unregularised bias gets
    # its own step and does not stall when lam is large.
    step_w = 1.0 / (1.05 * 0.5 * sq_norm / n + 2.0 * lam + 1e-12)
    step_b = 1.0 / (1.05 * 0.5)
    x_w = np.zeros(d) if w0 is None else np.array(w0, dtype=np.float64)
    x_b = float(b0)
    y_w, y_b = x_w.copy(), x_b
    t = 1.0
    gnorm = float("inf")
    it = 0
    for it in range(1, max_iter + 1):
        _, gw, gb = objective(y_w, y_b, X, y, lam)
        gnorm = float(np.sqrt(gw @ gw + gb * gb))
        if gnorm <= tol:
            x_w, x_b = y_w, y_b
            break
        nx_w = y_w - step_w * gw
        nx_b = y_b - step_b * gb
        # restart momentum when the step opposes the gradient
        if gw @ (nx_w - x_w) + gb * (nx_b - x_b) > 0:
            t = 1.0
        t_next = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
        beta = (t - 1.0) / t_next
        y_w = nx_w + beta * (nx_w - x_w)
        y_b = nx_b + beta * (nx_b - x_b)
        x_w, x_b, t = nx_w, nx_b, t_next
    else:
        x_w, x_b = y_w, y_b
    return LogisticHead(x_w, x_b, lam, n_iter=it, grad_norm=gnorm)


def train_head(
    X_train: np.ndarray,
    y_train: Sequence[bool],
    X_val: np.ndarray,
    y_val: Sequence[bool],
    l2_grid: Sequence[float] = DEFAULT_L2_GRID,
) -> LogisticHead:
    """Fit one head per lambda and keep the best by validation AUROC.

    Ties go to the larger lambda.  When the validation set holds a single
    class, validation Brier score is used instead.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    ytr = np.asarray(y_train, dtype=np.float64)
    yv = np.asarray(y_val, dtype=bool)
    if ytr.size == 0 or ytr.min() == ytr.max():
        raise SingleClassError("training set needs both classes")
    grid = sorted({float(g) for g in l2_grid}, reverse=True)
    if not grid or grid[-1] < 0:
        raise ValueError("l2 grid must be nonempty and nonnegative")
    use_auroc = yv.size > 0 and 0 < yv.sum() < yv.size
    X_fit = X_train
    if X_train.size and np.count_nonzero(X_train) < SPARSE_DENSITY * X_train.size:
        # bag-of-codes features are mostly zeros; CSR halves the cost per step
        X_fit = sps.csr_matrix(X_train)
    sq = _lipschitz_sq_norm(X_fit)
    best: LogisticHead | None = None
    best_score = -np.inf
    scores: dict[float, float] = {}
    w0, b0 = None, 0.0
    for lam in grid:
        head = fit_logistic(X_fit, ytr, lam, w0=w0, b0=b0, sq_norm=sq)
        w0, b0 = head.weights, head.bias
        if yv.size == 0:
            score = 0.0
        elif use_auroc:
            score = auroc(head.decision(X_val), yv)
        else:
            score = -brier(head.predict_proba(X_val), yv)
        scores[lam] = score
        if score > best_score:
            best, best_score = head, score
    assert best is not None
    best.val_scores = scores
    return best
