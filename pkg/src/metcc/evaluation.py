"""Cross-validated downstream evaluation of embeddings.

KNN and L2-penalised logistic regression are fit on each training fold and
scored on train and test rows: AUROC for the binary disease label, argmax
accuracy for the multiclass confounders.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax
from scipy.stats import rankdata

from .dataio import Embedding, SampleMetadata
from .errors import ClassTooSmall, EmptyTrainSet, LengthMismatch, SingleClass, ValidationError

logger = logging.getLogger(__name__)

TARGETS = ("disease", "institution", "batch", "age_bin")
CLASSIFIERS = ("knn", "logreg")
RECIPES = ("pca", "hcp", "metcc")
DEFAULT_KNN_K = 21


# -------------------------------------------------------------------- folds


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of: np.ndarray
    k_folds: int
    seed: int

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != fold)


def make_folds(labels, k_folds: int = 4, seed: int = 0) -> FoldAssignment:
    """Seeded stratified partition.

    Members of each class are shuffled and dealt round-robin; each class
    starts dealing where the previous one stopped, so overall fold sizes
    also differ by at most one.
    """
    labels = np.asarray(labels)
    if k_folds < 2:
        raise ValidationError("k_folds must be >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < k_folds:
        small = classes[np.argmin(counts)]
        raise ClassTooSmall(f"class {small!r} has {counts.min()} members, fewer than k_folds={k_folds}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        fold_of[idx] = (offset + np.arange(len(idx))) % k_folds
        offset = (offset + len(idx)) % k_folds
    return FoldAssignment(fold_of, k_folds, seed)


# ---------------------------------------------------------------------- knn


def _as_values(x):
    return x.values if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64)


def knn_neighbors(train, test, k: int) -> np.ndarray:
    """Indices of the k nearest training rows; distance ties go to the lower index."""
    train = _as_values(train)
    test = _as_values(test)
    if train.shape[0] == 0:
        raise EmptyTrainSet("KNN needs at least one training sample")
    if not 1 <= k <= train.shape[0]:
        raise ValidationError(f"k={k} must lie in [1, n_train={train.shape[0]}]")
    out = np.empty((test.shape[0], k), dtype=np.intp)
    chunk = max(1, 2_000_000 // max(1, train.size))
    for start in range(0, test.shape[0], chunk):
        block = test[start : start + chunk]
        dist = np.sum((block[:, None, :] - train[None, :, :]) ** 2, axis=2)
        out[start : start + chunk] = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return out


def knn_predict(train, train_labels, test, k: int = DEFAULT_KNN_K, classes=None) -> np.ndarray:
    """Per-class vote fractions, shape (n_test, n_classes), columns in ``classes`` order."""
    train_labels = np.asarray(train_labels)
    if classes is None:
        classes = np.unique(train_labels)
    nb = knn_neighbors(train, test, k)
    votes = train_labels[nb]
    return np.stack([(votes == c).mean(axis=1) for c in classes], axis=1)


def knn_positive_score(train, train_labels, test, k: int = DEFAULT_KNN_K) -> np.ndarray:
    """Binary case: fraction of neighbours carrying label 1."""
    return knn_predict(train, train_labels, test, k, classes=[1])[:, 0]


def select_knn_k(train, train_labels, test, test_labels, candidates=range(1, 52, 2)) -> int:
    """Pick k minimising |train accuracy - test accuracy| (smallest k on ties)."""
    train_labels = np.asarray(train_labels)
    classes = np.unique(train_labels)
    best, best_gap = None, np.inf
    for k in candidates:
        if k > len(train_labels):
            break
        tr = classes[np.argmax(knn_predict(train, train_labels, train, k, classes), axis=1)]
        te = classes[np.argmax(knn_predict(train, train_labels, test, k, classes), axis=1)]
        gap = abs(accuracy(tr, train_labels) - accuracy(te, test_labels))
        if gap < best_gap:
            best, best_gap = k, gap
    return best


# ------------------------------------------------------- logistic regression


class LogRegModel(NamedTuple):
    coef: np.ndarray  # (d,) binary, (C, d) multiclass
    intercept: np.ndarray  # scalar array binary, (C,) multiclass
    classes: np.ndarray
    converged: bool
    n_iter: int
    grad_norm: float
    loss_trace: list

    def decision(self, x) -> np.ndarray:
        x = _as_values(x)
        return x @ self.coef.T + self.intercept

    def predict_proba(self, x) -> np.ndarray:
        z = self.decision(x)
        if self.coef.ndim == 1:
            p = expit(z)
            return np.stack([1 - p, p], axis=1)
        return softmax(z, axis=1)

    def predict(self, x) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(x), axis=1)]


def _binary_objective(theta, x1, y, l2):
    """Mean cross-entropy + (l2/2)|w|^2; the last entry of theta is the intercept."""
    n, d1 = x1.shape
    z = x1 @ theta
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * theta[:-1] @ theta[:-1]
    p = expit(z)
    pen = np.r_[np.full(d1 - 1, l2), 0.0]
    grad = x1.T @ (p - y) / n + pen * theta
    hess = (x1.T * (p * (1 - p))) @ x1 / n + np.diag(pen)
    return loss, grad, hess


def _multinomial_objective(theta, x1, onehot, l2):
    n, d1 = x1.shape
    c = onehot.shape[1]
    t = theta.reshape(c, d1)
    z = x1 @ t.T
    logp = log_softmax(z, axis=1)
    p = np.exp(logp)
    w = t[:, :-1]
    loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(w**2)
    pen = np.tile(np.r_[np.full(d1 - 1, l2), 0.0], c)
    grad = ((p - onehot).T @ x1 / n).ravel() + pen * theta
    # Hessian blocks: sum_i x_i x_i^T (diag(p_i) - p_i p_i^T)
    hess = np.empty((c * d1, c * d1))
    for a in range(c):
        for b in range(a, c):
            wgt = p[:, a] * ((a == b) - p[:, b])
            blk = (x1.T * wgt) @ x1 / n
            hess[a * d1 : (a + 1) * d1, b * d1 : (b + 1) * d1] = blk
            hess[b * d1 : (b + 1) * d1, a * d1 : (a + 1) * d1] = blk.T
    hess += np.diag(pen)
    return loss, grad, hess


def _newton(fun, theta, tol, max_iter):
    """Damped Newton with backtracking; returns theta, converged, iters, |grad|, trace."""
    loss, grad, hess = fun(theta)
    trace = [loss]
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return theta, True, it, gnorm, trace
        # min-norm step: the multinomial Hessian is singular along the
        # common-intercept direction, which the gradient never excites
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        slope = grad @ step
        if not slope > 0:
            step, slope = grad, grad @ grad
        t = 1.0
        while True:
            cand = theta - t * step
            c_loss, c_grad, c_hess = fun(cand)
            if c_loss <= loss - 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if c_loss > loss:
            # no decrease achievable in floating point
            return theta, gnorm < tol, it, gnorm, trace
        theta, loss, grad, hess = cand, c_loss, c_grad, c_hess
        trace.append(loss)
    gnorm = float(np.linalg.norm(grad))
    return theta, gnorm < tol, max_iter, gnorm, trace


def logreg_fit(train, train_labels, l2: float = 1.0, tol: float = 1e-8, max_iter: int = 1000) -> LogRegModel:
    """L2-penalised logistic regression, intercept unpenalised, zero start.

    Two classes use the sigmoid model; more use the multinomial softmax.
    """
    x = _as_values(train)
    labels = np.asarray(train_labels)
    if l2 < 0:
        raise ValidationError("l2 must be non-negative")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise SingleClass("logistic regression needs at least two classes")
    n, d = x.shape
    x1 = np.hstack([x, np.ones((n, 1))])
    if len(classes) == 2:
        y = (labels == classes[1]).astype(np.float64)
        theta, conv, it, g, trace = _newton(lambda th: _binary_objective(th, x1, y, l2), np.zeros(d + 1), tol, max_iter)
        return LogRegModel(theta[:-1], theta[-1], classes, conv, it, g, trace)
    onehot = (labels[:, None] == classes[None, :]).astype(np.float64)
    c = len(classes)
    theta, conv, it, g, trace = _newton(
        lambda th: _multinomial_objective(th, x1, onehot, l2), np.zeros(c * (d + 1)), tol, max_iter
    )
    t = theta.reshape(c, d + 1)
    return LogRegModel(t[:, :-1], t[:, -1], classes, conv, it, g, trace)


def logreg_loss(model: LogRegModel, x, labels, l2: float) -> float:
    """Penalised objective of ``model`` on ``(x, labels)``."""
    x = _as_values(x)
    labels = np.asarray(labels)
    proba = model.predict_proba(x)
    idx = np.searchsorted(model.classes, labels)
    nll = -np.mean(np.log(np.clip(proba[np.arange(len(labels)), idx], 1e-300, None)))
    return float(nll + 0.5 * l2 * np.sum(model.coef**2))


# ------------------------------------------------------------------ metrics


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise LengthMismatch("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise LengthMismatch(f"{pred.shape} predictions vs {labels.shape} labels")
    return float(np.mean(pred == labels))


# --------------------------------------------------------------- reporting


@dataclass
class FoldReport:
    target: str
    classifier: str
    recipe: str
    per_fold_train: list
    per_fold_test: list
    mean_train: float = field(init=False)
    sd_train: float = field(init=False)
    mean_test: float = field(init=False)
    sd_test: float = field(init=False)

    def __post_init__(self):
        # population sd across folds
        self.mean_train = float(np.mean(self.per_fold_train))
        self.sd_train = float(np.std(self.per_fold_train))
        self.mean_test = float(np.mean(self.per_fold_test))
        self.sd_test = float(np.std(self.per_fold_test))

    @property
    def metric(self) -> str:
        return "auroc" if self.target == "disease" else "accuracy"


class FoldEmbedding(NamedTuple):
    fold: int
    train_rows: np.ndarray
    test_rows: np.ndarray
    train: Embedding
    test: Embedding


class FitLog:
    """Records which rows reach each fit call, per fold (leakage audit)."""

    def __init__(self):
        self.records = []

    def __call__(self, stage: str, fold: int, rows) -> None:
        self.records.append((stage, fold, np.array(rows, dtype=np.intp, copy=True)))

    def rows_for(self, fold: int, stage: str | None = None):
        return [r for s, f, r in self.records if f == fold and (stage is None or s == stage)]


def _select_l2(x, y, grid, seed, n_inner=3):
    """Inner CV over the training rows only; metric as for the outer task."""
    binary = len(np.unique(y)) == 2 and set(np.unique(y)) <= {0, 1}
    try:
        folds = make_folds(y, n_inner, seed)
    except ClassTooSmall:
        return grid[0]
    scores = []
    for l2 in grid:
        vals = []
        for f in range(n_inner):
            tr, te = folds.train_rows(f), folds.test_rows(f)
            if len(np.unique(y[tr])) < 2:
                continue
            m = logreg_fit(x[tr], y[tr], l2)
            if binary and len(np.unique(y[te])) == 2:
                vals.append(auroc(m.decision(x[te]), y[te]))
            else:
                vals.append(accuracy(m.predict(x[te]), y[te]))
        scores.append(np.mean(vals) if vals else -np.inf)
    return grid[int(np.argmax(scores))]


def _score(classifier, target, train_x, train_y, eval_x, eval_y, knn_k, l2):
    binary = target == "disease"
    if classifier == "knn":
        k = min(knn_k, len(train_y))
        if binary:
            return auroc(knn_positive_score(train_x, train_y, eval_x, k), eval_y)
        classes = np.unique(train_y)
        pred = classes[np.argmax(knn_predict(train_x, train_y, eval_x, k, classes), axis=1)]
        return accuracy(pred, eval_y)
    if classifier == "logreg":
        model = l2 if isinstance(l2, LogRegModel) else None
        if binary:
            return auroc(model.decision(eval_x), eval_y)
        return accuracy(model.predict(eval_x), eval_y)
    raise ValidationError(f"unknown classifier {classifier!r}")


def evaluate(
    fold_embeddings: Sequence[FoldEmbedding],
    metadata: SampleMetadata,
    target: str,
    classifier: str,
    recipe: str | None = None,
    knn_k: int = DEFAULT_KNN_K,
    l2: float | Sequence[float] = 1.0,
    seed: int = 0,
    fit_log: Callable | None = None,
) -> FoldReport:
    """Train a classifier per fold and aggregate train/test metrics.

    A sequence for ``l2`` is resolved per fold by inner cross-validation on
    the training rows.
    """
    if target not in TARGETS:
        raise ValidationError(f"unknown target {target!r}")
    if classifier not in CLASSIFIERS:
        raise ValidationError(f"unknown classifier {classifier!r}")
    y_all = metadata.column(target)
    train_scores, test_scores = [], []
    for fe in fold_embeddings:
        if fit_log is not None:
            fit_log(classifier, fe.fold, fe.train_rows)
        tr_x, te_x = fe.train.values, fe.test.values
        tr_y, te_y = y_all[fe.train_rows], y_all[fe.test_rows]
        model = None
        if classifier == "logreg":
            penalty = l2
            if not np.isscalar(l2):
                grid = list(l2)
                penalty = grid[0] if len(grid) == 1 else _select_l2(tr_x, tr_y, grid, seed + fe.fold)
            model = logreg_fit(tr_x, tr_y, float(penalty))
            if not model.converged:
                logger.debug("logreg fold %d target %s not converged (|g|=%.2e)", fe.fold, target, model.grad_norm)
        train_scores.append(_score(classifier, target, tr_x, tr_y, tr_x, tr_y, knn_k, model))
        test_scores.append(_score(classifier, target, tr_x, tr_y, te_x, te_y, knn_k, model))
    recipe = recipe or (fold_embeddings[0].train.recipe if fold_embeddings else "")
    return FoldReport(target, classifier, recipe, train_scores, test_scores)
