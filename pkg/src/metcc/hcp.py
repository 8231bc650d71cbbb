"""Hidden covariates with prior (HCP) normalization.

The data are modelled as ``Y ~ X_h W + F B`` with ``F`` the one-hot design of
known covariates and ``X_h`` hidden covariates tied to ``F`` through the
prior-coupling term ``X_h ~ F U``. Fitting minimises

    J = |Y - X_h W - F B|^2 + lambda_mix |X_h - F U|^2
        + lambda_b |B|^2 + lambda_w |W|^2

by exact block updates in the order B, W, X_h, U. Normalization returns the
residual ``Y - X_h W - F B``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataio import FeatureMatrix, SampleMetadata
from .errors import DimensionMismatch, MalformedFile, RankTooHigh, SingularUpdate, ValidationError

logger = logging.getLogger(__name__)

COVARIATE_COLUMNS = ("institution", "batch", "age_bin")


@dataclass(frozen=True, eq=False)
class KnownCovariates:
    """Intercept plus one-hot blocks.

    ``levels`` holds the category order of each block so that held-out
    samples can be encoded against the training levels. A held-out sample
    with a level unseen in training gets an all-zero row in that block.
    """

    f: np.ndarray
    columns: tuple = ()
    levels: tuple = ()

    @property
    def q(self) -> int:
        return self.f.shape[1]


def build_covariates(
    meta: SampleMetadata,
    levels: Sequence[Sequence[str]] | None = None,
    columns: Sequence[str] = COVARIATE_COLUMNS,
) -> KnownCovariates:
    values = [list(getattr(meta, c)) for c in columns]
    if levels is None:
        levels = tuple(tuple(sorted(set(v))) for v in values)
    blocks = [np.ones((meta.n, 1))]
    names = ["intercept"]
    for col, vals, lv in zip(columns, values, levels):
        pos = {l: j for j, l in enumerate(lv)}
        block = np.zeros((meta.n, len(lv)))
        for i, v in enumerate(vals):
            j = pos.get(v)
            if j is not None:
                block[i, j] = 1.0
        blocks.append(block)
        names.extend(f"{col}={l}" for l in lv)
    return KnownCovariates(np.hstack(blocks), tuple(names), tuple(tuple(l) for l in levels))


@dataclass(frozen=True, eq=False)
class HcpModel:
    w: np.ndarray  # (k_h, p)
    b: np.ndarray  # (q, p)
    x_hidden: np.ndarray  # (n, k_h)
    u: np.ndarray  # (q, k_h) prior-coupling loadings
    f: np.ndarray  # (n, q) training design
    k_h: int
    lambda_b: float
    lambda_mix: float
    lambda_w: float
    objective_trace: tuple = ()
    converged: bool = False
    levels: tuple = field(default=())


def objective(y, f, x, w, b, u, lambda_mix, lambda_b, lambda_w) -> float:
    resid = y - x @ w - f @ b
    prior = x - f @ u
    return float(
        np.sum(resid**2)
        + lambda_mix * np.sum(prior**2)
        + lambda_b * np.sum(b**2)
        + lambda_w * np.sum(w**2)
    )


def _ridge(a, rhs, penalty, block, allow_pinv=False):
    """Solve ``(a^T a + penalty I) z = a^T rhs``."""
    if a.shape[1] == 0:
        return np.zeros((0, rhs.shape[1]))
    if penalty > 0:
        gram = a.T @ a + penalty * np.eye(a.shape[1])
        return np.linalg.solve(gram, a.T @ rhs)
    if allow_pinv:
        return np.linalg.lstsq(a, rhs, rcond=None)[0]
    gram = a.T @ a
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise SingularUpdate(block)
    return np.linalg.solve(gram, a.T @ rhs)


def update_b(y, f, x, w, lambda_b):
    # zero penalty: minimum-norm least squares, since one-hot blocks plus an
    # intercept are always collinear
    return _ridge(f, y - x @ w, lambda_b, "B", allow_pinv=True)


def update_w(y, f, x, b, lambda_w):
    return _ridge(x, y - f @ b, lambda_w, "W")


def update_x(y, f, w, b, u, lambda_mix):
    """Minimise over X_h: ``|R - X W|^2 + lambda_mix |X - F U|^2``."""
    k = w.shape[0]
    if k == 0:
        return np.zeros((y.shape[0], 0))
    resid = y - f @ b
    gram = w @ w.T + lambda_mix * np.eye(k)
    rhs = resid @ w.T + lambda_mix * (f @ u)
    if lambda_mix == 0 and np.linalg.matrix_rank(gram) < k:
        raise SingularUpdate("X_h")
    return np.linalg.solve(gram, rhs.T).T


def update_u(f, x):
    return np.linalg.lstsq(f, x, rcond=None)[0] if x.shape[1] else np.zeros((f.shape[1], 0))


def _pca_scores(y, k):
    if k == 0:
        return np.zeros((y.shape[0], 0))
    centered = y - y.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    # largest-magnitude loading positive, matching the PCA module
    idx = np.argmax(np.abs(vt[:k]), axis=1)
    signs = np.sign(vt[np.arange(k), idx])
    signs[signs == 0] = 1.0
    return u[:, :k] * s[:k] * signs


def _as_array(y):
    return y.values if isinstance(y, FeatureMatrix) else np.asarray(y, dtype=np.float64)


def _as_design(f):
    return f.f if isinstance(f, KnownCovariates) else np.asarray(f, dtype=np.float64)


def fit(
    y,
    f,
    k_h: int = 0,
    lambda_mix: float = 1.0,
    lambda_b: float = 1.0,
    lambda_w: float = 1.0,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> HcpModel:
    y = _as_array(y)
    design = _as_design(f)
    n, p = y.shape
    if design.shape[0] != n:
        raise DimensionMismatch(f"covariates have {design.shape[0]} rows, data has {n}")
    if k_h < 0 or k_h > min(n - 1, p):
        raise RankTooHigh(f"k_h={k_h} exceeds min(n-1, p)={min(n - 1, p)}")
    if min(lambda_mix, lambda_b, lambda_w) < 0:
        raise ValidationError("penalties must be non-negative")
    if max_iter < 1:
        raise ValidationError("max_iter must be >= 1")

    x = _pca_scores(y, k_h)
    w = np.zeros((k_h, p))
    u = update_u(design, x)
    b = np.zeros((design.shape[1], p))
    trace = []
    converged = False
    prev = objective(y, design, x, w, b, u, lambda_mix, lambda_b, lambda_w)
    for _ in range(max_iter):
        b = update_b(y, design, x, w, lambda_b)
        w = update_w(y, design, x, b, lambda_w)
        x = update_x(y, design, w, b, u, lambda_mix)
        u = update_u(design, x)
        cur = objective(y, design, x, w, b, u, lambda_mix, lambda_b, lambda_w)
        trace.append(cur)
        if prev - cur <= tol * max(abs(prev), np.finfo(float).tiny):
            converged = True
            break
        prev = cur
    if not converged:
        logger.debug("HCP stopped at max_iter=%d without reaching tol=%g", max_iter, tol)
    levels = f.levels if isinstance(f, KnownCovariates) else ()
    return HcpModel(w, b, x, u, design, k_h, lambda_b, lambda_mix, lambda_w, tuple(trace), converged, levels)


def hidden_for(model: HcpModel, y, f) -> np.ndarray:
    """Re-estimate hidden covariates for new samples with W, B, U frozen."""
    return update_x(_as_array(y), _as_design(f), model.w, model.b, model.u, model.lambda_mix)


def normalize(model: HcpModel, y, f=None):
    """Residual ``Y - X_h W - F B``.

    With ``f`` omitted, ``y`` must be the training matrix and the fitted
    hidden covariates are used; otherwise they are re-estimated for ``y``.
    Returns the same container type as ``y``.
    """
    values = _as_array(y)
    if values.ndim != 2 or values.shape[1] != model.b.shape[1]:
        raise DimensionMismatch(f"expected {model.b.shape[1]} columns, got {values.shape[-1]}")
    if f is None:
        if values.shape[0] != model.f.shape[0]:
            raise DimensionMismatch("in-sample normalization needs the training rows; pass covariates for new data")
        design, x = model.f, model.x_hidden
    else:
        design = _as_design(f)
        if design.shape != (values.shape[0], model.b.shape[0]):
            raise DimensionMismatch(f"covariates shape {design.shape} does not match model")
        x = hidden_for(model, values, design)
    out = values - x @ model.w - design @ model.b
    if isinstance(y, FeatureMatrix):
        return FeatureMatrix(out, y.feature_ids, y.feature_groups, y.sample_ids)
    return out


def fitted_component(model: HcpModel) -> np.ndarray:
    """The in-sample covariate component ``X_h W + F B``."""
    return model.x_hidden @ model.w + model.f @ model.b


def save_model(model: HcpModel, path) -> None:
    path = Path(path)
    blocks = {"w": model.w, "b": model.b, "x_hidden": model.x_hidden, "u": model.u, "f": model.f}
    np.savez(
        path,
        lambdas=np.array([model.lambda_b, model.lambda_mix, model.lambda_w]),
        k_h=np.array(model.k_h),
        trace=np.array(model.objective_trace),
        converged=np.array(model.converged),
        **blocks,
    )


def load_model(path) -> HcpModel:
    try:
        z = np.load(path)
        lb, lm, lw = z["lambdas"].tolist()
        return HcpModel(
            z["w"], z["b"], z["x_hidden"], z["u"], z["f"], int(z["k_h"]), lb, lm, lw,
            tuple(z["trace"].tolist()), bool(z["converged"]),
        )
    except (KeyError, ValueError, OSError) as exc:
        raise MalformedFile(f"{path}: {exc}") from None
