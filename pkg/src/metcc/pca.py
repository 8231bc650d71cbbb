"""Principal components analysis via the thin SVD of column-centered data."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import Embedding, FeatureMatrix
from .errors import DegenerateData, DimensionMismatch, MalformedFile, RankTooHigh


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray  # (p,)
    components: np.ndarray  # (k, p), orthonormal rows
    explained_variance: np.ndarray  # (k,)

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def p(self) -> int:
        return self.components.shape[1]


def _values(x):
    return x.values if isinstance(x, (FeatureMatrix, Embedding)) else np.asarray(x, dtype=np.float64)


def fix_signs(components: np.ndarray) -> np.ndarray:
    """Flip each row so that its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit(x, k: int) -> PcaModel:
    values = _values(x)
    n, p = values.shape
    if k < 0 or k > min(n - 1, p):
        raise RankTooHigh(f"k={k} exceeds min(n-1, p)={min(n - 1, p)}")
    mean = values.mean(axis=0)
    centered = values - mean
    if not np.any(centered):
        raise DegenerateData("centered data is identically zero")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = fix_signs(vt[:k])
    if k and not np.allclose(components @ components.T, np.eye(k), atol=1e-8):
        raise DegenerateData("components lost orthonormality")
    return PcaModel(mean, components, s[:k] ** 2 / (n - 1))


def transform(model: PcaModel, x) -> Embedding | np.ndarray:
    """Project ``x`` onto the model's components.

    FeatureMatrix input gives an ``Embedding`` tagged ``pca``; a bare array
    gives a bare array.
    """
    values = _values(x)
    if values.ndim != 2 or values.shape[1] != model.p:
        raise DimensionMismatch(f"expected {model.p} columns, got {values.shape[-1]}")
    scores = (values - model.mean) @ model.components.T
    if isinstance(x, FeatureMatrix):
        return Embedding(scores, x.sample_ids, "pca")
    return scores


def inverse_transform(model: PcaModel, scores) -> np.ndarray:
    return np.asarray(_values(scores)) @ model.components + model.mean


def save_model(model: PcaModel, path) -> None:
    """TSV layout: ``k<TAB>p`` line, mean row, k component rows, variance row."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{model.k}\t{model.p}\n")
        for row in (model.mean, *model.components, model.explained_variance):
            fh.write("\t".join(map(repr, np.asarray(row).tolist())) + "\n")


def load_model(path) -> PcaModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        k, p = (int(v) for v in lines[0].split("\t"))
        rows = [np.array(ln.split("\t"), dtype=np.float64) if ln else np.empty(0) for ln in lines[1:]]
    except (ValueError, IndexError) as exc:
        raise MalformedFile(f"{path}: {exc}") from None
    if len(rows) != k + 2:
        raise MalformedFile(f"{path}: expected {k + 2} data lines, got {len(rows)}")
    components = np.vstack(rows[1 : k + 1]) if k else np.empty((0, p))
    return PcaModel(rows[0], components, rows[k + 1])
