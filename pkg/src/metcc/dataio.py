"""Loading, validation and per-sample preprocessing of tabular inputs.

Two TSV formats are understood:

* feature matrix: ``sample_id<TAB>f1<TAB>f2...`` header, an optional
  ``#group<TAB>g1<TAB>g2...`` line tagging each feature (e.g. chromosome),
  then one row of numbers per sample;
* metadata: ``sample_id, label, institution, batch, age`` columns (any order,
  extra columns ignored), age in years.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AllFeaturesDropped,
    DuplicateId,
    EmptyIntersection,
    MalformedFile,
    MissingColumn,
    NegativeAge,
    NonFiniteValue,
    UnknownGroup,
    UnknownLabelValue,
    ValidationError,
    ZeroVarianceSample,
)

logger = logging.getLogger(__name__)

DEFAULT_AGE_EDGES = (0.0, 50.0, 55.0, 60.0, 75.0, 80.0, 85.0)
DEFAULT_LABEL_VALUES = ("healthy", "crc")
DEFAULT_DROP_GROUPS = ("chrX", "chrY")
METADATA_COLUMNS = ("sample_id", "label", "institution", "batch", "age")
GROUP_PREFIX = "#group"
UNGROUPED = "NA"


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateId(f"duplicate {what} id {i!r}")
        seen.add(i)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    feature_ids: tuple
    feature_groups: tuple
    sample_ids: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("feature matrix must be 2-D")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_ids", tuple(self.feature_ids))
        object.__setattr__(self, "feature_groups", tuple(self.feature_groups))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        n, p = values.shape
        if len(self.sample_ids) != n:
            raise ValidationError(f"{len(self.sample_ids)} sample ids for {n} rows")
        if len(self.feature_ids) != p or len(self.feature_groups) != p:
            raise ValidationError("feature ids/groups do not match column count")
        if not np.all(np.isfinite(values)):
            r, c = np.argwhere(~np.isfinite(values))[0]
            raise NonFiniteValue(f"non-finite value at sample {self.sample_ids[r]!r}, feature {self.feature_ids[c]!r}")
        _check_unique(self.sample_ids, "sample")
        _check_unique(self.feature_ids, "feature")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def take_rows(self, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.intp)
        return FeatureMatrix(
            self.values[rows],
            self.feature_ids,
            self.feature_groups,
            [self.sample_ids[i] for i in rows],
        )


@dataclass(frozen=True)
class AgeBinning:
    """Half-open age bins ``[e_i, e_{i+1})`` with an open top bin."""

    boundaries: tuple = DEFAULT_AGE_EDGES

    def __post_init__(self):
        edges = tuple(float(e) for e in self.boundaries)
        if not edges or edges[0] != 0.0:
            raise ValidationError("age bins must start at 0")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValidationError("age bin edges must be strictly increasing")
        object.__setattr__(self, "boundaries", edges)

    @property
    def labels(self) -> tuple:
        e = [f"{b:g}" for b in self.boundaries]
        return tuple(f"{a}-{b}" for a, b in zip(e, e[1:])) + (f"{e[-1]}+",)

    def index(self, age: float) -> int:
        if age < 0:
            raise NegativeAge(f"negative age {age}")
        return int(np.searchsorted(self.boundaries, age, side="right")) - 1

    def assign(self, age: float) -> str:
        return self.labels[self.index(age)]


@dataclass(frozen=True, eq=False)
class SampleMetadata:
    sample_ids: tuple
    label: np.ndarray  # 0/1, 1 = positive class
    institution: tuple
    batch: tuple
    age_bin: tuple
    age: np.ndarray | None = None
    label_values: tuple = DEFAULT_LABEL_VALUES

    def __post_init__(self):
        for name in ("sample_ids", "institution", "batch", "age_bin"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        label = np.asarray(self.label, dtype=np.int64)
        object.__setattr__(self, "label", label)
        if self.age is not None:
            object.__setattr__(self, "age", np.asarray(self.age, dtype=np.float64))
        n = len(self.sample_ids)
        for name in ("label", "institution", "batch", "age_bin"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"metadata column {name} has wrong length")
        if not np.isin(label, (0, 1)).all():
            raise UnknownLabelValue("labels must be encoded 0/1")
        for name in ("institution", "batch", "age_bin"):
            if any(v is None or v == "" for v in getattr(self, name)):
                raise MissingColumn(f"confounder column {name} has missing values")
        _check_unique(self.sample_ids, "sample")

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    def column(self, target: str) -> np.ndarray:
        """Target values as an array; ``disease`` maps to the 0/1 label."""
        if target in ("disease", "label"):
            return self.label
        if target in ("institution", "batch", "age_bin"):
            return np.asarray(getattr(self, target), dtype=object)
        raise KeyError(target)

    def take_rows(self, rows) -> "SampleMetadata":
        rows = np.asarray(rows, dtype=np.intp)
        pick = lambda seq: [seq[i] for i in rows]  # noqa: E731
        return SampleMetadata(
            pick(self.sample_ids),
            self.label[rows],
            pick(self.institution),
            pick(self.batch),
            pick(self.age_bin),
            None if self.age is None else self.age[rows],
            self.label_values,
        )


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    sample_ids: tuple
    recipe: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        if self.values.ndim != 2 or self.values.shape[0] != len(self.sample_ids):
            raise ValidationError("embedding rows must match sample ids")

    @property
    def k(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------- matrix I/O


def load_matrix(path, format: str = "tsv") -> FeatureMatrix:
    if format != "tsv":
        raise ValidationError(f"unsupported matrix format {format!r}")
    path = Path(path)
    with path.open(encoding="utf-8", newline="\n") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    header = lines[0].rstrip("\r").split("\t")
    if header[0] != "sample_id" or len(header) < 2:
        raise MalformedFile(f"{path}: header must start with 'sample_id' and name at least one feature")
    feature_ids = header[1:]
    p = len(feature_ids)
    start = 1
    groups = [UNGROUPED] * p
    if len(lines) > 1 and lines[1].startswith(GROUP_PREFIX):
        g = lines[1].rstrip("\r").split("\t")
        if g[0] != GROUP_PREFIX or len(g) != p + 1:
            raise MalformedFile(f"{path}: group line has {len(g)} fields, expected {p + 1}")
        groups = g[1:]
        start = 2
    sample_ids = []
    rows = []
    for lineno, line in enumerate(lines[start:], start=start + 1):
        fields = line.rstrip("\r").split("\t")
        if len(fields) != p + 1:
            raise MalformedFile(f"{path}:{lineno}: {len(fields)} fields, expected {p + 1}")
        try:
            row = np.array(fields[1:], dtype=np.float64)
        except ValueError as exc:
            raise NonFiniteValue(f"{path}:{lineno}: {exc}") from None
        if not np.all(np.isfinite(row)):
            raise NonFiniteValue(f"{path}:{lineno}: non-finite value")
        sample_ids.append(fields[0])
        rows.append(row)
    values = np.vstack(rows) if rows else np.empty((0, p))
    return FeatureMatrix(values, feature_ids, groups, sample_ids)


def save_matrix(m: FeatureMatrix, path) -> None:
    """Write ``m`` so that :func:`load_matrix` reproduces it bit-exactly."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(("sample_id",) + m.feature_ids) + "\n")
        if any(g != UNGROUPED for g in m.feature_groups):
            fh.write("\t".join((GROUP_PREFIX,) + m.feature_groups) + "\n")
        for sid, row in zip(m.sample_ids, m.values.tolist()):
            fh.write(sid + "\t" + "\t".join(map(repr, row)) + "\n")


# -------------------------------------------------------------- metadata I/O


def load_metadata(
    path,
    binning: AgeBinning | None = None,
    label_values: Sequence[str] = DEFAULT_LABEL_VALUES,
) -> SampleMetadata:
    binning = binning or AgeBinning()
    negative, positive = label_values
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        raise MalformedFile(f"{path}: empty file")
    header = lines[0].split("\t")
    missing = [c for c in METADATA_COLUMNS if c not in header]
    if missing:
        raise MissingColumn(f"{path}: missing columns {missing}")
    col = {c: header.index(c) for c in METADATA_COLUMNS}
    ids, labels, inst, batch, ages = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        f = line.split("\t")
        if len(f) != len(header):
            raise MalformedFile(f"{path}:{lineno}: {len(f)} fields, expected {len(header)}")
        lab = f[col["label"]]
        if lab == positive:
            labels.append(1)
        elif lab == negative:
            labels.append(0)
        else:
            raise UnknownLabelValue(f"{path}:{lineno}: label {lab!r} not in {tuple(label_values)}")
        for name, store in (("institution", inst), ("batch", batch)):
            v = f[col[name]]
            if v == "":
                raise MissingColumn(f"{path}:{lineno}: empty {name}")
            store.append(v)
        try:
            age = float(f[col["age"]])
        except ValueError:
            raise MalformedFile(f"{path}:{lineno}: bad age {f[col['age']]!r}") from None
        if not np.isfinite(age):
            raise NonFiniteValue(f"{path}:{lineno}: non-finite age")
        if age < 0:
            raise NegativeAge(f"{path}:{lineno}: negative age {age}")
        ages.append(age)
        ids.append(f[col["sample_id"]])
    age_bins = [binning.assign(a) for a in ages]
    return SampleMetadata(ids, labels, inst, batch, age_bins, ages, tuple(label_values))


def save_metadata(meta: SampleMetadata, path) -> None:
    if meta.age is None:
        raise ValidationError("metadata without raw ages cannot be written")
    negative, positive = meta.label_values
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(METADATA_COLUMNS) + "\n")
        for i, sid in enumerate(meta.sample_ids):
            lab = positive if meta.label[i] == 1 else negative
            fh.write(f"{sid}\t{lab}\t{meta.institution[i]}\t{meta.batch[i]}\t{float(meta.age[i])!r}\n")


# ------------------------------------------------------------- preprocessing


def standardize_rows(values: np.ndarray, sample_ids: Sequence[str] | None = None) -> np.ndarray:
    """Center each row and divide by its population standard deviation."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=1, keepdims=True)
    centered = values - mean
    sd = np.sqrt(np.mean(centered**2, axis=1, keepdims=True))
    bad = np.flatnonzero(sd[:, 0] == 0)
    if bad.size:
        sid = sample_ids[bad[0]] if sample_ids is not None else int(bad[0])
        raise ZeroVarianceSample(sid)
    return centered / sd


def preprocess(m: FeatureMatrix, drop_groups: Iterable[str] = ()) -> FeatureMatrix:
    """Drop features tagged with any of ``drop_groups``, then standardize each sample."""
    drop = set(drop_groups)
    unknown = drop - set(m.feature_groups)
    if unknown:
        raise UnknownGroup(f"feature groups not present: {sorted(unknown)}")
    keep = np.array([g not in drop for g in m.feature_groups], dtype=bool)
    if keep.sum() < 2:
        raise AllFeaturesDropped(f"only {int(keep.sum())} feature(s) left after dropping {sorted(drop)}")
    values = standardize_rows(m.values[:, keep], m.sample_ids)
    idx = np.flatnonzero(keep)
    return FeatureMatrix(
        values,
        [m.feature_ids[i] for i in idx],
        [m.feature_groups[i] for i in idx],
        m.sample_ids,
    )


def align(m: FeatureMatrix, meta: SampleMetadata) -> tuple[FeatureMatrix, SampleMetadata]:
    """Restrict both inputs to their shared samples, in matrix order."""
    meta_pos = {sid: i for i, sid in enumerate(meta.sample_ids)}
    rows = [i for i, sid in enumerate(m.sample_ids) if sid in meta_pos]
    if not rows:
        raise EmptyIntersection("matrix and metadata share no sample ids")
    dropped = m.n + meta.n - 2 * len(rows)
    if dropped:
        logger.warning("align: dropped %d sample(s) not present in both inputs", dropped)
    if len(rows) == m.n and meta.n == m.n and meta.sample_ids == m.sample_ids:
        return m, meta
    meta_rows = [meta_pos[m.sample_ids[i]] for i in rows]
    return m.take_rows(rows), meta.take_rows(meta_rows)


# -------------------------------------------------------------------- config


def load_config(path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; ``#`` starts a comment line."""
    cfg = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise MalformedFile(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def parse_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def binning_from_config(cfg: dict) -> AgeBinning:
    if "age_bins" in cfg:
        return AgeBinning(tuple(float(v) for v in parse_list(cfg["age_bins"])))
    return AgeBinning()


def label_values_from_config(cfg: dict) -> tuple[str, str]:
    return (
        cfg.get("label_negative", DEFAULT_LABEL_VALUES[0]),
        cfg.get("label_positive", DEFAULT_LABEL_VALUES[1]),
    )


def drop_groups_from_config(cfg: dict) -> tuple[str, ...]:
    if "drop_groups" in cfg:
        return tuple(parse_list(cfg["drop_groups"]))
    return DEFAULT_DROP_GROUPS
