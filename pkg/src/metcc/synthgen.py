"""Synthetic feature matrices with planted disease and confounder effects.

Every factor (disease, institution, batch, age bin) contributes a per-sample
effect vector drawn from its own random low-rank feature subspace; all
subspaces are mutually orthogonal. Effects are centred over samples and
rescaled so that a factor's mean squared effect norm equals its scale
squared. The nonlinear term applies ``tanh`` to a random linear mixture of
the confounder coefficients, i.e. an interaction of institution, batch and
age that additive one-hot models cannot absorb.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dataio import (
    AgeBinning,
    FeatureMatrix,
    SampleMetadata,
    save_matrix,
    save_metadata,
)
from .errors import InfeasibleConfig, ValidationError

logger = logging.getLogger(__name__)

FACTORS = ("disease", "institution", "batch", "age_bin", "nonlinear")
AUTOSOMES = tuple(f"chr{i}" for i in range(1, 23))
SEX_GROUPS = ("chrX", "chrY")


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 600
    n_features: int = 2000
    n_institutions: int = 4
    n_batches: int = 10
    class_balance: float = 0.5
    disease_effect_scale: float = 2.0
    institution_effect_scale: float = 6.0
    batch_effect_scale: float = 6.0
    age_effect_scale: float = 6.0
    nonlinear_mix: float = 0.5
    noise_sd: float = 1.0
    age_label_correlation: float = 0.25
    seed: int = 0
    effect_rank: int = 4
    nested_batches: bool = True
    sex_fraction: float = 0.04  # share of features tagged chrX/chrY

    def __post_init__(self):
        if not self.n_batches >= self.n_institutions >= 1:
            raise InfeasibleConfig("need n_batches >= n_institutions >= 1")
        if self.n_samples < self.n_batches:
            raise InfeasibleConfig(f"cannot place a sample in each of {self.n_batches} batches with {self.n_samples} samples")
        if self.n_features < 2 or self.effect_rank < 1:
            raise ValidationError("n_features >= 2 and effect_rank >= 1 required")
        if not 0 < self.class_balance < 1:
            raise ValidationError("class_balance must lie in (0, 1)")
        scales = (self.disease_effect_scale, self.institution_effect_scale, self.batch_effect_scale, self.age_effect_scale)
        if min(scales) < 0:
            raise ValidationError("effect scales must be non-negative")
        if not 0 <= self.nonlinear_mix <= 1 or not 0 <= self.age_label_correlation <= 1:
            raise ValidationError("nonlinear_mix and age_label_correlation must lie in [0, 1]")
        if self.noise_sd <= 0:
            raise ValidationError("noise_sd must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_mapping(cls, cfg: dict) -> "SynthConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in cfg:
                raw = cfg[f.name]
                if f.type in ("bool", bool):
                    kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
                elif f.type in ("int", int):
                    kwargs[f.name] = int(raw)
                else:
                    kwargs[f.name] = float(raw)
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    config: SynthConfig
    label: np.ndarray  # (n,)
    institution: np.ndarray  # (n,) level index
    batch: np.ndarray
    age_bin: np.ndarray
    batch_institution: np.ndarray  # (n_batches,) owning institution
    level_effects: dict  # factor -> (n_levels, p) centred, scaled effects
    nonlinear_effects: dict  # (inst, batch, age) -> (p,)
    bases: dict  # factor -> (p, r) orthonormal basis
    noise_sd: float

    def assignment(self, factor: str) -> np.ndarray:
        return {"disease": self.label, "institution": self.institution, "batch": self.batch, "age_bin": self.age_bin}[factor]

    def effect_matrix(self, factor: str) -> np.ndarray:
        """Per-sample (n, p) effect of one factor."""
        if factor == "nonlinear":
            keys = zip(self.institution.tolist(), self.batch.tolist(), self.age_bin.tolist())
            return np.array([self.nonlinear_effects[k] for k in keys])
        return self.level_effects[factor][self.assignment(factor)]


def _centre_and_scale(levels, assign, scale):
    """Centre level effects at the sample mean and set their RMS norm to ``scale``."""
    counts = np.bincount(assign, minlength=levels.shape[0]).astype(np.float64)
    mean = counts @ levels / counts.sum()
    levels = levels - mean
    ms = counts @ np.sum(levels**2, axis=1) / counts.sum()
    if scale == 0 or ms == 0:
        return np.zeros_like(levels)
    return levels * (scale / np.sqrt(ms))


def _dealt(rng, n, n_levels):
    """Random assignment with level counts differing by at most one."""
    return rng.permutation(np.arange(n) % n_levels)


def _age_bins(rng, label, n_bins, corr):
    base = _dealt(rng, len(label), n_bins)
    if corr == 0:
        return base
    # label-skewed draw: positives lean to the older bins, negatives younger
    ramp = np.arange(1, n_bins + 1, dtype=np.float64)
    older = ramp**2 / np.sum(ramp**2)
    younger = older[::-1]
    skewed = np.where(
        label == 1,
        rng.choice(n_bins, size=len(label), p=older),
        rng.choice(n_bins, size=len(label), p=younger),
    )
    use = rng.random(len(label)) < corr
    return np.where(use, skewed, base)


def generate(cfg: SynthConfig, binning: AgeBinning | None = None):
    """Return ``(FeatureMatrix, SampleMetadata, GroundTruth)``; deterministic in ``cfg.seed``."""
    binning = binning or AgeBinning()
    rng = np.random.default_rng(cfg.seed)
    n, p = cfg.n_samples, cfg.n_features
    n_age = len(binning.labels)

    n_pos = int(round(cfg.class_balance * n))
    label = rng.permutation(np.r_[np.ones(n_pos, dtype=np.int64), np.zeros(n - n_pos, dtype=np.int64)])
    batch = _dealt(rng, n, cfg.n_batches)
    batch_inst = np.arange(cfg.n_batches) % cfg.n_institutions
    if cfg.nested_batches:
        inst = batch_inst[batch]
    else:
        inst = _dealt(rng, n, cfg.n_institutions)
    age_bin = _age_bins(rng, label, n_age, cfg.age_label_correlation)

    ranks = {
        "disease": 1,
        "institution": min(cfg.effect_rank, cfg.n_institutions),
        "batch": min(cfg.effect_rank, cfg.n_batches),
        "age_bin": min(cfg.effect_rank, n_age),
        "nonlinear": cfg.effect_rank,
    }
    total_rank = sum(ranks.values())
    if total_rank > p:
        raise InfeasibleConfig(f"effect subspaces need {total_rank} dims, only {p} features")
    q, _ = np.linalg.qr(rng.standard_normal((p, total_rank)))
    bases, pos = {}, 0
    for f in FACTORS:
        bases[f] = q[:, pos : pos + ranks[f]]
        pos += ranks[f]

    n_levels = {"disease": 2, "institution": cfg.n_institutions, "batch": cfg.n_batches, "age_bin": n_age}
    scales = {
        "disease": cfg.disease_effect_scale,
        "institution": cfg.institution_effect_scale,
        "batch": cfg.batch_effect_scale,
        "age_bin": cfg.age_effect_scale,
    }
    assign = {"disease": label, "institution": inst, "batch": batch, "age_bin": age_bin}
    coefs, level_effects = {}, {}
    for f in ("disease", "institution", "batch", "age_bin"):
        c = rng.standard_normal((n_levels[f], ranks[f]))
        coefs[f] = c
        level_effects[f] = _centre_and_scale(c @ bases[f].T, assign[f], scales[f])

    # nonlinear interaction over observed (institution, batch, age) cells
    conf = ("institution", "batch", "age_bin")
    mix_in = sum(ranks[f] for f in conf)
    mixing = rng.standard_normal((ranks["nonlinear"], mix_in)) / np.sqrt(mix_in)
    cells = sorted(set(zip(inst.tolist(), batch.tolist(), age_bin.tolist())))
    cell_index = {c: i for i, c in enumerate(cells)}
    z = np.array(
        [np.concatenate([scales[f] * coefs[f][lvl] for f, lvl in zip(conf, cell)]) for cell in cells]
    ).reshape(len(cells), mix_in)
    cell_effects = np.tanh(z @ mixing.T) @ bases["nonlinear"].T
    cell_of = np.array([cell_index[c] for c in zip(inst.tolist(), batch.tolist(), age_bin.tolist())])
    nl_scale = cfg.nonlinear_mix * float(np.sqrt(sum(scales[f] ** 2 for f in conf)))
    cell_effects = _centre_and_scale(cell_effects, cell_of, nl_scale)
    nonlinear_effects = {c: cell_effects[i] for i, c in enumerate(cells)}

    values = cfg.noise_sd * rng.standard_normal((n, p))
    for f in ("disease", "institution", "batch", "age_bin"):
        values += level_effects[f][assign[f]]
    values += cell_effects[cell_of]

    width = len(str(n - 1))
    sample_ids = [f"s{i:0{width}d}" for i in range(n)]
    pwidth = len(str(p - 1))
    feature_ids = [f"g{j:0{pwidth}d}" for j in range(p)]
    n_sex = int(round(cfg.sex_fraction * p))
    groups = [AUTOSOMES[j % len(AUTOSOMES)] for j in range(p - n_sex)]
    groups += [SEX_GROUPS[j % 2] for j in range(n_sex)]
    matrix = FeatureMatrix(values, feature_ids, groups, sample_ids)

    edges = binning.boundaries + (binning.boundaries[-1] + 10.0,)
    lo, hi = np.array(edges[:-1])[age_bin], np.array(edges[1:])[age_bin]
    # whole years keep the TSV round-trip exact and bins unambiguous
    ages = np.floor(lo + rng.random(n) * (hi - lo))
    inst_names = [f"inst{i}" for i in range(cfg.n_institutions)]
    batch_names = [f"batch{b:02d}" for b in range(cfg.n_batches)]
    meta = SampleMetadata(
        sample_ids,
        label,
        [inst_names[i] for i in inst],
        [batch_names[b] for b in batch],
        [binning.labels[a] for a in age_bin],
        ages,
    )
    gt = GroundTruth(cfg, label, inst, batch, age_bin, batch_inst, level_effects, nonlinear_effects, bases, cfg.noise_sd)
    return matrix, meta, gt


def confounding_strength(gt: GroundTruth) -> dict[str, float]:
    """Share of total expected variance per factor, plus ``noise``.

    Uses the realised assignment counts; because the factor subspaces are
    orthogonal and each effect is centred, cross terms vanish and the shares
    sum to one.
    """
    p = gt.level_effects["disease"].shape[1]
    n = len(gt.label)
    var = {}
    for f in ("disease", "institution", "batch", "age_bin"):
        counts = np.bincount(gt.assignment(f), minlength=gt.level_effects[f].shape[0])
        var[f] = float(counts @ np.sum(gt.level_effects[f] ** 2, axis=1) / n)
    nl = gt.effect_matrix("nonlinear")
    var["nonlinear"] = float(np.sum(nl**2) / n)
    var["noise"] = p * gt.noise_sd**2
    total = sum(var.values())
    return {k: v / total for k, v in var.items()}


def write_ground_truth(gt: GroundTruth, path) -> None:
    """TSV of (factor, level, feature index, effect value)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("factor\tlevel\tfeature\tvalue\n")
        for f in ("disease", "institution", "batch", "age_bin"):
            for lvl, row in enumerate(gt.level_effects[f]):
                for j, v in enumerate(row.tolist()):
                    fh.write(f"{f}\t{lvl}\t{j}\t{v!r}\n")
        for cell, row in gt.nonlinear_effects.items():
            key = "|".join(map(str, cell))
            for j, v in enumerate(row.tolist()):
                fh.write(f"nonlinear\t{key}\t{j}\t{v!r}\n")


def write_dataset(cfg: SynthConfig, out_dir, binning: AgeBinning | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix, meta, gt = generate(cfg, binning)
    save_matrix(matrix, out / "matrix.tsv")
    save_metadata(meta, out / "metadata.tsv")
    write_ground_truth(gt, out / "ground_truth.tsv")
    return matrix, meta, gt
