"""Triplet / siamese metric learning with a one-hidden-layer ReLU network.

The embedding map is ``g(x) = W2 relu(W1 x + b1) + b2``; distances between
samples are plain Euclidean distances between their embeddings. Gradients
are computed by hand (no autodiff) and checked against finite differences
in the test suite.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataio import Embedding
from .errors import (
    DimensionMismatch,
    DivergenceDetected,
    MalformedFile,
    SingleClassInput,
    ValidationError,
)

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True, eq=False)
class TripletNetParams:
    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (k, h)
    b2: np.ndarray  # (k,)

    @property
    def d(self) -> int:
        return self.w1.shape[1]

    @property
    def h(self) -> int:
        return self.w1.shape[0]

    @property
    def k(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> tuple:
        return (self.w1, self.b1, self.w2, self.b2)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unflat(self, vec) -> "TripletNetParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return TripletNetParams(*out)

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass(frozen=True)
class MetricTrainConfig:
    loss: str = "triplet"  # triplet | siamese
    margin: float = 1.0  # siamese only
    dropout_p: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_triplets: int = 256
    minibatch: int | None = None  # None: one optimizer step per epoch
    optimizer: str = "adam"  # adam | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: int = 32
    embed_dim: int = 8
    seed: int = 0
    # "contrastive": same-class pairs pulled together, others pushed past the
    # margin. "literal": hinge applied to same-class pairs instead.
    siamese_convention: str = "contrastive"

    def __post_init__(self):
        if self.loss not in ("triplet", "siamese"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.siamese_convention not in ("contrastive", "literal"):
            raise ValidationError(f"unknown siamese convention {self.siamese_convention!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")
        if self.margin <= 0 or self.learning_rate <= 0:
            raise ValidationError("margin and learning_rate must be positive")
        if self.epochs < 0 or self.batch_triplets < 1 or self.hidden < 1 or self.embed_dim < 1:
            raise ValidationError("epochs, batch_triplets, hidden and embed_dim out of range")


class TripletBatch(NamedTuple):
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


class PairBatch(NamedTuple):
    left: np.ndarray
    right: np.ndarray
    same: np.ndarray  # bool


class TrainResult(NamedTuple):
    params: TripletNetParams
    loss_trace: list


# ------------------------------------------------------------------ network


def init_params(d: int, h: int, k: int, rng: np.random.Generator) -> TripletNetParams:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) weights, zero biases."""
    lim1 = np.sqrt(6.0 / d)
    lim2 = np.sqrt(6.0 / h)
    w1 = rng.uniform(-lim1, lim1, size=(h, d))
    w2 = rng.uniform(-lim2, lim2, size=(k, h))
    return TripletNetParams(w1, np.zeros(h), w2, np.zeros(k))


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray | None:
    """Inverted-dropout multiplier: kept units scaled by 1/(1-p)."""
    if p <= 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def _forward(params, x, mask=None):
    pre = x @ params.w1.T + params.b1
    act = np.maximum(pre, 0.0)
    if mask is not None:
        act = act * mask
    return pre, act, act @ params.w2.T + params.b2


def forward(params: TripletNetParams, x, dropout_mask=None) -> np.ndarray:
    """Evaluate g on one sample (1-D) or a batch of rows (2-D).

    ``dropout_mask`` is the inverted-dropout multiplier from
    :func:`dropout_mask`; omit it at inference time.
    """
    x = np.asarray(x, dtype=np.float64)
    return _forward(params, x, dropout_mask)[2]


def _backward(params, x, pre, act, grad_out, mask=None):
    gw2 = grad_out.T @ act
    gb2 = grad_out.sum(axis=0)
    grad_act = grad_out @ params.w2
    if mask is not None:
        grad_act = grad_act * mask
    grad_pre = grad_act * (pre > 0)
    gw1 = grad_pre.T @ x
    gb1 = grad_pre.sum(axis=0)
    return (gw1, gb1, gw2, gb2)


def _add(*grads):
    return tuple(sum(parts) for parts in zip(*grads))


# ------------------------------------------------------------------- losses


def _triplet_terms(ga, gp, gn):
    diff_p = ga - gp
    diff_n = ga - gn
    d_pos = np.sqrt(np.sum(diff_p**2, axis=-1))
    d_neg = np.sqrt(np.sum(diff_n**2, axis=-1))
    return diff_p, diff_n, d_pos, d_neg


def triplet_loss(params, anchor, positive, negative) -> float:
    """``d_+^2 + (d_- - 1)^2`` for a single triplet."""
    ga, gp, gn = (forward(params, v) for v in (anchor, positive, negative))
    _, _, d_pos, d_neg = _triplet_terms(ga, gp, gn)
    return float(d_pos**2 + (d_neg - 1.0) ** 2)


def _pair_loss(dist, same, margin, convention):
    hinge = np.maximum(0.0, margin - dist) ** 2
    pulled = same if convention == "contrastive" else ~same
    return np.where(pulled, dist**2, hinge)


def siamese_loss(params, x_i, x_j, same_class: bool, margin: float, convention: str = "contrastive") -> float:
    """Contrastive pair loss.

    Under the default convention a same-class pair costs ``D^2`` and a
    different-class pair ``max(0, margin - D)^2``; ``convention="literal"``
    swaps the two cases.
    """
    diff = forward(params, x_i) - forward(params, x_j)
    dist = np.sqrt(np.sum(diff**2))
    return float(_pair_loss(dist, np.asarray(bool(same_class)), margin, convention))


def _triplet_loss_and_grad(params, x, batch, masks):
    xa, xp, xn = x[batch.anchors], x[batch.positives], x[batch.negatives]
    ma, mp, mn = masks
    ca, cp, cn = _forward(params, xa, ma), _forward(params, xp, mp), _forward(params, xn, mn)
    diff_p, diff_n, d_pos, d_neg = _triplet_terms(ca[2], cp[2], cn[2])
    losses = d_pos**2 + (d_neg - 1.0) ** 2
    t = len(losses)
    # d(d_neg - 1)^2 / d(ga - gn); subgradient 0 at d_neg == 0
    safe = np.where(d_neg > 0, d_neg, 1.0)
    coef_n = np.where(d_neg > 0, 2.0 * (d_neg - 1.0) / safe, 0.0)[:, None]
    g_pos = 2.0 * diff_p / t
    g_neg = coef_n * diff_n / t
    grads = _add(
        _backward(params, xa, ca[0], ca[1], g_pos + g_neg, ma),
        _backward(params, xp, cp[0], cp[1], -g_pos, mp),
        _backward(params, xn, cn[0], cn[1], -g_neg, mn),
    )
    return float(losses.mean()), grads


def _pair_loss_and_grad(params, x, batch, masks, margin, convention):
    xl, xr = x[batch.left], x[batch.right]
    ml, mr = masks
    cl, cr = _forward(params, xl, ml), _forward(params, xr, mr)
    diff = cl[2] - cr[2]
    dist = np.sqrt(np.sum(diff**2, axis=1))
    same = np.asarray(batch.same, dtype=bool)
    losses = _pair_loss(dist, same, margin, convention)
    t = len(losses)
    pulled = same if convention == "contrastive" else ~same
    safe = np.where(dist > 0, dist, 1.0)
    hinge_coef = np.where(dist > 0, -2.0 * np.maximum(0.0, margin - dist) / safe, 0.0)
    coef = np.where(pulled, 2.0, hinge_coef)[:, None] / t
    g = coef * diff
    grads = _add(_backward(params, xl, cl[0], cl[1], g, ml), _backward(params, xr, cr[0], cr[1], -g, mr))
    return float(losses.mean()), grads


def loss_and_gradient(params, x, batch, cfg: MetricTrainConfig, rng=None):
    """Mean batch loss and its gradient.

    Dropout is applied only when ``rng`` is given and ``cfg.dropout_p > 0``;
    each branch input gets its own mask.
    """
    x = np.asarray(x, dtype=np.float64)
    n_branches = 3 if isinstance(batch, TripletBatch) else 2
    size = len(batch[0])
    if size == 0:
        raise ValidationError("empty batch")
    if rng is not None and cfg.dropout_p > 0:
        masks = tuple(dropout_mask(rng, (size, params.h), cfg.dropout_p) for _ in range(n_branches))
    else:
        masks = (None,) * n_branches
    if isinstance(batch, TripletBatch):
        loss, grads = _triplet_loss_and_grad(params, x, batch, masks)
    else:
        loss, grads = _pair_loss_and_grad(params, x, batch, masks, cfg.margin, cfg.siamese_convention)
    return loss, TripletNetParams(*grads)


def loss_gradient(params, x, batch, cfg: MetricTrainConfig, rng=None) -> TripletNetParams:
    return loss_and_gradient(params, x, batch, cfg, rng)[1]


def batch_loss(params, x, batch, cfg: MetricTrainConfig) -> float:
    """Mean batch loss in inference mode (straight evaluation, no gradient)."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(batch, TripletBatch):
        ga, gp, gn = (forward(params, x[i]) for i in batch)
        _, _, d_pos, d_neg = _triplet_terms(ga, gp, gn)
        return float(np.mean(d_pos**2 + (d_neg - 1.0) ** 2))
    diff = forward(params, x[batch.left]) - forward(params, x[batch.right])
    dist = np.sqrt(np.sum(diff**2, axis=1))
    return float(np.mean(_pair_loss(dist, np.asarray(batch.same, bool), cfg.margin, cfg.siamese_convention)))


# ----------------------------------------------------------------- sampling


def sample_triplets(labels, size: int, rng: np.random.Generator) -> TripletBatch:
    """Draw ``size`` triplets uniformly from all valid (anchor, pos, neg) triples."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    n = len(labels)
    counts = np.array([len(m) for m in members], dtype=np.float64)
    weight = counts * (counts - 1) * (n - counts)
    if weight.sum() == 0:
        raise SingleClassInput("no valid triplet: need two classes and a class with >= 2 samples")
    cls = rng.choice(len(classes), size=size, p=weight / weight.sum())
    anchors = np.empty(size, dtype=np.intp)
    positives = np.empty(size, dtype=np.intp)
    negatives = np.empty(size, dtype=np.intp)
    for c, idx in enumerate(members):
        sel = np.flatnonzero(cls == c)
        if not sel.size:
            continue
        m = len(idx)
        a = rng.integers(0, m, size=sel.size)
        # positive: uniform over the class minus the anchor
        p = rng.integers(0, m - 1, size=sel.size)
        p = p + (p >= a)
        others = np.flatnonzero(labels != classes[c])
        neg = others[rng.integers(0, len(others), size=sel.size)]
        anchors[sel], positives[sel], negatives[sel] = idx[a], idx[p], neg
    return TripletBatch(anchors, positives, negatives)


def sample_pairs(labels, size: int, rng: np.random.Generator) -> PairBatch:
    labels = np.asarray(labels)
    n = len(labels)
    left = rng.integers(0, n, size=size)
    right = rng.integers(0, n - 1, size=size)
    right = right + (right >= left)
    return PairBatch(left, right, labels[left] == labels[right])


# --------------------------------------------------------------- optimizers


class Sgd:
    def __init__(self, cfg: MetricTrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params, grads):
        return TripletNetParams(*(p - self.lr * g for p, g in zip(params.arrays(), grads.arrays())))


class Adam:
    def __init__(self, cfg: MetricTrainConfig):
        self.lr, self.b1, self.b2, self.eps = cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        g = grads.arrays()
        if self.m is None:
            self.m = [np.zeros_like(a) for a in g]
            self.v = [np.zeros_like(a) for a in g]
        self.t += 1
        out = []
        for i, (p, gi) in enumerate(zip(params.arrays(), g)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * gi
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * gi * gi
            m_hat = self.m[i] / (1 - self.b1**self.t)
            v_hat = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return TripletNetParams(*out)


# ----------------------------------------------------------------- training


def _values(x):
    return x.values if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64)


def train(x_train, labels, cfg: MetricTrainConfig) -> TrainResult:
    """Fit the embedding network on labelled rows.

    Each epoch draws ``cfg.batch_triplets`` triplets (or pairs) and takes one
    optimizer step per minibatch. Only the class label is used.
    """
    x = _values(x_train)
    labels = np.asarray(labels)
    if len(labels) != x.shape[0]:
        raise DimensionMismatch("labels do not match rows")
    if len(np.unique(labels)) < 2:
        raise SingleClassInput("training data contain a single class")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(x.shape[1], cfg.hidden, cfg.embed_dim, rng)
    opt = Adam(cfg) if cfg.optimizer == "adam" else Sgd(cfg)
    mb = cfg.minibatch or cfg.batch_triplets
    trace = []
    for epoch in range(cfg.epochs):
        if cfg.loss == "triplet":
            batch = sample_triplets(labels, cfg.batch_triplets, rng)
        else:
            batch = sample_pairs(labels, cfg.batch_triplets, rng)
        total = 0.0
        for start in range(0, cfg.batch_triplets, mb):
            sub = type(batch)(*(a[start : start + mb] for a in batch))
            loss, grads = loss_and_gradient(params, x, sub, cfg, rng)
            if not np.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}", trace)
            params = opt.step(params, grads)
            total += loss * len(sub[0])
        trace.append(total / cfg.batch_triplets)
        if not all(np.all(np.isfinite(a)) for a in params.arrays()):
            raise DivergenceDetected(f"non-finite parameters at epoch {epoch}", trace)
    return TrainResult(params, trace)


def embed(params: TripletNetParams, x) -> Embedding | np.ndarray:
    values = _values(x)
    if values.ndim != 2 or values.shape[1] != params.d:
        raise DimensionMismatch(f"expected {params.d} columns, got {values.shape[-1]}")
    out = forward(params, values)
    if isinstance(x, Embedding):
        return Embedding(out, x.sample_ids, "metcc")
    return out


# -------------------------------------------------------------- persistence


def save_params(params: TripletNetParams, path, cfg: MetricTrainConfig | None = None) -> None:
    """Sectioned text file: ``[name] rows cols`` header then the rows."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        if cfg is not None:
            fh.write("# config " + json.dumps(asdict(cfg), sort_keys=True) + "\n")
        for name, arr in zip(PARAM_NAMES, params.arrays()):
            mat = np.atleast_2d(arr)
            fh.write(f"[{name}] {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat.tolist():
                fh.write("\t".join(map(repr, row)) + "\n")


def load_params(path) -> TripletNetParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    arrays = {}
    i = 0
    try:
        while i < len(lines):
            line = lines[i]
            i += 1
            if not line or line.startswith("#"):
                continue
            name, r, c = line.split()
            name = name.strip("[]")
            rows = [np.array(lines[i + j].split("\t"), dtype=np.float64) for j in range(int(r))]
            i += int(r)
            mat = np.vstack(rows).reshape(int(r), int(c))
            arrays[name] = mat[0] if name.startswith("b") else mat
        return TripletNetParams(*(arrays[n] for n in PARAM_NAMES))
    except (ValueError, KeyError, IndexError) as exc:
        raise MalformedFile(f"{path}: {exc}") from None


def save_trace(trace, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\tmean_loss\n")
        for e, v in enumerate(trace):
            fh.write(f"{e}\t{v!r}\n")
