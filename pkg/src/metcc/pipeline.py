"""End-to-end orchestration of the three embedding recipes.

    pca:   PCA(X)
    hcp:   PCA(HCP(X))
    metcc: METCC(PCA(X))

Every transform is fit on the training rows of a fold and then applied to
its train and test rows. All randomness derives from one root seed through
``derive_seed(root, component, fold)``.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import hcp, metric, pca
from .dataio import Embedding, FeatureMatrix, SampleMetadata
from .errors import IncompleteGrid, MetccError, ValidationError
from .evaluation import (
    CLASSIFIERS,
    RECIPES,
    TARGETS,
    FoldAssignment,
    FoldEmbedding,
    FoldReport,
    evaluate,
    make_folds,
)

logger = logging.getLogger(__name__)

# component ids for seed derivation
SEED_FOLDS, SEED_METCC, SEED_SEARCH, SEED_HOLDOUT, SEED_LOGREG = range(5)

RECIPE_PARAMS = {
    "pca": ("pca_k",),
    "hcp": ("pca_k", "k_h", "lambda_mix", "lambda_b", "lambda_w", "hcp_max_iter", "hcp_tol"),
    "metcc": (
        "pca_k", "hidden", "embed_dim", "dropout_p", "learning_rate", "epochs",
        "batch_triplets", "loss", "margin", "optimizer",
    ),
}


def derive_seed(root: int, component: int, fold: int = 0) -> int:
    """64-bit seed for (component, fold) under ``root``."""
    ss = np.random.SeedSequence(int(root), spawn_key=(int(component), int(fold)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class RecipeSpec:
    recipe: str = "pca"
    pca_k: int = 20
    # hcp
    k_h: int = 2
    lambda_mix: float = 100.0
    lambda_b: float = 1.0
    lambda_w: float = 1.0
    hcp_max_iter: int = 500
    hcp_tol: float = 1e-6
    # metcc
    hidden: int = 64
    embed_dim: int = 4
    dropout_p: float = 0.2
    learning_rate: float = 1e-2
    epochs: int = 300
    batch_triplets: int = 256
    loss: str = "triplet"
    margin: float = 1.0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ValidationError(f"unknown recipe {self.recipe!r}")

    def metric_config(self, seed: int) -> metric.MetricTrainConfig:
        return metric.MetricTrainConfig(
            loss=self.loss,
            margin=self.margin,
            dropout_p=self.dropout_p,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_triplets=self.batch_triplets,
            optimizer=self.optimizer,
            hidden=self.hidden,
            embed_dim=self.embed_dim,
            seed=seed,
        )

    def relevant(self) -> dict:
        return {k: getattr(self, k) for k in RECIPE_PARAMS[self.recipe]}

    def n_parameters(self, p: int, q: int = 0) -> int:
        """Fitted parameter count, used as the model-size tie-break."""
        count = self.pca_k * p
        if self.recipe == "hcp":
            count += (self.k_h + q) * p
        elif self.recipe == "metcc":
            count += self.hidden * (self.pca_k + 1) + self.embed_dim * (self.hidden + 1)
        return count

    @classmethod
    def from_mapping(cls, cfg: dict, recipe: str | None = None) -> "RecipeSpec":
        recipe = recipe or cfg.get("recipe", "pca")
        kwargs = {"recipe": recipe}
        for f in fields(cls):
            if f.name == "recipe" or f.name not in cfg:
                continue
            if f.name not in RECIPE_PARAMS[recipe]:
                logger.warning("parameter %s ignored for recipe %s", f.name, recipe)
                continue
            kwargs[f.name] = _coerce(f.type, cfg[f.name])
        return cls(**kwargs)


def _coerce(type_name, raw):
    if type_name in ("int", int):
        return int(raw)
    if type_name in ("float", float):
        return float(raw)
    return str(raw)


# ------------------------------------------------------------------ recipes


def _fit_fold(data, meta, spec, fold, train_rows, test_rows, root_seed):
    """Run one fold's recipe; returns the FoldEmbedding and the fit records."""
    log = []
    x_tr = data.values[train_rows]
    x_te = data.values[test_rows]
    ids_tr = [data.sample_ids[i] for i in train_rows]
    ids_te = [data.sample_ids[i] for i in test_rows]

    if spec.recipe == "hcp":
        meta_tr = meta.take_rows(train_rows)
        meta_te = meta.take_rows(test_rows)
        f_tr = hcp.build_covariates(meta_tr)
        f_te = hcp.build_covariates(meta_te, levels=f_tr.levels)
        log.append(("hcp", fold, train_rows))
        model = hcp.fit(
            x_tr, f_tr, spec.k_h, spec.lambda_mix, spec.lambda_b, spec.lambda_w,
            max_iter=spec.hcp_max_iter, tol=spec.hcp_tol,
        )
        x_tr = hcp.normalize(model, x_tr)
        x_te = hcp.normalize(model, x_te, f_te)

    log.append(("pca", fold, train_rows))
    pmodel = pca.fit(x_tr, spec.pca_k)
    s_tr = pca.transform(pmodel, x_tr)
    s_te = pca.transform(pmodel, x_te)

    if spec.recipe == "metcc":
        log.append(("metcc", fold, train_rows))
        cfg = spec.metric_config(derive_seed(root_seed, SEED_METCC, fold))
        net = metric.train(s_tr, meta.label[train_rows], cfg).params
        assert net.d == spec.pca_k
        s_tr = metric.embed(net, s_tr)
        s_te = metric.embed(net, s_te)

    fe = FoldEmbedding(
        fold,
        np.asarray(train_rows),
        np.asarray(test_rows),
        Embedding(s_tr, ids_tr, spec.recipe),
        Embedding(s_te, ids_te, spec.recipe),
    )
    return fe, log


def _fold_task(args):
    return _fit_fold(*args)


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def run_recipe(
    data: FeatureMatrix,
    metadata: SampleMetadata,
    spec: RecipeSpec,
    folds: FoldAssignment,
    root_seed: int = 0,
    fit_log=None,
    workers: int = 1,
    global_fit: bool = False,
) -> list[FoldEmbedding]:
    """Per-fold embeddings for one recipe.

    ``global_fit`` fits each transform once on all rows (test rows leak into
    the fit); kept only for comparison with per-fold fitting.
    """
    if data.sample_ids != metadata.sample_ids:
        raise ValidationError("data and metadata are not aligned; call dataio.align first")
    tasks = []
    for f in range(folds.k_folds):
        te = folds.test_rows(f)
        tr = np.arange(data.n) if global_fit else folds.train_rows(f)
        tasks.append((data, metadata, spec, f, tr, te, root_seed))
    results = _map(_fold_task, tasks, workers)
    out = []
    for (fe, log), task in zip(results, tasks):
        if global_fit:
            # evaluate on the real fold split using the globally fitted transform
            tr = folds.train_rows(fe.fold)
            pos = {r: i for i, r in enumerate(fe.train_rows.tolist())}
            vals = fe.train.values[[pos[r] for r in tr]]
            fe = fe._replace(train_rows=tr, train=Embedding(vals, [data.sample_ids[i] for i in tr], spec.recipe))
        if fit_log is not None:
            for rec in log:
                fit_log(*rec)
        out.append(fe)
    return out


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchmarkResult:
    reports: list
    embeddings: dict  # recipe -> list[FoldEmbedding]
    folds: FoldAssignment


def run_benchmark(
    data: FeatureMatrix,
    metadata: SampleMetadata,
    specs: Sequence[RecipeSpec],
    classifiers: Sequence[str] = CLASSIFIERS,
    targets: Sequence[str] = TARGETS,
    k_folds: int = 4,
    root_seed: int = 0,
    knn_k: int = 21,
    l2: float | Sequence[float] = (0.01, 0.1, 1.0),
    fit_log=None,
    workers: int = 1,
    global_fit: bool = False,
    folds: FoldAssignment | None = None,
) -> BenchmarkResult:
    """Evaluate every (recipe, classifier, target) cell with shared folds.

    Folds are stratified on the disease label and shared by all targets so
    each recipe is fit once per fold.
    """
    if folds is None:
        folds = make_folds(metadata.label, k_folds, derive_seed(root_seed, SEED_FOLDS))
    reports, embeddings = [], {}
    for spec in specs:
        fes = run_recipe(data, metadata, spec, folds, root_seed, fit_log, workers, global_fit)
        embeddings[spec.recipe] = fes
        for clf in classifiers:
            for tgt in targets:
                reports.append(
                    evaluate(
                        fes, metadata, tgt, clf, spec.recipe, knn_k=knn_k, l2=l2,
                        seed=derive_seed(root_seed, SEED_LOGREG), fit_log=fit_log,
                    )
                )
    return BenchmarkResult(reports, embeddings, folds)


def split_holdout(labels, fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (held_out_rows, remaining_rows) split."""
    labels = np.asarray(labels)
    if not 0 < fraction < 1:
        raise ValidationError("holdout fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    held = []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        held.extend(idx[: int(round(fraction * len(idx)))].tolist())
    held = np.sort(np.array(held, dtype=np.intp))
    rest = np.setdiff1d(np.arange(len(labels)), held)
    return held, rest


# ------------------------------------------------------------------- search


@dataclass(frozen=True)
class SearchSpec:
    base: RecipeSpec
    space: dict  # parameter -> list of values
    budget: int = 10
    strategy: str = "random"  # grid | random
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ValidationError("search budget must be >= 1")
        if self.strategy not in ("grid", "random"):
            raise ValidationError(f"unknown strategy {self.strategy!r}")

    def candidates(self) -> list[RecipeSpec]:
        keys = sorted(self.space)
        grid = list(itertools.product(*(self.space[k] for k in keys)))
        if self.strategy == "grid":
            chosen = grid[: self.budget]
        else:
            rng = np.random.default_rng(self.seed)
            if len(grid) <= self.budget:
                chosen = [grid[i] for i in rng.permutation(len(grid))]
            else:
                chosen = [grid[i] for i in rng.choice(len(grid), size=self.budget, replace=False)]
        return [replace(self.base, **dict(zip(keys, combo))) for combo in chosen]


@dataclass
class SearchResult:
    best: RecipeSpec
    trials: list  # dicts: trial, params..., n_parameters, score, status


def select_best(trials: list) -> int:
    """Index of the winning trial: highest score, then fewer parameters, then order."""
    ok = [t for t in trials if t["status"] == "ok" and not math.isnan(t["score"])]
    if not ok:
        raise MetccError("every search trial failed")
    best = min(ok, key=lambda t: (-t["score"], t["n_parameters"], t["trial"]))
    return best["trial"]


def search(
    data: FeatureMatrix,
    metadata: SampleMetadata,
    spec: SearchSpec,
    folds: FoldAssignment,
    root_seed: int = 0,
    l2: float | Sequence[float] = (0.01, 0.1, 1.0),
    workers: int = 1,
) -> SearchResult:
    """Score candidates by mean test AUROC of logistic regression on disease."""
    cands = spec.candidates()
    q = 0
    if spec.base.recipe == "hcp":
        from .hcp import build_covariates

        q = build_covariates(metadata).q
    trials = []
    for i, cand in enumerate(cands):
        row = {"trial": i, **cand.relevant(), "n_parameters": cand.n_parameters(data.p, q)}
        try:
            fes = run_recipe(data, metadata, cand, folds, root_seed, workers=workers)
            rep = evaluate(fes, metadata, "disease", "logreg", cand.recipe, l2=l2, seed=derive_seed(root_seed, SEED_LOGREG))
            row.update(score=rep.mean_test, status="ok")
        except (MetccError, ArithmeticError, np.linalg.LinAlgError) as exc:
            logger.warning("trial %d failed: %s", i, exc)
            row.update(score=float("nan"), status=f"failed: {type(exc).__name__}")
        trials.append(row)
    return SearchResult(cands[select_best(trials)], trials)


def write_trials(trials: list, path) -> None:
    keys = list(dict.fromkeys(k for t in trials for k in t))
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(keys) + "\n")
        for t in trials:
            fh.write("\t".join(_fmt(t.get(k, "")) for k in keys) + "\n")


def read_trials(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    keys = lines[0].split("\t")
    out = []
    for ln in lines[1:]:
        row = dict(zip(keys, ln.split("\t")))
        row["trial"] = int(row["trial"])
        row["n_parameters"] = int(row["n_parameters"])
        row["score"] = float(row["score"])
        out.append(row)
    return out


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_spec(spec: RecipeSpec, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"recipe={spec.recipe}\n")
        for k, v in spec.relevant().items():
            fh.write(f"{k}={v}\n")


# ------------------------------------------------------------------- report

TABLE_COLUMNS = (("knn", "train"), ("knn", "test"), ("logreg", "train"), ("logreg", "test"))
CLF_LABEL = {"knn": "KNN", "logreg": "LR"}
RECIPE_LABEL = {"pca": "PCA-only", "hcp": "HCP", "metcc": "METCC"}
TARGET_SHORT = {"institution": "inst", "batch": "batch", "age_bin": "age"}


def mean_sd(mean: float, sd: float) -> str:
    return f"{mean:.3f} ± {sd:.3f}"


def _check_grid(reports, recipes, classifiers, targets):
    have = {(r.recipe, r.classifier, r.target) for r in reports}
    missing = [c for c in itertools.product(recipes, classifiers, targets) if c not in have]
    if missing:
        raise IncompleteGrid(missing)


def render_tables(reports: Sequence[FoldReport]) -> str:
    """Plain-text tables laid out as normalization x (classifier, split)."""
    by = {(r.recipe, r.classifier, r.target): r for r in reports}
    recipes = [r for r in RECIPES if any(k[0] == r for k in by)]
    targets = [t for t in TARGETS if any(k[2] == t for k in by)]
    blocks = []
    for tgt in targets:
        metric_name = "AUC" if tgt == "disease" else "ACC"
        header = ["Normalization"] + [f"{s.capitalize()} {metric_name} ({CLF_LABEL[c]})" for c, s in TABLE_COLUMNS]
        rows = []
        for rec in recipes:
            name = RECIPE_LABEL[rec] + ("" if tgt == "disease" else f" ({TARGET_SHORT[tgt]})")
            cells = [name]
            for clf, split in TABLE_COLUMNS:
                r = by.get((rec, clf, tgt))
                if r is None:
                    cells.append("-")
                elif split == "train":
                    cells.append(mean_sd(r.mean_train, r.sd_train))
                else:
                    cells.append(mean_sd(r.mean_test, r.sd_test))
            rows.append(cells)
        widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
        fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))  # noqa: E731
        title = f"{tgt}: {'AUROC' if tgt == 'disease' else 'accuracy'}, mean ± sd over folds"
        lines = [title, fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in rows]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def report(
    fold_reports: Sequence[FoldReport],
    out,
    recipes: Sequence[str] | None = None,
    classifiers: Sequence[str] | None = None,
    targets: Sequence[str] | None = None,
    embeddings: dict | None = None,
) -> str:
    """Write ``report_folds.tsv``, ``report_aggregate.tsv`` and ``report.txt`` into ``out``.

    ``embeddings`` (recipe -> fold embeddings) are exported as one TSV per
    recipe and fold for external visualisation.
    """
    recipes = recipes or sorted({r.recipe for r in fold_reports}, key=RECIPES.index)
    classifiers = classifiers or sorted({r.classifier for r in fold_reports})
    targets = targets or sorted({r.target for r in fold_reports}, key=TARGETS.index)
    _check_grid(fold_reports, recipes, classifiers, targets)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(
        fold_reports,
        key=lambda r: (RECIPES.index(r.recipe), CLASSIFIERS.index(r.classifier), TARGETS.index(r.target)),
    )
    with (out / "report_folds.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("recipe\tclassifier\ttarget\tfold\tsplit\tmetric\tvalue\n")
        for r in ordered:
            for split, vals in (("train", r.per_fold_train), ("test", r.per_fold_test)):
                for fold, v in enumerate(vals):
                    fh.write(f"{r.recipe}\t{r.classifier}\t{r.target}\t{fold}\t{split}\t{r.metric}\t{v!r}\n")
    with (out / "report_aggregate.tsv").open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("recipe\tclassifier\ttarget\tmetric\tmean_train\tsd_train\tmean_test\tsd_test\n")
        for r in ordered:
            fh.write(
                f"{r.recipe}\t{r.classifier}\t{r.target}\t{r.metric}\t"
                f"{r.mean_train!r}\t{r.sd_train!r}\t{r.mean_test!r}\t{r.sd_test!r}\n"
            )
    text = render_tables(ordered)
    (out / "report.txt").write_text(text, encoding="utf-8")
    if embeddings:
        export_embeddings(embeddings, out / "embeddings")
    return text


def export_embeddings(embeddings: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for recipe, fes in embeddings.items():
        for fe in fes:
            with (out_dir / f"{recipe}_fold{fe.fold}.tsv").open("w", encoding="utf-8", newline="\n") as fh:
                fh.write("sample_id\tsplit\t" + "\t".join(f"dim{i}" for i in range(fe.train.k)) + "\n")
                for split, emb in (("train", fe.train), ("test", fe.test)):
                    for sid, row in zip(emb.sample_ids, emb.values.tolist()):
                        fh.write(f"{sid}\t{split}\t" + "\t".join(map(repr, row)) + "\n")


def read_fold_reports(path) -> list[FoldReport]:
    """Rebuild FoldReports from a ``report_folds.tsv`` file."""
    rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    acc = {}
    for ln in rows:
        rec, clf, tgt, fold, split, _metric, val = ln.split("\t")
        d = acc.setdefault((rec, clf, tgt), {"train": {}, "test": {}})
        d[split][int(fold)] = float(val)
    return [
        FoldReport(tgt, clf, rec, [d["train"][k] for k in sorted(d["train"])], [d["test"][k] for k in sorted(d["test"])])
        for (rec, clf, tgt), d in acc.items()
    ]
