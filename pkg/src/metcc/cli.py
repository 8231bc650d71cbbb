"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.

Recipe parameters come from the flat config file, either bare (``pca_k=20``)
or scoped to one recipe (``metcc.hidden=64``); scoped keys win. Search
spaces are given as ``search.<param>=v1,v2,...``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, hcp, metric, pca, pipeline, synthgen
from .dataio import Embedding
from .errors import NumericError, ValidationError
from .evaluation import CLASSIFIERS, RECIPES, TARGETS, make_folds

logger = logging.getLogger("metcc")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _csv(value):
    return [v for v in value.split(",") if v]


def _recipe_cfg(cfg: dict, recipe: str, overrides: dict | None = None) -> dict:
    out = {}
    for key in pipeline.RECIPE_PARAMS[recipe]:
        if f"{recipe}.{key}" in cfg:
            out[key] = cfg[f"{recipe}.{key}"]
        elif key in cfg:
            out[key] = cfg[key]
    for k, v in (overrides or {}).items():
        if v is not None:
            out[k] = v
    return out


def _load_inputs(args, cfg, need_meta=True):
    m = dataio.load_matrix(args.matrix)
    meta = None
    if need_meta:
        meta = dataio.load_metadata(
            args.metadata, dataio.binning_from_config(cfg), dataio.label_values_from_config(cfg)
        )
        m, meta = dataio.align(m, meta)
    if getattr(args, "preprocess", False):
        m = _preprocess(m, cfg)
    return m, meta


def _preprocess(m, cfg):
    wanted = dataio.drop_groups_from_config(cfg)
    present = [g for g in wanted if g in set(m.feature_groups)]
    if len(present) < len(wanted):
        logger.info("drop groups not present in matrix: %s", sorted(set(wanted) - set(present)))
    return dataio.preprocess(m, present)


def _write_embedding(emb: Embedding, path):
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id\t" + "\t".join(f"dim{i}" for i in range(emb.k)) + "\n")
        for sid, row in zip(emb.sample_ids, emb.values.tolist()):
            fh.write(sid + "\t" + "\t".join(map(repr, row)) + "\n")


# ----------------------------------------------------------------- commands


def cmd_generate(args, cfg, out):
    scfg = dict(cfg)
    if args.seed is not None:
        scfg["seed"] = args.seed
    synth = synthgen.SynthConfig.from_mapping(scfg)
    _, _, gt = synthgen.write_dataset(synth, out, dataio.binning_from_config(cfg))
    strength = synthgen.confounding_strength(gt)
    logger.info("variance shares: %s", ", ".join(f"{k}={v:.3f}" for k, v in strength.items()))


def cmd_preprocess(args, cfg, out):
    m = dataio.load_matrix(args.matrix)
    groups = _csv(args.drop_groups) if args.drop_groups is not None else None
    if groups is None:
        m2 = _preprocess(m, cfg)
    else:
        m2 = dataio.preprocess(m, groups)
    dataio.save_matrix(m2, out / "preprocessed.tsv")


def cmd_embed(args, cfg, out):
    seed = args.seed if args.seed is not None else 0
    need_meta = args.recipe in ("hcp", "metcc")
    if need_meta and args.metadata is None:
        raise ValidationError(f"embed {args.recipe} needs --metadata")
    m, meta = _load_inputs(args, cfg, need_meta)
    overrides = {k: getattr(args, k, None) for k in pipeline.RECIPE_PARAMS[args.recipe]}
    spec = pipeline.RecipeSpec.from_mapping(_recipe_cfg(cfg, args.recipe, overrides), args.recipe)
    x = m
    if spec.recipe == "hcp":
        cov = hcp.build_covariates(meta)
        model = hcp.fit(m, cov, spec.k_h, spec.lambda_mix, spec.lambda_b, spec.lambda_w, spec.hcp_max_iter, spec.hcp_tol)
        hcp.save_model(model, out / "hcp_model.npz")
        x = hcp.normalize(model, m)
    pmodel = pca.fit(x, spec.pca_k)
    pca.save_model(pmodel, out / "pca_model.tsv")
    emb = pca.transform(pmodel, x)
    if spec.recipe == "metcc":
        mcfg = spec.metric_config(pipeline.derive_seed(seed, pipeline.SEED_METCC))
        res = metric.train(emb, meta.label, mcfg)
        metric.save_params(res.params, out / "metcc_params.txt", mcfg)
        metric.save_trace(res.loss_trace, out / "metcc_loss.tsv")
        emb = metric.embed(res.params, emb)
    else:
        emb = Embedding(emb.values, emb.sample_ids, spec.recipe)
    _write_embedding(emb, out / f"embedding_{spec.recipe}.tsv")


def _specs(cfg, recipes):
    return [pipeline.RecipeSpec.from_mapping(_recipe_cfg(cfg, r), r) for r in recipes]


def cmd_evaluate(args, cfg, out):
    seed = args.seed if args.seed is not None else 0
    m, meta = _load_inputs(args, cfg)
    if args.exclude:
        drop = set(args.exclude.read_text(encoding="utf-8").split())
        keep = [i for i, sid in enumerate(m.sample_ids) if sid not in drop]
        m, meta = m.take_rows(keep), meta.take_rows(keep)
    if args.spec:
        spec_cfg = dataio.load_config(args.spec)
        specs = [pipeline.RecipeSpec.from_mapping(spec_cfg)]
    else:
        specs = _specs(cfg, _csv(args.recipes))
    l2 = [float(v) for v in _csv(cfg.get("l2", "0.01,0.1,1.0"))]
    res = pipeline.run_benchmark(
        m, meta, specs, _csv(args.classifiers), _csv(args.targets), args.k_folds, seed,
        knn_k=args.knn_k, l2=l2, workers=args.workers, global_fit=args.global_fit,
    )
    text = pipeline.report(res.reports, out, embeddings=res.embeddings)
    sys.stdout.write(text)


def cmd_search(args, cfg, out):
    seed = args.seed if args.seed is not None else 0
    m, meta = _load_inputs(args, cfg)
    base = pipeline.RecipeSpec.from_mapping(_recipe_cfg(cfg, args.recipe), args.recipe)
    space = {}
    for key, raw in cfg.items():
        if key.startswith("search."):
            name = key.split(".", 1)[1]
            ftype = {f.name: f.type for f in pipeline.fields(pipeline.RecipeSpec)}.get(name)
            if ftype is None:
                raise ValidationError(f"unknown search parameter {name!r}")
            space[name] = [pipeline._coerce(ftype, v) for v in _csv(raw)]
    if not space:
        space = {"pca_k": [base.pca_k]}
    held, _rest = pipeline.split_holdout(meta.label, args.holdout, pipeline.derive_seed(seed, pipeline.SEED_HOLDOUT))
    m_h, meta_h = m.take_rows(held), meta.take_rows(held)
    folds = make_folds(meta_h.label, args.k_folds, pipeline.derive_seed(seed, pipeline.SEED_FOLDS))
    sspec = pipeline.SearchSpec(base, space, args.budget, args.strategy, pipeline.derive_seed(seed, pipeline.SEED_SEARCH))
    l2 = [float(v) for v in _csv(cfg.get("l2", "0.01,0.1,1.0"))]
    result = pipeline.search(m_h, meta_h, sspec, folds, seed, l2=l2, workers=args.workers)
    pipeline.write_trials(result.trials, out / "trials.tsv")
    pipeline.write_spec(result.best, out / "best_spec.cfg")
    (out / "holdout_samples.txt").write_text("\n".join(meta_h.sample_ids) + "\n", encoding="utf-8")
    sys.stdout.write(f"best: {result.best.relevant()}\n")


def cmd_report(args, cfg, out):
    reports = pipeline.read_fold_reports(args.folds)
    text = pipeline.report(reports, out)
    sys.stdout.write(text)


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metcc", description="Confounder-robust embeddings and their evaluation.")
    ap.add_argument("--config", type=Path, help="flat key=value config file")
    ap.add_argument("--seed", type=int, help="root seed (64-bit unsigned)")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out-dir", type=Path, default=Path("."))
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="write a synthetic confounded dataset")

    p = sub.add_parser("preprocess", help="drop feature groups and standardize samples")
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--drop-groups", help="comma-separated feature groups (default from config)")

    p = sub.add_parser("embed", help="fit one recipe on all samples and write the embedding")
    p.add_argument("recipe", choices=RECIPES)
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--metadata", type=Path)
    p.add_argument("--preprocess", action="store_true", help="preprocess the matrix first")
    p.add_argument("--k", "--pca-k", dest="pca_k", type=int)
    p.add_argument("--k-hidden", dest="k_h", type=int)
    p.add_argument("--lambda-b", dest="lambda_b", type=float)
    p.add_argument("--lambda-mix", dest="lambda_mix", type=float)
    p.add_argument("--lambda-w", dest="lambda_w", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--dropout", dest="dropout_p", type=float)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=("triplet", "siamese"))
    p.add_argument("--margin", type=float)

    for name, helptext in (("evaluate", "cross-validated evaluation of recipes"), ("search", "hyperparameter search")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--matrix", type=Path, required=True)
        p.add_argument("--metadata", type=Path, required=True)
        p.add_argument("--no-preprocess", dest="preprocess", action="store_false")
        p.add_argument("--k-folds", type=int, default=4)
        if name == "evaluate":
            p.add_argument("--recipes", default=",".join(RECIPES))
            p.add_argument("--classifiers", default=",".join(CLASSIFIERS))
            p.add_argument("--targets", default=",".join(TARGETS))
            p.add_argument("--knn-k", type=int, default=21)
            p.add_argument("--spec", type=Path, help="recipe spec file, e.g. best_spec.cfg from search")
            p.add_argument("--global-fit", action="store_true", help="fit transforms on all rows (leaks)")
            p.add_argument("--exclude", type=Path, help="file of sample ids to leave out, e.g. holdout_samples.txt")
        else:
            p.add_argument("--recipe", choices=RECIPES, required=True)
            p.add_argument("--budget", type=int, default=10)
            p.add_argument("--strategy", choices=("grid", "random"), default="random")
            p.add_argument("--holdout", type=float, default=0.2)

    p = sub.add_parser("report", help="render tables from a per-fold report TSV")
    p.add_argument("--folds", type=Path, required=True)
    return ap


COMMANDS = {
    "generate": cmd_generate,
    "preprocess": cmd_preprocess,
    "embed": cmd_embed,
    "evaluate": cmd_evaluate,
    "search": cmd_search,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = dataio.load_config(args.config) if args.config else {}
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ValidationError("--seed must be a 64-bit unsigned integer")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, args.out_dir)
    except ValidationError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except (NumericError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
