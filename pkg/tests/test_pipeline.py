import numpy as np
import pytest
from scipy.linalg import orth

from metcc import dataio, evaluation, hcp, metric, pca, pipeline, synthgen
from metcc.errors import IncompleteGrid, ValidationError
from metcc.evaluation import FoldReport
from metcc.pipeline import RecipeSpec, SearchSpec


@pytest.fixture(scope="module")
def data():
    c = synthgen.SynthConfig(
        n_samples=96, n_features=60, n_institutions=2, n_batches=4, disease_effect_scale=3.0,
        institution_effect_scale=3.0, batch_effect_scale=3.0, age_effect_scale=1.0, seed=3,
    )
    m, meta, _ = synthgen.generate(c)
    m = dataio.preprocess(m)
    return m, meta, evaluation.make_folds(meta.label, 4, 0)


def test_derive_seed():
    assert pipeline.derive_seed(1, 2, 3) == pipeline.derive_seed(1, 2, 3)
    seeds = {pipeline.derive_seed(0, c, f) for c in range(5) for f in range(4)}
    assert len(seeds) == 20
    assert pipeline.derive_seed(0, 1, 0) != pipeline.derive_seed(1, 1, 0)


def test_pca_recipe_matches_direct(data):
    m, meta, folds = data
    fes = pipeline.run_recipe(m, meta, RecipeSpec(recipe="pca", pca_k=5), folds)
    for fe in fes:
        model = pca.fit(m.values[fe.train_rows], 5)
        np.testing.assert_array_equal(fe.train.values, pca.transform(model, m.values[fe.train_rows]))
        np.testing.assert_array_equal(fe.test.values, pca.transform(model, m.values[fe.test_rows]))
        assert fe.test.sample_ids == tuple(m.sample_ids[i] for i in fe.test_rows)


def test_metcc_zero_epochs_is_init_projection(data):
    m, meta, folds = data
    spec = RecipeSpec(recipe="metcc", pca_k=6, epochs=0, hidden=8, embed_dim=3)
    fes = pipeline.run_recipe(m, meta, spec, folds, root_seed=7)
    for fe in fes:
        scores = pca.transform(pca.fit(m.values[fe.train_rows], 6), m.values[fe.test_rows])
        seed = pipeline.derive_seed(7, pipeline.SEED_METCC, fe.fold)
        net = metric.init_params(6, 8, 3, np.random.default_rng(seed))
        np.testing.assert_allclose(fe.test.values, metric.forward(net, scores), atol=1e-12)
        assert fe.test.recipe == "metcc"


def test_hcp_kh0_is_pca_of_ols_residual(data):
    m, meta, folds = data
    spec = RecipeSpec(recipe="hcp", pca_k=4, k_h=0, lambda_mix=0.0, lambda_b=0.0, lambda_w=0.0)
    fes = pipeline.run_recipe(m, meta, spec, folds)
    for fe in fes:
        f_tr = hcp.build_covariates(meta.take_rows(fe.train_rows))
        f_te = hcp.build_covariates(meta.take_rows(fe.test_rows), f_tr.levels).f
        y_tr, y_te = m.values[fe.train_rows], m.values[fe.test_rows]
        # minimum-norm OLS coefficients through the pseudo-inverse, projection by an SVD basis
        b = np.linalg.pinv(f_tr.f) @ y_tr
        q = orth(f_tr.f)
        r_tr = y_tr - q @ (q.T @ y_tr)
        r_te = y_te - f_te @ b
        model = pca.fit(r_tr, 4)
        np.testing.assert_allclose(fe.train.values, pca.transform(model, r_tr), atol=1e-8)
        np.testing.assert_allclose(fe.test.values, pca.transform(model, r_te), atol=1e-8)


def test_global_fit_keeps_fold_rows(data):
    m, meta, folds = data
    fes = pipeline.run_recipe(m, meta, RecipeSpec(pca_k=3), folds, global_fit=True)
    model = pca.fit(m.values, 3)
    for fe in fes:
        np.testing.assert_array_equal(fe.train_rows, folds.train_rows(fe.fold))
        np.testing.assert_allclose(fe.test.values, pca.transform(model, m.values[fe.test_rows]))


def test_misaligned_inputs_rejected(data):
    m, meta, folds = data
    with pytest.raises(ValidationError):
        pipeline.run_recipe(m, meta.take_rows(np.arange(meta.n)[::-1]), RecipeSpec(pca_k=2), folds)


def test_recipe_spec_mapping(caplog):
    spec = RecipeSpec.from_mapping({"pca_k": "7", "k_h": "3", "epochs": "5"}, "hcp")
    assert spec.pca_k == 7 and spec.k_h == 3 and spec.epochs == RecipeSpec().epochs
    assert "epochs ignored" in caplog.text
    assert set(spec.relevant()) == set(pipeline.RECIPE_PARAMS["hcp"])
    with pytest.raises(ValidationError):
        RecipeSpec(recipe="umap")


def test_n_parameters():
    assert RecipeSpec(pca_k=3).n_parameters(10) == 30
    assert RecipeSpec(recipe="hcp", pca_k=3, k_h=2).n_parameters(10, q=5) == 30 + 70
    assert RecipeSpec(recipe="metcc", pca_k=3, hidden=4, embed_dim=2).n_parameters(10) == 30 + 16 + 10


def test_search_budget_one(data):
    m, meta, folds = data
    spec = SearchSpec(RecipeSpec(pca_k=3), {"pca_k": [3, 5, 8]}, budget=1, strategy="grid")
    res = pipeline.search(m, meta, spec, folds)
    assert res.best.pca_k == 3 and len(res.trials) == 1


def test_search_prefers_signal():
    c = synthgen.SynthConfig(
        n_samples=120, n_features=80, n_institutions=2, n_batches=2, disease_effect_scale=2.0,
        institution_effect_scale=12.0, batch_effect_scale=0.0, age_effect_scale=0.0, nonlinear_mix=0.0, seed=1,
    )
    m, meta, gt = synthgen.generate(c)
    folds = evaluation.make_folds(meta.label, 4, 0)
    # one principal component holds only the institution shift: a signal-free embedding
    spec = SearchSpec(RecipeSpec(), {"pca_k": [1, 8]}, budget=2, strategy="grid")
    res = pipeline.search(m, meta, spec, folds)
    scores = {t["pca_k"]: t["score"] for t in res.trials}
    assert scores[1] < 0.65 < scores[8]
    assert res.best.pca_k == 8


def test_duplicate_candidates_first_wins(data):
    m, meta, folds = data
    spec = SearchSpec(RecipeSpec(pca_k=4), {"pca_k": [4, 4]}, budget=2, strategy="grid")
    res = pipeline.search(m, meta, spec, folds)
    assert res.trials[0]["score"] == res.trials[1]["score"]
    assert pipeline.select_best(res.trials) == 0


def test_select_best_rules():
    t = lambda i, s, n, st="ok": {"trial": i, "score": s, "n_parameters": n, "status": st}  # noqa: E731
    assert pipeline.select_best([t(0, 0.8, 10), t(1, 0.9, 99)]) == 1
    assert pipeline.select_best([t(0, 0.9, 50), t(1, 0.9, 10)]) == 1
    assert pipeline.select_best([t(0, float("nan"), 1, "failed: X"), t(1, 0.1, 5)]) == 1


def test_failed_trial_is_skipped(data):
    m, meta, folds = data
    spec = SearchSpec(RecipeSpec(pca_k=3), {"pca_k": [3, 500]}, budget=2, strategy="grid")
    res = pipeline.search(m, meta, spec, folds)
    assert res.trials[1]["status"].startswith("failed")
    assert res.best.pca_k == 3


def test_random_candidates_seeded():
    spec = SearchSpec(RecipeSpec(), {"pca_k": list(range(2, 20)), "hidden": [8, 16]}, budget=5, seed=4)
    a, b = spec.candidates(), spec.candidates()
    assert a == b and len(a) == 5
    assert len({(c.pca_k, c.hidden) for c in a}) == 5
    with pytest.raises(ValidationError):
        SearchSpec(RecipeSpec(), {}, budget=0)


def test_trials_round_trip_reproduces_winner(tmp_path, data):
    m, meta, folds = data
    spec = SearchSpec(RecipeSpec(), {"pca_k": [2, 4, 6]}, budget=3, strategy="grid")
    res = pipeline.search(m, meta, spec, folds)
    pipeline.write_trials(res.trials, tmp_path / "trials.tsv")
    back = pipeline.read_trials(tmp_path / "trials.tsv")
    assert back[pipeline.select_best(back)]["pca_k"] == str(res.best.pca_k)
    pipeline.write_spec(res.best, tmp_path / "best.cfg")
    cfg = dataio.load_config(tmp_path / "best.cfg")
    assert RecipeSpec.from_mapping(cfg) == res.best


def test_split_holdout():
    labels = np.arange(50) % 2
    held, rest = pipeline.split_holdout(labels, 0.2, seed=1)
    assert len(held) == 10 and labels[held].sum() == 5
    assert sorted(np.r_[held, rest].tolist()) == list(range(50))


def fake_reports(recipes=evaluation.RECIPES, classifiers=evaluation.CLASSIFIERS, targets=evaluation.TARGETS):
    out = []
    for i, (r, c, t) in enumerate((r, c, t) for r in recipes for c in classifiers for t in targets):
        out.append(FoldReport(t, c, r, [0.9, 0.95, 1.0, 0.85], [0.5 + i / 100, 0.6, 0.7, 0.8]))
    return out


def test_report_full_grid(tmp_path):
    text = pipeline.report(fake_reports(), tmp_path)
    agg = (tmp_path / "report_aggregate.tsv").read_text().splitlines()
    assert len(agg) == 1 + 24
    folds = (tmp_path / "report_folds.tsv").read_text().splitlines()
    assert folds[0] == "recipe\tclassifier\ttarget\tfold\tsplit\tmetric\tvalue"
    assert len(folds) == 1 + 24 * 8
    assert text == (tmp_path / "report.txt").read_text()
    assert "METCC (inst)" in text and "PCA-only" in text


def test_report_single_row(tmp_path):
    rep = [FoldReport("disease", "knn", "metcc", [1.0], [0.874324])]
    pipeline.report(rep, tmp_path)
    assert len((tmp_path / "report_aggregate.tsv").read_text().splitlines()) == 2
    table = [ln for ln in (tmp_path / "report.txt").read_text().splitlines() if ln.startswith("METCC")]
    assert len(table) == 1


def test_mean_sd_format():
    assert pipeline.mean_sd(0.874324, 0.0230618) == "0.874 ± 0.023"
    assert pipeline.mean_sd(1.0, 0.0) == "1.000 ± 0.000"


def test_report_incomplete_grid(tmp_path):
    reps = fake_reports()[1:]
    with pytest.raises(IncompleteGrid) as info:
        pipeline.report(reps, tmp_path, evaluation.RECIPES, evaluation.CLASSIFIERS, evaluation.TARGETS)
    assert ("pca", "knn", "disease") in info.value.missing


def test_read_fold_reports_round_trip(tmp_path):
    reps = fake_reports(recipes=("pca",))
    pipeline.report(reps, tmp_path / "a")
    back = pipeline.read_fold_reports(tmp_path / "a" / "report_folds.tsv")
    pipeline.report(back, tmp_path / "b")
    for name in ("report_folds.tsv", "report_aggregate.tsv", "report.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_benchmark_and_embedding_export(tmp_path, data):
    m, meta, _ = data
    specs = [RecipeSpec(pca_k=4), RecipeSpec(recipe="metcc", pca_k=4, epochs=5, hidden=8, embed_dim=2)]
    res = pipeline.run_benchmark(m, meta, specs, targets=("disease", "batch"), root_seed=2)
    assert len(res.reports) == 2 * 2 * 2
    pipeline.report(res.reports, tmp_path, embeddings=res.embeddings)
    rows = (tmp_path / "embeddings" / "metcc_fold0.tsv").read_text().splitlines()
    assert rows[0] == "sample_id\tsplit\tdim0\tdim1"
    assert len(rows) == 1 + m.n


def test_parallel_matches_serial(data):
    m, meta, folds = data
    spec = RecipeSpec(recipe="metcc", pca_k=4, epochs=3, hidden=8, embed_dim=2)
    a = pipeline.run_recipe(m, meta, spec, folds, workers=1)
    b = pipeline.run_recipe(m, meta, spec, folds, workers=2)
    for x, y in zip(a, b):
        assert x.test.values.tobytes() == y.test.values.tobytes()
