import math

import numpy as np
import pytest

from metcc import dataio, pca
from metcc.errors import DegenerateData, DimensionMismatch, RankTooHigh

from oracles import covariance_subspace, max_principal_angle


def test_line_cloud_first_component(rng):
    t = rng.standard_normal(200) * 5
    jitter = rng.standard_normal(200) * 1e-3
    x = np.c_[t + jitter, t - jitter] / math.sqrt(2)
    model = pca.fit(x, 1)
    # closed-form leading eigenvector of a symmetric 2x2 matrix
    c = np.cov(x, rowvar=False)
    theta = 0.5 * math.atan2(2 * c[0, 1], c[0, 0] - c[1, 1])
    expected = np.array([math.cos(theta), math.sin(theta)])
    expected *= np.sign(expected[np.argmax(np.abs(expected))])
    np.testing.assert_allclose(model.components[0], expected, atol=1e-10)
    np.testing.assert_allclose(model.components[0], [1 / math.sqrt(2)] * 2, atol=1e-4)


def test_full_rank_reconstruction(rng):
    x = rng.standard_normal((12, 7))
    model = pca.fit(x, 7)
    back = pca.inverse_transform(model, pca.transform(model, x))
    assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-8
    wide = rng.standard_normal((6, 15))
    m2 = pca.fit(wide, 5)
    centered = wide - wide.mean(axis=0)
    np.testing.assert_allclose(pca.transform(m2, wide) @ m2.components, centered, atol=1e-8)


def test_duplicated_columns_share_loadings(rng):
    base = rng.standard_normal((30, 4)) * [3, 2, 1, 0.5]
    x = np.c_[base, base[:, 1]]
    model = pca.fit(x, 3)
    np.testing.assert_allclose(model.components[:, 1], model.components[:, 4], atol=1e-8)
    vecs, _ = covariance_subspace(x, 3)
    np.testing.assert_allclose(vecs[1], vecs[4], atol=1e-8)


def test_subspace_matches_covariance_eigensolve(rng):
    for _ in range(10):
        n, p = rng.integers(3, 21, size=2)
        x = rng.standard_normal((n, p))
        k = int(rng.integers(1, min(n - 1, p) + 1))
        model = pca.fit(x, k)
        vecs, vals = covariance_subspace(x, k)
        assert max_principal_angle(model.components.T, vecs) < 1e-6
        np.testing.assert_allclose(model.explained_variance, vals, rtol=1e-8)


def test_orthonormal_and_signs(rng):
    model = pca.fit(rng.standard_normal((40, 10)), 6)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(6), atol=1e-12)
    idx = np.argmax(np.abs(model.components), axis=1)
    assert np.all(model.components[np.arange(6), idx] > 0)


def test_explained_variance_is_score_variance(rng):
    x = rng.standard_normal((50, 8)) * np.arange(1, 9)
    model = pca.fit(x, 5)
    scores = pca.transform(model, x)
    np.testing.assert_allclose(scores.var(axis=0, ddof=1), model.explained_variance, rtol=1e-8)
    assert np.all(np.diff(model.explained_variance) <= 0)


def test_transform_identities(rng):
    x = rng.standard_normal((20, 6))
    model = pca.fit(x, 3)
    np.testing.assert_allclose(pca.transform(model, x.mean(axis=0, keepdims=True)), 0.0, atol=1e-12)
    held_out = x[[4]].copy()
    np.testing.assert_array_equal(pca.transform(model, held_out), pca.transform(model, x[[4]]))
    np.testing.assert_allclose(pca.transform(model, held_out), pca.transform(model, x)[[4]], rtol=0, atol=1e-12)


def test_deterministic(rng):
    x = rng.standard_normal((25, 9))
    a, b = pca.fit(x, 4), pca.fit(x.copy(), 4)
    assert a.components.tobytes() == b.components.tobytes()
    # a row flip of the data cannot change the sign convention
    c = pca.fit(x[::-1], 4)
    np.testing.assert_allclose(c.components, a.components, atol=1e-10)


def test_embedding_container(rng):
    m = dataio.FeatureMatrix(rng.standard_normal((5, 3)), list("abc"), ["chr1"] * 3, list("vwxyz"))
    emb = pca.transform(pca.fit(m, 2), m)
    assert emb.recipe == "pca" and emb.sample_ids == m.sample_ids and emb.k == 2


def test_errors(rng):
    x = rng.standard_normal((5, 3))
    with pytest.raises(RankTooHigh):
        pca.fit(x, 4)
    with pytest.raises(RankTooHigh):
        pca.fit(rng.standard_normal((3, 8)), 3)
    with pytest.raises(DegenerateData):
        pca.fit(np.ones((4, 3)), 1)
    with pytest.raises(DimensionMismatch):
        pca.transform(pca.fit(x, 2), np.zeros((2, 4)))


def test_save_load_round_trip(tmp_path, rng):
    model = pca.fit(rng.standard_normal((10, 4)), 2)
    pca.save_model(model, tmp_path / "pca.tsv")
    back = pca.load_model(tmp_path / "pca.tsv")
    for name in ("mean", "components", "explained_variance"):
        assert getattr(back, name).tobytes() == getattr(model, name).tobytes()
