import json

import numpy as np
import pytest

from metcc import metric
from metcc.dataio import Embedding
from metcc.errors import DimensionMismatch, DivergenceDetected, SingleClassInput, ValidationError
from metcc.metric import MetricTrainConfig, PairBatch, TripletBatch, TripletNetParams

from oracles import gradient_check


def zero_params(d=3, h=4, k=2):
    return TripletNetParams(np.zeros((h, d)), np.zeros(h), np.zeros((k, h)), np.zeros(k))


def identity_params(d=3):
    return TripletNetParams(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))


def random_net(rng, d=None, h=None, k=None):
    d, h, k = (v or int(rng.integers(1, 5)) for v in (d, h, k))
    p = metric.init_params(d, h, k, rng)
    return TripletNetParams(p.w1, rng.standard_normal(h) * 0.3, p.w2, rng.standard_normal(k) * 0.3)


def test_forward_examples(rng):
    assert np.all(metric.forward(zero_params(), rng.standard_normal(3)) == 0)
    x = np.array([0.5, 2.0, 7.0])
    np.testing.assert_array_equal(metric.forward(identity_params(), x), x)
    batch = rng.random((5, 3))
    np.testing.assert_array_equal(metric.forward(identity_params(), batch), batch)


def test_no_dropout_is_inference_mode(rng):
    params = random_net(rng, 3, 4, 2)
    x = rng.standard_normal((10, 3))
    assert metric.dropout_mask(rng, (10, 4), 0.0) is None
    batch = metric.sample_triplets(rng.integers(0, 2, 10) | np.arange(10) % 2, 6, rng)
    cfg = MetricTrainConfig(dropout_p=0.0)
    a = metric.loss_and_gradient(params, x, batch, cfg, rng=np.random.default_rng(1))
    b = metric.loss_and_gradient(params, x, batch, cfg)
    assert a[0] == b[0]
    assert a[1].flat().tobytes() == b[1].flat().tobytes()


def test_dropout_mask_scaling(rng):
    mask = metric.dropout_mask(rng, (2000, 50), 0.25)
    assert set(np.unique(mask)) == {0.0, 1 / 0.75}
    assert abs(mask.mean() - 1.0) < 0.02


def test_triplet_loss_examples(rng):
    p = identity_params(2)
    a = np.array([1.0, 1.0])
    assert metric.triplet_loss(p, a, a, np.array([1.0, 2.0])) == 0.0
    assert metric.triplet_loss(zero_params(2), a, a * 2, a * 3) == 1.0


def test_triplet_loss_two_path(rng):
    for _ in range(20):
        params = random_net(rng)
        a, pos, neg = rng.standard_normal((3, params.d))
        ga, gp, gn = (metric.forward(params, v) for v in (a, pos, neg))
        d_pos = np.sqrt(sum((u - v) ** 2 for u, v in zip(ga, gp)))
        d_neg = np.sqrt(sum((u - v) ** 2 for u, v in zip(ga, gn)))
        expected = d_pos**2 + (d_neg - 1) ** 2
        assert abs(metric.triplet_loss(params, a, pos, neg) - expected) < 1e-12


def test_siamese_literal_examples():
    p = identity_params(2)
    m = 1.5
    x = np.array([1.0, 1.0])
    far = np.array([1.0, 3.0])  # D = 2 >= m
    assert metric.siamese_loss(p, x, far, True, m, convention="literal") == 0.0
    assert metric.siamese_loss(p, x, x, False, m, convention="literal") == 0.0
    assert metric.siamese_loss(p, x, x, True, m, convention="literal") == m**2


def test_siamese_contrastive_examples():
    p = identity_params(2)
    m = 1.5
    x = np.array([1.0, 1.0])
    far = np.array([1.0, 3.0])
    assert metric.siamese_loss(p, x, far, False, m) == 0.0
    assert metric.siamese_loss(p, x, x, True, m) == 0.0
    assert metric.siamese_loss(p, x, x, False, m) == m**2
    assert metric.siamese_loss(p, x, far, True, m) == 4.0


def test_losses_non_negative(rng):
    for _ in range(50):
        params = random_net(rng)
        v = rng.standard_normal((3, params.d)) * 3
        assert metric.triplet_loss(params, *v) >= 0
        for conv in ("contrastive", "literal"):
            assert metric.siamese_loss(params, v[0], v[1], bool(rng.integers(2)), 1.0, conv) >= 0


def test_zero_loss_batch_has_zero_gradient():
    p = identity_params(2)
    x = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 2.0]])
    batch = TripletBatch(np.array([0, 1]), np.array([1, 0]), np.array([2, 2]))
    loss, grad = metric.loss_and_gradient(p, x, batch, MetricTrainConfig())
    assert loss == 0.0
    assert not np.any(grad.flat())


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = random_net(rng)
    x = rng.standard_normal((8, params.d))
    labels = np.arange(8) % 2
    trip = metric.sample_triplets(labels, 5, rng)
    assert gradient_check(params, x, trip, MetricTrainConfig()) < 1e-4
    pairs = metric.sample_pairs(labels, 6, rng)
    for conv in ("contrastive", "literal"):
        cfg = MetricTrainConfig(loss="siamese", margin=float(rng.uniform(0.5, 3.0)), siamese_convention=conv)
        assert gradient_check(params, x, pairs, cfg) < 1e-4


def test_duplicated_batch_same_gradient(rng):
    params = random_net(rng, 3, 4, 2)
    x = rng.standard_normal((10, 3))
    labels = np.arange(10) % 2
    cfg = MetricTrainConfig()
    batch = metric.sample_triplets(labels, 7, rng)
    doubled = TripletBatch(*(np.r_[a, a] for a in batch))
    g1 = metric.loss_gradient(params, x, batch, cfg).flat()
    g2 = metric.loss_gradient(params, x, doubled, cfg).flat()
    np.testing.assert_allclose(g2, g1, rtol=0, atol=1e-12)


def test_losses_invariant_under_output_rotation(rng):
    params = random_net(rng, 4, 4, 3)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    rotated = TripletNetParams(params.w1, params.b1, q @ params.w2, q @ params.b2)
    v = rng.standard_normal((3, 4))
    assert abs(metric.triplet_loss(params, *v) - metric.triplet_loss(rotated, *v)) < 1e-12
    assert abs(metric.siamese_loss(params, v[0], v[1], False, 2.0) - metric.siamese_loss(rotated, v[0], v[1], False, 2.0)) < 1e-12


def test_triplet_sampling_validity_and_uniformity():
    rng = np.random.default_rng(0)
    labels = np.array([0, 0, 0, 1, 1, 2])
    batch = metric.sample_triplets(labels, 60000, rng)
    assert np.all(labels[batch.anchors] == labels[batch.positives])
    assert np.all(batch.anchors != batch.positives)
    assert np.all(labels[batch.anchors] != labels[batch.negatives])
    # valid triplets: class 0 gives 3*2*3 = 18, class 1 gives 2*1*4 = 8, class 2 none
    triples = set(zip(batch.anchors.tolist(), batch.positives.tolist(), batch.negatives.tolist()))
    assert len(triples) == 26
    _, freq = np.unique(np.stack(batch, axis=1), axis=0, return_counts=True)
    assert freq.min() > 0.8 * 60000 / 26 and freq.max() < 1.2 * 60000 / 26


def test_pair_sampling():
    labels = np.array([0, 1, 1, 0])
    pairs = metric.sample_pairs(labels, 1000, np.random.default_rng(0))
    assert np.all(pairs.left != pairs.right)
    np.testing.assert_array_equal(pairs.same, labels[pairs.left] == labels[pairs.right])


def blobs(rng, n=60, d=4, sep=6.0):
    labels = np.arange(n) % 2
    centers = np.zeros((2, d))
    centers[1, 0] = sep
    return centers[labels] + rng.standard_normal((n, d)), labels


def test_training_separates_blobs():
    rng = np.random.default_rng(3)
    x, labels = blobs(rng)
    cfg = MetricTrainConfig(epochs=300, learning_rate=1e-2, hidden=16, embed_dim=2, batch_triplets=128, seed=1)
    res = metric.train(x, labels, cfg)
    assert res.loss_trace[-1] < 0.1
    g = metric.embed(res.params, x)
    c0, c1 = g[labels == 0].mean(axis=0), g[labels == 1].mean(axis=0)
    within = np.mean([np.linalg.norm(g[labels == c] - g[labels == c].mean(axis=0), axis=1).mean() for c in (0, 1)])
    assert np.linalg.norm(c0 - c1) > 5 * within
    windows = np.array(res.loss_trace).reshape(-1, 5).mean(axis=1)
    assert np.all(np.diff(windows) <= 0.05 * windows[0])


def test_training_with_dropout_and_sgd_runs():
    rng = np.random.default_rng(4)
    x, labels = blobs(rng, n=40)
    for cfg in (
        MetricTrainConfig(epochs=30, dropout_p=0.3, learning_rate=1e-2, minibatch=32),
        MetricTrainConfig(epochs=30, optimizer="sgd", learning_rate=1e-3, loss="siamese"),
    ):
        res = metric.train(x, labels, cfg)
        assert len(res.loss_trace) == 30 and np.all(np.isfinite(res.loss_trace))
        assert np.mean(res.loss_trace[-5:]) < np.mean(res.loss_trace[:5])


def test_zero_epochs_returns_init(rng):
    x, labels = blobs(rng)
    cfg = MetricTrainConfig(epochs=0, seed=9, hidden=5, embed_dim=3)
    res = metric.train(x, labels, cfg)
    init = metric.init_params(4, 5, 3, np.random.default_rng(9))
    assert res.params.flat().tobytes() == init.flat().tobytes()
    assert res.loss_trace == []


def test_training_deterministic(rng):
    x, labels = blobs(rng)
    cfg = MetricTrainConfig(epochs=20, dropout_p=0.2, seed=5)
    a, b = metric.train(x, labels, cfg), metric.train(x, labels, cfg)
    assert a.params.flat().tobytes() == b.params.flat().tobytes()
    assert a.loss_trace == b.loss_trace


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_errors(rng):
    x, _ = blobs(rng, n=10)
    with pytest.raises(SingleClassInput):
        metric.train(x, np.zeros(10), MetricTrainConfig(epochs=1))
    with pytest.raises(DimensionMismatch):
        metric.train(x, np.arange(9) % 2, MetricTrainConfig(epochs=1))
    with pytest.raises(DivergenceDetected) as info:
        metric.train(x * 1e200, np.arange(10) % 2, MetricTrainConfig(epochs=3))
    assert isinstance(info.value.trace, list)
    with pytest.raises(ValidationError):
        MetricTrainConfig(loss="hinge")
    with pytest.raises(ValidationError):
        MetricTrainConfig(dropout_p=1.0)


def test_embed_container(rng):
    params = random_net(rng, 3, 4, 2)
    emb = metric.embed(params, Embedding(rng.standard_normal((4, 3)), list("abcd"), "pca"))
    assert emb.recipe == "metcc" and emb.k == 2
    with pytest.raises(DimensionMismatch):
        metric.embed(params, np.zeros((2, 5)))


def test_params_round_trip(tmp_path, rng):
    params = random_net(rng, 3, 4, 2)
    cfg = MetricTrainConfig(hidden=4, embed_dim=2)
    metric.save_params(params, tmp_path / "net.txt", cfg)
    back = metric.load_params(tmp_path / "net.txt")
    assert back.flat().tobytes() == params.flat().tobytes()
    first = (tmp_path / "net.txt").read_text().splitlines()[0]
    assert json.loads(first.removeprefix("# config "))["hidden"] == 4
    metric.save_trace([1.5, 0.25], tmp_path / "trace.tsv")
    assert (tmp_path / "trace.tsv").read_text() == "epoch\tmean_loss\n0\t1.5\n1\t0.25\n"
