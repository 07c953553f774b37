import numpy as np
import pytest

from vabal import autodiff as ad
from vabal import classifier as C
from vabal import data
from vabal.errors import ContractError, DegeneratePoolError, ShapeError
from vabal.layers import assign, load_manifest, save_manifest
from vabal.rng import stream


@pytest.fixture(scope="module")
def two_class():
    spec = data.MixtureSpec(2, [200, 200], [[-3.0, 0.0], [3.0, 0.0]], 1.0, 2, seed=0)
    ds = data.generate_mixture(spec)
    pool = data.initial_pool(ds, 40, stream(0, "initial-pool"))
    return ds, pool


@pytest.fixture(scope="module")
def trained(two_class):
    ds, pool = two_class
    model = C.MlpClassifier(2, 2, rng=stream(0, "classifier-init"))
    model, curve = C.train_classifier(model, pool, ds, rng=stream(0, "classifier-shuffle"))
    return model, curve


def test_architecture_defaults():
    m = C.MlpClassifier(5, 3, rng=stream(0, "x"))
    assert m.num_taps == 4 and m.tap_widths == [64, 64, 64, 64]
    logits, taps = m.logits_and_taps_np(np.zeros((2, 5)))
    assert logits.shape == (2, 3) and [t.shape for t in taps] == [(2, 64)] * 4


def test_untrained_zero_head_is_uniform():
    m = C.MlpClassifier(3, 4, rng=stream(0, "x"))
    p = C.predict(m, np.random.default_rng(0).standard_normal((6, 3)))
    np.testing.assert_allclose(p, 0.25, atol=1e-15)


def test_separable_training(two_class, trained):
    ds, pool = two_class
    model, curve = trained
    lab = np.array(pool.labelled)
    assert C.accuracy(model, ds, lab) == 1.0
    assert C.accuracy(model, ds) >= 0.95
    assert curve[-1] <= curve[0]
    assert len(curve) == 100


def test_predict_is_distribution_and_argmax(two_class, trained):
    ds, _ = two_class
    model, _ = trained
    p = C.predict(model, ds.features)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    logits, _ = model.logits_and_taps_np(ds.features)
    assert np.array_equal(p.argmax(1), logits.argmax(1))


def test_training_is_deterministic(two_class):
    ds, pool = two_class
    params = []
    for _ in range(2):
        m = C.MlpClassifier(2, 2, rng=stream(4, "classifier-init"))
        C.train_classifier(m, pool, ds, epochs=5, rng=stream(4, "classifier-shuffle"))
        params.append([p.data.copy() for p in m.parameters()])
    assert all(np.array_equal(a, b) for a, b in zip(*params))


def test_degenerate_pools(two_class):
    ds, _ = two_class
    m = C.MlpClassifier(2, 2, rng=stream(0, "x"))
    one_class = tuple(int(i) for i in ds.train_ids[ds.labels[ds.train_ids] == 0][:5])
    with pytest.raises(DegeneratePoolError, match="single class"):
        C.train_classifier(m, data.Pool(one_class, (), 0), ds, rng=stream(0, "y"))
    with pytest.raises(DegeneratePoolError, match="empty"):
        C.train_classifier(m, data.Pool((), (), 0), ds, rng=stream(0, "y"))


def test_dimension_mismatch():
    m = C.MlpClassifier(3, 2, rng=stream(0, "x"))
    with pytest.raises(ShapeError):
        C.predict(m, np.zeros((2, 4)))


def test_stochastic_prediction_needs_dropout():
    m = C.MlpClassifier(3, 2, rng=stream(0, "x"))
    with pytest.raises(ContractError, match="dropout"):
        C.predict_stochastic(m, np.zeros((2, 3)), stream(0, "d"))


def test_dropout_forward_is_stochastic_only_with_rng():
    cfg = C.ClassifierConfig(dropout=0.25, zero_head=False)
    m = C.MlpClassifier(3, 2, cfg, rng=stream(0, "x"))
    x = np.random.default_rng(1).standard_normal((4, 3))
    a = C.predict_stochastic(m, x, stream(0, "d"))
    b = C.predict_stochastic(m, x, stream(1, "d"))
    assert not np.allclose(a, b)
    np.testing.assert_allclose(C.predict_stochastic(m, x, stream(0, "d")), a)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def test_extract_h_shape_range_and_determinism(two_class, trained):
    ds, _ = two_class
    model, _ = trained
    pre = C.FeaturePreprocessor(model.tap_widths, stream(0, "pre"))
    pre.warm_up(C.taps(model, ds.features))
    h = C.extract_h(model, pre, ds.features)
    assert h.shape == (len(ds), 512) and pre.output_dim == 512
    assert np.all((h > 0) & (h < 1))
    x = np.repeat(ds.features[:1], 2, axis=0)
    h2 = C.extract_h(model, pre, x)
    assert np.array_equal(h2[0], h2[1])


def test_extract_h_requires_warm_up(trained):
    model, _ = trained
    pre = C.FeaturePreprocessor(model.tap_widths, stream(0, "pre"))
    with pytest.raises(ContractError, match="warmed up"):
        C.extract_h(model, pre, np.zeros((1, 2)))
    with pytest.raises(ContractError, match="warmed up"):
        pre.forward(C.taps(model, np.zeros((1, 2))))


def test_normalisation_after_warm_up(two_class, trained):
    ds, _ = two_class
    model, _ = trained
    taps = C.taps(model, ds.features[:300])
    pre = C.FeaturePreprocessor(model.tap_widths, stream(0, "pre"))
    pre.warm_up(taps)
    for i, t in enumerate(pre.normalise(taps)):
        # a unit of variance v normalises to v / (v + eps): units at or below eps
        # (dead ReLUs) cannot reach 0.5 under any epsilon-guarded scaling
        live = pre.running_var[i] > pre.eps
        assert np.all(pre.running_var[i] >= 0)
        assert np.all(np.abs(t.mean(axis=0)) < 0.5)
        assert np.all((t[:, live].var(axis=0) > 0.5) & (t[:, live].var(axis=0) < 2.0))


def test_running_statistics_momentum():
    pre = C.FeaturePreprocessor([2], stream(0, "pre"))
    pre.warm_up([np.array([[0.0, 0.0], [2.0, 2.0]])])
    assert pre.running_mean[0].tolist() == [1.0, 1.0]
    pre.normalise([np.array([[4.0, 4.0], [6.0, 6.0]])], training=True)
    np.testing.assert_allclose(pre.running_mean[0], 0.9 * 1.0 + 0.1 * 5.0)
    np.testing.assert_allclose(pre.running_var[0], 0.9 * 1.0 + 0.1 * 1.0)


def test_preprocessor_forward_matches_numpy_path(trained):
    model, _ = trained
    x = np.random.default_rng(2).standard_normal((5, 2))
    pre = C.FeaturePreprocessor(model.tap_widths, stream(0, "pre"))
    pre.warm_up(C.taps(model, x))
    np.testing.assert_allclose(pre.forward(C.taps(model, x)).data, pre.transform_np(C.taps(model, x)), atol=1e-14)


def test_manifest_round_trip(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "clf.json"
    save_manifest(path, model.named_parameters())
    values = load_manifest(path)
    fresh = C.MlpClassifier(2, 2, rng=stream(9, "other"))
    assign(fresh.named_parameters(), values)
    x = np.random.default_rng(0).standard_normal((4, 2))
    np.testing.assert_array_equal(C.predict(fresh, x), C.predict(model, x))


def test_cross_entropy_gradient_matches_fd():
    from _oracles import central_diff, rel_err

    m = C.MlpClassifier(3, 3, C.ClassifierConfig(hidden=(4, 4), zero_head=False), rng=stream(0, "x"))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 3))
    onehot = np.eye(3)[rng.integers(0, 3, 5)]
    params = m.parameters()

    def loss():
        logits, _ = m.forward(ad.Tensor(x))
        return ad.neg(ad.sum_(ad.mul(ad.log_softmax(logits), ad.Tensor(onehot))))

    with ad.Tape() as tape:
        out = loss()
    grads = tape.backward(out, wrt=params)
    for p, g in zip(params, grads):
        def f(v, p=p):
            old = p.data
            p.data = v
            val = loss().item()
            p.data = old
            return val

        assert rel_err(g, central_diff(f, p.data.copy())) < 1e-4
