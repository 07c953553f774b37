import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vabal import autodiff as ad
from vabal import classifier as C
from vabal import data
from vabal import vae as V
from vabal.errors import ContractError
from vabal.rng import stream

from _oracles import central_diff, rel_err


def small_vae(input_dim=4, nc=2, d=2, hidden=6, seed=0, **kw):
    return V.RegularizedVae(input_dim, nc, stream(seed, "vae-init"), dims_per_class=d, hidden=hidden, **kw)


@pytest.fixture(scope="module")
def pipeline():
    """Classifier + VAE trained on a 4-class separable mixture."""
    ds = data.generate_mixture(data.mixture_spec(4, [300] * 4, distance=6.0, seed=0))
    pool = data.initial_pool(ds, 40, stream(0, "initial-pool"))
    clf = C.MlpClassifier(ds.input_dim, 4, rng=stream(0, "classifier-init"))
    C.train_classifier(clf, pool, ds, rng=stream(0, "classifier-shuffle"))
    before = [p.data.copy() for p in clf.parameters()]
    unl = np.array(pool.unlabelled)
    pre = C.FeaturePreprocessor(clf.tap_widths, stream(0, "vae-init"))
    vae = V.RegularizedVae(pre.output_dim, 4, stream(0, "vae-init"))
    _, _, curves = V.train_vae(vae, pre, clf, ds.features[unl], rng=stream(0, "vae-shuffle"))
    return {"ds": ds, "pool": pool, "clf": clf, "pre": pre, "vae": vae, "curves": curves, "before": before}


# ---------------------------------------------------------------------------
# partition and energies
# ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12))
def test_partition_blocks_disjoint_and_exhaustive(nc, d):
    part = V.LatentPartition(nc, d)
    dims = [j for n in range(nc) for j in part.block(n)]
    assert sorted(dims) == list(range(part.latent_dim)) and len(set(dims)) == len(dims)
    assert part.latent_dim == nc * d


def test_partition_block_range():
    with pytest.raises(ContractError):
        V.LatentPartition(3, 2).block(3)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), st.integers(0, 2))
def test_masking_is_idempotent(z, n):
    part = V.LatentPartition(3, 2)
    once = part.mask(z, n)
    assert np.array_equal(part.mask(once, n), once)
    assert np.all(once[2 * n:2 * n + 2] == 0)


def test_energy_examples():
    part = V.LatentPartition(2, 2)
    assert V.class_energies(np.zeros(4), part).tolist() == [0.0, 0.0]
    assert V.latent_label(np.zeros(4), part) == 0
    w = V.class_energies(np.array([0.0, 0.0, 3.0, 4.0]), part, "square")
    assert w.tolist() == [0.0, 25.0]
    assert V.latent_label(np.array([0.0, 0.0, 3.0, 4.0]), part) == 0


def test_energy_variants():
    part = V.LatentPartition(2, 2)
    z = np.array([-1.0, 2.0, 0.5, -0.5])
    assert V.class_energies(z, part, "absolute").tolist() == [3.0, 1.0]
    sig = lambda x: 1 / (1 + math.exp(-x))
    np.testing.assert_allclose(V.class_energies(z, part, "sigmoid"), [sig(-1) + sig(2), sig(0.5) + sig(-0.5)])
    with pytest.raises(ValueError, match="w-variant"):
        V.class_energies(z, part, "cube")


def test_tensor_and_array_energies_agree():
    part = V.LatentPartition(3, 4)
    z = np.random.default_rng(0).standard_normal((5, 12))
    for variant in ("square", "absolute", "sigmoid"):
        np.testing.assert_allclose(V.class_energies(ad.Tensor(z), part, variant).data,
                                   V.class_energies(z, part, variant), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 9, elements=st.floats(-4, 4)), arrays(np.bool_, 9), st.randoms())
def test_energy_symmetries(z, flips, rnd):
    part = V.LatentPartition(3, 3)
    flipped = np.where(flips, -z, z)
    np.testing.assert_allclose(V.class_energies(flipped, part, "square"), V.class_energies(z, part, "square"))
    perm = np.arange(9).reshape(3, 3)
    for row in perm:
        rnd.shuffle(row)
    shuffled = z[perm.ravel()]
    for variant in ("square", "absolute", "sigmoid"):
        assert V.latent_label(shuffled, part, variant) == V.latent_label(z, part, variant)


def test_predict_latent_label_deterministic_and_forced_zero():
    vae = small_vae()
    h = np.random.default_rng(0).random((3, 4))
    a = V.predict_latent_label(vae, h, stream(0, "mc"))
    b = V.predict_latent_label(vae, h, stream(0, "mc"))
    assert np.array_equal(a, b)
    assert V.latent_label(np.zeros((1, vae.latent_dim)), vae.partition)[0] == 0


# ---------------------------------------------------------------------------
# class loss
# ---------------------------------------------------------------------------


def test_loss_class_limits():
    part = V.LatentPartition(3, 1)
    onehot = np.array([[0.0, 1.0, 0.0]])
    # energies (z^2): target 0, others huge -> softmax(-w) is one-hot on the target
    assert V.loss_class(np.array([[30.0, 0.0, 30.0]]), part, onehot).item() < 1e-300 + 1e-12
    # uniform energies -> ln(N_c) whatever the target
    for t in np.eye(3):
        assert V.loss_class(np.array([[1.5, -1.5, 1.5]]), part, t[None]).item() == pytest.approx(math.log(3))


def test_loss_class_rejects_non_onehot():
    part = V.LatentPartition(2, 1)
    for bad in ([[0.5, 0.5]], [[1.0, 1.0]], [[1.0, 0.0, 0.0]]):
        with pytest.raises(ContractError, match="one-hot"):
            V.loss_class(np.zeros((1, 2)), part, np.array(bad))


@pytest.mark.parametrize("variant", ["square", "absolute", "sigmoid"])
def test_loss_class_gradient(variant):
    part = V.LatentPartition(3, 2)
    rng = np.random.default_rng(1)
    z0 = rng.uniform(-2, 2, (4, 6))
    z0 = np.where(np.abs(z0) < 1e-2, 0.1, z0)
    onehot = np.eye(3)[rng.integers(0, 3, 4)]
    zt = ad.Tensor(z0, requires_grad=True)
    with ad.Tape() as tape:
        loss = V.loss_class(zt, part, onehot, variant)
    (g,) = tape.backward(loss, wrt=[zt])
    fd = central_diff(lambda z: V.loss_class(z, part, onehot, variant).item(), z0)
    assert rel_err(g, fd) < 1e-4


# ---------------------------------------------------------------------------
# VAE loss
# ---------------------------------------------------------------------------


def test_loss_vae_zero_at_perfect_reconstruction():
    vae = small_vae()
    h = np.array([[0.2, 0.7, 0.4, 0.9]])
    enc_out = vae.encoder[-1]
    enc_out.weight.data[:] = 0.0
    enc_out.bias.data[:] = 0.0
    dec_out = vae.decoder[-1]
    dec_out.weight.data[:] = 0.0
    dec_out.bias.data[:] = np.log(h[0] / (1 - h[0]))
    loss = V.loss_vae(vae, h, rng=stream(0, "e"))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_loss_vae_at_least_kl():
    vae = small_vae()
    h = np.random.default_rng(2).random((5, 4))
    t = V.vae_terms(vae, ad.Tensor(h), rng=stream(0, "e"))
    assert np.all(t["recon"].data >= 0)
    assert V.loss_vae(vae, h, rng=stream(0, "e")).item() >= t["kl"].data.mean() - 1e-12


def test_lambda_zero_total_is_loss_vae():
    vae = small_vae(lam=0.0)
    h = np.random.default_rng(3).random((5, 4))
    onehot = np.eye(2)[[0, 1, 0, 1, 1]]
    eps = np.random.default_rng(4).standard_normal((5, 4))
    total, l_vae, _ = V.total_loss(vae, h, onehot, eps=eps)
    assert total.item() == l_vae.item()
    assert l_vae.item() == V.loss_vae(vae, h, eps=eps).item()


def test_class_weight_modes():
    assert V.class_weight(small_vae(lam=0.005)) == pytest.approx(0.005 * 4)
    assert V.class_weight(small_vae(lam=0.005, loss_scale="sum")) == 0.005


@pytest.mark.parametrize("variant", ["square", "absolute", "sigmoid"])
def test_full_loss_gradient_matches_fd(variant):
    vae = small_vae(lam=0.3, variant=variant)
    rng = np.random.default_rng(5)
    h0 = rng.random((3, 4))
    onehot = np.eye(2)[[0, 1, 1]]
    eps = rng.standard_normal((3, 4))
    params = vae.parameters()
    with ad.Tape() as tape:
        total, _, _ = V.total_loss(vae, h0, onehot, eps=eps)
    grads = tape.backward(total, wrt=params)
    for p, g in zip(params, grads):
        def f(v, p=p):
            old = p.data
            p.data = v
            val = V.total_loss(vae, h0, onehot, eps=eps)[0].item()
            p.data = old
            return val

        assert rel_err(g, central_diff(f, p.data.copy())) < 1e-4

    # with a live target the gradient w.r.t. h is the full derivative
    ht = ad.Tensor(h0, requires_grad=True)
    with ad.Tape() as tape:
        t = V.vae_terms(vae, ht, eps=eps, detach_target=False)
        loss = ad.mean(ad.add(t["recon"], t["kl"]))
    (gh,) = tape.backward(loss, wrt=[ht])

    def fh(h):
        t = V.vae_terms(vae, ad.Tensor(h), eps=eps, detach_target=False)
        return float(np.mean(t["recon"].data + t["kl"].data))

    assert rel_err(gh, central_diff(fh, h0)) < 1e-4


def test_encode_decode_paths_agree():
    vae = small_vae()
    h = np.random.default_rng(6).random((3, 4))
    mu, lv = vae.encode(ad.Tensor(h))
    mu_np, lv_np = vae.encode_np(h)
    np.testing.assert_allclose(mu.data, mu_np, atol=1e-14)
    np.testing.assert_allclose(lv.data, lv_np, atol=1e-14)
    np.testing.assert_allclose(vae.decode(ad.Tensor(mu_np)).data, vae.decode_np(mu_np), atol=1e-14)


def test_invalid_construction():
    with pytest.raises(ContractError):
        small_vae(lam=-1.0)
    with pytest.raises(ValueError):
        small_vae(variant="cube")
    with pytest.raises(ContractError):
        small_vae(kl_mask="half")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_training_descends(pipeline):
    curves = pipeline["curves"]
    assert len(curves["total"]) == 20
    # the joint objective falls; L_VAE alone may rise as the class term takes over
    assert curves["total"][-1] < curves["total"][0]
    # class loss falls on average: compare non-overlapping 5-epoch windows
    windows = [np.mean(curves["class"][i:i + 5]) for i in range(0, 20, 5)]
    assert all(b < a for a, b in zip(windows, windows[1:]))


def test_classifier_is_frozen(pipeline):
    after = [p.data for p in pipeline["clf"].parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(pipeline["before"], after))


def test_empty_unlabelled_pool_rejected(pipeline):
    vae = V.RegularizedVae(512, 4, stream(1, "x"))
    pre = C.FeaturePreprocessor(pipeline["clf"].tap_widths, stream(1, "x"))
    with pytest.raises(ContractError, match="empty"):
        V.train_vae(vae, pre, pipeline["clf"], np.zeros((0, 4)), rng=stream(1, "y"))


def test_agreement_on_held_out(pipeline):
    ds, clf, pre, vae = pipeline["ds"], pipeline["clf"], pipeline["pre"], pipeline["vae"]
    test = ds.test_ids
    h = C.extract_h(clf, pre, ds.features[test])
    y_clf = C.predict(clf, ds.features[test]).argmax(1)
    y_vae = V.predict_latent_label(vae, h, stream(0, "mc"))
    assert np.mean(y_clf == y_vae) > 0.5


# ---------------------------------------------------------------------------
# masked likelihood
# ---------------------------------------------------------------------------


def test_masked_likelihood_reproducible_and_range(pipeline):
    vae = pipeline["vae"]
    h = C.extract_h(pipeline["clf"], pipeline["pre"], pipeline["ds"].features[:5])
    a = V.masked_log_likelihoods(vae, h, 10, stream(0, "mc"))
    b = V.masked_log_likelihoods(vae, h, 10, stream(0, "mc"))
    assert np.array_equal(a, b) and a.shape == (5, 4) and np.all(np.isfinite(a)) and np.all(a <= 0)
    single = V.masked_log_likelihood(vae, h[0], 2, 10, stream(0, "mc"))
    assert math.isfinite(single)
    with pytest.raises(ContractError):
        V.masked_log_likelihood(vae, h[0], 4, 10, stream(0, "mc"))


def test_masked_likelihood_matches_loop_reference():
    vae = small_vae(nc=3, d=2)
    h = np.random.default_rng(7).random((4, 4))
    got = V.masked_log_likelihoods(vae, h, 6, stream(0, "mc"), chunk_rows=5)
    mu, lv = vae.encode_np(h)
    eps = stream(0, "mc").standard_normal((6, 4, 6))
    ref = np.zeros((4, 3))
    for i in range(4):
        kl = ad.kl_diag_gaussian_np(mu[i][None], lv[i][None])[0]
        for n in range(3):
            losses = []
            for k in range(6):
                z = mu[i] + np.exp(0.5 * lv[i]) * eps[k, i]
                z = vae.partition.mask(z, n)
                h_hat = vae.decode_np(z[None])[0]
                losses.append(0.5 * np.sum((h[i] - h_hat) ** 2) + kl)
            ref[i, n] = -np.mean(losses)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_exclude_block_kl_mode():
    full = small_vae(nc=2, d=2)
    excl = small_vae(nc=2, d=2, kl_mask="exclude-block")
    h = np.random.default_rng(8).random((3, 4))
    a = V.masked_log_likelihoods(full, h, 4, stream(0, "mc"))
    b = V.masked_log_likelihoods(excl, h, 4, stream(0, "mc"))
    mu, lv = full.encode_np(h)
    kl_terms = -0.5 * (1 + lv - mu**2 - np.exp(lv))
    for n in range(2):
        np.testing.assert_allclose(b[:, n] - a[:, n], kl_terms[:, 2 * n:2 * n + 2].sum(1), atol=1e-12)


def test_masking_a_near_zero_block_is_a_no_op():
    vae = small_vae(nc=2, d=2)
    # zero the encoder rows that produce block 1, so (mu, log_var) = (0, 0) there,
    # and make the decoder ignore block 1 by zeroing its input weights
    out = vae.encoder[-1]
    for col in (2, 3, 6, 7):
        out.weight.data[:, col] = 0.0
        out.bias.data[col] = 0.0
    vae.decoder[0].weight.data[2:4, :] = 0.0
    h = np.random.default_rng(9).random((6, 4))
    ll_masked = V.masked_log_likelihoods(vae, h, 50, stream(0, "mc"), classes=[1])[:, 0]
    mu, lv = vae.encode_np(h)
    eps = stream(0, "mc").standard_normal((50, 6, 4))
    z = mu[None] + np.exp(0.5 * lv)[None] * eps
    recon = 0.5 * ((h[None] - vae.decode_np(z.reshape(-1, 4)).reshape(50, 6, 4)) ** 2).sum(-1)
    unmasked = -(recon.mean(0) + ad.kl_diag_gaussian_np(mu, lv))
    se = recon.std(0) / math.sqrt(50)
    assert np.all(np.abs(ll_masked - unmasked) <= se + 1e-12)


def test_two_class_agreement():
    # two classes: "twice chance" would mean 100%, so a fixed floor is used
    ds = data.generate_mixture(data.MixtureSpec(2, [300, 300], [[-3.0, 0.0], [3.0, 0.0]], 1.0, 2, seed=0))
    pool = data.initial_pool(ds, 20, stream(0, "initial-pool"))
    clf = C.MlpClassifier(2, 2, rng=stream(0, "classifier-init"))
    C.train_classifier(clf, pool, ds, rng=stream(0, "classifier-shuffle"))
    pre = C.FeaturePreprocessor(clf.tap_widths, stream(0, "vae-init"))
    vae = V.RegularizedVae(pre.output_dim, 2, stream(0, "vae-init"))
    V.train_vae(vae, pre, clf, ds.features[list(pool.unlabelled)], rng=stream(0, "vae-shuffle"))
    test = ds.test_ids
    h = C.extract_h(clf, pre, ds.features[test])
    agree = np.mean(C.predict(clf, ds.features[test]).argmax(1) == V.predict_latent_label(vae, h, stream(0, "mc")))
    assert agree >= 0.75
