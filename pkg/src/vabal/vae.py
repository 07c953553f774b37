"""Class-regularised VAE over classifier features.

The latent vector is split into one block of ``dims_per_class`` dimensions
per class.  A sample is assigned to the class whose block carries the
least energy, and training adds a cross-entropy term that pushes the
classifier-predicted class's block towards zero.  Zeroing a block by hand
and evaluating the ELBO gives a per-class likelihood lower bound.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .errors import ContractError
from .layers import Dense, named_parameters

KL_MASK_MODES = ("full", "exclude-block")
LOSS_SCALES = ("per-dim", "sum")


@dataclass(frozen=True)
class LatentPartition:
    num_classes: int
    dims_per_class: int = 10

    def __post_init__(self):
        if self.num_classes < 1 or self.dims_per_class < 1:
            raise ContractError("partition needs at least one class and one dim per class")

    @property
    def latent_dim(self):
        return self.num_classes * self.dims_per_class

    def block(self, n):
        if not 0 <= n < self.num_classes:
            raise ContractError(f"class {n} out of range [0, {self.num_classes})")
        return range(n * self.dims_per_class, (n + 1) * self.dims_per_class)

    def mask(self, z, n):
        """Copy of ``z`` with block ``n`` set to zero (last axis)."""
        b = self.block(n)
        out = np.array(z, dtype=np.float64, copy=True)
        out[..., b.start:b.stop] = 0.0
        return out


class RegularizedVae:
    """Encoder ``h -> 128 -> 128 -> (mu, log_var)``, decoder ``z -> 128 -> 128 -> h``."""

    def __init__(self, input_dim, num_classes, rng, dims_per_class=10, hidden=128, lam=0.005,
                 variant="square", kl_mask="full", loss_scale="per-dim"):
        if lam < 0:
            raise ContractError("lambda must be non-negative")
        _kernels.variant_code(variant)
        if kl_mask not in KL_MASK_MODES:
            raise ContractError(f"kl_mask must be one of {KL_MASK_MODES}")
        if loss_scale not in LOSS_SCALES:
            raise ContractError(f"loss_scale must be one of {LOSS_SCALES}")
        self.loss_scale = loss_scale
        self.input_dim = input_dim
        self.partition = LatentPartition(num_classes, dims_per_class)
        self.lam = float(lam)
        self.variant = variant
        self.kl_mask = kl_mask
        latent = self.partition.latent_dim
        self.encoder = [
            Dense(input_dim, hidden, rng, "vae.enc0"),
            Dense(hidden, hidden, rng, "vae.enc1"),
            Dense(hidden, 2 * latent, rng, "vae.enc_out"),
        ]
        self.decoder = [
            Dense(latent, hidden, rng, "vae.dec0"),
            Dense(hidden, hidden, rng, "vae.dec1"),
            Dense(hidden, input_dim, rng, "vae.dec_out"),
        ]

    @property
    def num_classes(self):
        return self.partition.num_classes

    @property
    def latent_dim(self):
        return self.partition.latent_dim

    def parameters(self):
        return [p for layer in self.encoder + self.decoder for p in layer.parameters()]

    def named_parameters(self):
        return named_parameters(self.encoder + self.decoder)

    # differentiable path -------------------------------------------------

    def encode(self, h):
        x = h
        for layer in self.encoder[:-1]:
            x = ad.relu(layer(x))
        out = self.encoder[-1](x)
        latent = self.latent_dim
        return ad.take_cols(out, 0, latent), ad.take_cols(out, latent, 2 * latent)

    def decode(self, z):
        x = z
        for layer in self.decoder[:-1]:
            x = ad.relu(layer(x))
        return ad.sigmoid(self.decoder[-1](x))

    # inference path --------------------------------------------------------

    def encode_np(self, h):
        x = np.asarray(h, dtype=np.float64)
        for layer in self.encoder[:-1]:
            x = np.maximum(layer.apply_np(x), 0.0)
        out = self.encoder[-1].apply_np(x)
        latent = self.latent_dim
        return out[:, :latent], np.clip(out[:, latent:], ad.LOG_VAR_MIN, ad.LOG_VAR_MAX)

    def decode_pre_np(self, z):
        """Decoder output before the final sigmoid."""
        x = z
        for layer in self.decoder[:-1]:
            x = np.maximum(layer.apply_np(x), 0.0)
        return self.decoder[-1].apply_np(x)

    def decode_np(self, z):
        return ad._sigmoid(self.decode_pre_np(z))


# ---------------------------------------------------------------------------
# class energies and the absence condition
# ---------------------------------------------------------------------------


def class_energies(z, partition: LatentPartition, variant="square"):
    """``w_n = sum_{j in C_n} v(z_j)`` with ``v`` = square, abs or sigmoid.

    Accepts a Tensor (differentiable, shape (batch, latent)) or an array
    of shape (latent,) or (batch, latent).
    """
    code = _kernels.variant_code(variant)
    nc, d = partition.num_classes, partition.dims_per_class
    if isinstance(z, ad.Tensor):
        if z.shape[-1] != partition.latent_dim:
            raise ad.ShapeError("class_energies", z.shape, (partition.latent_dim,))
        blocks = ad.reshape(z, (z.shape[0], nc, d))
        if code == 0:
            v = ad.square(blocks)
        elif code == 1:
            v = ad.abs_(blocks)
        else:
            v = ad.sigmoid(blocks)
        return ad.sum_(v, axis=-1)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != partition.latent_dim:
        raise ad.ShapeError("class_energies", z.shape, (partition.latent_dim,))
    single = z.ndim == 1
    w = _kernels.block_energies(np.ascontiguousarray(z.reshape(-1, partition.latent_dim)), nc, d, code)
    return w[0] if single else w


def latent_label(z, partition: LatentPartition, variant="square"):
    """``argmin_n w_n``, ties towards the lowest class index."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    labels = _kernels.latent_labels(np.ascontiguousarray(z.reshape(-1, partition.latent_dim)),
                                    partition.num_classes, partition.dims_per_class,
                                    _kernels.variant_code(variant))
    return int(labels[0]) if single else labels


def _sample_z(vae, h, num_draws, rng):
    """Latent draws of shape (samples, num_draws, latent)."""
    mu, log_var = vae.encode_np(np.atleast_2d(h))
    std = np.exp(0.5 * log_var)
    eps = rng.standard_normal((mu.shape[0], num_draws, mu.shape[1]))
    return mu[:, None, :] + std[:, None, :] * eps


def predict_latent_label(vae: RegularizedVae, h, rng):
    """One draw ``z ~ q(z|h)`` per sample, mapped through the absence condition."""
    h = np.asarray(h, dtype=np.float64)
    labels = latent_label_draws(vae, np.atleast_2d(h), 1, rng)[:, 0]
    return int(labels[0]) if h.ndim == 1 else labels


def latent_label_draws(vae: RegularizedVae, h, num_draws, rng) -> np.ndarray:
    """Predicted labels of shape (samples, num_draws)."""
    z = _sample_z(vae, h, num_draws, rng)
    n, k, latent = z.shape
    labels = latent_label(z.reshape(n * k, latent), vae.partition, vae.variant)
    return labels.reshape(n, k)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_class(z, partition: LatentPartition, target_onehot, variant="square"):
    """Batch-mean cross-entropy between ``softmax(-w)`` and the one-hot targets."""
    target = np.atleast_2d(np.asarray(target_onehot, dtype=np.float64))
    if target.shape[-1] != partition.num_classes or not (
        np.all((target == 0.0) | (target == 1.0)) and np.all(target.sum(axis=-1) == 1.0)
    ):
        raise ContractError("target must be one-hot rows over the classes")
    if not isinstance(z, ad.Tensor):
        z = ad.Tensor(np.atleast_2d(z))
    if z.shape[0] != target.shape[0]:
        raise ad.ShapeError("loss_class", z.shape, target.shape)
    w = class_energies(z, partition, variant)
    logp = ad.log_softmax(ad.neg(w))
    return ad.scale(ad.sum_(ad.mul(logp, ad.Tensor(target))), -1.0 / target.shape[0])


def vae_terms(vae: RegularizedVae, h, rng=None, eps=None, detach_target=True):
    """Single-sample reparameterised ELBO pieces for a batch ``h`` (Tensor)."""
    if not isinstance(h, ad.Tensor):
        h = ad.Tensor(np.atleast_2d(h))
    mu, log_var = vae.encode(h)
    z = ad.reparameterize(mu, log_var, rng=rng, eps=eps)
    h_hat = vae.decode(z)
    # the reconstruction target is a constant: trainable projections upstream
    # of h would otherwise collapse h to make reconstruction trivial
    target = ad.Tensor(h.data) if detach_target else h
    recon = ad.scale(ad.sum_(ad.square(ad.sub(target, h_hat)), axis=-1), 0.5)
    kl = ad.kl_diag_gaussian(mu, log_var, axis=-1)
    return {"z": z, "mu": mu, "log_var": log_var, "recon": recon, "kl": kl}


def loss_vae(vae: RegularizedVae, h, rng=None, eps=None):
    """Batch-mean negative ELBO (unit-variance Gaussian decoder, constants dropped)."""
    t = vae_terms(vae, h, rng, eps)
    return ad.mean(ad.add(t["recon"], t["kl"]))


def total_loss(vae: RegularizedVae, h, target_onehot, rng=None, eps=None):
    """``L_VAE + class_weight(vae) * L_class``; returns ``(total, l_vae, l_class)``."""
    t = vae_terms(vae, h, rng, eps)
    l_vae = ad.mean(ad.add(t["recon"], t["kl"]))
    l_class = loss_class(t["z"], vae.partition, target_onehot, vae.variant)
    return ad.add(l_vae, ad.scale(l_class, class_weight(vae))), l_vae, l_class


def class_weight(vae: RegularizedVae):
    """Effective weight of the class term.

    ``lambda`` is calibrated against a reconstruction error measured per
    input dimension, so with ``loss_scale == "per-dim"`` (default) it is
    multiplied by ``dim(h)`` to weigh against the summed error used here.
    ``"sum"`` applies ``lambda`` as is.
    """
    return vae.lam * (vae.input_dim if vae.loss_scale == "per-dim" else 1.0)


@dataclass
class VaeTrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    batch_size: int = 64


def train_vae(vae, preprocessor, classifier, unlabelled_features, epochs=None, rng=None, config=None):
    """Jointly train the VAE and the projection layers on unlabelled samples.

    Targets for the class term are the frozen classifier's predictions.
    Returns ``(vae, preprocessor, curves)`` with per-epoch means of the
    ``total``, ``vae`` and ``class`` losses.
    """
    cfg = config or VaeTrainConfig()
    epochs = cfg.epochs if epochs is None else epochs
    x = np.asarray(unlabelled_features, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractError("unlabelled pool is empty; nothing to train the VAE on")
    logits, tap_values = classifier.logits_and_taps_np(x)
    targets = np.eye(vae.num_classes)[logits.argmax(axis=1)]
    preprocessor.warm_up(tap_values)
    params = vae.parameters() + preprocessor.parameters()
    state = ad.AdamState(lr=cfg.lr)
    curves = {"total": [], "vae": [], "class": []}
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with ad.Tape() as tape:
                h = preprocessor.forward([t[idx] for t in tap_values], training=True)
                total, l_vae, l_class = total_loss(vae, h, targets[idx], rng=rng)
            grads = tape.backward(total, wrt=params)
            ad.adam_step(params, grads, state)
            sums += idx.size * np.array([total.item(), l_vae.item(), l_class.item()])
        for key, value in zip(("total", "vae", "class"), sums / n):
            curves[key].append(float(value))
    return vae, preprocessor, curves


# ---------------------------------------------------------------------------
# masked likelihood lower bounds
# ---------------------------------------------------------------------------


def _sigmoid_sq_err(pre, target):
    """Per-row ``0.5 * ||target - sigmoid(pre)||^2`` summed over the draws stacked in ``pre``."""
    rows, dim = target.shape
    diff = target[None] - ad._sigmoid(pre.reshape(-1, rows, dim))
    return 0.5 * np.einsum("dij,dij->i", diff, diff)


def masked_log_likelihoods(vae: RegularizedVae, h, num_mc, rng, classes=None, chunk_rows=2048):
    """Lower bounds of ``log p(x | y_hat = n)`` for every sample and class.

    For each of ``num_mc`` draws ``z ~ q(z|h)`` the block of class ``n`` is
    zeroed before decoding.  The same noise is reused across classes.  The
    result is the mean over draws of the negative loss (reconstruction
    plus KL), shape (samples, len(classes)).
    """
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    part = vae.partition
    classes = list(range(part.num_classes)) if classes is None else [int(c) for c in classes]
    for c in classes:
        part.block(c)
    if num_mc < 1:
        raise ContractError("num_mc must be >= 1")
    mu, log_var = vae.encode_np(h)
    std = np.exp(0.5 * log_var)
    n, latent = mu.shape
    eps = rng.standard_normal((num_mc, n, latent))
    kl_terms = -0.5 * (1.0 + log_var - mu * mu - np.exp(log_var))
    out = np.empty((n, len(classes)))
    draws_per_chunk = max(1, chunk_rows // max(n, 1))
    rows_per_chunk = max(1, chunk_rows) if n > chunk_rows else n
    for k, c in enumerate(classes):
        b = part.block(c)
        if vae.kl_mask == "full":
            kl = kl_terms.sum(axis=1)
        else:
            kl = kl_terms.sum(axis=1) - kl_terms[:, b.start:b.stop].sum(axis=1)
        recon = np.zeros(n)
        for r0 in range(0, n, rows_per_chunk):
            r1 = min(n, r0 + rows_per_chunk)
            for d0 in range(0, num_mc, draws_per_chunk):
                d1 = min(num_mc, d0 + draws_per_chunk)
                z = mu[None, r0:r1] + std[None, r0:r1] * eps[d0:d1, r0:r1]
                z[..., b.start:b.stop] = 0.0
                pre = vae.decode_pre_np(z.reshape(-1, latent))
                recon[r0:r1] += _sigmoid_sq_err(pre, h[r0:r1])
        out[:, k] = -(recon / num_mc) - kl
    return out


def masked_log_likelihood(vae: RegularizedVae, h, n, num_mc, rng) -> float:
    """Single-sample, single-class version of :func:`masked_log_likelihoods`."""
    vae.partition.block(n)
    return float(masked_log_likelihoods(vae, np.atleast_2d(h), num_mc, rng, classes=[n])[0, 0])
