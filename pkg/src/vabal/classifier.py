"""MLP classifier with hidden-layer taps, and the tap -> VAE-input pipeline."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegeneratePoolError
from .layers import Dense, named_parameters


@dataclass
class ClassifierConfig:
    hidden: tuple = (64, 64, 64, 64)
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    dropout: float = 0.0
    zero_head: bool = True


class MlpClassifier:
    """``input -> 64 -> 64 -> 64 -> 64 -> num_classes`` with ReLU hidden units.

    The post-activation output of every hidden layer is a feature tap.
    With ``dropout > 0`` a dropout mask is applied to the input of every
    layer after the first whenever a dropout rng is passed to
    :meth:`forward`.
    """

    def __init__(self, input_dim, num_classes, config=None, rng=None):
        self.config = config or ClassifierConfig()
        if rng is None:
            raise ContractError("MlpClassifier needs an rng for initialisation")
        self.input_dim = input_dim
        self.num_classes = num_classes
        widths = [input_dim, *self.config.hidden]
        self.hidden = [Dense(widths[i], widths[i + 1], rng, f"clf.hidden{i}") for i in range(len(widths) - 1)]
        self.head = Dense(widths[-1], num_classes, rng, "clf.head", zero=self.config.zero_head)

    @property
    def layers(self):
        return [*self.hidden, self.head]

    @property
    def num_taps(self):
        return len(self.hidden)

    @property
    def tap_widths(self):
        return list(self.config.hidden)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self):
        return named_parameters(self.layers)

    def _drop(self, x, rng):
        p = self.config.dropout
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        return ad.mul(x, ad.Tensor(mask))

    def forward(self, x, dropout_rng=None):
        """Return ``(logits, taps)``; ``x`` is a Tensor of shape (batch, input_dim)."""
        if x.shape[-1] != self.input_dim:
            raise ad.ShapeError("classifier", x.shape, (None, self.input_dim))
        use_dropout = dropout_rng is not None and self.config.dropout > 0.0
        taps = []
        h = x
        for i, layer in enumerate(self.hidden):
            if use_dropout and i > 0:
                h = self._drop(h, dropout_rng)
            h = ad.relu(layer(h))
            taps.append(h)
        if use_dropout:
            h = self._drop(h, dropout_rng)
        return self.head(h), taps

    def logits_and_taps_np(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise ad.ShapeError("classifier", features.shape, (None, self.input_dim))
        taps = []
        h = features
        for layer in self.hidden:
            h = np.maximum(layer.apply_np(h), 0.0)
            taps.append(h)
        return self.head.apply_np(h), taps


def _softmax_np(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def predict(model: MlpClassifier, features) -> np.ndarray:
    """Class probabilities, one softmax row per sample."""
    logits, _ = model.logits_and_taps_np(features)
    return _softmax_np(logits)


def predict_stochastic(model: MlpClassifier, features, rng) -> np.ndarray:
    """One dropout-perturbed forward pass (MC-dropout)."""
    if model.config.dropout <= 0.0:
        raise ContractError("model was built without dropout")
    logits, _ = model.forward(ad.Tensor(features), dropout_rng=rng)
    return _softmax_np(logits.data)


def taps(model: MlpClassifier, features):
    return model.logits_and_taps_np(features)[1]


def train_classifier(model, pool, dataset, epochs=None, rng=None):
    """Minimise cross-entropy on the labelled pool with Adam.

    Returns ``(model, per_epoch_mean_loss)``.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    ids = np.asarray(pool.labelled, dtype=np.int64)
    if ids.size == 0:
        raise DegeneratePoolError("labelled pool is empty")
    y = dataset.labels[ids]
    if np.unique(y).size < 2:
        raise DegeneratePoolError(f"labelled pool holds a single class ({int(y[0])})")
    x = dataset.features[ids]
    onehot = np.eye(model.num_classes)[y]
    params = model.parameters()
    state = ad.AdamState(lr=cfg.lr)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(ids.size)
        total = 0.0
        for start in range(0, ids.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            with ad.Tape() as tape:
                logits, _ = model.forward(ad.Tensor(x[batch]), dropout_rng=rng if cfg.dropout > 0 else None)
                nll = ad.neg(ad.sum_(ad.mul(ad.log_softmax(logits), ad.Tensor(onehot[batch]))))
                loss = ad.scale(nll, 1.0 / batch.size)
            grads = tape.backward(loss, wrt=params)
            ad.adam_step(params, grads, state)
            total += loss.item() * batch.size
        curve.append(total / ids.size)
    return model, curve


def accuracy(model, dataset, ids=None) -> float:
    ids = dataset.test_ids if ids is None else np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return float("nan")
    pred = predict(model, dataset.features[ids]).argmax(axis=1)
    return float(np.mean(pred == dataset.labels[ids]))


# ---------------------------------------------------------------------------
# preprocessing into the VAE input
# ---------------------------------------------------------------------------


class FeaturePreprocessor:
    """Per-tap standardisation followed by a 128-unit sigmoid projection.

    Running statistics follow batch-norm conventions: training batches are
    normalised with their own statistics and fold them into the running
    estimate as ``running = momentum * running + (1 - momentum) * batch``;
    evaluation uses the running estimate.
    """

    def __init__(self, tap_widths, rng, width=128, momentum=0.9, eps=1e-5):
        self.tap_widths = list(tap_widths)
        self.width = width
        self.momentum = momentum
        self.eps = eps
        self.projections = [Dense(w, width, rng, f"pre.proj{i}") for i, w in enumerate(self.tap_widths)]
        self.running_mean = [np.zeros(w) for w in self.tap_widths]
        self.running_var = [np.ones(w) for w in self.tap_widths]
        self.samples_seen = 0

    @property
    def output_dim(self):
        return self.width * len(self.tap_widths)

    @property
    def warmed_up(self):
        return self.samples_seen > 0

    def parameters(self):
        return [p for layer in self.projections for p in layer.parameters()]

    def named_parameters(self):
        named = named_parameters(self.projections)
        for i, (m, v) in enumerate(zip(self.running_mean, self.running_var)):
            named[f"pre.running_mean{i}"] = m
            named[f"pre.running_var{i}"] = v
        return named

    def warm_up(self, tap_values):
        """Initialise running statistics from a full pass over ``tap_values``."""
        for i, t in enumerate(tap_values):
            self.running_mean[i] = t.mean(axis=0)
            self.running_var[i] = t.var(axis=0)
        self.samples_seen = tap_values[0].shape[0]

    def normalise(self, tap_values, training=False):
        out = []
        for i, t in enumerate(tap_values):
            if training and t.shape[0] > 1:
                m, v = t.mean(axis=0), t.var(axis=0)
                mom = self.momentum
                self.running_mean[i] = mom * self.running_mean[i] + (1.0 - mom) * m
                self.running_var[i] = mom * self.running_var[i] + (1.0 - mom) * v
            else:
                m, v = self.running_mean[i], self.running_var[i]
            out.append((t - m) / np.sqrt(v + self.eps))
        if training:
            self.samples_seen += tap_values[0].shape[0]
        return out

    def forward(self, tap_values, training=False):
        """Differentiable ``h`` as a Tensor (projection weights are trainable)."""
        if not self.warmed_up:
            raise ContractError("preprocessor statistics are not warmed up")
        normed = self.normalise(tap_values, training)
        return ad.concat([ad.sigmoid(p(ad.Tensor(x))) for p, x in zip(self.projections, normed)], axis=-1)

    def transform_np(self, tap_values):
        if not self.warmed_up:
            raise ContractError("preprocessor statistics are not warmed up")
        normed = self.normalise(tap_values, training=False)
        parts = [ad._sigmoid(p.apply_np(x)) for p, x in zip(self.projections, normed)]
        return np.concatenate(parts, axis=1)


def extract_h(model: MlpClassifier, preprocessor: FeaturePreprocessor, features) -> np.ndarray:
    """Tap every hidden layer, standardise, project and concatenate (eval mode)."""
    return preprocessor.transform_np(taps(model, features))
