"""Bayes-rule estimate of the probability that the classifier mislabels a sample.

For every unlabelled sample

    score = 1 - sum_n c_n * softmax_n(log p(x | y_hat=n) + log p(y_hat=n))

where ``c_n = p(y=n | y_hat=n)`` is the per-class label correctness and
``p(y_hat=n)`` the prior over predicted labels.  Both are tallied from
Monte-Carlo latent predictions on the labelled pool; the likelihoods are
class-masked ELBOs.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .autodiff import logsumexp_rows
from .classifier import extract_h
from .errors import ContractError
from .vae import latent_label_draws, masked_log_likelihoods


@dataclass
class ProbabilityTable:
    confusion: np.ndarray
    prior: np.ndarray
    num_mc: int
    joint_counts: np.ndarray  # [true, predicted]
    num_samples: int

    @property
    def predicted_counts(self):
        return self.joint_counts.sum(axis=0)

    def check(self):
        if abs(self.prior.sum() - 1.0) > 1e-9:
            raise ContractError("prior does not sum to one")
        for v in (self.confusion, self.prior):
            if np.any(v < 0.0) or np.any(v > 1.0):
                raise ContractError("probability entries must lie in [0, 1]")
        if self.joint_counts.sum() != self.num_mc * self.num_samples:
            raise ContractError("tallies are inconsistent with num_mc x pool size")


@dataclass
class UncertaintyScore:
    sample_id: int
    score: float
    log_joint: np.ndarray = field(repr=False)
    log_evidence: float = 0.0

    def recompute(self):
        """``1 - sum_n exp(log_joint_n - log_evidence)``, clamped to [0, 1]."""
        with np.errstate(divide="ignore"):
            total = np.exp(self.log_joint - self.log_evidence).sum()
        return float(min(1.0, max(0.0, 1.0 - total)))


# ---------------------------------------------------------------------------
# tallies
# ---------------------------------------------------------------------------


def confusion_from_draws(draws, labels, num_classes):
    """``p(y_n | y_hat_n)`` from a (samples, draws) array of latent predictions.

    Classes that are never predicted fall back to ``1 / num_classes``.
    Returns ``(confusion, joint_counts)``.
    """
    draws = np.ascontiguousarray(draws, dtype=np.int64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    counts = _kernels.tally(draws, labels, num_classes)
    predicted = counts.sum(axis=0)
    diag = np.diag(counts).astype(np.float64)
    confusion = np.full(num_classes, 1.0 / num_classes)
    seen = predicted > 0
    confusion[seen] = diag[seen] / predicted[seen]
    return confusion, counts


def prior_from_draws(draws, num_classes, smoothing=1.0):
    """Add-``smoothing`` frequency of each predicted class."""
    draws = np.asarray(draws, dtype=np.int64)
    counts = np.bincount(draws.ravel(), minlength=num_classes).astype(np.float64)
    return (counts + smoothing) / (draws.size + smoothing * num_classes)


def estimate_confusion(vae, labelled_h, labels, num_mc, rng):
    draws = latent_label_draws(vae, labelled_h, num_mc, rng)
    return confusion_from_draws(draws, labels, vae.num_classes)[0]


def estimate_prior(vae, labelled_h, num_mc, rng, smoothing=1.0):
    draws = latent_label_draws(vae, labelled_h, num_mc, rng)
    return prior_from_draws(draws, vae.num_classes, smoothing)


def estimate_table(vae, labelled_h, labels, num_mc, rng, smoothing=1.0) -> ProbabilityTable:
    """Confusion and prior from one shared set of draws."""
    if len(labels) == 0:
        raise ContractError("labelled pool is empty")
    draws = latent_label_draws(vae, labelled_h, num_mc, rng)
    confusion, counts = confusion_from_draws(draws, labels, vae.num_classes)
    prior = prior_from_draws(draws, vae.num_classes, smoothing)
    return ProbabilityTable(confusion, prior, num_mc, counts, len(labels))


# ---------------------------------------------------------------------------
# posterior
# ---------------------------------------------------------------------------


def _check_loglik(log_lik, sample_ids=None):
    bad = ~np.isfinite(log_lik)
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        sid = row if sample_ids is None else sample_ids[row]
        raise FloatingPointError(f"non-finite log-likelihood for sample {sid}, class {col}")


def posterior_weights(log_lik, prior):
    """Normalised ``p(x|n) p(n)`` per class (rows sum to one)."""
    a = np.atleast_2d(log_lik) + np.log(prior)
    # dividing after a max shift keeps full precision when |a| is large
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def posterior_uncertainty(log_lik, confusion, prior, sample_ids=None):
    """Mislabelling probability for one sample (1-D input) or many (2-D).

    Works in the log domain: ``a_n = log_lik_n + log prior_n`` is
    normalised with logsumexp before the confusion-weighted sum.  The
    complement is taken termwise, ``sum_n (1 - c_n) w_n``, so unit
    confusion gives exactly zero.
    """
    log_lik = np.asarray(log_lik, dtype=np.float64)
    single = log_lik.ndim == 1
    ll = np.atleast_2d(log_lik)
    confusion = np.asarray(confusion, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if ll.shape[1] != confusion.size or ll.shape[1] != prior.size:
        raise ContractError("log-likelihood, confusion and prior lengths differ")
    _check_loglik(ll, sample_ids)
    with np.errstate(divide="ignore"):
        w = posterior_weights(ll, prior)
    score = np.clip(w @ (1.0 - confusion), 0.0, 1.0)
    return float(score[0]) if single else score


@dataclass
class ScoringConfig:
    num_mc: int = 100
    disable_prior: bool = False
    disable_confusion: bool = False
    # what to rank by once the confusion term is switched off
    confusion_off: str = "margin"
    prior_smoothing: float = 1.0


@dataclass
class PoolScores:
    ids: np.ndarray
    scores: np.ndarray
    log_lik: np.ndarray
    table: ProbabilityTable
    prior_used: np.ndarray
    confusion_used: np.ndarray

    def __len__(self):
        return self.ids.size

    def __iter__(self):
        a = self.log_lik + np.log(self.prior_used)
        evidence = logsumexp_rows(a)
        with np.errstate(divide="ignore"):
            log_c = np.log(self.confusion_used)
        for i, sid in enumerate(self.ids):
            yield UncertaintyScore(int(sid), float(self.scores[i]), a[i] + log_c, float(evidence[i]))

    def as_dict(self):
        return dict(zip(self.ids.tolist(), self.scores.tolist()))

    def write_csv(self, path):
        nc = self.log_lik.shape[1]
        header = (["sample_id", "score"] + [f"log_lik_{n}" for n in range(nc)]
                  + [f"prior_{n}" for n in range(nc)] + [f"confusion_{n}" for n in range(nc)])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            tail = [repr(float(v)) for v in self.prior_used] + [repr(float(v)) for v in self.confusion_used]
            for sid, s, ll in zip(self.ids, self.scores, self.log_lik):
                w.writerow([int(sid), repr(float(s))] + [repr(float(v)) for v in ll] + tail)


def combine(log_lik, table: ProbabilityTable, config: ScoringConfig, ids=None):
    """Turn likelihoods plus a probability table into pool scores."""
    nc = log_lik.shape[1]
    prior = np.full(nc, 1.0 / nc) if config.disable_prior else table.prior
    confusion = np.ones(nc) if config.disable_confusion else table.confusion
    ids = np.arange(log_lik.shape[0]) if ids is None else np.asarray(ids)
    if config.disable_confusion and config.confusion_off == "margin":
        _check_loglik(log_lik, ids)
        w = posterior_weights(log_lik, prior)
        scores = 1.0 - w.max(axis=1)
    elif config.disable_confusion and config.confusion_off != "literal":
        raise ContractError(f"unknown confusion_off mode {config.confusion_off!r}")
    else:
        scores = posterior_uncertainty(log_lik, confusion, prior, sample_ids=ids)
    return PoolScores(ids, np.atleast_1d(scores), log_lik, table, prior, confusion)


def score_pool(vae, classifier, preprocessor, pool, dataset, config: ScoringConfig, rng) -> PoolScores:
    """Score every unlabelled sample.

    ``rng`` drives two consecutive uses: the labelled-pool draws for the
    table, then the likelihood draws for the unlabelled pool.
    """
    lab = np.asarray(pool.labelled, dtype=np.int64)
    unl = np.asarray(pool.unlabelled, dtype=np.int64)
    if unl.size == 0:
        raise ContractError("unlabelled pool is empty")
    h_lab = extract_h(classifier, preprocessor, dataset.features[lab])
    table = estimate_table(vae, h_lab, dataset.labels[lab], config.num_mc, rng, config.prior_smoothing)
    h_unl = extract_h(classifier, preprocessor, dataset.features[unl])
    log_lik = masked_log_likelihoods(vae, h_unl, config.num_mc, rng)
    return combine(log_lik, table, config, ids=unl)
