"""Query-selection strategies."""

from dataclasses import dataclass

import numpy as np

from .classifier import predict, predict_stochastic
from .errors import ContractError

STRATEGIES = ("vabal", "random", "max_entropy", "mc_dropout", "vabal_balanced")


@dataclass
class QueryResult:
    ids: np.ndarray
    scores: np.ndarray
    strategy: str
    round: int = 0

    def __len__(self):
        return self.ids.size

    @property
    def mean_score(self):
        return float(self.scores.mean()) if self.ids.size and not np.all(np.isnan(self.scores)) else float("nan")


def _check_budget(n_r):
    if int(n_r) != n_r or n_r <= 0:
        raise ContractError(f"budget must be a positive integer, got {n_r}")
    return int(n_r)


def top_k(ids, scores, k):
    """Indices of the ``k`` best scores; ties go to the lower id."""
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -scores))
    return order[:k]


def select_vabal(scores, n_r, round_=0, strategy="vabal") -> QueryResult:
    """Highest-scoring ``n_r`` ids.  ``scores`` maps id -> score, or is an (ids, scores) pair."""
    n_r = _check_budget(n_r)
    if isinstance(scores, dict):
        ids = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
        vals = np.fromiter(scores.values(), dtype=np.float64, count=len(scores))
    else:
        ids, vals = (np.asarray(a) for a in scores)
        ids = ids.astype(np.int64)
        vals = vals.astype(np.float64)
    if ids.size == 0:
        raise ContractError("no scores to select from")
    if np.unique(ids).size != ids.size:
        raise ContractError("duplicate ids in score set")
    keep = top_k(ids, vals, n_r)
    return QueryResult(ids[keep], vals[keep], strategy, round_)


def select_random(pool, n_r, rng, round_=0) -> QueryResult:
    n_r = _check_budget(n_r)
    unl = np.asarray(pool.unlabelled, dtype=np.int64)
    k = min(n_r, unl.size)
    picked = rng.choice(unl, size=k, replace=False) if k else unl[:0]
    return QueryResult(picked, np.full(k, np.nan), "random", round_)


def entropy(probs):
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def select_max_entropy(classifier, pool, dataset, n_r, round_=0) -> QueryResult:
    n_r = _check_budget(n_r)
    unl = np.asarray(pool.unlabelled, dtype=np.int64)
    if unl.size == 0:
        return QueryResult(unl, np.zeros(0), "max_entropy", round_)
    ent = entropy(predict(classifier, dataset.features[unl]))
    keep = top_k(unl, ent, n_r)
    return QueryResult(unl[keep], ent[keep], "max_entropy", round_)


def mc_dropout_probs(classifier, features, passes, rng):
    """Mean softmax over ``passes`` dropout forward passes."""
    if passes < 1:
        raise ContractError("need at least one stochastic pass")
    acc = np.zeros((features.shape[0], classifier.num_classes))
    for _ in range(passes):
        acc += predict_stochastic(classifier, features, rng)
    return acc / passes


def select_mc_dropout(classifier, pool, dataset, n_r, passes=100, rng=None, round_=0) -> QueryResult:
    n_r = _check_budget(n_r)
    if classifier.config.dropout <= 0.0:
        raise ContractError("mc_dropout needs a classifier trained with dropout")
    unl = np.asarray(pool.unlabelled, dtype=np.int64)
    if unl.size == 0:
        return QueryResult(unl, np.zeros(0), "mc_dropout", round_)
    ent = entropy(mc_dropout_probs(classifier, dataset.features[unl], passes, rng))
    keep = top_k(unl, ent, n_r)
    return QueryResult(unl[keep], ent[keep], "mc_dropout", round_)


def select_balanced(ids, scores, predicted, targets, round_=0) -> QueryResult:
    """Take ``targets[n]`` top-scoring samples among those predicted as class ``n``.

    Output order is by score, ties by id, across all classes.
    """
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.int64)
    chosen = []
    for n, k in enumerate(np.asarray(targets, dtype=np.int64)):
        if k <= 0:
            continue
        members = np.flatnonzero(predicted == n)
        if members.size < k:
            raise ContractError(f"class {n}: target {k} exceeds {members.size} available samples")
        chosen.append(members[top_k(ids[members], scores[members], k)])
    sel = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    order = top_k(ids[sel], scores[sel], sel.size)
    sel = sel[order]
    return QueryResult(ids[sel], scores[sel], "vabal_balanced", round_)
