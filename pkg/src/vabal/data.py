"""Synthetic mixtures, imbalanced variants, CSV ingestion and pools."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    is_test: np.ndarray
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        n = self.labels.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n or self.is_test.shape != (n,):
            raise ContractError("features, labels and split tags disagree in length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features must be finite")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]

    @property
    def train_ids(self):
        return np.flatnonzero(~self.is_test)

    @property
    def test_ids(self):
        return np.flatnonzero(self.is_test)

    def train_counts(self):
        return np.bincount(self.labels[~self.is_test], minlength=self.num_classes)

    def test_counts(self):
        return np.bincount(self.labels[self.is_test], minlength=self.num_classes)

    def subset(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(self.features[ids], self.labels[ids], self.num_classes,
                       self.is_test[ids], list(self.warnings))


@dataclass
class MixtureSpec:
    num_classes: int
    counts: list
    means: list
    std: float = 1.0
    input_dim: int = 2
    seed: int = 0

    def validate(self):
        if self.input_dim < 2:
            raise ContractError(f"input_dim must be >= 2, got {self.input_dim}")
        if len(self.counts) != self.num_classes or any(int(c) <= 0 for c in self.counts):
            raise ContractError("counts must be num_classes positive integers")
        means = np.asarray(self.means, dtype=np.float64)
        if means.shape != (self.num_classes, self.input_dim):
            raise ContractError(f"means must have shape ({self.num_classes}, {self.input_dim})")
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                if np.array_equal(means[a], means[b]):
                    raise ContractError(f"classes {a} and {b} share a mean")
        if self.std <= 0:
            raise ContractError("std must be positive")

    def to_dict(self):
        d = asdict(self)
        d["means"] = [list(map(float, m)) for m in self.means]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def separated_means(num_classes, input_dim, distance):
    """Class means with every pair exactly ``distance`` apart when possible.

    Uses scaled unit axes when ``input_dim >= num_classes`` and a regular
    polygon in the first two coordinates otherwise (where ``distance`` is
    the spacing of neighbouring vertices).
    """
    means = np.zeros((num_classes, input_dim))
    if input_dim >= num_classes:
        for n in range(num_classes):
            means[n, n] = distance / math.sqrt(2.0)
    else:
        radius = distance / (2.0 * math.sin(math.pi / num_classes))
        for n in range(num_classes):
            angle = 2.0 * math.pi * n / num_classes
            means[n, 0] = radius * math.cos(angle)
            means[n, 1] = radius * math.sin(angle)
    return means.tolist()


def mixture_spec(num_classes, counts, distance=6.0, std=1.0, input_dim=None, seed=0):
    input_dim = input_dim or max(2, num_classes)
    return MixtureSpec(num_classes, list(counts), separated_means(num_classes, input_dim, distance * std),
                       std, input_dim, seed)


def _split_sizes(count, test_fraction):
    n_test = min(count, max(1, int(round(test_fraction * count))))
    return count - n_test, n_test


def generate_mixture(spec: MixtureSpec, test_fraction=0.2) -> Dataset:
    """Isotropic Gaussian classes with a stratified train/test split."""
    spec.validate()
    rng = stream(spec.seed, "dataset")
    means = np.asarray(spec.means, dtype=np.float64)
    feats, labels, tags = [], [], []
    for n, count in enumerate(spec.counts):
        count = int(count)
        x = means[n] + spec.std * rng.standard_normal((count, spec.input_dim))
        n_train, _ = _split_sizes(count, test_fraction)
        is_test = np.ones(count, dtype=bool)
        is_test[rng.permutation(count)[:n_train]] = False
        feats.append(x)
        labels.append(np.full(count, n))
        tags.append(is_test)
    order = rng.permutation(sum(int(c) for c in spec.counts))
    return Dataset(np.concatenate(feats)[order], np.concatenate(labels)[order], spec.num_classes,
                   np.concatenate(tags)[order])


def stratified_split(dataset: Dataset, test_fraction=0.2, seed=0) -> Dataset:
    """Re-tag samples as train/test, stratified per class."""
    rng = stream(seed, "split")
    is_test = np.zeros(len(dataset), dtype=bool)
    for n in range(dataset.num_classes):
        ids = np.flatnonzero(dataset.labels == n)
        if ids.size == 0:
            continue
        _, n_test = _split_sizes(ids.size, test_fraction)
        is_test[rng.permutation(ids)[:n_test]] = True
    return Dataset(dataset.features, dataset.labels, dataset.num_classes, is_test, list(dataset.warnings))


def _survivors(count, removal_fraction):
    # tolerance guards floor() against 0.1*100 = 9.999...
    return max(1, int(math.floor(count * (1.0 - removal_fraction) + 1e-9)))


def _subsample_classes(dataset, classes, removal_fraction, seed, label):
    if not 0.0 <= removal_fraction < 1.0:
        raise ContractError(f"removal_fraction must lie in [0, 1), got {removal_fraction}")
    rng = stream(seed, label)
    keep = np.ones(len(dataset), dtype=bool)
    for n in sorted(classes):
        ids = np.flatnonzero((dataset.labels == n) & ~dataset.is_test)
        if ids.size == 0:
            continue
        n_keep = _survivors(ids.size, removal_fraction)
        drop = rng.permutation(ids)[n_keep:]
        keep[drop] = False
    return dataset.subset(np.flatnonzero(keep))


def make_dominant(dataset: Dataset, keep_classes, removal_fraction=0.9, seed=0) -> Dataset:
    """Shrink every training class outside ``keep_classes``; test split untouched."""
    keep_classes = set(int(c) for c in keep_classes)
    if not keep_classes or not keep_classes <= set(range(dataset.num_classes)):
        raise ContractError("keep_classes must be a nonempty subset of the classes")
    others = set(range(dataset.num_classes)) - keep_classes
    return _subsample_classes(dataset, others, removal_fraction, seed, "dominant")


def make_rare(dataset: Dataset, rare_classes, removal_fraction=0.9, seed=0) -> Dataset:
    """Shrink the training samples of ``rare_classes`` only."""
    rare_classes = set(int(c) for c in rare_classes)
    if not rare_classes <= set(range(dataset.num_classes)):
        raise ContractError("rare_classes must be a subset of the classes")
    return _subsample_classes(dataset, rare_classes, removal_fraction, seed, "rare")


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def write_csv(dataset: Dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"f{j}" for j in range(dataset.input_dim)])
        for y, row in zip(dataset.labels, dataset.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def load_csv(path) -> Dataset:
    """Read ``label,f0,f1,...`` rows; every sample is tagged as training."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = rows[0]
    if not header or header[0].strip() != "label" or len(header) < 2:
        raise ParseError("header must be 'label,f0,f1,...'", line=1)
    width = len(header)
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} cells, found {len(row)}", line=lineno)
        try:
            label = int(row[0])
        except ValueError:
            raise ParseError(f"label {row[0]!r} is not an integer", line=lineno) from None
        if label < 0:
            raise ParseError(f"negative label {label}", line=lineno)
        try:
            values = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
        labels.append(label)
        feats.append(values)
    if not labels:
        raise ParseError("no data rows", line=2)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    warnings = []
    empty = sorted(set(range(num_classes)) - set(labels.tolist()))
    if empty:
        msg = f"classes without samples: {empty}"
        log.warning("%s: %s", path, msg)
        warnings.append({"kind": "empty-class", "classes": empty, "message": msg})
    return Dataset(np.asarray(feats), labels, num_classes, np.zeros(labels.size, dtype=bool), warnings)


# ---------------------------------------------------------------------------
# recipes (JSON manifest for exact regeneration)
# ---------------------------------------------------------------------------


def build_dataset(recipe: dict) -> Dataset:
    """Materialise a dataset description.

    ``{"mixture": {...MixtureSpec...}}`` or ``{"csv": path, "split_seed": 0}``,
    optionally with ``"variant": {"kind": "dominant"|"rare", "classes": [...],
    "removal_fraction": 0.9, "seed": 0}``.
    """
    allowed = {"mixture", "csv", "split_seed", "variant", "test_fraction"}
    unknown = set(recipe) - allowed
    if unknown:
        raise ContractError(f"unknown dataset keys: {sorted(unknown)}")
    test_fraction = recipe.get("test_fraction", 0.2)
    if "mixture" in recipe:
        ds = generate_mixture(MixtureSpec.from_dict(recipe["mixture"]), test_fraction)
    elif "csv" in recipe:
        ds = stratified_split(load_csv(recipe["csv"]), test_fraction, recipe.get("split_seed", 0))
    else:
        raise ContractError("dataset needs either 'mixture' or 'csv'")
    variant = recipe.get("variant")
    if variant:
        kind = variant["kind"]
        frac = variant.get("removal_fraction", 0.9)
        seed = variant.get("seed", 0)
        if kind == "dominant":
            ds = make_dominant(ds, variant["classes"], frac, seed)
        elif kind == "rare":
            ds = make_rare(ds, variant["classes"], frac, seed)
        else:
            raise ContractError(f"unknown variant kind {kind!r}")
    return ds


def dump_recipe(recipe: dict, path):
    Path(path).write_text(json.dumps(recipe, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# pools
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pool:
    labelled: tuple
    unlabelled: tuple
    round: int = 0

    def check(self, train_ids=None):
        lab, unl = set(self.labelled), set(self.unlabelled)
        if lab & unl:
            raise ContractError("labelled and unlabelled pools overlap")
        if len(lab) != len(self.labelled) or len(unl) != len(self.unlabelled):
            raise ContractError("pool contains duplicate ids")
        if train_ids is not None and lab | unl != set(int(i) for i in train_ids):
            raise ContractError("pool does not cover the training set")


def initial_pool(dataset: Dataset, size: int, rng) -> Pool:
    """Label ``size`` training samples drawn uniformly at random."""
    train = dataset.train_ids
    size = min(size, train.size)
    chosen = rng.choice(train, size=size, replace=False)
    chosen_set = set(int(i) for i in chosen)
    rest = tuple(int(i) for i in train if int(i) not in chosen_set)
    return Pool(tuple(int(i) for i in chosen), rest, 0)


def transfer(pool: Pool, selected_ids) -> Pool:
    """Move ``selected_ids`` from the unlabelled to the labelled pool."""
    selected = [int(i) for i in selected_ids]
    labelled = set(pool.labelled)
    unlabelled = set(pool.unlabelled)
    seen = set()
    for i in selected:
        if i in labelled:
            raise ContractError(f"id {i} is already labelled")
        if i not in unlabelled:
            raise ContractError(f"id {i} is not in the unlabelled pool")
        if i in seen:
            raise ContractError(f"id {i} selected twice")
        seen.add(i)
    rest = tuple(i for i in pool.unlabelled if i not in seen)
    return Pool(pool.labelled + tuple(selected), rest, pool.round + 1)
