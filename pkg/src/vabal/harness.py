"""The active-learning round loop, experiment configs, sweeps and reports."""

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import allocator, strategies
from .classifier import ClassifierConfig, FeaturePreprocessor, MlpClassifier, accuracy, predict, train_classifier
from .data import build_dataset, initial_pool, transfer
from .errors import ContractError, DegeneratePoolError
from .probability import ScoringConfig, score_pool
from .rng import Streams
from .vae import KL_MASK_MODES, LOSS_SCALES, RegularizedVae, VaeTrainConfig, train_vae

log = logging.getLogger(__name__)

SWEEP_AXES = {"lambda": "lam", "budget": "budget", "w_variant": "w_variant"}
CSV_HEAD = ["round", "labelled", "accuracy", "rare_ratio", "mean_sel_score", "seed", "strategy"]
RARE_THRESHOLD = 0.5

_CLASSIFIER_KEYS = {f.name for f in fields(ClassifierConfig)}
_VAE_KEYS = {f.name for f in fields(VaeTrainConfig)} | {"hidden", "kl_mask", "loss_scale"}


def default_dataset():
    return {"mixture": {
        "num_classes": 4,
        "counts": [625, 625, 625, 625],
        "means": [[4.242640687119285 if i == n else 0.0 for i in range(4)] for n in range(4)],
        "std": 1.0,
        "input_dim": 4,
        "seed": 0,
    }}


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=default_dataset)
    strategy: str = "vabal"
    rounds: int = 5
    budget: int = 100
    initial_size: int = None  # defaults to budget
    lam: float = 0.005
    w_variant: str = "square"
    dims_per_class: int = 10
    num_mc: int = 100
    disable_prior: bool = False
    disable_confusion: bool = False
    confusion_off: str = "margin"
    vae_pool: str = "current"
    seeds: list = field(default_factory=lambda: [0])
    classifier: dict = field(default_factory=dict)
    vae: dict = field(default_factory=dict)
    allocator: dict = field(default_factory=dict)
    mc_passes: int = 100
    dump_scores: bool = False
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in strategies.STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; expected one of {strategies.STRATEGIES}")
        if self.rounds < 1:
            raise ContractError("rounds must be >= 1")
        if self.budget < 1:
            raise ContractError("budget must be >= 1")
        if self.initial_size is not None and self.initial_size < 1:
            raise ContractError("initial_size must be >= 1")
        if self.lam < 0:
            raise ContractError("lambda must be >= 0")
        if not self.seeds:
            raise ContractError("seeds must be non-empty")
        if any(int(s) != s or s < 0 for s in self.seeds):
            raise ContractError("seeds must be non-negative integers")
        if self.num_mc < 1 or self.dims_per_class < 1 or self.mc_passes < 1:
            raise ContractError("num_mc, dims_per_class and mc_passes must be >= 1")
        if self.vae_pool not in ("current", "initial"):
            raise ContractError("vae_pool must be 'current' or 'initial'")
        if self.confusion_off not in ("margin", "literal"):
            raise ContractError("confusion_off must be 'margin' or 'literal'")
        _reject_unknown(self.classifier, _CLASSIFIER_KEYS, "classifier")
        _reject_unknown(self.vae, _VAE_KEYS, "vae")
        _reject_unknown(self.allocator, {"lam", "lam_p", "max_iters", "tol"}, "allocator")
        if self.vae.get("kl_mask", "full") not in KL_MASK_MODES:
            raise ContractError(f"vae.kl_mask must be one of {KL_MASK_MODES}")
        if self.vae.get("loss_scale", "per-dim") not in LOSS_SCALES:
            raise ContractError(f"vae.loss_scale must be one of {LOSS_SCALES}")

    @property
    def label(self):
        """Strategy name plus any active ablation switch."""
        parts = [self.strategy]
        if self.disable_prior:
            parts.append("no-prior")
        if self.disable_confusion:
            parts.append("no-confusion")
        return "+".join(parts)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, {f.name for f in fields(cls)}, "config")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def classifier_config(self):
        overrides = dict(self.classifier)
        if self.strategy == "mc_dropout":
            overrides.setdefault("dropout", 0.25)
        if "hidden" in overrides:
            overrides["hidden"] = tuple(overrides["hidden"])
        return ClassifierConfig(**overrides)

    def vae_train_config(self):
        return VaeTrainConfig(**{k: v for k, v in self.vae.items() if k in {"epochs", "lr", "batch_size"}})


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ContractError(f"{where} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ContractError(f"unknown {where} keys: {sorted(unknown)}")


@dataclass
class RoundRecord:
    round: int
    labelled: int
    accuracy: float
    class_counts: list
    rare_ratio: float
    mean_sel_score: float
    seed: int
    strategy: str
    wall_ms: float = 0.0
    selected: list = field(default_factory=list)

    def csv_row(self):
        return [str(self.round), str(self.labelled), _fmt(self.accuracy), _fmt(self.rare_ratio),
                _fmt(self.mean_sel_score), str(self.seed), self.strategy] + [str(c) for c in self.class_counts]


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else format(float(v), ".12g")


def csv_header(num_classes):
    return CSV_HEAD + [f"count_c{n}" for n in range(num_classes)]


def rare_classes(train_counts):
    """Classes with fewer than half the training samples of the largest class."""
    counts = np.asarray(train_counts, dtype=np.float64)
    return np.flatnonzero(counts < RARE_THRESHOLD * counts.max())


def rare_ratio(class_counts, rare):
    total = int(np.sum(class_counts))
    if total == 0 or len(rare) == 0:
        return 0.0
    return float(np.sum(np.asarray(class_counts)[rare]) / total)


# ---------------------------------------------------------------------------
# one run
# ---------------------------------------------------------------------------


class _RunWriter:
    """Per-round CSV with a flush after every row, plus a JSON sidecar."""

    def __init__(self, out_dir, stem, num_classes, meta):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.out_dir / f"{stem}.csv"
        self.meta_path = self.out_dir / f"{stem}.json"
        self.meta = meta
        self.meta.update(status="running", warnings=[], wall_ms=[], selections=[])
        self._fh = open(self.csv_path, "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(csv_header(num_classes))
        self._fh.flush()
        self._write_meta()

    def _write_meta(self):
        self.meta_path.write_text(json.dumps(self.meta, indent=1, sort_keys=True))

    def add(self, rec: RoundRecord):
        self._csv.writerow(rec.csv_row())
        self._fh.flush()
        self.meta["wall_ms"].append(rec.wall_ms)
        self.meta["selections"].append(rec.selected)
        self._write_meta()

    def warn(self, message):
        log.warning(message)
        self.meta["warnings"].append(message)
        self._write_meta()

    def close(self, status):
        self._fh.close()
        self.meta["status"] = status
        self._write_meta()


def _fit_classifier(config, dataset, pool, streams, round_):
    model = MlpClassifier(dataset.input_dim, dataset.num_classes, config.classifier_config(),
                          streams("classifier-init", round_))
    train_classifier(model, pool, dataset, rng=streams("classifier-shuffle", round_))
    return model


def _fit_round_classifier(config, dataset, pool, streams, round_):
    try:
        return _fit_classifier(config, dataset, pool, streams, round_)
    except DegeneratePoolError as exc:
        raise DegeneratePoolError(f"round {round_}: {exc}") from exc


def _fit_vae(config, dataset, classifier, vae_ids, streams, round_):
    init = streams("vae-init", round_)
    pre = FeaturePreprocessor(classifier.tap_widths, init)
    vae = RegularizedVae(pre.output_dim, dataset.num_classes, init,
                         dims_per_class=config.dims_per_class,
                         hidden=config.vae.get("hidden", 128), lam=config.lam, variant=config.w_variant,
                         kl_mask=config.vae.get("kl_mask", "full"),
                         loss_scale=config.vae.get("loss_scale", "per-dim"))
    train_vae(vae, pre, classifier, dataset.features[vae_ids], rng=streams("vae-shuffle", round_),
              config=config.vae_train_config())
    return vae, pre


def _select(config, dataset, pool, classifier, k, streams, round_, vae_ids, writer, stem):
    """Choose ``k`` ids from the unlabelled pool for the configured strategy."""
    name = config.strategy
    if name == "random":
        return strategies.select_random(pool, k, streams("select", round_), round_)
    if name == "max_entropy":
        return strategies.select_max_entropy(classifier, pool, dataset, k, round_)
    if name == "mc_dropout":
        return strategies.select_mc_dropout(classifier, pool, dataset, k, config.mc_passes,
                                            streams("select", round_), round_)

    vae, pre = _fit_vae(config, dataset, classifier, vae_ids, streams, round_)
    scoring = ScoringConfig(num_mc=config.num_mc, disable_prior=config.disable_prior,
                            disable_confusion=config.disable_confusion, confusion_off=config.confusion_off)
    scored = score_pool(vae, classifier, pre, pool, dataset, scoring, streams("mc", round_))
    if config.dump_scores:
        scored.write_csv(writer.out_dir / f"{stem}_round{round_}_scores.csv")
    if name == "vabal":
        return strategies.select_vabal((scored.ids, scored.scores), k, round_)

    # vabal_balanced
    unl = scored.ids
    predicted = predict(classifier, dataset.features[unl]).argmax(axis=1)
    current = np.bincount(dataset.labels[list(pool.labelled)], minlength=dataset.num_classes)
    available = np.bincount(predicted, minlength=dataset.num_classes)
    P = allocator.confusion_matrix_full(scored.table.joint_counts)
    problem = allocator.AllocationProblem(current, available, k, P,
                                          lam=config.allocator.get("lam", allocator.LAMBDA_ALLOC),
                                          lam_p=config.allocator.get("lam_p", allocator.LAMBDA_P))
    alloc = allocator.allocate(problem, max_iters=config.allocator.get("max_iters", allocator.MAX_ITERS),
                               tol=config.allocator.get("tol", allocator.TOL))
    alloc.dump(writer.out_dir / f"{stem}_round{round_}_alloc.json")
    return strategies.select_balanced(unl, scored.scores, predicted, alloc.final, round_)


def run_seed(config: ExperimentConfig, seed, dataset=None, out_dir=None):
    """One seeded run; returns its list of RoundRecord."""
    dataset = build_dataset(config.dataset) if dataset is None else dataset
    out_dir = Path(config.output_dir if out_dir is None else out_dir)
    streams = Streams(seed)
    stem = f"{config.label}_seed{seed}"
    writer = _RunWriter(out_dir, stem, dataset.num_classes,
                        {"config": config.to_dict(), "seed": int(seed), "label": config.label})
    rare = rare_classes(dataset.train_counts())
    init_size = config.initial_size or config.budget
    pool = initial_pool(dataset, init_size, streams("initial-pool"))
    initial_unlabelled = np.asarray(pool.unlabelled, dtype=np.int64)
    records = []
    status = "failed"
    try:
        classifier = _fit_round_classifier(config, dataset, pool, streams, 0)
        for r in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            if not pool.unlabelled:
                writer.warn(f"round {r}: unlabelled pool exhausted after round {r - 1}; stopping early")
                break
            k = min(config.budget, len(pool.unlabelled))
            if k < config.budget:
                writer.warn(f"round {r}: only {k} unlabelled samples left for a budget of {config.budget}")
            vae_ids = initial_unlabelled if config.vae_pool == "initial" else np.asarray(pool.unlabelled)
            query = _select(config, dataset, pool, classifier, k, streams, r, vae_ids, writer, stem)
            pool = transfer(pool, query.ids)
            pool.check(dataset.train_ids)
            classifier = _fit_round_classifier(config, dataset, pool, streams, r)
            counts = np.bincount(dataset.labels[list(pool.labelled)], minlength=dataset.num_classes)
            rec = RoundRecord(r, len(pool.labelled), accuracy(classifier, dataset), counts.tolist(),
                              rare_ratio(counts, rare), query.mean_score, int(seed), config.label,
                              wall_ms=1000.0 * (time.perf_counter() - t0),
                              selected=[int(i) for i in query.ids])
            writer.add(rec)
            records.append(rec)
        status = "complete"
    finally:
        writer.close(status)
    return records


def run_experiment(config: ExperimentConfig):
    """Run every seed; returns ``{seed: [RoundRecord, ...]}``."""
    dataset = build_dataset(config.dataset)
    return {int(s): run_seed(config, int(s), dataset) for s in config.seeds}


def sweep(config: ExperimentConfig, axis, values):
    """Run one cell per value of ``axis``; every cell reuses the same dataset and seeds."""
    if axis not in SWEEP_AXES:
        raise ContractError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    attr = SWEEP_AXES[axis]
    dataset = build_dataset(config.dataset)
    results = {}
    for value in values:
        cell = ExperimentConfig.from_dict({**config.to_dict(), attr: value,
                                           "output_dir": str(Path(config.output_dir) / f"{axis}={value}")})
        results[value] = {int(s): run_seed(cell, int(s), dataset) for s in cell.seeds}
    return results


def parse_sweep_values(axis, text):
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis == "lambda":
        return [float(v) for v in items]
    if axis == "budget":
        return [int(v) for v in items]
    return items


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_COMPAT_KEYS = ("dataset", "rounds", "budget", "initial_size")


def _read_runs(out_dir):
    runs = []
    for meta_path in sorted(Path(out_dir).glob("*.json")):
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError:
            continue
        if not isinstance(meta, dict) or "config" not in meta or "label" not in meta:
            continue
        csv_path = meta_path.with_suffix(".csv")
        if not csv_path.exists():
            continue
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        runs.append((meta_path.name, meta, rows))
    return runs


def _check_compatible(runs):
    ref_name, ref_meta, _ = runs[0]
    ref = {k: ref_meta["config"].get(k) for k in _COMPAT_KEYS}
    offenders = [name for name, meta, _ in runs[1:]
                 if {k: meta["config"].get(k) for k in _COMPAT_KEYS} != ref]
    by_label = {}
    for name, meta, _ in runs:
        cfg = {k: v for k, v in meta["config"].items() if k not in ("seeds", "output_dir")}
        first = by_label.setdefault(meta["label"], (name, cfg))
        if first[1] != cfg:
            offenders.append(name)
    if offenders:
        raise ContractError(f"incompatible runs in one directory (reference {ref_name}): {sorted(set(offenders))}")


def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def report(out_dir):
    """Aggregate per-seed CSVs into ``summary.csv`` and ``summary.json``.

    Standard deviations are population (ddof=0) across seeds.
    """
    out_dir = Path(out_dir)
    runs = _read_runs(out_dir)
    if not runs:
        raise ContractError(f"no completed runs in {out_dir}")
    _check_compatible(runs)
    groups = {}
    for _, meta, rows in runs:
        for row in rows:
            groups.setdefault(meta["label"], {}).setdefault(int(row["round"]), []).append(row)
    summary = {}
    table = []
    for label in sorted(groups):
        per_round = []
        for r in sorted(groups[label]):
            rows = groups[label][r]
            acc_m, acc_s = _stats([float(x["accuracy"]) for x in rows])
            rr_m, rr_s = _stats([float(x["rare_ratio"]) for x in rows])
            lab_m, _ = _stats([float(x["labelled"]) for x in rows])
            per_round.append({"round": r, "labelled": lab_m, "n_seeds": len(rows),
                              "accuracy_mean": acc_m, "accuracy_std": acc_s,
                              "rare_ratio_mean": rr_m, "rare_ratio_std": rr_s})
        avg = float(np.mean([p["accuracy_mean"] for p in per_round]))
        final = per_round[-1]["accuracy_mean"]
        summary[label] = {"avg": avg, "final": final, "rounds": per_round}
        for p in per_round:
            table.append([label, p["round"], p["labelled"], p["n_seeds"], p["accuracy_mean"], p["accuracy_std"],
                          p["rare_ratio_mean"], p["rare_ratio_std"], avg, final])
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "round", "labelled", "n_seeds", "accuracy_mean", "accuracy_std",
                    "rare_ratio_mean", "rare_ratio_std", "avg", "final"])
        for row in table:
            w.writerow([row[0], row[1], _fmt(row[2]), row[3]] + [_fmt(v) for v in row[4:]])
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary
