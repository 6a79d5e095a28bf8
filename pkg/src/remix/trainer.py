"""Training loop, evaluation and class-averaged metrics."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .bagstore import BagManifest, MemoryTracker, read_bag
from .milnet import (
    LrSchedule,
    MilModel,
    OptimizerState,
    adam_step,
    backward,
    cosine_lr,
    init_params,
)
from .mixer import AugmentConfig, KeyIndex, MixError, apply_augmentation, sample_key
from .reducer import read_dictionary


@dataclass
class TrainConfig:
    model: str = "abmil"
    epochs: int = 50
    lr: float = 2e-4
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    runs: int = 10
    hidden: int = 128

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    seconds: float


@dataclass
class TrainState:
    model: MilModel
    optimizer: OptimizerState
    logs: list[EpochLog]
    events: list = field(default_factory=list)


class BagSource:
    """Loads bag payloads for a manifest, full (RMX1) or reduced (RMXR).

    With ``cache=True`` every bag is loaded once and kept; otherwise each
    ``get`` reads from disk and the caller must ``drop`` the payload when
    done so the tracker sees it leave.
    """

    def __init__(self, manifest: BagManifest, tracker: MemoryTracker | None = None, cache: bool = True,
                 covariances: bool = True):
        self.manifest = manifest
        self.covariances = covariances
        self.reduced = manifest.representation == "reduced"
        self.tracker = tracker
        self.cache = cache
        self._entries = {e.bag_id: e for e in manifest.entries}
        self._cached: dict[str, object] = {}

    def __getitem__(self, bag_id: str):
        if bag_id in self._cached:
            return self._cached[bag_id]
        entry = self._entries[bag_id]
        path = self.manifest.resolve(entry)
        if self.reduced:
            item = read_dictionary(path, bag_id=bag_id, tracker=self.tracker, covariances=self.covariances)
        else:
            item = read_bag(path, bag_id=bag_id, tracker=self.tracker)
        if item.label != entry.label:
            raise ValueError(f"bag {bag_id!r}: file label {item.label} differs from manifest label {entry.label}")
        if self.cache:
            self._cached[bag_id] = item
        return item

    def drop(self, item) -> None:
        if self.cache or self.tracker is None:
            return
        self.tracker.release(self.rows(item).nbytes)

    def rows(self, item) -> np.ndarray:
        return item.centroids if self.reduced else item.features

    def covariance_mode(self) -> str:
        if not self.reduced:
            return "none"
        mode = self.manifest.meta.get("covariance")
        if mode is None:
            entry = self.manifest.entries[0]
            mode = read_dictionary(self.manifest.resolve(entry), bag_id=entry.bag_id).cov_mode
        return mode


def check_augmentation(source: BagSource, aug: AugmentConfig) -> None:
    if aug.kind == "none":
        return
    if not source.reduced:
        raise MixError("augmentation requires reduced bags")
    if aug.kind in ("covary", "joint") and source.covariance_mode() == "none":
        raise MixError("covary requires covariance")


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def train(manifest: BagManifest, cfg: TrainConfig, tracker: MemoryTracker | None = None,
          cache: bool = True, keep_events: bool = False) -> TrainState:
    """Train one model; every random choice derives from ``cfg.seed``.

    Per epoch the bag order is a seeded permutation; each bag is mixed
    (reduced mode only), then one Adam step is taken at the cosine rate of
    the global step.
    """
    if not manifest.entries:
        raise ValueError("no bags")
    source = BagSource(manifest, tracker, cache, covariances=cfg.augment.kind in ("covary", "joint"))
    check_augmentation(source, cfg.augment)
    key_index = KeyIndex.from_labels(manifest.labels())
    model = init_params(cfg.model, manifest.dim, manifest.class_count, cfg.hidden, cfg.seed)
    opt = OptimizerState.for_params(model.params)
    n = len(manifest.entries)
    schedule = LrSchedule(cfg.lr, cfg.epochs * n)
    mix_rng = np.random.default_rng([cfg.seed, 0xA116])
    ids = [e.bag_id for e in manifest.entries]
    logs, events = [], []
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        epoch_lr = cosine_lr(step, schedule)
        for i in _epoch_permutation(cfg.seed, epoch, n):
            query = source[ids[i]]
            if cfg.augment.kind != "none":
                key_id = sample_key(query.bag_id, query.label, key_index, mix_rng)
                key = source[key_id]
                mixed = apply_augmentation(query, key, cfg.augment, mix_rng)
                source.drop(key)
                if keep_events:
                    events.extend(mixed.events)
                rows = mixed.instances
            else:
                rows = source.rows(query)
            lr = cosine_lr(step, schedule)
            loss, grads, _ = backward(model, rows, query.label)
            adam_step(model.params, grads, opt, lr)
            source.drop(query)
            losses.append(loss)
            step += 1
        logs.append(EpochLog(epoch, float(np.mean(losses)), epoch_lr, max(time.perf_counter() - t0, 1e-9)))
    return TrainState(model, opt, logs, events)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    precision: float
    recall: float
    accuracy: float
    per_class: list[dict]
    confusion: list[list[float]]
    std: dict | None = None
    runs: list["EvalReport"] = field(default_factory=list, repr=False)

    @property
    def average(self) -> float:
        return (self.precision + self.recall + self.accuracy) / 3.0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "accuracy": self.accuracy,
            "average": self.average,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "std": self.std,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _per_class(confusion: np.ndarray):
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    col = cm.sum(0)
    row = cm.sum(1)
    precision = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    return precision, recall


def macro_metrics(confusion) -> tuple[float, float, float]:
    """Unweighted class means of precision and recall, plus accuracy.

    Rows are true classes, columns predictions. A class whose denominator
    is zero contributes 0 to the mean.
    """
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion matrix must be non-negative")
    total = cm.sum()
    if total == 0:
        raise ValueError("all-zero confusion matrix")
    precision, recall = _per_class(cm)
    return float(precision.mean()), float(recall.mean()), float(np.trace(cm) / total)


def report_from_confusion(confusion) -> EvalReport:
    cm = np.asarray(confusion)
    p, r, a = macro_metrics(cm)
    prec, rec = _per_class(cm)
    per_class = [{"class": c, "precision": float(prec[c]), "recall": float(rec[c]),
                  "support": float(cm[c].sum())} for c in range(cm.shape[0])]
    return EvalReport(p, r, a, per_class, cm.tolist())


def predict(model: MilModel, source: BagSource, bag_id: str) -> int:
    item = source[bag_id]
    pred = int(np.argmax(model.logits(source.rows(item))))
    source.drop(item)
    return pred


def evaluate(model: MilModel, manifest: BagManifest, tracker: MemoryTracker | None = None) -> EvalReport:
    """Confusion matrix and metrics on ``manifest``; no augmentation."""
    if model.dim != manifest.dim:
        raise ValueError(f"dim mismatch {model.dim} vs {manifest.dim}")
    if model.n_classes != manifest.class_count:
        raise ValueError(f"class count mismatch {model.n_classes} vs {manifest.class_count}")
    source = BagSource(manifest, tracker, cache=False, covariances=False)
    cm = np.zeros((model.n_classes, model.n_classes), dtype=np.int64)
    for e in manifest.entries:
        cm[e.label, predict(model, source, e.bag_id)] += 1
    return report_from_confusion(cm)


def aggregate_reports(reports: list[EvalReport]) -> EvalReport:
    """Arithmetic mean over runs with population standard deviations."""
    if not reports:
        raise ValueError("no reports")
    keys = ("precision", "recall", "accuracy", "average")
    values = {k: np.array([getattr(r, k) for r in reports]) for k in keys}
    confusion = np.mean([np.asarray(r.confusion, dtype=np.float64) for r in reports], axis=0)
    per_class = []
    for c in range(confusion.shape[0]):
        per_class.append({
            "class": c,
            "precision": float(np.mean([r.per_class[c]["precision"] for r in reports])),
            "recall": float(np.mean([r.per_class[c]["recall"] for r in reports])),
            "support": reports[0].per_class[c]["support"],
        })
    agg = EvalReport(float(values["precision"].mean()), float(values["recall"].mean()),
                     float(values["accuracy"].mean()), per_class, confusion.tolist(),
                     {k: float(values[k].std()) for k in keys}, list(reports))
    return agg


def run_repeated(train_manifest: BagManifest, test_manifest: BagManifest, cfg: TrainConfig,
                 n: int | None = None, on_run=None) -> EvalReport:
    """Train and evaluate with seeds ``cfg.seed .. cfg.seed + n - 1``.

    ``on_run(i, state, report)`` is called after every run.
    """
    n = cfg.runs if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    reports = []
    for i in range(n):
        run_cfg = TrainConfig(cfg.model, cfg.epochs, cfg.lr, cfg.augment, cfg.seed + i, 1, cfg.hidden)
        state = train(train_manifest, run_cfg)
        report = evaluate(state.model, test_manifest)
        if on_run is not None:
            on_run(i, state, report)
        reports.append(report)
    return aggregate_reports(reports)


def write_epoch_log(logs: list[EpochLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr", "seconds"])
        for log in logs:
            w.writerow([log.epoch, repr(log.loss), repr(log.lr), f"{log.seconds:.6f}"])
