"""Paired training-budget benchmark: full bags versus reduced bags.

Both representations are trained with identical bag ids, seeds and epoch
counts. Bags are streamed from disk one at a time; the first epoch is a
warm-up and is excluded from the timing. Memory is the peak of
concurrently resident bag feature payload bytes as counted by
:class:`~remix.bagstore.MemoryTracker`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .bagstore import BagManifest, MemoryTracker
from .mixer import AugmentConfig
from .trainer import TrainConfig, train


@dataclass
class BenchRun:
    mode: str
    seconds_per_epoch: float
    peak_bytes: int
    epochs_timed: int


@dataclass
class BenchReport:
    full: BenchRun
    reduced: BenchRun

    @property
    def time_ratio(self) -> float:
        return self.full.seconds_per_epoch / self.reduced.seconds_per_epoch

    @property
    def memory_ratio(self) -> float:
        return self.full.peak_bytes / self.reduced.peak_bytes

    def to_dict(self) -> dict:
        return {
            "full": asdict(self.full),
            "reduced": asdict(self.reduced),
            "time_ratio": self.time_ratio,
            "memory_ratio": self.memory_ratio,
        }


def bench_mode(manifest: BagManifest, cfg: TrainConfig, mode: str) -> BenchRun:
    if cfg.epochs < 2:
        raise ValueError("bench needs at least 2 epochs (one is warm-up)")
    tracker = MemoryTracker()
    state = train(manifest, cfg, tracker=tracker, cache=False)
    timed = [log.seconds for log in state.logs[1:]]
    return BenchRun(mode, float(np.mean(timed)), tracker.peak, len(timed))


def run_bench(full: BagManifest, reduced: BagManifest, model: str = "abmil", epochs: int = 3,
              seed: int = 0, lr: float = 2e-4, hidden: int = 128) -> BenchReport:
    if full.representation != "full":
        raise ValueError("full-bag manifest expected for the full representation")
    if reduced.representation != "reduced":
        raise ValueError("reduced manifest expected for the reduced representation")
    if [e.bag_id for e in full.entries] != [e.bag_id for e in reduced.entries]:
        raise ValueError("full and reduced manifests list different bags")
    cfg = TrainConfig(model=model, epochs=epochs, lr=lr, augment=AugmentConfig("none"),
                      seed=seed, runs=1, hidden=hidden)
    full_run = bench_mode(full, cfg, "full")
    reduced_run = bench_mode(reduced, cfg, "reduced")
    return BenchReport(full_run, reduced_run)
