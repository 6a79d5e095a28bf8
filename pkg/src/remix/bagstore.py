"""Bag data model, on-disk formats and the synthetic MIL dataset generator.

A bag is an ``N x d`` float32 feature matrix with one integer class label.
Bags are stored one per file in the little-endian RMX1 format::

    bytes 0-3    magic b"RMX1"
    bytes 4-7    u32 N
    bytes 8-11   u32 d
    bytes 12-15  u32 label
    bytes 16-    N*d f32, row-major

The bag identifier is not stored in the file; it comes from the manifest
(or, when reading a file directly, from the file stem).
"""
from __future__ import annotations

import csv
import math
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"RMX1"
_HEADER = struct.Struct("<4sIII")
MANIFEST_FIELDS = ["bag_id", "label", "path", "n_instances", "dim"]
RECORD_FIELDS = ["bag_id", "instance_index", "component_id", "is_evidence"]


class FormatError(ValueError):
    """A bag, dictionary or checkpoint file does not match its format."""


class ManifestError(ValueError):
    pass


@dataclass
class FeatureBag:
    bag_id: str
    label: int
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n, d = self.features.shape
        if n < 1 or d < 1:
            raise ValueError(f"bag {self.bag_id!r} must have N >= 1 and d >= 1")
        if self.label < 0:
            raise ValueError("label must be non-negative")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class MemoryTracker:
    """Counts bag feature payload bytes that are currently resident.

    Loaders call :meth:`acquire` when a payload is materialised and
    :meth:`release` when the caller drops it; ``peak`` is the maximum of the
    running total.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0

    def acquire(self, nbytes: int) -> None:
        self.current += nbytes
        self.peak = max(self.peak, self.current)

    def release(self, nbytes: int) -> None:
        self.current -= nbytes
        if self.current < 0:
            raise RuntimeError("released more bytes than were acquired")

    def reset(self) -> None:
        self.current = 0
        self.peak = 0


# ---------------------------------------------------------------------------
# RMX1 bag files
# ---------------------------------------------------------------------------

def write_bag(bag: FeatureBag, path) -> None:
    features = np.asarray(bag.features)
    if not np.all(np.isfinite(features)):
        raise ValueError(f"non-finite feature in bag {bag.bag_id!r}")
    n, d = features.shape
    payload = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, d, bag.label))
        fh.write(payload.tobytes())


def read_bag(path, bag_id: str | None = None, tracker: MemoryTracker | None = None) -> FeatureBag:
    """Read an RMX1 file. ``bag_id`` defaults to the file stem."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, n, d, label = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty bag (N={n}, d={d})")
    expected = _HEADER.size + 4 * n * d
    if len(data) < expected:
        raise FormatError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise FormatError(f"{path}: {len(data) - expected} bytes beyond declared N*d payload")
    features = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(n, d).astype(np.float32)
    if tracker is not None:
        tracker.acquire(features.nbytes)
    return FeatureBag(bag_id if bag_id is not None else path.stem, int(label), features)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    bag_id: str
    label: int
    path: str
    n_instances: int
    dim: int


@dataclass
class BagManifest:
    """Bag listing for one split.

    ``meta`` holds free-form ``key=value`` pairs written as ``#`` comment
    lines above the CSV header (class names, split, representation).
    """

    entries: list[ManifestEntry]
    class_count: int
    split: str = "train"
    root: Path = field(default_factory=Path)
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = Counter(e.bag_id for e in self.entries)
        dupes = sorted(i for i, n in seen.items() if n > 1)
        if dupes:
            raise ManifestError(f"duplicate bag_id {dupes[0]!r}")
        dims = {e.dim for e in self.entries}
        if len(dims) > 1:
            raise ManifestError(f"inconsistent dimension: {sorted(dims)}")
        if self.class_count < 2:
            raise ManifestError("class_count must be >= 2")
        for e in self.entries:
            if not 0 <= e.label < self.class_count:
                raise ManifestError(f"bag {e.bag_id!r}: label {e.label} outside 0..{self.class_count - 1}")

    def __len__(self):
        return len(self.entries)

    @property
    def dim(self) -> int:
        if not self.entries:
            raise ManifestError("no bags")
        return self.entries[0].dim

    @property
    def representation(self) -> str:
        rep = self.meta.get("representation")
        if rep:
            return rep
        if self.entries and self.entries[0].path.endswith(".rmxr"):
            return "reduced"
        return "full"

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def labels(self) -> dict[str, int]:
        return {e.bag_id: e.label for e in self.entries}


def read_manifest(path) -> BagManifest:
    path = Path(path)
    meta: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    header_seen = False
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
                continue
            fields = next(csv.reader([line]))
            if not header_seen:
                if fields != MANIFEST_FIELDS:
                    raise ManifestError(f"{path}:{lineno}: expected header {','.join(MANIFEST_FIELDS)}")
                header_seen = True
                continue
            if len(fields) != len(MANIFEST_FIELDS):
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(fields)}")
            try:
                entry = ManifestEntry(fields[0], int(fields[1]), fields[2], int(fields[3]), int(fields[4]))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            entries.append(entry)
    if not header_seen:
        raise ManifestError(f"{path}: missing header line")
    if "class_count" in meta:
        class_count = int(meta.pop("class_count"))
    else:
        class_count = max([e.label + 1 for e in entries] + [2])
    split = meta.pop("split", "train")
    return BagManifest(entries, class_count, split, path.parent, meta)


def write_manifest(manifest: BagManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# class_count={manifest.class_count}\n")
        fh.write(f"# split={manifest.split}\n")
        for key in sorted(manifest.meta):
            fh.write(f"# {key}={manifest.meta[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in manifest.entries:
            writer.writerow([e.bag_id, e.label, e.path, e.n_instances, e.dim])


@dataclass
class DatasetStats:
    bag_count: int
    mean_instances: float
    min_instances: int
    max_instances: int
    total_instances: int
    dim: int
    class_histogram: list[int]

    def __str__(self):
        return (f"bags={self.bag_count} N_mean={self.mean_instances:.2f} "
                f"N_min={self.min_instances} N_max={self.max_instances} "
                f"d={self.dim} classes={self.class_histogram}")


def dataset_stats(manifest: BagManifest) -> DatasetStats:
    """Counts from the manifest, after checking every bag file exists."""
    if not manifest.entries:
        raise ManifestError("no bags")
    for e in manifest.entries:
        if not manifest.resolve(e).is_file():
            raise FileNotFoundError(f"missing bag file for {e.bag_id!r}: {manifest.resolve(e)}")
    counts = [e.n_instances for e in manifest.entries]
    hist = [0] * manifest.class_count
    for e in manifest.entries:
        hist[e.label] += 1
    total = sum(counts)
    # mean rounded from the exact rational
    mean = round(total / len(counts), 2)
    return DatasetStats(len(counts), mean, min(counts), max(counts), total, manifest.dim, hist)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Parameters of the synthetic Gaussian-mixture MIL dataset.

    Every bag of class ``c`` holds ``ceil(evidence_fraction * N)`` instances
    drawn from the evidence components owned by class ``c``; the remaining
    instances come from background components shared by all classes.
    Component noise is clipped at three standard deviations per coordinate.
    """

    classes: int = 2
    dim: int = 32
    bags_per_class: int = 100
    test_bags_per_class: int | None = None
    n_min: int = 200
    n_max: int = 800
    background_components: int = 4
    evidence_components: int = 2
    component_std: float = 0.2
    evidence_fraction: float = 0.2
    mean_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.bags_per_class < 1:
            raise ValueError("bags_per_class must be >= 1")
        if self.test_bags_per_class is not None and self.test_bags_per_class < 0:
            raise ValueError("test_bags_per_class must be >= 0")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if not 0 < self.evidence_fraction <= 1:
            raise ValueError("evidence_fraction must lie in (0, 1]")
        if self.evidence_fraction * self.n_min < 1:
            raise ValueError("evidence_fraction * n_min must be >= 1")
        if self.background_components < 0 or self.evidence_components < 1:
            raise ValueError("need >= 0 background and >= 1 evidence components")
        if self.evidence_fraction < 1 and self.background_components == 0:
            raise ValueError("background components required when evidence_fraction < 1")
        if self.component_std <= 0:
            raise ValueError("component_std must be positive")

    @property
    def n_test_per_class(self) -> int:
        return self.bags_per_class if self.test_bags_per_class is None else self.test_bags_per_class

    def component_owner(self) -> np.ndarray:
        """Owner class of every component id; -1 marks background."""
        bg = [-1] * self.background_components
        ev = [c for c in range(self.classes) for _ in range(self.evidence_components)]
        return np.array(bg + ev, dtype=np.int64)


def evidence_count(cfg: SynthConfig, n: int) -> int:
    # guard against float noise such as 0.2 * 15 = 3.0000000000000004
    return min(n, math.ceil(round(cfg.evidence_fraction * n, 9)))


def _component_means(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    owner = cfg.component_owner()
    means = rng.standard_normal((len(owner), cfg.dim)) * cfg.mean_scale
    # keep every pair far apart relative to the per-coordinate noise
    min_gap = 12.0 * cfg.component_std
    for _ in range(1000):
        diff = means[:, None, :] - means[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        if dist[i, j] >= min_gap:
            return means
        means[j] = rng.standard_normal(cfg.dim) * max(cfg.mean_scale, min_gap)
    raise RuntimeError("could not place separated component means; raise mean_scale")


def _draw_bag(cfg, means, owner, label, rng):
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    n_ev = evidence_count(cfg, n)
    ev_ids = np.flatnonzero(owner == label)
    bg_ids = np.flatnonzero(owner == -1)
    comp = np.empty(n, dtype=np.int64)
    comp[:n_ev] = rng.choice(ev_ids, size=n_ev)
    if n > n_ev:
        comp[n_ev:] = rng.choice(bg_ids, size=n - n_ev)
    comp = comp[rng.permutation(n)]
    noise = np.clip(rng.standard_normal((n, cfg.dim)), -3.0, 3.0) * cfg.component_std
    feats = (means[comp] + noise).astype(np.float32)
    return feats, comp


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> tuple[BagManifest, BagManifest]:
    """Write a train/test pair of synthetic datasets under ``out_dir``.

    Layout: ``train.csv``, ``test.csv``, ``train/*.rmx1``, ``test/*.rmx1``,
    ``generation.csv`` (source component of every instance) and
    ``components.npz`` (component means and owners).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    owner = cfg.component_owner()
    means = _component_means(cfg, rng)
    np.savez(out / "components.npz", means=means, owner=owner)

    manifests = []
    with open(out / "generation.csv", "w", newline="") as rec_fh:
        rec = csv.writer(rec_fh, lineterminator="\n")
        rec.writerow(RECORD_FIELDS)
        for split, per_class, prefix in (("train", cfg.bags_per_class, "tr"),
                                          ("test", cfg.n_test_per_class, "te")):
            (out / split).mkdir(exist_ok=True)
            labels = [c for c in range(cfg.classes) for _ in range(per_class)]
            entries = []
            for idx, label in enumerate(labels):
                bag_id = f"{prefix}{idx:05d}"
                feats, comp = _draw_bag(cfg, means, owner, label, rng)
                rel = f"{split}/{bag_id}.rmx1"
                write_bag(FeatureBag(bag_id, label, feats), out / rel)
                entries.append(ManifestEntry(bag_id, label, rel, feats.shape[0], cfg.dim))
                for k, cid in enumerate(comp):
                    rec.writerow([bag_id, k, int(cid), int(owner[cid] >= 0)])
            manifest = BagManifest(entries, cfg.classes, split, out,
                                   {"representation": "full",
                                    "classes": ",".join(f"class{c}" for c in range(cfg.classes))})
            write_manifest(manifest, out / f"{split}.csv")
            manifests.append(manifest)
    return manifests[0], manifests[1]


def read_generation_record(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Map bag_id -> (component ids, evidence flags) in instance order."""
    rows: dict[str, list[tuple[int, int, int]]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["bag_id"], []).append(
                (int(r["instance_index"]), int(r["component_id"]), int(r["is_evidence"])))
    out = {}
    for bag_id, items in rows.items():
        items.sort()
        out[bag_id] = (np.array([c for _, c, _ in items]), np.array([e for _, _, e in items], dtype=bool))
    return out


def nearest_component_predict(features: np.ndarray, means: np.ndarray, owner: np.ndarray) -> int:
    """Separability oracle: label a bag by nearest-mean voting.

    Each instance goes to its nearest component mean; the bag takes the class
    whose evidence components collect the most instances (background votes
    are ignored, ties go to the lower class). Returns -1 when no instance
    lands on an evidence component.
    """
    x = np.asarray(features, dtype=np.float64)
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    hits = owner[np.argmin(d2, axis=1)]
    hits = hits[hits >= 0]
    if hits.size == 0:
        return -1
    return int(np.argmax(np.bincount(hits)))


def iter_bags(manifest: BagManifest, tracker: MemoryTracker | None = None):
    for e in manifest.entries:
        yield read_bag(manifest.resolve(e), bag_id=e.bag_id, tracker=tracker)


def default_threads() -> int:
    env = os.environ.get("REMIX_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
