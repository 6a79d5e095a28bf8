"""Per-bag K-Means reduction into prototype dictionaries.

Each bag is clustered on its own; the bag is then represented by its ``K'``
centroids (``K' = min(K, N)``), the member count of every cluster and,
optionally, the intra-cluster covariance about each centroid.

RMXR dictionary file (little-endian)::

    magic b"RMXR" | u32 K' | u32 d | u32 label | u8 cov mode (0 none, 1 diag, 2 full)
    u32 counts[K'] | f32 centroids[K' * d] | f32 covariances (diag: K'*d, full: K'*d*d)
"""
from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bagstore import (
    BagManifest,
    FeatureBag,
    FormatError,
    ManifestEntry,
    MemoryTracker,
    default_threads,
    read_bag,
    write_manifest,
)

MAGIC = b"RMXR"
_HEADER = struct.Struct("<4sIIIB")
COV_MODES = ("none", "diag", "full")


@dataclass
class ReduceConfig:
    k: int = 8
    cov_mode: str | None = None  # None -> "full" when d <= 256 else "diag"
    max_iter: int = 100
    tol: float = 1e-4
    restarts: int = 1
    seed: int = 0
    normalize: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.cov_mode is not None and self.cov_mode not in COV_MODES:
            raise ValueError(f"cov_mode must be one of {COV_MODES}")

    def resolved_cov_mode(self, dim: int) -> str:
        if self.cov_mode is not None:
            return self.cov_mode
        return "full" if dim <= 256 else "diag"


@dataclass
class ClusterResult:
    assignments: np.ndarray
    inertia: float
    iterations: int
    converged: bool
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class BagDictionary:
    bag_id: str
    label: int
    centroids: np.ndarray
    counts: np.ndarray
    cov_mode: str = "none"
    covariances: np.ndarray | None = None

    def __post_init__(self):
        if self.cov_mode not in COV_MODES:
            raise ValueError(f"unknown covariance mode {self.cov_mode!r}")
        k, d = self.centroids.shape
        if len(self.counts) != k:
            raise ValueError("one member count per centroid required")
        expected = {"none": None, "diag": (k, d), "full": (k, d, d)}[self.cov_mode]
        if expected is None:
            self.covariances = None
        elif self.covariances is None or self.covariances.shape != expected:
            raise ValueError(f"covariances must have shape {expected}")

    @property
    def n_prototypes(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # explicit differences, not the |x|^2 - 2xc + |c|^2 expansion: exact zeros
    # for coincident points and row values independent of the other rows
    out = np.empty((x.shape[0], c.shape[0]))
    for j in range(c.shape[0]):
        diff = x - c[j]
        np.einsum("ij,ij->i", diff, diff, out=out[:, j])
    return out


def assign(features, centroids) -> np.ndarray:
    """Nearest centroid by squared Euclidean distance, ties to the lowest index."""
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if x.ndim != 2 or c.ndim != 2 or x.shape[1] != c.shape[1]:
        raise ValueError(f"dimension mismatch: features {x.shape} vs centroids {c.shape}")
    return np.argmin(_sq_dists(x, c), axis=1)


def _kmeanspp(x, order, k, rng):
    """k-means++ seeding over candidates visited in ``order``.

    ``order`` sorts rows by (norm, index) so that a row permutation of the
    input draws the same sequence of points.
    """
    xs = x[order]
    chosen = [int(rng.integers(len(xs)))]
    closest = ((xs - xs[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            cdf = np.cumsum(closest)
            pick = int(np.searchsorted(cdf, rng.random() * total, side="right"))
            pick = min(pick, len(xs) - 1)
            while closest[pick] == 0:  # float edge at the cdf boundary
                pick -= 1
        else:
            # all remaining mass is on duplicates: take the first unused candidate
            rng.random()
            pick = next(i for i in range(len(xs)) if i not in chosen)
        chosen.append(pick)
        closest = np.minimum(closest, ((xs - xs[pick]) ** 2).sum(1))
    return xs[chosen].copy()


def _update(x, labels, centroids, order):
    """Mean step with empty-cluster repair.

    An empty cluster is reseeded at the point farthest from its current
    centroid among clusters that can spare a member; that point is moved into
    the empty cluster. Returns the new centroids and the (possibly edited)
    assignment.
    """
    k = centroids.shape[0]
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        d_own = ((x - centroids[labels]) ** 2).sum(1)
        for j in np.flatnonzero(counts == 0):
            spare = counts[labels] > 1
            cand = order[spare[order]]
            # stable argmax in candidate order keeps permutation robustness
            p = int(cand[np.argmax(d_own[cand])])
            counts[labels[p]] -= 1
            labels[p] = j
            counts[j] = 1
            d_own[p] = 0.0
    new = np.empty_like(centroids)
    for j in range(k):
        new[j] = x[labels == j].mean(0)
    return new, labels


def _inertia(x, labels, centroids) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _lloyd(x, init, order, max_iter, tol):
    c = init
    labels = assign(x, c)
    history = [_inertia(x, labels, c)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        c_new, labels_fixed = _update(x, labels, c, order)
        labels_new = assign(x, c_new)
        history.append(_inertia(x, labels_new, c_new))
        shift = np.linalg.norm(c_new - c) / max(np.linalg.norm(c), 1e-300)
        stable = np.array_equal(labels_new, labels_fixed)
        c, labels = c_new, labels_new
        if stable or shift < tol:
            converged = True
            break
    # return exact means of the final assignment
    c, labels = _update(x, labels, c, order)
    final = _inertia(x, labels, c)
    history.append(final)
    return c, ClusterResult(labels, final, it, converged, history)


def kmeans_fit(features, cfg: ReduceConfig, seed: int | None = None):
    """K-Means with k-means++ seeding and Lloyd iterations.

    Runs ``cfg.restarts`` independent seedings and keeps the lowest inertia.
    ``K`` is clamped to the number of rows. Returns ``(centroids, result)``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("features must be a non-empty N x d matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature")
    n = x.shape[0]
    k = min(cfg.k, n)
    norms = np.sqrt((x ** 2).sum(1))
    order = np.lexsort((np.arange(n), norms))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    best = None
    for _ in range(cfg.restarts):
        init = _kmeanspp(x, order, k, rng)
        c, res = _lloyd(x, init, order, cfg.max_iter, cfg.tol)
        if best is None or res.inertia < best[1].inertia:
            best = (c, res)
    return best


def compute_cluster_covariance(features, assignments, centroids, mode: str) -> np.ndarray:
    """Per-cluster covariance about the centroid with 1/m normalisation."""
    if mode not in ("diag", "full"):
        raise ValueError("covariance mode must be 'diag' or 'full'")
    x = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    assignments = np.asarray(assignments)
    k, d = c.shape
    out = np.zeros((k, d) if mode == "diag" else (k, d, d))
    for j in range(k):
        members = x[assignments == j]
        if members.shape[0] == 0:
            raise ValueError(f"empty cluster {j}")
        dev = members - c[j]
        m = members.shape[0]
        if mode == "diag":
            out[j] = (dev ** 2).sum(0) / m
        else:
            cov = dev.T @ dev / m
            out[j] = 0.5 * (cov + cov.T)
    return out


def derive_seed(seed: int, key: str) -> int:
    """64-bit seed for one bag: BLAKE2b-64 of ``"<seed>:<key>"``."""
    digest = hashlib.blake2b(f"{seed}:{key}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def reduce_bag(bag: FeatureBag, cfg: ReduceConfig) -> BagDictionary:
    x = np.asarray(bag.features, dtype=np.float64)
    if cfg.normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    centroids, res = kmeans_fit(x, cfg, seed=derive_seed(cfg.seed, bag.bag_id))
    mode = cfg.resolved_cov_mode(x.shape[1])
    cov = None if mode == "none" else compute_cluster_covariance(x, res.assignments, centroids, mode)
    counts = np.bincount(res.assignments, minlength=centroids.shape[0])
    return BagDictionary(bag.bag_id, bag.label, centroids, counts, mode, cov)


# ---------------------------------------------------------------------------
# RMXR files
# ---------------------------------------------------------------------------

def write_dictionary(dic: BagDictionary, path) -> None:
    k, d = dic.centroids.shape
    if not np.all(np.isfinite(dic.centroids)):
        raise ValueError(f"non-finite centroid in {dic.bag_id!r}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, k, d, dic.label, COV_MODES.index(dic.cov_mode)))
        fh.write(np.asarray(dic.counts, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(dic.centroids, dtype="<f4").tobytes())
        if dic.covariances is not None:
            fh.write(np.ascontiguousarray(dic.covariances, dtype="<f4").tobytes())


def read_dictionary(path, bag_id: str | None = None, tracker: MemoryTracker | None = None,
                    covariances: bool = True) -> BagDictionary:
    """Read an RMXR file; centroids and covariances come back as float32.

    With ``covariances=False`` the covariance payload is skipped and the
    dictionary is returned with mode ``"none"``. ``tracker`` is charged for
    the centroid payload only.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, k, d, label, mode = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if mode >= len(COV_MODES):
            raise FormatError(f"{path}: unknown covariance mode {mode}")
        if k < 1 or d < 1:
            raise FormatError(f"{path}: empty dictionary (K={k}, d={d})")
        cov_len = (0, k * d, k * d * d)[mode]
        expected = _HEADER.size + 4 * k + 4 * k * d + 4 * cov_len
        if size < expected:
            raise FormatError(f"{path}: truncated payload ({size} of {expected} bytes)")
        if size > expected:
            raise FormatError(f"{path}: {size - expected} bytes beyond declared payload")
        if not covariances:
            mode, cov_len = 0, 0
        data = fh.read(4 * k + 4 * k * d + 4 * cov_len)
    counts = np.frombuffer(data, "<u4", k, 0).astype(np.int64)
    off = 4 * k
    centroids = np.frombuffer(data, "<f4", k * d, off).reshape(k, d).astype(np.float32)
    off += 4 * k * d
    cov = None
    if mode == 1:
        cov = np.frombuffer(data, "<f4", cov_len, off).reshape(k, d).astype(np.float32)
    elif mode == 2:
        cov = np.frombuffer(data, "<f4", cov_len, off).reshape(k, d, d).astype(np.float32)
    if tracker is not None:
        tracker.acquire(centroids.nbytes)
    return BagDictionary(bag_id if bag_id is not None else path.stem, int(label), centroids, counts,
                         COV_MODES[mode], cov)


class ReduceError(RuntimeError):
    def __init__(self, bag_id: str, cause: BaseException):
        super().__init__(f"bag {bag_id!r}: {cause}")
        self.bag_id = bag_id


def reduce_dataset(manifest: BagManifest, cfg: ReduceConfig, out_dir, threads: int | None = None) -> BagManifest:
    """Reduce every bag of ``manifest`` into ``out_dir``.

    Writes ``<bag_id>.rmxr`` per bag plus ``<split>.csv``. On the first
    failing bag all files written by this call are removed and a
    :class:`ReduceError` naming the bag is raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = manifest.dim
    mode = cfg.resolved_cov_mode(dim)

    def work(entry: ManifestEntry):
        target = out / f"{entry.bag_id}.rmxr"
        try:
            bag = read_bag(manifest.resolve(entry), bag_id=entry.bag_id)
            if bag.label != entry.label or bag.dim != entry.dim:
                raise FormatError("file header disagrees with manifest")
            dic = reduce_bag(bag, cfg)
            write_dictionary(dic, target)
        except Exception as exc:  # reported per bag
            return entry, None, exc
        return entry, dic.n_prototypes, None

    n_threads = threads or default_threads()
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(work, manifest.entries))
    else:
        results = [work(e) for e in manifest.entries]

    failed = [(e, exc) for e, _, exc in results if exc is not None]
    if failed:
        for e in manifest.entries:
            (out / f"{e.bag_id}.rmxr").unlink(missing_ok=True)
        entry, exc = failed[0]
        raise ReduceError(entry.bag_id, exc)

    entries = [ManifestEntry(e.bag_id, e.label, f"{e.bag_id}.rmxr", k, dim) for e, k, _ in results]
    meta = dict(manifest.meta)
    meta.update({"representation": "reduced", "covariance": mode, "k": str(cfg.k),
                 "normalize": str(int(cfg.normalize))})
    reduced = BagManifest(entries, manifest.class_count, manifest.split, out, meta)
    write_manifest(reduced, out / f"{manifest.split}.csv")
    return reduced
