"""Latent-space bag mixing over reduced bags.

A query bag is mixed with a key bag of the same class. For each query
prototype the closest key prototype is located, and with probability ``p``
one of the operators below fires:

* append       add the closest key prototype
* replace      overwrite the query prototype with the closest key prototype
* interpolate  add ``(1 - lam) * c_q + lam * c_k``
* covary       add ``c_q + lam * delta`` with ``delta ~ N(0, Sigma_k)``
* joint        the four operators in that order, each on the previous output

Randomness is drawn in a fixed order per pass (gate draws, then one ``lam``
per fired event, then one ``delta`` per fired event) so a seeded generator
reproduces the mix exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .reducer import BagDictionary

KINDS = ("none", "append", "replace", "interpolate", "covary", "joint")
JOINT_ORDER = ("append", "replace", "interpolate", "covary")


class MixError(ValueError):
    pass


@dataclass
class AugmentConfig:
    kind: str = "none"
    p: float = 0.5
    lam: str | float = "uniform"  # "uniform" draws from (0, 1); a float is fixed
    gate: str = "prototype"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if self.lam != "uniform":
            self.lam = float(self.lam)
            if not 0 <= self.lam <= 1:
                raise ValueError("fixed lambda must lie in [0, 1]")
        if self.gate not in ("prototype", "bag"):
            raise ValueError("gate must be 'prototype' or 'bag'")

    @classmethod
    def parse_lambda(cls, text: str) -> str | float:
        if text == "uniform":
            return "uniform"
        if text.startswith("fixed:"):
            return float(text[len("fixed:"):])
        raise ValueError(f"lambda policy must be 'uniform' or 'fixed:<v>', got {text!r}")


@dataclass
class MixEvent:
    query_idx: int
    key_bag: str
    key_idx: int
    kind: str
    lam: float | None = None


@dataclass
class MixedBag:
    instances: np.ndarray
    label: int
    bag_id: str = ""
    events: list[MixEvent] = field(default_factory=list)

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]


@dataclass
class KeyIndex:
    by_class: dict[int, list[str]]

    @classmethod
    def from_labels(cls, labels: dict[str, int]) -> "KeyIndex":
        by_class: dict[int, list[str]] = {}
        for bag_id in sorted(labels):
            by_class.setdefault(labels[bag_id], []).append(bag_id)
        return cls(by_class)


def _rows(query) -> np.ndarray:
    if isinstance(query, BagDictionary):
        return np.asarray(query.centroids, dtype=np.float64)
    return np.asarray(query.instances, dtype=np.float64)


def _start(query) -> MixedBag:
    events = list(query.events) if isinstance(query, MixedBag) else []
    return MixedBag(_rows(query).copy(), query.label, query.bag_id, events)


def _check_pair(query, key: BagDictionary):
    if query.label != key.label:
        raise MixError(f"class mismatch: query label {query.label} vs key label {key.label}")
    if _rows(query).shape[1] != key.dim:
        raise MixError(f"dimension mismatch: {_rows(query).shape[1]} vs {key.dim}")


def nearest_key_prototype(query_proto, key: BagDictionary) -> tuple[int, float]:
    q = np.asarray(query_proto, dtype=np.float64)
    c = np.asarray(key.centroids, dtype=np.float64)
    if q.shape != (c.shape[1],):
        raise MixError(f"dimension mismatch: {q.shape[0]} vs {c.shape[1]}")
    d2 = ((c - q) ** 2).sum(1)
    i = int(np.argmin(d2))
    return i, float(d2[i])


def _nearest_all(rows, key: BagDictionary) -> np.ndarray:
    c = np.asarray(key.centroids, dtype=np.float64)
    return np.argmin(((rows[:, None, :] - c[None, :, :]) ** 2).sum(-1), axis=1)


def _gate(m: int, p: float, gate: str, rng: np.random.Generator) -> np.ndarray:
    if gate == "bag":
        return np.full(m, rng.random() < p)
    return rng.random(m) < p


def _lambdas(n: int, lam, rng) -> np.ndarray:
    if lam == "uniform":
        return rng.random(n)
    return np.full(n, float(lam))


def augment_append(query, key, rng, p=0.5, gate="prototype") -> MixedBag:
    _check_pair(query, key)
    out = _start(query)
    rows = out.instances
    fired = np.flatnonzero(_gate(len(rows), p, gate, rng))
    nearest = _nearest_all(rows[fired], key) if fired.size else np.empty(0, dtype=int)
    added = np.asarray(key.centroids, dtype=np.float64)[nearest]
    out.instances = np.vstack([rows, added])
    out.events += [MixEvent(int(i), key.bag_id, int(j), "append") for i, j in zip(fired, nearest)]
    return out


def augment_replace(query, key, rng, p=0.5, gate="prototype") -> MixedBag:
    _check_pair(query, key)
    out = _start(query)
    rows = out.instances
    fired = np.flatnonzero(_gate(len(rows), p, gate, rng))
    if fired.size:
        nearest = _nearest_all(rows[fired], key)
        rows[fired] = np.asarray(key.centroids, dtype=np.float64)[nearest]
        out.events += [MixEvent(int(i), key.bag_id, int(j), "replace") for i, j in zip(fired, nearest)]
    return out


def augment_interpolate(query, key, rng, p=0.5, lam="uniform", gate="prototype") -> MixedBag:
    _check_pair(query, key)
    out = _start(query)
    rows = out.instances
    fired = np.flatnonzero(_gate(len(rows), p, gate, rng))
    lams = _lambdas(fired.size, lam, rng)
    nearest = _nearest_all(rows[fired], key) if fired.size else np.empty(0, dtype=int)
    kc = np.asarray(key.centroids, dtype=np.float64)[nearest]
    added = (1.0 - lams)[:, None] * rows[fired] + lams[:, None] * kc
    out.instances = np.vstack([rows, added])
    out.events += [MixEvent(int(i), key.bag_id, int(j), "interpolate", float(l))
                   for i, j, l in zip(fired, nearest, lams)]
    return out


def sample_gaussian_from_cov(cov, mode: str, rng: np.random.Generator) -> np.ndarray:
    """One draw from ``N(0, cov)``.

    Full covariances are factorised after a ridge of ``1e-6 * trace / d``
    (``1e-12`` for a zero trace); diagonal ones are scaled coordinatewise.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if mode == "diag":
        return np.sqrt(np.maximum(cov, 0.0)) * rng.standard_normal(cov.shape[0])
    if mode != "full":
        raise MixError("covary requires covariance")
    return _cholesky_ridged(cov) @ rng.standard_normal(cov.shape[0])


def _cholesky_ridged(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    tr = float(np.trace(cov))
    eps = 1e-6 * tr / d if tr > 0 else 1e-12
    try:
        return np.linalg.cholesky(cov + eps * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise MixError(f"covariance factorisation failed after ridge: {exc}") from None


def augment_covary(query, key, rng, p=0.5, lam="uniform", gate="prototype") -> MixedBag:
    _check_pair(query, key)
    if key.cov_mode == "none" or key.covariances is None:
        raise MixError("covary requires covariance")
    out = _start(query)
    rows = out.instances
    fired = np.flatnonzero(_gate(len(rows), p, gate, rng))
    lams = _lambdas(fired.size, lam, rng)
    nearest = _nearest_all(rows[fired], key) if fired.size else np.empty(0, dtype=int)
    added = np.empty((fired.size, rows.shape[1]))
    factors: dict[int, np.ndarray] = {}
    for n, (i, j) in enumerate(zip(fired, nearest)):
        if key.cov_mode == "full":
            if j not in factors:
                factors[j] = _cholesky_ridged(np.asarray(key.covariances[j], dtype=np.float64))
            delta = factors[j] @ rng.standard_normal(rows.shape[1])
        else:
            delta = sample_gaussian_from_cov(key.covariances[j], key.cov_mode, rng)
        added[n] = rows[i] + lams[n] * delta
    out.instances = np.vstack([rows, added])
    out.events += [MixEvent(int(i), key.bag_id, int(j), "covary", float(l))
                   for i, j, l in zip(fired, nearest, lams)]
    return out


def augment_joint(query, key, rng, p=0.1, lam="uniform", gate="prototype") -> MixedBag:
    if key.cov_mode == "none":
        raise MixError("covary requires covariance")
    bag = augment_append(query, key, rng, p=p, gate=gate)
    bag = augment_replace(bag, key, rng, p=p, gate=gate)
    bag = augment_interpolate(bag, key, rng, p=p, lam=lam, gate=gate)
    return augment_covary(bag, key, rng, p=p, lam=lam, gate=gate)


def apply_augmentation(query, key, cfg: AugmentConfig, rng) -> MixedBag:
    if cfg.kind == "none":
        return _start(query)
    if cfg.kind in ("append", "replace"):
        fn = augment_append if cfg.kind == "append" else augment_replace
        return fn(query, key, rng, p=cfg.p, gate=cfg.gate)
    fn = {"interpolate": augment_interpolate, "covary": augment_covary, "joint": augment_joint}[cfg.kind]
    return fn(query, key, rng, p=cfg.p, lam=cfg.lam, gate=cfg.gate)


def sample_key(query_id: str, label: int, key_index: KeyIndex, rng) -> str:
    """Uniform same-class key, excluding the query unless it is alone."""
    if label not in key_index.by_class:
        raise MixError(f"class {label} absent from key index")
    members = key_index.by_class[label]
    candidates = [b for b in members if b != query_id] or list(members)
    return candidates[int(rng.integers(len(candidates)))]


def mix_bag(query: BagDictionary, key_index: KeyIndex, dictionaries, cfg: AugmentConfig, rng) -> MixedBag:
    """Mix ``query`` with a same-class key drawn from ``key_index``.

    ``dictionaries`` maps bag_id to :class:`BagDictionary`; any mapping (or
    an object with ``__getitem__`` that loads lazily) works.
    """
    if cfg.kind == "none":
        return _start(query)
    key_id = sample_key(query.bag_id, query.label, key_index, rng)
    try:
        key = dictionaries[key_id]
    except KeyError:
        raise MixError(f"unknown bag_id {key_id!r} in key index") from None
    return apply_augmentation(query, key, cfg, rng)


def write_provenance(events: list[MixEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_idx", "key_bag", "key_idx", "kind", "lambda"])
        for e in events:
            w.writerow([e.query_idx, e.key_bag, e.key_idx, e.kind, "" if e.lam is None else repr(e.lam)])
