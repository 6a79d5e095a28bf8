"""Attention-based MIL aggregators with hand-written gradients.

Two models share the interface ``forward(instances, params)`` /
``backward(model, instances, label)``:

ABMIL (non-gated tanh attention)::

    a = softmax_k( w . tanh(V h_k) )      z = sum_k a_k h_k
    logits = Wc z + bc

DSMIL (single-scale, dual stream)::

    I = h W0^T                            m = row of argmax_{k,c} I[k, c]
    q_k = Wq h_k                          a = softmax_k( q_k . q_m / sqrt(Q) )
    b = sum_k a_k Wv h_k                  bag = Wb b + bb
    logits = 0.5 * (I[m] + bag)

The critical index ``m`` is treated as a constant when differentiating.
All arithmetic is float64.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bagstore import FormatError

MAGIC = b"RMXM"
_HEADER = struct.Struct("<4sBIII")
MODEL_KINDS = ("abmil", "dsmil")
PARAM_ORDER = {
    "abmil": ("V", "w", "Wc", "bc"),
    "dsmil": ("W0", "Wq", "Wv", "Wb", "bb"),
}


@dataclass
class MilModel:
    kind: str
    params: dict[str, np.ndarray]

    @property
    def dim(self) -> int:
        return self.params["Wc" if self.kind == "abmil" else "Wb"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["Wc" if self.kind == "abmil" else "Wb"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["V" if self.kind == "abmil" else "Wq"].shape[0]

    def copy(self) -> "MilModel":
        return MilModel(self.kind, {k: v.copy() for k, v in self.params.items()})

    def forward(self, instances):
        fn = abmil_forward if self.kind == "abmil" else dsmil_forward
        return fn(instances, self.params)

    def logits(self, instances) -> np.ndarray:
        return self.forward(instances)[0]


def init_params(kind: str, d: int, n_classes: int, hidden: int = 128, seed: int = 0) -> MilModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if min(d, n_classes, hidden) < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)

    def uni(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    if kind == "abmil":
        params = {
            "V": uni((hidden, d), d),
            "w": uni((hidden,), hidden),
            "Wc": uni((n_classes, d), d),
            "bc": np.zeros(n_classes),
        }
    else:
        params = {
            "W0": uni((n_classes, d), d),
            "Wq": uni((hidden, d), d),
            "Wv": uni((d, d), d),
            "Wb": uni((n_classes, d), d),
            "bb": np.zeros(n_classes),
        }
    return MilModel(kind, params)


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


def _as_instances(instances) -> np.ndarray:
    h = np.asarray(instances, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] < 1:
        raise ValueError("instances must be a non-empty M x d matrix")
    if not np.all(np.isfinite(h)):
        raise ValueError("non-finite input")
    return h


def abmil_forward(instances, params):
    """Return ``(logits, attention, bag_embedding)``."""
    h = _as_instances(instances)
    hidden = np.tanh(h @ params["V"].T)
    attention = softmax(hidden @ params["w"])
    z = attention @ h
    logits = params["Wc"] @ z + params["bc"]
    return logits, attention, z


def _critical_index(inst_logits: np.ndarray) -> int:
    # first occurrence in row-major order: lowest instance, then lowest class
    return int(np.argmax(inst_logits)) // inst_logits.shape[1]


def dsmil_forward(instances, params):
    """Return ``(logits, instance_logits, attention)``."""
    h = _as_instances(instances)
    inst_logits = h @ params["W0"].T
    m = _critical_index(inst_logits)
    q = h @ params["Wq"].T
    attention = softmax(q @ q[m] / math.sqrt(q.shape[1]))
    b = attention @ (h @ params["Wv"].T)
    bag_logits = params["Wb"] @ b + params["bb"]
    logits = 0.5 * (inst_logits[m] + bag_logits)
    return logits, inst_logits, attention


def cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    loss = log_z - shifted[label]
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return float(loss), grad


def _abmil_backward(h, p, label):
    hidden = np.tanh(h @ p["V"].T)
    a = softmax(hidden @ p["w"])
    z = a @ h
    logits = p["Wc"] @ z + p["bc"]
    loss, g = cross_entropy(logits, label)

    dz = p["Wc"].T @ g
    da = h @ dz
    ds = a * (da - a @ da)
    dpre = np.outer(ds, p["w"]) * (1.0 - hidden ** 2)
    grads = {
        "V": dpre.T @ h,
        "w": hidden.T @ ds,
        "Wc": np.outer(g, z),
        "bc": g,
    }
    return loss, grads, logits


def _dsmil_backward(h, p, label):
    inst = h @ p["W0"].T
    m = _critical_index(inst)
    q = h @ p["Wq"].T
    scale = 1.0 / math.sqrt(q.shape[1])
    a = softmax(q @ q[m] * scale)
    v = h @ p["Wv"].T
    b = a @ v
    logits = 0.5 * (inst[m] + p["Wb"] @ b + p["bb"])
    loss, g = cross_entropy(logits, label)

    half = 0.5 * g
    dW0 = np.zeros_like(p["W0"])
    dW0 += np.outer(half, h[m])
    db = p["Wb"].T @ half
    da = v @ db
    ds = a * (da - a @ da) * scale
    dq = np.outer(ds, q[m])
    dq[m] += ds @ q
    grads = {
        "W0": dW0,
        "Wq": dq.T @ h,
        "Wv": np.outer(db, a @ h),
        "Wb": np.outer(half, b),
        "bb": half.copy(),
    }
    return loss, grads, logits


def backward(model: MilModel, instances, label: int):
    """Loss, parameter gradients and logits for one bag."""
    h = _as_instances(instances)
    if model.kind == "abmil":
        return _abmil_backward(h, model.params, label)
    return _dsmil_backward(h, model.params, label)


def loss_only(model: MilModel, instances, label: int) -> float:
    return cross_entropy(model.logits(instances), label)[0]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """Bias-corrected Adam; updates ``params`` and ``state`` in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class LrSchedule:
    lr0: float = 2e-4
    total_steps: int = 1

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def cosine_lr(t: int, schedule: LrSchedule) -> float:
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    return 0.5 * schedule.lr0 * (1.0 + math.cos(math.pi * t / schedule.total_steps))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: MilModel, path) -> None:
    """RMXM: magic, u8 kind, u32 d, u32 C, u32 H (or Q), f64 tensors in PARAM_ORDER."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, MODEL_KINDS.index(model.kind), model.dim, model.n_classes, model.hidden))
        for name in PARAM_ORDER[model.kind]:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def _shapes(kind, d, c, h):
    if kind == "abmil":
        return {"V": (h, d), "w": (h,), "Wc": (c, d), "bc": (c,)}
    return {"W0": (c, d), "Wq": (h, d), "Wv": (d, d), "Wb": (c, d), "bb": (c,)}


def load_checkpoint(path) -> MilModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, kind_id, d, c, h = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if kind_id >= len(MODEL_KINDS):
        raise FormatError(f"{path}: unknown model kind {kind_id}")
    kind = MODEL_KINDS[kind_id]
    shapes = _shapes(kind, d, c, h)
    expected = _HEADER.size + 8 * sum(math.prod(s) for s in shapes.values())
    if len(data) < expected:
        raise FormatError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise FormatError(f"{path}: {len(data) - expected} bytes beyond declared payload")
    params = {}
    off = _HEADER.size
    for name in PARAM_ORDER[kind]:
        n = math.prod(shapes[name])
        params[name] = np.frombuffer(data, "<f8", n, off).reshape(shapes[name]).astype(np.float64)
        off += 8 * n
    return MilModel(kind, params)
