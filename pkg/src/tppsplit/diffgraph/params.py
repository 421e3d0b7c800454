"""Named parameter blocks, Adam, parameter counting and checkpoints."""
import base64
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient, ShapeMismatch
from .core import Node, Tape, grad

OWNER_TAGS = ("time", "mark", "shared")


@dataclass
class Block:
    name: str
    values: np.ndarray
    owner_tag: str = "shared"
    trainable: bool = True
    grad: np.ndarray = None

    def __post_init__(self):
        if self.owner_tag not in OWNER_TAGS:
            raise ValueError(f"unknown owner_tag {self.owner_tag!r}")
        self.values = np.array(self.values, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def size(self):
        return int(self.values.size)


class ParamStore:
    """Ordered collection of parameter blocks.

    Each block carries an ``owner_tag`` saying which task loss may touch it:
    ``time``, ``mark`` or ``shared``.  Block values are replaced, never
    mutated in place, so graph leaves built from them stay valid.
    """

    def __init__(self):
        self.blocks = {}

    def add(self, name, values, owner_tag="shared", trainable=True):
        if name in self.blocks:
            raise ValueError(f"duplicate block name {name!r}")
        self.blocks[name] = Block(name, values, owner_tag, trainable)
        return self.blocks[name]

    def __getitem__(self, name):
        return self.blocks[name]

    def __contains__(self, name):
        return name in self.blocks

    def __iter__(self):
        return iter(self.blocks.values())

    def __len__(self):
        return len(self.blocks)

    def names(self, tags=None):
        return [b.name for b in self if tags is None or b.owner_tag in tags]

    def leaf(self, name):
        return Node(self.blocks[name].values, param=name)

    def leaves(self):
        return {name: self.leaf(name) for name in self.blocks}

    def set(self, name, values):
        b = self.blocks[name]
        values = np.array(values, dtype=np.float64)
        if values.shape != b.values.shape:
            raise ShapeMismatch(f"{name}: {values.shape} != {b.values.shape}")
        b.values = values

    def zero_grad(self):
        for b in self:
            b.grad = np.zeros_like(b.values)

    def snapshot(self, names=None):
        names = self.names() if names is None else names
        return {n: self.blocks[n].values.copy() for n in names}

    def restore(self, snap):
        for n, v in snap.items():
            self.set(n, v)

    def copy(self):
        other = ParamStore()
        for b in self:
            other.add(b.name, b.values.copy(), b.owner_tag, b.trainable)
        return other

    def flat_grad(self, names):
        return np.concatenate([self.blocks[n].grad.ravel() for n in names]) if names else np.zeros(0)


def backward(loss, store, tape=None):
    """Fill every block's grad slot with dloss/dblock (zeros where unused)."""
    grads = grad(loss, tape)
    for b in store:
        g = grads.get(b.name)
        if g is None:
            b.grad = np.zeros_like(b.values)
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(b.name)
        b.grad = g.reshape(b.values.shape)
    return grads


def param_count(store, tags=None):
    return sum(b.size for b in store if tags is None or b.owner_tag in tags)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, state=None, frozen=()):
    """One bias-corrected Adam update; frozen or non-trainable blocks are skipped.

    Moments and step counters are kept per block, so the update of a block does
    not depend on which other blocks exist or in what order they are visited.
    """
    state = AdamState() if state is None else state
    b1, b2 = betas
    for b in store:
        if not b.trainable or b.name in frozen:
            continue
        g = b.grad
        t = state.t.get(b.name, 0) + 1
        m = b1 * state.m.get(b.name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(b.name, 0.0) + (1.0 - b2) * (g * g)
        state.m[b.name], state.v[b.name], state.t[b.name] = m, v, t
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        b.values = b.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, store, frozen=()):
        adam_step(store, self.lr, self.betas, self.eps, self.state, frozen)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "tppsplit-params"
CHECKPOINT_VERSION = 1


def save_checkpoint(store, path, meta=None):
    """JSON archive; values are base64 of row-major little-endian float64."""
    records = []
    for b in store:
        raw = np.ascontiguousarray(b.values, dtype="<f8").tobytes()
        records.append({
            "name": b.name,
            "owner_tag": b.owner_tag,
            "trainable": b.trainable,
            "shape": list(b.values.shape),
            "data": base64.b64encode(raw).decode("ascii"),
        })
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "meta": meta or {}, "blocks": records}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter archive")
    store = ParamStore()
    for r in doc["blocks"]:
        vals = np.frombuffer(base64.b64decode(r["data"]), dtype="<f8").reshape(r["shape"])
        store.add(r["name"], vals.astype(np.float64), r["owner_tag"], r["trainable"])
    return store, doc.get("meta", {})
