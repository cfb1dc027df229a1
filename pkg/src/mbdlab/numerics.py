"""Tape-based reverse-mode differentiation over dense float64 arrays.

Only what the ranker and the debiasing branch need: elementwise ops, matmul,
row-bias broadcasting, reductions, a handful of losses, and ``stop_gradient``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mbdlab-params"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


class ParamStore:
    """Named float64 parameters with matching gradient accumulators."""

    def __init__(self, seed: int | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.seed = seed

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.values.items()}

    def num_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "params": [
                {"name": name, "shape": list(v.shape), "values": v.ravel().tolist()}
                for name, v in self.values.items()
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ParamStore":
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a parameter checkpoint: format={payload.get('format')!r}")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
        store = cls(seed=payload.get("seed"))
        for entry in payload["params"]:
            shape = tuple(entry["shape"])
            store.add(entry["name"], np.asarray(entry["values"], dtype=np.float64).reshape(shape))
        return store

    def save(self, path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload["meta"] = extra
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "tape")

    def __init__(self, value, tape, parents=(), backward_fn=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class Tape:
    """Records one forward pass; consumed by a single ``backward`` call."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._params: list[tuple[Node, ParamStore, str]] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, value, parents=(), backward_fn=None) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), self, parents, backward_fn)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self.record(np.array(value, dtype=np.float64))

    def param(self, store: ParamStore, name: str) -> Node:
        node = self.record(store.values[name])
        self._params.append((node, store, name))
        return node

    def backward(self, root: Node, upstream=None) -> None:
        if not self.nodes or root.tape is not self:
            raise TapeError("backward called without a recorded forward pass on this tape")
        seed = np.ones_like(root.value) if upstream is None else np.asarray(upstream, dtype=np.float64)
        if seed.shape != root.value.shape:
            raise ShapeError(f"upstream gradient shape {seed.shape} != output shape {root.value.shape}")
        root.grad = seed.copy()
        # creation order is a topological order
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            node.backward_fn(node.grad)
        for node, store, name in self._params:
            if node.grad is not None:
                store.grads[name] += node.grad
        self.nodes = []
        self._params = []


def _accumulate(node: Node, grad) -> None:
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), node.value.shape)
    if node.grad is None:
        node.grad = grad.copy()
    else:
        node.grad += grad


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    # same shape, scalar, or (n, k) with (k,) row-bias; nothing more general
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.ndim == 2 and small.ndim == 1 and big.shape[1] == small.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TapeError("operation needs at least one tape node")


def _lift(x, tape: Tape) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise TapeError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a.value, b.value, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return tape.record(a.value + b.value, (a, b), backward)


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a.value, b.value, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return tape.record(a.value - b.value, (a, b), backward)


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast(a.value, b.value, "mul")

    def backward(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return tape.record(a.value * b.value, (a, b), backward)


def matmul(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.value.shape} by {b.value.shape}")

    def backward(g):
        _accumulate(a, g @ b.value.T)
        _accumulate(b, a.value.T @ g)

    return tape.record(a.value @ b.value, (a, b), backward)


def square(a: Node) -> Node:
    def backward(g):
        _accumulate(a, 2.0 * a.value * g)

    return a.tape.record(a.value * a.value, (a,), backward)


def relu(a: Node) -> Node:
    mask = a.value > 0

    def backward(g):
        _accumulate(a, g * mask)

    return a.tape.record(np.where(mask, a.value, 0.0), (a,), backward)


def sigmoid(a: Node) -> Node:
    out = expit(a.value)

    def backward(g):
        _accumulate(a, g * out * (1.0 - out))

    return a.tape.record(out, (a,), backward)


def exp(a: Node) -> Node:
    out = np.exp(a.value)

    def backward(g):
        _accumulate(a, g * out)

    return a.tape.record(out, (a,), backward)


def clip(a: Node, lo=None, hi=None) -> Node:
    """Clamp values; gradient passes only where the input is inside the range."""
    out = np.clip(a.value, lo, hi)
    mask = out == a.value

    def backward(g):
        _accumulate(a, g * mask)

    return a.tape.record(out, (a,), backward)


def total(a: Node) -> Node:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.value.shape))

    return a.tape.record(np.asarray(a.value.sum()), (a,), backward)


def mean(a: Node) -> Node:
    n = a.value.size

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.value.shape))

    return a.tape.record(np.asarray(a.value.mean()), (a,), backward)


def column(a: Node, j: int) -> Node:
    """Column ``j`` of a 2-d node, as a 1-d node."""

    def backward(g):
        full = np.zeros_like(a.value)
        full[:, j] = g
        _accumulate(a, full)

    return a.tape.record(a.value[:, j].copy(), (a,), backward)


def bce_with_logits(logits: Node, targets, weights=None) -> Node:
    """Binary cross-entropy from raw logits, averaged (optionally weighted)."""
    y = np.asarray(targets, dtype=np.float64)
    z = logits.value
    if y.shape != z.shape:
        raise ShapeError(f"bce: logits {z.shape} vs targets {y.shape}")
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64)
    norm = max(float(w.sum()), 1e-12)
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        _accumulate(logits, g * w * (expit(z) - y) / norm)

    return logits.tape.record(np.asarray(float((w * loss).sum()) / norm), (logits,), backward)


def stop_gradient(a: Node) -> Node:
    """Same value, no path back to ``a``: everything upstream gets exactly zero."""
    return a.tape.record(a.value.copy())


# --------------------------------------------------------------------- MLP

ACTIVATIONS = ("identity", "relu", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    output_activation: str = "identity"
    hidden_activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError(f"MlpSpec needs an input width and at least one layer, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if self.hidden_activation != "relu":
            raise ValueError("hidden activation must be 'relu'")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def _activate(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return expit(x)
    return x


def _activate_node(x: Node, kind: str) -> Node:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    return x


class Mlp:
    """Dense feed-forward net whose weights live in a shared ``ParamStore``."""

    def __init__(self, spec: MlpSpec, store: ParamStore, prefix: str, init: bool = True):
        self.spec = spec
        self.store = store
        self.prefix = prefix
        if init:
            rng = np.random.default_rng(spec.seed)
            for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
                # He init scaled by fan-in
                store.add(self._w(i), rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
                store.add(self._b(i), np.zeros(fan_out))
        for i in range(spec.n_layers):
            if self._w(i) not in store or self._b(i) not in store:
                raise KeyError(f"missing parameters for layer {i} under prefix {prefix!r}")

    def _w(self, i):
        return f"{self.prefix}.w{i}"

    def _b(self, i):
        return f"{self.prefix}.b{i}"

    @property
    def param_names(self) -> list[str]:
        return [n for i in range(self.spec.n_layers) for n in (self._w(i), self._b(i))]

    @property
    def in_width(self) -> int:
        return self.spec.widths[0]

    @property
    def out_width(self) -> int:
        return self.spec.widths[-1]

    def _check_input(self, shape) -> None:
        if len(shape) not in (1, 2) or shape[-1] != self.in_width:
            raise ShapeError(
                f"{self.prefix}: expected input with last dimension {self.in_width}, got shape {tuple(shape)}"
            )

    def forward(self, tape: Tape, x) -> Node:
        """Recorded forward pass; ``x`` is an (n, d) array or node."""
        xv = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
        self._check_input(xv.shape)
        h = x if isinstance(x, Node) else tape.constant(np.atleast_2d(xv))
        last = self.spec.n_layers - 1
        for i in range(self.spec.n_layers):
            h = matmul(h, tape.param(self.store, self._w(i))) + tape.param(self.store, self._b(i))
            h = _activate_node(h, self.spec.output_activation if i == last else "relu")
        return h

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x.shape)
        h = np.atleast_2d(x)
        last = self.spec.n_layers - 1
        for i in range(self.spec.n_layers):
            h = h @ self.store[self._w(i)] + self.store[self._b(i)]
            h = _activate(h, self.spec.output_activation if i == last else "relu")
        return h if x.ndim == 2 else h[0]


# --------------------------------------------------------------- optimizers


def _check_finite(store: ParamStore, names) -> None:
    bad = [n for n in names if not np.all(np.isfinite(store.grads[n]))]
    if bad:
        log.warning("optimizer step rejected: non-finite gradient in %s", bad)
        raise NumericalError(f"non-finite gradient in {bad}")


class SGD:
    def __init__(self, store: ParamStore, lr: float, names=None):
        self.store = store
        self.lr = float(lr)
        self.names = list(names) if names is not None else store.names()
        self.step_count = 0

    def step(self) -> None:
        _check_finite(self.store, self.names)
        for n in self.names:
            self.store.values[n] -= self.lr * self.store.grads[n]
        self.step_count += 1


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, names=None):
        self.store = store
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.names = list(names) if names is not None else store.names()
        self.m = {n: np.zeros_like(store.values[n]) for n in self.names}
        self.v = {n: np.zeros_like(store.values[n]) for n in self.names}
        self.step_count = 0

    def step(self) -> None:
        _check_finite(self.store, self.names)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for n in self.names:
            g = self.store.grads[n]
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.store.values[n] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, store: ParamStore, lr: float, names=None):
    if kind == "sgd":
        return SGD(store, lr, names)
    if kind == "adam":
        return Adam(store, lr, names=names)
    raise ValueError(f"unknown optimizer {kind!r}")
