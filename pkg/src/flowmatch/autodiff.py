"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation on :class:`Tensor` values appends a node to the graph while
tracing is enabled. Node ids are drawn from a global increasing counter, so
sorting by id is a valid topological order; :func:`backward` walks the
ancestors of a scalar root in reverse id order, visiting each node once.

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a scalar, or a trailing-shape operand that is broadcast over a single
leading batch dimension (``(B, n)`` with ``(n,)``).
"""

from __future__ import annotations

import contextlib
import itertools
import json
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

CHECKPOINT_FORMAT = "flowmatch-checkpoint"
CHECKPOINT_VERSION = 1

_ids = itertools.count()
_tracing = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op = op
        self.shapes = (a, b)


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "id", "op", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, *, check: bool = True):
        arr = np.array(data, dtype=np.float64)
        if check and not np.all(np.isfinite(arr)):
            raise ValueError("Tensor data contains NaN or Inf")
        self.data = arr
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.id = next(_ids)
        self.op = "leaf"
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain constant tensors."""
    global _tracing
    prev = _tracing
    _tracing = False
    try:
        yield
    finally:
        _tracing = prev


def is_tracing() -> bool:
    return _tracing


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, check=False)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.id = next(_ids)
    out.op = op
    out.grad = None
    if _tracing and any(p.requires_grad for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        out.requires_grad = True
    else:
        out.parents = ()
        out.backward_fn = None
        out.requires_grad = False
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    big, small = (a, b) if a.ndim > b.ndim else (b, a)
    if big.ndim == small.ndim + 1 and big.shape[1:] == small.shape:
        return
    raise ShapeError(op, a.shape, b.shape)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0)


# forward ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _node(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _node(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free sigmoid
    return _node(x * s, "silu", (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _node(np.asarray(a.data.sum()), "sum", (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _node(out, "sum", (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def squared_l2(a, axis: int | None = None) -> Tensor:
    """Sum of squares, over everything or along ``axis``."""
    a = as_tensor(a)
    ad = a.data
    if axis is None:
        return _node(np.asarray(np.sum(ad * ad)), "squared_l2", (a,), lambda g: (2.0 * g * ad,))
    out = np.sum(ad * ad, axis=axis)
    return _node(out, "squared_l2", (a,),
                 lambda g: (2.0 * np.expand_dims(g, axis) * ad,))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s0 != s1 for i, (s0, s1) in enumerate(zip(ts[0].shape, t.shape)) if i != ax
        ):
            raise ShapeError("concat", ts[0].shape, t.shape)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=ax), "concat", tuple(ts),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def mse(pred, target) -> Tensor:
    """Mean over the batch of the squared error, summed over features."""
    diff = sub(pred, target)
    if diff.ndim <= 1:
        return squared_l2(diff)
    return mean(squared_l2(diff, axis=-1))


# reverse pass

def backward(root: Tensor, *, accumulate: bool = False) -> dict[int, np.ndarray]:
    """Propagate d(root)/d(node) to every ancestor of a scalar ``root``.

    Returns a map from node id to gradient array. With ``accumulate`` the
    gradients of leaf tensors are also added to their ``.grad`` attributes.
    The graph is left intact so several roots sharing a forward pass can be
    differentiated in turn.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(node.parents)
    order.sort(key=lambda n: n.id, reverse=True)

    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in order:
        g = grads.get(node.id)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    if accumulate:
        for node in order:
            if not node.parents and node.id in grads:
                node.grad = grads[node.id] if node.grad is None else node.grad + grads[node.id]
    return grads


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` w.r.t. each tensor in ``wrt`` (zeros if unreachable)."""
    wrt = list(wrt)
    grads = backward(root)
    return [grads.get(t.id, np.zeros_like(t.data)) for t in wrt]


# parameter checkpoints

def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors as a versioned JSON container.

    Floats are written with ``repr`` precision so a load reproduces the
    arrays bit for bit.
    """
    entries = []
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape),
                        "data": [float(v) for v in arr.ravel()]})
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "meta": meta or {}, "tensors": entries}
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    out = {}
    for e in doc["tensors"]:
        arr = np.asarray(e["data"], dtype=np.float64).reshape(e["shape"])
        out[e["name"]] = arr
    return out, doc.get("meta", {})
