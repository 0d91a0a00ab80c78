"""Tensor type and reverse-mode differentiation.

Every differentiable op records a :class:`Node` carrying a global sequence
number. :func:`backward` collects the nodes reachable from a scalar loss into
a :class:`Tape`, ordered by that number, and walks it in reverse.
"""
from __future__ import annotations

import contextlib
import itertools
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_seq = itertools.count()
_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_debug = False


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default floating precision (e.g. 64-bit for gradient checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def set_debug(flag: bool) -> None:
    """Turn on finite-output checks after every forward op."""
    global _debug
    _debug = bool(flag)


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "released", "output")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.output = None
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.released = False

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense array with an optional gradient slot and a link to the op that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name
        self._retain = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after backward (used by Grad-CAM)."""
        self._retain = True
        return self

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # light arithmetic; enough for losses, tests and head manipulations
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mul(tsum(self), 1.0 / self.size)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _default_dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap an op's output and record it if any input needs a gradient.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    if _debug and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
        # weak, so the output does not keep itself alive through its node
        out.node.output = weakref.ref(out)
    return out


@dataclass
class Tape:
    """Recorded operations reachable from a loss, in the order they ran."""

    nodes: list = field(default_factory=list)

    @classmethod
    def collect(cls, root: Tensor) -> "Tape":
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or id(n) in seen:
                continue
            seen.add(id(n))
            nodes.append(n)
            stack.extend(n.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def check_order(self) -> bool:
        for n in self.nodes:
            for t in n.inputs:
                if t.node is not None and t.node.seq >= n.seq:
                    return False
        return True


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every ``requires_grad`` leaf reachable from ``loss``.

    Gradients add into existing ``.grad`` arrays, so a tensor consumed by
    several ops (or several backward passes) accumulates. The graph is
    released afterwards; a second call on the same graph raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    tape = Tape.collect(loss)
    if any(n.released for n in tape.nodes):
        raise RuntimeError("graph already released by a previous backward; re-run forward")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out = node.output()
        g = grads.pop(id(out), None) if out is not None else None
        node.released = True
        if g is None:
            node.backward_fn = None
            continue
        in_grads = node.backward_fn(g)
        node.backward_fn = None
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise RuntimeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            if t.node is None or t._retain:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            if t.node is not None:
                key = id(t)
                grads[key] = gi if key not in grads else grads[key] + gi
    return tape


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out = (a.data * b.data).astype(a.dtype, copy=False)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(out, (a, b), bw, "mul")


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(out, (a,), bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return make_result(out, (a,), bw, "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx], dtype=a.dtype)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(out, (a,), bw, "getitem")
