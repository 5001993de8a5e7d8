"""
Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op whose inputs require a gradient records a node on the current Tape.
Nodes are appended in creation order, so the tape is topologically sorted by
construction and backward is a single reverse sweep over it.

    with Tape() as tape:
        loss = ((x @ w) ** 2).sum()
    tape.backward(loss)
    w.grad  # ∂loss/∂w

Parameter leaves (requires_grad=True, not produced by an op) accumulate their
gradient across backward calls until zero_grad(). A leaf on the tape that the
sweep never reaches ends up with a zero gradient, not None. Ops recorded
outside any `with Tape()` go to an implicit per-thread tape that is dropped
after its first backward.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import CoxMTError, DimensionError, DomainError, InvalidRiskSetError, RankError

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_tape_ids = itertools.count(1)
_local = threading.local()


# ----------------- Tape ----------------- #

@dataclass
class Node:
    index: int
    op: str
    parents: Tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of the ops of one forward pass."""

    def __init__(self, implicit: bool = False) -> None:
        self.id = next(_tape_ids)
        self.nodes: List[Node] = []
        # implicit: opened by Tape.current() outside any `with Tape()`
        self.implicit = implicit

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @staticmethod
    def current() -> "Tape":
        stack = _tape_stack()
        if not stack:
            # thread başına varsayılan tape, backward sonrası bırakılır
            stack.append(Tape(implicit=True))
        return stack[-1]

    def record(self, out: "Tensor", parents: Tuple["Tensor", ...], op: str,
               backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> None:
        node = Node(index=len(self.nodes), op=op, parents=parents, backward_fn=backward_fn)
        self.nodes.append(node)
        out._node = node
        out._tape = self

    def leaves(self) -> List["Tensor"]:
        """Parameter leaves read by any recorded op, in first-use order."""
        seen: dict = {}
        for node in self.nodes:
            for parent in node.parents:
                if parent.requires_grad and parent._node is None:
                    seen.setdefault(id(parent), parent)
        return list(seen.values())

    def backward(self, loss: "Tensor") -> None:
        if loss.values.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")

        if loss._node is None:
            # sabit ya da doğrudan yaprak
            if loss.requires_grad:
                loss._accumulate(np.ones_like(loss.values))
            self._fill_unreached()
            return
        if loss._tape is not self:
            raise CoxMTError("loss was recorded on a different tape")

        grads = {loss._node.index: np.ones_like(loss.values)}
        for node in reversed(self.nodes[: loss._node.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.values.shape)
                if parent._node is not None and parent._tape is self:
                    idx = parent._node.index
                    grads[idx] = grads[idx] + pg if idx in grads else pg
                else:
                    parent._accumulate(pg)
        self._fill_unreached()

    def _fill_unreached(self) -> None:
        # leaves the sweep never reached get an explicit zero gradient
        for leaf in self.leaves():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.values)
        if self.implicit:
            _release_implicit(self)


def _release_implicit(tape: Tape) -> None:
    # tensors already recorded keep their own reference to the released tape
    stack = _tape_stack()
    if stack and stack[0] is tape:
        stack.pop(0)


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Ops inside this block are never recorded (teacher / eval forwards)."""
    previous = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def backward(loss: "Tensor") -> None:
    if loss._tape is not None:
        loss._tape.backward(loss)
    else:
        Tape.current().backward(loss)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ----------------- Tensor ----------------- #

class Tensor:
    __array_priority__ = 100

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(values, Tensor):
            values = values.values
        self.values = np.array(values, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=DTYPE)
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._node = None
        out._tape = None
        return out

    # --------- meta --------- #
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tape_id(self) -> Optional[Tuple[int, int]]:
        if self._node is None or self._tape is None:
            return None
        return self._tape.id, self._node.index

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise RankError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values.copy(), False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE).reshape(self.values.shape)
        else:
            self.grad = self.grad + g

    # --------- operators --------- #
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, power):
        if power != 2:
            raise DomainError("only square powers are supported")
        return square(self)

    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims: bool = False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def swapaxes(self, a: int, b: int): return swapaxes(self, a, b)
    def relu(self): return relu(self)
    def tanh(self): return tanh(self)
    def exp(self): return exp(self)
    def log1p(self): return log1p(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


def _make(values: np.ndarray, parents: Tuple[Tensor, ...], op: str,
          backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    requires = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(values, requires)
    if requires:
        Tape.current().record(out, parents, op, backward_fn)
    return out


def _check_same_or_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: operand shapes do not broadcast", a.shape, b.shape) from None


# ----------------- elementwise ----------------- #

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "add")
    return _make(a.values + b.values, (a, b), "add", lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "sub")
    return _make(a.values - b.values, (a, b), "sub", lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_broadcast(a, b, "div")
    av, bv = a.values, b.values
    return _make(av / bv, (a, b), "div", lambda g: (g / bv, -g * av / (bv * bv)))


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.values * c, (a,), "scale", lambda g: (g * c,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return _make(av * av, (a,), "square", lambda g: (2.0 * av * g,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), "relu", lambda g: (g * mask,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.values)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.values)
    return _make(y, (a,), "exp", lambda g: (g * y,))


def log1p(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.values.size and np.min(a.values) <= -1.0:
        raise DomainError("log1p is undefined for values <= -1")
    av = a.values
    return _make(np.log1p(av), (a,), "log1p", lambda g: (g / (1.0 + av),))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.values.size and np.min(a.values) <= 0.0:
        raise DomainError("log is undefined for values <= 0")
    av = a.values
    return _make(np.log(av), (a,), "log", lambda g: (g / av,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log1p": log1p,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: elementwise("relu", x), elementwise("scale", x, 0.5)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op: {op}") from None
    return fn(*args)


# ----------------- shape ops ----------------- #

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise DimensionError("matmul batch dimensions do not broadcast", a.shape, b.shape) from None
    av, bv = a.values, b.values

    def backward_fn(g):
        return np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)

    return _make(out, (a, b), "matmul", backward_fn)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.values, axis=axis, keepdims=keepdims), (a,), "sum", backward_fn)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / max(count, 1))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _make(a.values.reshape(tuple(shape)), (a,), "reshape", lambda g: (g.reshape(orig),))


def swapaxes(a: ArrayLike, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.values, ax1, ax2), (a,), "swapaxes",
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    # geri yönde _unbroadcast toplar
    return _make(np.broadcast_to(a.values, tuple(shape)).copy(), (a,), "broadcast_to", lambda g: (g,))


def getitem(a: ArrayLike, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.values[index], (a,), "getitem", backward_fn)


def take(a: ArrayLike, indices: Sequence[int], axis: int = 0) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.values, idx, axis=axis), (a,), "take", backward_fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.values for p in parts], axis=axis), parts, "concat", backward_fn)


def masked_fill(a: ArrayLike, mask: np.ndarray, value: float) -> Tensor:
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _make(np.where(mask, value, a.values), (a,), "masked_fill", lambda g: (g * keep,))


# ----------------- reductions used by the losses ----------------- #

def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid", a.shape)
    shifted = a.values - np.max(a.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (a,), "softmax", backward_fn)


def log_sum_exp(x: ArrayLike, indices: Sequence[int]) -> Tensor:
    """max(x_I) + log Σ_{i∈I} exp(x_i − max); gradient is the softmax over I."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise DimensionError("log_sum_exp expects a vector", x.shape)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InvalidRiskSetError("log_sum_exp over an empty index set")
    if idx.min() < 0 or idx.max() >= x.shape[0]:
        raise InvalidRiskSetError(f"risk-set indices out of bounds for length {x.shape[0]}")
    sub_values = x.values[idx]
    m = np.max(sub_values)
    e = np.exp(sub_values - m)
    total = np.sum(e)
    weights = e / total
    n = x.shape[0]

    def backward_fn(g):
        out = np.zeros(n, dtype=DTYPE)
        np.add.at(out, idx, g * weights)
        return (out,)

    return _make(np.asarray(m + np.log(total)), (x,), "log_sum_exp", backward_fn)


def masked_log_sum_exp(x: ArrayLike, mask: np.ndarray) -> Tensor:
    """Row-wise log_sum_exp of x over the True entries of each mask row."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 1 or mask.ndim != 2 or mask.shape[1] != x.shape[0]:
        raise DimensionError("masked_log_sum_exp shape mismatch", x.shape, mask.shape)
    if mask.shape[0] and not mask.any(axis=1).all():
        raise InvalidRiskSetError("masked_log_sum_exp with an empty row")
    full = np.where(mask, x.values[None, :], -np.inf)
    m = np.max(full, axis=1, keepdims=True) if mask.shape[0] else np.zeros((0, 1))
    e = np.where(mask, np.exp(full - m), 0.0)
    totals = e.sum(axis=1, keepdims=True)
    weights = e / totals

    def backward_fn(g):
        return ((g[:, None] * weights).sum(axis=0),)

    return _make((m + np.log(totals)).reshape(-1), (x,), "masked_log_sum_exp", backward_fn)


# ----------------- perturbations ----------------- #

def dropout(a: ArrayLike, rate: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout; the mask is saved on the node so backward sees the same draw."""
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.values * keep, (a,), "dropout", lambda g: (g * keep,))


def gaussian_noise(a: ArrayLike, sigma: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    a = as_tensor(a)
    if not train or sigma <= 0.0:
        return a
    eta = rng.normal(0.0, sigma, size=a.shape)
    return _make(a.values + eta, (a,), "gaussian_noise", lambda g: (g,))
