"""Dense numpy-backed tensors with a reverse-mode autodiff tape.

The graph is recorded implicitly: every differentiable op links its output
to its inputs and stores a backward rule. :class:`Tape` linearises the graph
reachable from a scalar loss into topological order and :func:`backward`
walks it in reverse.

Training runs in float32; gradient checking runs in float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread (inference mode)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def relu(self) -> Tensor:
        return relu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def sum(self) -> Tensor:
        return tensor_sum(self)

    def mean(self) -> Tensor:
        return mean(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=dtype), ()), dtype=dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op's forward output and, if needed, attach it to the graph."""
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def create_tensor(shape: Sequence[int], fill=0.0, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor from a shape and either a scalar fill or a flat value list."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    n = int(np.prod(shape))
    if np.isscalar(fill):
        data = np.full(shape, fill, dtype=dtype)
    else:
        values = np.asarray(fill, dtype=dtype).ravel()
        if values.size != n:
            raise ShapeError(f"{values.size} values cannot fill shape {shape} ({n} elements)")
        data = values.reshape(shape)
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class Tape:
    """Operations reachable from an output, in topological order.

    Leaves come before everything that consumes them; the output is last.
    """

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.entries)

    @property
    def output(self) -> Tensor:
        return self.entries[-1]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.entries if t.is_leaf]


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    if tape is None:
        tape = Tape.record(loss)
    elif tape.output is not loss:
        raise ContractError("loss is not the final entry of the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.entries):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ, {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim == 0 and a.ndim != 0:
        # scalar constant offset
        return make_result(a.data + b.data, (a, b), lambda g: (g, np.asarray(g.sum(), dtype=g.dtype)), "add")
    _check_same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)
    return make_result(a.data * f, (a,), lambda g: (g * f,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, a.dtype.type(0)), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-softplus(-x)) never overflows
    return np.exp(-np.logaddexp(x.dtype.type(0), -x))


def sigmoid_backward(g: np.ndarray, s: np.ndarray) -> np.ndarray:
    return g * s * (1 - s)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_result(s, (a,), lambda g: (sigmoid_backward(g, s),), "sigmoid")


def tensor_sum(a: Tensor) -> Tensor:
    return make_result(
        np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),), "sum"
    )


def mean(a: Tensor) -> Tensor:
    n = a.size
    return make_result(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
        "mean",
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_result(data, (a,), lambda g: (g.reshape(old),), "reshape")
