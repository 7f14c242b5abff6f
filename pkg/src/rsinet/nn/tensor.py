"""Dense float64 tensors with a reverse-mode differentiation graph."""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class NonFiniteError(FloatingPointError):
    """Raised when an operator produces NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar root, double backward)."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(extent <= 0 for extent in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar, resolved lazily to avoid an import cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self) -> Tensor:
        from . import ops
        return ops.transpose(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an operator output, recording it in the graph when any parent needs a gradient."""
    if not np.isfinite(data).all():
        raise NonFiniteError("operator produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.grad = None
    out._released = False
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf that requires it.

    The graph is released afterwards; a second call on the same root raises.
    """
    if loss._released:
        raise GraphError("backward already ran on this graph; run the forward pass again")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("root does not depend on any tensor that requires grad")

    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if node._backward is None:
            if g is not None and not node._released:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
        node._parents = ()
        node._backward = None
        node._released = True
