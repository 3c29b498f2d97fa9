"""Tensor storage and reverse-mode accumulation.

A `Tensor` wraps a numpy array (float32 unless a float64 array is supplied) and, when it
was produced by an operator while gradients are enabled, remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
"""

import logging
from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager

import numpy as np

from core.errors import InternalError, NumericError

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_float_array(data: np.ndarray | float | Sequence[float]) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    def __init__(
        self,
        data: np.ndarray | float | Sequence[float],
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = _as_float_array(data)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"


class Parameter(Tensor):
    def __init__(self, data: np.ndarray | float | Sequence[float], name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: BackwardFn,
    op: str,
) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, child_idx = stack.pop()
        key = id(node)
        if child_idx == 0:
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise InternalError(f"cycle detected at {node!r}")
            state[key] = 1
        if child_idx < len(node._parents):
            stack.append((node, child_idx + 1))
            parent = node._parents[child_idx]
            if state.get(id(parent)) == 1:
                raise InternalError(f"cycle detected at {parent!r}")
            if state.get(id(parent)) != 2:
                stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor, parameters: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf.

    Parameters given explicitly but not reached from `loss` end with a zero gradient.
    """
    if loss.size != 1:
        raise InternalError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        upstream = grads.pop(id(node), None)
        if upstream is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = upstream if node.grad is None else node.grad + upstream
            continue
        assert node._backward is not None
        parent_grads = node._backward(upstream)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = g if key not in grads else grads[key] + g
    for param in parameters:
        if param.grad is None:
            param.grad = np.zeros_like(param.data)
