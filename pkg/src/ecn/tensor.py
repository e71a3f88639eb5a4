"""Dense tensors with reverse-mode differentiation.

Feature maps are stored as ``(batch, channels, height, width)`` arrays in
row-major order.  Every differentiable operation returns a new :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to
parent gradients.  :func:`backward` walks that record once in reverse
topological order.

Gradients accumulate into ``Tensor.grad`` and are never cleared implicitly;
call :meth:`Tensor.zero_grad` between optimisation steps.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "backward",
    "precision",
    "get_dtype",
    "add",
    "mul",
    "scale",
    "relu",
    "sum_all",
    "concat_channels",
    "slice_channels",
]

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

# Checking every forward result for NaN/Inf is cheap relative to convolutions.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def get_dtype() -> type:
    return _default_dtype


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    ``"float32"`` is the training mode, ``"float64"`` the verification mode
    used by gradient checks.
    """
    global _default_dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    previous = _default_dtype
    _default_dtype = _PRECISIONS[mode]
    try:
        yield
    finally:
        _default_dtype = previous


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_default_dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError("operation produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)
    return Tensor(data)


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"tensors in one graph must share a precision, got {sorted(map(str, dtypes))}")


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    on_stack: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            on_stack.discard(id(node))
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        on_stack.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) in on_stack:
                raise RuntimeError("cycle detected in computation graph")
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    ``loss`` must hold exactly one element (shape ``(1, 1, 1, 1)`` for the
    losses in this package).  Leaf gradients are added to whatever is already
    stored there.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires a gradient")

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
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


Scalar = Union[int, float]


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + a.data.dtype.type(b)
        return _make(out, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}")
    _check_same_dtype(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: Scalar) -> Tensor:
    f = a.data.dtype.type(factor)
    return _make(a.data * f, (a,), lambda g: (g * f,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))
    return _make(out, (a,), lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, shaped ``(1, 1, 1, 1)``."""
    out = np.asarray(a.data.sum(), dtype=a.dtype).reshape(1, 1, 1, 1)
    shape = a.shape
    return _make(out, (a,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def concat_channels(tensors: Iterable[Tensor]) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise ValueError("nothing to concatenate")
    _check_same_dtype(*parts)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {p.shape} onto {ref} along channels")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _make(out, parts, back)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ValueError(f"channel slice [{start}:{stop}] out of range for {a.shape[1]} channels")
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), (a,), back)
