"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array together with the recipe that produced it.
Operations (here and in `irrcnn.ops`) build a computation graph; calling
`backward()` on a scalar result walks that graph in reverse topological
order and accumulates exact derivatives into `.grad` of every tensor that
requires them.

Conventions:
  - image tensors are laid out (batch, channels, height, width);
  - float input data keeps its precision (float32 for training, float64
    for reference gradient checks); non-float data is coerced to float32;
  - leaf tensors with requires_grad=True start with a zero gradient
    buffer, so a parameter that never influences the loss reports a zero
    gradient rather than a missing one;
  - tensors are immutable values after construction except for gradient
    accumulation (the optimizer, as the single owner of the parameters,
    updates `.data` in place between graph builds).

With `set_debug_checks(True)` every operation asserts its output is
finite, which turns silent NaN/Inf propagation into an immediate error.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_DEBUG_CHECKS = False
_GRAD_ENABLED = True


def set_debug_checks(enabled: bool) -> None:
    """Toggle finite-value assertions on every forward op (off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


@contextlib.contextmanager
def no_grad():
    """Context manager that skips graph recording (used for inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # Leaves get a zero buffer up front; see module docstring.
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._backward_ran = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        """Reset the accumulated gradient to zero."""
        if self.grad is not None:
            self.grad[...] = 0
        elif self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        """A new leaf tensor sharing this tensor's values, cut from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- backward pass ----------------------------------------------------

    def backward(self) -> None:
        """Propagate derivatives of this scalar to every reachable tensor.

        Raises if this tensor is not a scalar or if backward already ran
        from it (build a fresh graph and reset gradients to go again).
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._backward_ran:
            raise NumericError(
                "backward was already run from this tensor; rebuild the graph before calling again"
            )
        self._backward_ran = True

        order = self._topo_order()
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            parent_grads = node._backward_fn(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent._accumulate(pg)

    def _topo_order(self) -> list:
        """Ancestors of self in dependency order (parents before children)."""
        order: list = []
        seen: set = set()
        stack: list = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad += g

    # -- arithmetic (same-shape or scalar operands) ------------------------

    def __add__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        _check_binary_shapes("add", self, other)
        return make_op(
            self.data + other.data,
            (self, other),
            lambda g: (g, _reduce_to(g, other.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        _check_binary_shapes("sub", self, other)
        return make_op(
            self.data - other.data,
            (self, other),
            lambda g: (g, -_reduce_to(g, other.shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return _lift(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = _lift(other, self.dtype)
        _check_binary_shapes("mul", self, other)
        a, b = self.data, other.data
        return make_op(
            a * b,
            (self, other),
            lambda g: (g * b, _reduce_to(g * a, other.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return make_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("tensor exponent must be a python scalar")
        a = self.data
        return make_op(
            a ** exponent,
            (self,),
            lambda g: (g * exponent * a ** (exponent - 1),),
        )

    def sum(self) -> "Tensor":
        shape = self.data.shape
        return make_op(
            np.asarray(self.data.sum(), dtype=self.dtype),
            (self,),
            lambda g: (np.full(shape, g.item(), dtype=g.dtype),),
        )

    def mean(self) -> "Tensor":
        shape, n = self.data.shape, self.data.size
        return make_op(
            np.asarray(self.data.mean(), dtype=self.dtype),
            (self,),
            lambda g: (np.full(shape, g.item() / n, dtype=g.dtype),),
        )

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.data.shape
        return make_op(
            self.data.reshape(shape),
            (self,),
            lambda g: (g.reshape(old_shape),),
        )


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    # Only same-shape and scalar operands are supported; the architecture
    # needs nothing more and silent broadcasting hides shape bugs.
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient onto a scalar operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    """Wrap an op result, recording parents and the gradient rule.

    `backward_fn(out_grad)` must return one gradient array per parent
    (None for parents that need none). Recording is skipped when no parent
    requires a gradient or inside a `no_grad()` block.
    """
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values on finite inputs")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out
