"""Tape-based reverse-mode differentiation over numpy arrays.

Every op returns a new :class:`Tensor` whose ``_backward`` closure maps the
output gradient to one gradient per parent.  Values are never mutated after
an op writes them, so independent tapes can run concurrently.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import NonFiniteError

_PRECISIONS = {
    "32": np.float32,
    "float32": np.float32,
    "fp32": np.float32,
    "64": np.float64,
    "float64": np.float64,
    "fp64": np.float64,
}

_state = threading.local()


def _current():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.check_finite = False
        _state.grad_enabled = True
    return _state


def get_dtype():
    return _current().dtype


def set_precision(mode) -> None:
    """Select the compute dtype for newly created tensors ("32" or "64")."""
    key = str(mode).lower()
    if key not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of 32, 64")
    _current().dtype = _PRECISIONS[key]


def precision_name(dtype=None) -> str:
    return "64" if np.dtype(dtype or get_dtype()) == np.float64 else "32"


@contextlib.contextmanager
def precision(mode):
    state = _current()
    previous = state.dtype
    set_precision(mode)
    try:
        yield
    finally:
        state.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Build no tape inside the block (serving and evaluation)."""
    state = _current()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Validate every op output for NaN/Inf while active (debug aid)."""
    state = _current()
    previous = state.check_finite
    state.check_finite = enabled
    try:
        yield
    finally:
        state.check_finite = previous


def as_array(value, dtype=None) -> np.ndarray:
    dtype = dtype or get_dtype()
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    """A dense real array and its position on the tape.

    Public operations treat tensors as matrices (rows x cols); a leading
    batch axis is allowed so that per-user attention can be stacked.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable] = None,
        op: str = "leaf",
        requires_grad: Optional[bool] = None,
    ):
        self.data = data if isinstance(data, np.ndarray) else as_array(data)
        if requires_grad is None:
            requires_grad = _current().grad_enabled and any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.op = op
        if requires_grad:
            self._parents = tuple(parents)
            self._backward = backward
        else:
            # constant subgraph: drop references so that inference keeps no tape
            self._parents = ()
            self._backward = None
        if _current().check_finite and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values produced by op {op!r}")

    # -- shape helpers -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def rows(self):
        return self.data.shape[-2] if self.data.ndim >= 2 else 1

    @property
    def cols(self):
        return self.data.shape[-1]

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar ------------------------------------------------
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

    def __truediv__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return ops.scale(self, 1.0 / other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops

        return ops.getitem(self, key)

    @property
    def T(self):
        from . import ops

        return ops.transpose(self)

    # -- differentiation -----------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(param) into every reachable Parameter."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        backward(self, grad)


class Parameter(Tensor):
    """A trainable leaf with a named gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = ""):
        super().__init__(as_array(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        """Replace the value in place (optimizer updates, checkpoint loads)."""
        value = np.asarray(value)
        if value.shape != self.data.shape:
            raise ValueError(
                f"cannot assign shape {value.shape} to parameter {self.name!r} of shape {self.data.shape}"
            )
        self.data = value.astype(self.data.dtype, copy=True)
        if self.grad.dtype != self.data.dtype:
            self.grad = np.zeros_like(self.data)

    def cast(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def constant(value) -> Tensor:
    return Tensor(as_array(value), requires_grad=False)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _topological(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(root: Tensor, grad) -> None:
    if not root.requires_grad:
        return
    grads = {id(root): np.asarray(grad, dtype=root.data.dtype)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node._backward is None:
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
