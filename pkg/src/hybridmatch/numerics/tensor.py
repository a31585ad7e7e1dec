"""Tensor type and the gradient tape.

Computation is define-by-run: every differentiable primitive that touches a
tensor with ``requires_grad`` appends a node to the thread's active
:class:`Tape`.  :func:`backward` walks that tape in reverse execution order,
visiting each node exactly once, and then clears it.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from ..errors import ContractError

_FLOAT_TYPES = (np.float32, np.float64)


def as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.type not in _FLOAT_TYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """Dense real array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar; implementations live in ops ------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass(eq=False)
class Node:
    """One executed primitive: its inputs, output, and local backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()
# op name -> gradient multiplier; used only to test that gradient checks catch faults
_backward_faults: dict[str, float] = {}


def current_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the gradients produced by primitive ``op`` while active."""
    _backward_faults[op] = factor
    try:
        yield
    finally:
        _backward_faults.pop(op, None)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` in a tensor and tape it if any input needs a gradient."""
    result = Tensor(out)
    if _state.enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(op, tuple(inputs), result, backward_fn)
        result._node = node
        _state.tape.nodes.append(node)
    return result


def _accumulate(store: dict, key: int, g: np.ndarray) -> None:
    prev = store.get(key)
    store[key] = g if prev is None else prev + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that influences the scalar ``loss``.

    The tape is consumed: after this call it is empty and intermediate
    tensors no longer reference their producing nodes.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss._node is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
        tape.clear()
        return

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = pending.pop(id(node.output), None)
        if g_out is None:
            continue
        grads = node.backward(g_out)
        factor = _backward_faults.get(node.op)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if factor is not None:
                g = g * factor
            if g.shape != inp.shape:
                raise ContractError(
                    f"op {node.op!r} produced gradient of shape {g.shape} for input {inp.shape}"
                )
            if inp._node is None:
                inp.grad = g.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + g
            else:
                _accumulate(pending, id(inp), g)
    tape.clear()
