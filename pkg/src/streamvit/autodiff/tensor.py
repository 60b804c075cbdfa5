"""Tensor, Parameter and the scoped reverse-mode tape."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError, StateError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def check_finite(arr: np.ndarray) -> None:
    """Reject NaN and +inf. -inf is tolerated as the attention-mask sentinel."""
    if np.isfinite(arr).all():
        return
    if np.isnan(arr).any():
        raise NonFiniteError("NaN produced")
    if np.isposinf(arr).any():
        raise NonFiniteError("+inf produced")


class Tensor:
    """Dense float32/float64 array, optionally tracked by the active tape."""

    __array_priority__ = 100.0

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        check_finite(arr)
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path: arr already has a float dtype
        check_finite(arr)
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; the implementations live in ops
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

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

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

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A learnable tensor with a gradient accumulator.

    Frozen parameters never enter the tape and never receive gradient.
    """

    def __init__(self, data, name: str = "", dtype=None, frozen: bool = False):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=not frozen)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def assign(self, arr: np.ndarray) -> None:
        arr = np.asarray(arr)
        if arr.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {arr.shape} to {self.data.shape}")
        check_finite(arr)
        self.data = arr.astype(self.data.dtype, copy=True)

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype}{flag})"


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Recording is scoped: only operations executed inside ``with tape:`` are
    recorded, so inference outside any tape carries no bookkeeping.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape scopes exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        self.nodes.append(_Node(out, parents, backward))
        self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def backward(tape: Tape | None, loss: Tensor) -> None:
    """Accumulate dloss/dparam into every Parameter reached from ``loss``.

    The tape is left intact, so calling this twice doubles every gradient.
    """
    if tape is None or not isinstance(tape, Tape):
        raise StateError("backward needs a recorded tape")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise StateError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Parameter] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if isinstance(parent, Parameter):
                leaves[key] = parent
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    # one += per parameter per pass keeps repeated passes exactly additive
    for key, param in leaves.items():
        g = grads[key]
        if g.shape != param.grad.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {param.grad.shape}")
        param.grad += g
