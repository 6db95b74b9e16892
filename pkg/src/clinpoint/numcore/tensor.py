"""Dense float64 tensors with a tape-based reverse-mode differentiation engine.

Broadcasting rule (the only one accepted by binary operations):

* equal shapes;
* one operand is a scalar (a 0-d tensor or a Python number);
* one operand's shape is a trailing suffix of the other's (``(3,)`` against
  ``(5, 3)``), i.e. expansion along leading axes;
* equal rank where one operand has extent 1 on some axes and the other
  operand matches everywhere else (``(5, 1)`` against ``(5, 4)``).

Anything requiring both operands to expand is rejected with a ``ShapeError``
naming both shapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = []


_state = _TapeState()


def current_tape() -> "Tape | None":
    return _state.stack[-1] if _state.stack else None


class Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so walking the list backwards is a
    valid reverse topological order and touches every node exactly once.
    Tapes are per-thread; nest them with ``with Tape():``.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable, op: str) -> None:
        node = Node(out, parents, backward_fn, op)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._node is None and not loss.requires_grad:
            return
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            out = node.out
            g = out.grad
            if g is None:
                continue
            grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent._accumulate(pg)
            # intermediate adjoints are not needed once propagated
            if not out.is_leaf:
                out.grad = None


class no_grad:
    """Suspend recording: operations inside run without any tape."""

    def __enter__(self):
        self._saved = _state.stack
        _state.stack = []
        return self

    def __exit__(self, *exc):
        _state.stack = self._saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr is data and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None

    # -- introspection -------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = np.broadcast_to(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None if not isinstance(self, Parameter) else np.zeros_like(self.data)

    def backward(self) -> None:
        tape = current_tape()
        if tape is None:
            raise RuntimeError("backward() called outside an active Tape")
        tape.backward(self)

    # -- operator sugar (implementations live in ops) --------------------
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

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


class Parameter(Tensor):
    """A named trainable tensor whose gradient is always allocated."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def is_leaf(self) -> bool:
        return True

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` and record it on the active tape if any parent is differentiable."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, tuple(parents), backward_fn, op)
    return out


def zero_grads(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)
