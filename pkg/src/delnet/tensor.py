"""Dense tensor type and the reverse-mode tape that differentiates it.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`delnet.ops` record
themselves on the innermost active :class:`Tape` whenever one of their inputs
requires a gradient; outside a tape nothing is recorded and the same code
runs as plain inference.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

TRAIN_DTYPE = np.dtype(np.float32)
WIDE_DTYPE = np.dtype(np.float64)

_default_dtype = [TRAIN_DTYPE]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an operation's contract."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class TapeError(RuntimeError):
    pass


def default_dtype() -> np.dtype:
    return _default_dtype[-1]


@contextlib.contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Temporarily change the dtype new tensors are created with.

    ``precision("wide")`` selects float64 for oracle tests and gradient checks.
    """
    if dtype == "wide":
        dtype = WIDE_DTYPE
    elif dtype == "train":
        dtype = TRAIN_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (TRAIN_DTYPE, WIDE_DTYPE):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype.append(dtype)
    try:
        yield dtype
    finally:
        _default_dtype.pop()


class Tensor:
    """N-dimensional float array, optionally tracked for differentiation.

    Images use the ``[batch, channels, height, width]`` layout throughout.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (TRAIN_DTYPE, WIDE_DTYPE):
                dtype = data.dtype
            else:
                dtype = default_dtype()
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)

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
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; implementations live in delnet.ops.
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
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


_tape_stack: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _tape_stack[-1] if _tape_stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is
    already a topological order. ``backward`` may be called once per
    recording; call :meth:`reset` to clear gradients before calling again.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_output: dict[int, int] = {}
        self.gradients: dict[int, np.ndarray] | None = None
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        if not _tape_stack or _tape_stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not innermost")
        _tape_stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self._by_output[id(output)] = len(self.nodes)
        self.nodes.append(Node(op, tuple(inputs), output, backward))
        for t in inputs:
            if t.requires_grad and id(t) not in self._by_output:
                self._leaves[id(t)] = t

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(root)/d(.) back through every recorded node.

        Returns the gradient map keyed by ``id(tensor)``; prefer :meth:`grad`
        for lookups.
        """
        if root.size != 1:
            raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
        if id(root) not in self._by_output:
            raise TapeError("backward root was not produced on this tape")
        if self.gradients is not None:
            raise TapeError("backward already ran on this tape; call reset() first")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        stop = self._by_output[id(root)]
        for node in reversed(self.nodes[: stop + 1]):
            g_out = grads.get(id(node.output))
            if g_out is None:
                continue
            g_inputs = node.backward(g_out)
            for t, g in zip(node.inputs, g_inputs):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise TapeError(f"{node.op}: gradient shape {g.shape} != input shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        self.gradients = grads
        return grads

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward root w.r.t. ``tensor``; zeros if unreachable."""
        if self.gradients is None:
            raise TapeError("backward has not been run on this tape")
        g = self.gradients.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def reset(self) -> None:
        self.gradients = None


def tracking(*inputs: Tensor) -> Tape | None:
    """Tape to record on, or None when no input needs a gradient."""
    tape = active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in inputs):
        return tape
    return None
