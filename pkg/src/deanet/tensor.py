"""Dense NCHW tensors with tape-based reverse-mode autodiff.

A :class:`Tensor` wraps a numpy array.  Operations in :mod:`deanet.ops`
record a node on the active :class:`Tape` whenever one of their inputs
requires a gradient; :func:`backward` replays the tape in reverse.

    with Tape() as tape:
        y = ops.conv2d(x, k, b, spec)
        loss = ops.l1_loss(y, target)
    backward(tape, loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class NumericError(ArithmeticError):
    """Raised when an operation receives or would produce non-finite values."""


class Tensor:
    """A numeric array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the actual ops live in deanet.ops.
    def __add__(self, other):
        from deanet import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from deanet import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from deanet import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from deanet import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from deanet import ops
        return ops.scale(self, -1.0)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for field in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "groups"):
            if getattr(self, field) < 1:
                raise DimensionError(f"ConvSpec.{field} must be positive, got {getattr(self, field)}")
        if self.padding < 0:
            raise DimensionError(f"ConvSpec.padding must be >= 0, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise DimensionError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )

    @classmethod
    def square(cls, in_channels, out_channels, k, stride=1, padding=None, groups=1) -> "ConvSpec":
        if padding is None:
            padding = k // 2
        return cls(in_channels, out_channels, k, k, stride, padding, groups)

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h + 2 * self.padding < self.kernel_h or w + 2 * self.padding < self.kernel_w or oh < 1 or ow < 1:
            raise DimensionError(f"input {h}x{w} too small for {self}")
        return oh, ow


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str = ""


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, inputs, output: Tensor, backward_fn, op: str = "") -> None:
        self.nodes.append(Node(tuple(inputs), output, backward_fn, op))
        self._tracked.add(id(output))


_local = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class DecisionLog:
    """Collects the discrete branch choices (ReLU masks, argmax indices, signs)
    made by non-smooth ops while active.  Two evaluations with equal logs lie
    on the same smooth piece of the function.
    """

    def __init__(self):
        self.entries: list[bytes] = []

    def __enter__(self) -> "DecisionLog":
        _decision_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _decision_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def fingerprint(self) -> bytes:
        return b"|".join(self.entries)


def _decision_stack() -> list[DecisionLog]:
    if not hasattr(_local, "decisions"):
        _local.decisions = []
    return _local.decisions


def note_decision(arr: np.ndarray) -> None:
    stack = _decision_stack()
    if stack:
        stack[-1].entries.append(np.ascontiguousarray(arr).tobytes())


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Repeated calls accumulate; call ``zero_grad`` on leaves to reset.
    """
    if loss.data.size != 1 or loss.data.ndim != 4:
        raise DimensionError(f"loss must be a 1x1x1x1 tensor, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.tracks(t):
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi.astype(t.data.dtype, copy=False)
            if id(t) in tape._tracked:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
