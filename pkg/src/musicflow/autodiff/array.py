"""
Dense arrays with reverse-mode differentiation.

An `Array` wraps a numpy buffer. Operators in `musicflow.autodiff.ops` record
themselves on the active `Tape` whenever one of their inputs requires a gradient;
`backward` replays those records in reverse and accumulates adjoints into the
leaves.
"""

from __future__ import annotations

from collections.abc import Callable
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any

import numpy as np

from musicflow.utils.errors import ShapeError

Adjoint = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

_ACTIVE_TAPE: ContextVar[Tape | None] = ContextVar("active_tape", default=None)


class Array:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Array:
        return Array(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Array(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the tape-aware implementations live in ops.
    def __add__(self, other: Array | float) -> Array:
        from musicflow.autodiff import ops

        return ops.add(self, other) if isinstance(other, Array) else ops.shift(self, other)

    def __radd__(self, other: float) -> Array:
        return self + other

    def __sub__(self, other: Array | float) -> Array:
        from musicflow.autodiff import ops

        return ops.sub(self, other) if isinstance(other, Array) else ops.shift(self, -other)

    def __mul__(self, other: Array | float) -> Array:
        from musicflow.autodiff import ops

        return ops.mul(self, other) if isinstance(other, Array) else ops.scale(self, other)

    def __rmul__(self, other: float) -> Array:
        return self * other

    def __truediv__(self, other: float) -> Array:
        return self * (1.0 / other)

    def __neg__(self) -> Array:
        return self * -1.0

    def __matmul__(self, other: Array) -> Array:
        from musicflow.autodiff import ops

        return ops.matmul(self, other)


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple[Array, ...]
    output: Array
    adjoint: Adjoint


class Tape:
    """Ordered log of the operations executed while the tape is active."""

    def __init__(self) -> None:
        self.records: list[Record] = []
        self._token = None

    def __enter__(self) -> Tape:
        if _ACTIVE_TAPE.get() is not None:
            raise RuntimeError("A tape is already active in this context")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.records)

    @staticmethod
    def active() -> Tape | None:
        return _ACTIVE_TAPE.get()

    def record(self, op: str, inputs: tuple[Array, ...], output: Array, adjoint: Adjoint) -> None:
        self.records.append(Record(op, inputs, output, adjoint))


def backward(tape: Tape, root: Array) -> list[Array]:
    """
    Propagate d(root)/d(leaf) into every leaf that requires a gradient.

    Args:
        tape: The tape the forward pass was recorded on.
        root: A single-element array (the loss).

    Returns:
        The leaves that received a gradient, in first-reached order.
    """
    if root.data.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)

    produced = {id(record.output) for record in tape.records}
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Array] = {}

    for record in reversed(tape.records):
        upstream = pending.pop(id(record.output), None)
        if upstream is None:
            continue
        for source, grad in zip(record.inputs, record.adjoint(upstream)):
            if grad is None or not source.requires_grad:
                continue
            key = id(source)
            pending[key] = pending[key] + grad if key in pending else grad
            if key not in produced:
                leaves.setdefault(key, source)

    if id(root) not in produced and root.requires_grad:
        leaves.setdefault(id(root), root)

    for key, leaf in leaves.items():
        grad = pending[key].reshape(leaf.shape).astype(leaf.dtype, copy=False)
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
    return list(leaves.values())
