"""Reverse-mode differentiable tensors over float64 numpy arrays.

A Tensor pairs a value array with a same-shape gradient buffer.  Operations
(see ops.py) optionally record themselves onto a Tape; calling ``backward``
replays the tape in reverse, accumulating gradients with ``+=`` so that
running backward for two losses over shared parameters adds up exactly.
"""

from __future__ import annotations

import numpy as np


class TraceConsumedError(RuntimeError):
    """Raised when backward is invoked twice on the same tape."""


class Tensor:
    """Dense float64 array with a zero-initialised gradient buffer.

    The gradient buffer is materialised lazily on first access (it is
    indistinguishable from an eager all-zero buffer, but keeps pure forward
    evaluation allocation-free).
    """

    __slots__ = ("data", "_grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


class Tape:
    """Ordered record of executed primitives for one forward evaluation.

    Each record is a closure that propagates the output gradient of its
    primitive into the operands' ``grad`` buffers.  Records are replayed
    strictly in reverse execution order and a tape may be consumed at most
    once.
    """

    __slots__ = ("_records", "consumed")

    def __init__(self):
        self._records: list = []
        self.consumed = False

    def record(self, backward_fn) -> None:
        self._records.append(backward_fn)

    def __len__(self) -> int:
        return len(self._records)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/dT into every tensor reached by the tape.

    ``loss`` must be the scalar produced by the final primitive on ``tape``.
    """
    if tape.consumed:
        raise TraceConsumedError("tape has already been consumed by backward")
    if loss.data.ndim != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape.consumed = True
    loss.grad = loss.grad + 1.0
    for fn in reversed(tape._records):
        fn()


def detach(x: Tensor) -> Tensor:
    """Copy of ``x`` cut off from any tape (no gradient flows back)."""
    return Tensor(x.data.copy(), requires_grad=False)
