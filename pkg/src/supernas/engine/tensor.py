"""Dense tensors and the reverse-mode gradient tape.

A ``Tensor`` wraps a numpy array (float32 for training state; tests may use
float64) together with an optional gradient buffer of the same shape.  Ops in
``supernas.engine.ops`` record a closure per output on the active ``Tape``;
``backward`` replays the tape in exact reverse execution order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional

import numpy as np

from ..errors import ShapeError, TapeError

__all__ = ["Tensor", "Tape", "recording", "active_tape", "backward"]


class Tensor:
    """A numpy-backed array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def add_grad(self, g: np.ndarray, own: bool = False) -> None:
        """Accumulate ``g`` into the gradient buffer.

        ``own=True`` promises ``g`` is a freshly allocated array the caller
        will not reuse, letting the first contribution skip a copy.
        """
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


# Region of a parameter active in one step: per-leading-axis prefix lengths,
# e.g. (c_out, c_in) for a sliced kernel, (c,) for a BN vector, None for all.
Region = Optional[tuple[int, ...]]


def region_index(region: Region) -> tuple:
    """Convert a prefix region into a numpy index expression."""
    if region is None:
        return (Ellipsis,)
    return tuple(slice(0, n) for n in region)


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Each entry holds the op's output tensor and a pull closure that maps the
    output gradient into the inputs' gradient buffers.  ``touched`` collects
    the trainable parameters engaged by the pass together with their active
    prefix regions, for the optimizer; model layers register these.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._produced: set[int] = set()
        self.touched: list[tuple[Tensor, Region]] = []

    def record(self, out: Tensor, pull: Callable[[np.ndarray], None]) -> None:
        self._ops.append((out, pull))
        self._produced.add(id(out))

    def touch(self, param: Tensor, region: Region = None) -> None:
        self.touched.append((param, region))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def __len__(self) -> int:
        return len(self._ops)


_STATE = threading.local()


def active_tape() -> Optional[Tape]:
    """The tape currently recording on this thread, or None."""
    return getattr(_STATE, "tape", None)


@contextmanager
def recording(tape: Tape) -> Iterator[Tape]:
    """Make ``tape`` the active tape for ops executed in this block."""
    prev = getattr(_STATE, "tape", None)
    _STATE.tape = tape
    try:
        yield tape
    finally:
        _STATE.tape = prev


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate gradients of every tensor reachable backward from ``loss``.

    Tensors that did not participate in the taped computation keep their
    gradient buffer absent.
    """
    if not tape.produced(loss):
        raise TapeError("loss tensor was not produced by this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, pull in reversed(tape._ops):
        if out.grad is not None:
            pull(out.grad)
