"""SGD with momentum, weight decay, and per-region updates.

When a forward pass only engaged a prefix of a shared parameter (a sliced
kernel, the first c entries of a BN vector), the update must leave the rest
of the tensor and its velocity untouched.  The tape's touched list carries
exactly those (parameter, region) pairs.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Region, Tape, Tensor, region_index

__all__ = ["SGD"]


class SGD:
    """v <- momentum*v + grad + wd*p ; p <- p - lr*v, applied per region."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 momentum: float = 0.9, weight_decay: float = 4e-5):
        self.params = dict(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._names = {id(p): name for name, p in self.params.items()}

    def step(self, tape: Tape) -> None:
        seen: set[tuple[int, Region]] = set()
        for param, region in tape.touched:
            pid = id(param)
            if pid not in self._names:
                continue
            key = (pid, region)
            if key in seen:
                continue
            seen.add(key)
            self._apply(param, region)

    def _apply(self, param: Tensor, region: Region) -> None:
        idx = region_index(region)
        p = param.data[idx]
        if param.grad is None:
            g = np.zeros_like(p)
        else:
            g = param.grad[idx]
        if g.shape != p.shape:
            raise ShapeError(
                f"gradient region {g.shape} does not match parameter region {p.shape}"
            )
        v = self.velocity[self._names[id(param)]][idx]
        v *= self.momentum
        v += g
        if self.weight_decay:
            v += self.weight_decay * p
        p -= self.lr * v

    def zero_grad(self, tape: Tape) -> None:
        for param, _region in tape.touched:
            param.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Velocity buffers keyed for checkpointing."""
        return {f"velocity.{name}": v for name, v in self.velocity.items()}

    def load_state_tensors(self, named: dict[str, np.ndarray]) -> None:
        for name, v in self.velocity.items():
            key = f"velocity.{name}"
            if key in named:
                arr = named[key]
                if arr.shape != v.shape:
                    raise ShapeError(
                        f"velocity {name} shape {arr.shape} != {v.shape}"
                    )
                v[...] = arr
