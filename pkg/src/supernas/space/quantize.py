"""Simulated quantization: PACT for activations, DoReFa-style for weights.

Both run in 32-bit floats and use straight-through gradients, so quantized
paths remain trainable on the shared tape.
"""

from __future__ import annotations

import numpy as np

from ..engine.ops import _wrap
from ..engine.tensor import Tensor, active_tape
from ..errors import ConfigError

__all__ = ["fake_quantize", "pact_quantize", "dorefa_quantize"]


def pact_quantize(x: Tensor, bits: int, alpha: Tensor) -> Tensor:
    """Clip to [0, alpha] and round onto a uniform grid of 2^bits - 1 steps.

    Straight-through input gradient inside the clip range; the clipping level
    receives the summed gradient of saturated positions.
    """
    _check_bits(bits)
    a = float(alpha.data)
    if a <= 0:
        raise ConfigError(f"PACT clipping level must be positive, got {a}")
    levels = (1 << bits) - 1
    xc = np.minimum(np.maximum(x.data, 0), a)
    y = _wrap(np.round(xc * (levels / a)) * (a / levels))
    tape = active_tape()
    if tape is not None:
        def pull(g):
            inside = (x.data > 0) & (x.data < a)
            x.add_grad(g * inside, own=True)
            sat = np.asarray((g * (x.data >= a)).sum(), dtype=alpha.data.dtype)
            alpha.add_grad(sat.reshape(alpha.data.shape), own=True)
        tape.record(y, pull)
    return y


def dorefa_quantize(w: Tensor, bits: int) -> Tensor:
    """tanh-normalize weights to [0,1], round to 2^bits levels, map to [-1,1].

    Straight-through (identity) gradient.
    """
    _check_bits(bits)
    t = np.tanh(w.data)
    m = np.abs(t).max()
    levels = (1 << bits) - 1
    if m == 0:
        y = _wrap(np.zeros_like(w.data))
    else:
        wn = t / (2 * m) + 0.5
        y = _wrap((np.round(wn * levels) / levels) * 2 - 1)
    tape = active_tape()
    if tape is not None:
        def pull(g):
            w.add_grad(g)
        tape.record(y, pull)
    return y


def fake_quantize(x: Tensor, bits: int, mode: str = "activation",
                  alpha: Tensor | None = None) -> Tensor:
    """Dispatch to PACT (activation) or DoReFa (weight) quantization."""
    if mode == "activation":
        if alpha is None:
            raise ConfigError("activation quantization requires a clipping level")
        return pact_quantize(x, bits, alpha)
    if mode == "weight":
        return dorefa_quantize(x, bits)
    raise ConfigError(f"unknown quantization mode {mode!r}")


def _check_bits(bits: int) -> None:
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 8:
        raise ConfigError(f"bit width must be an integer in [1, 8], got {bits!r}")
