"""Activation and weight quantizers and their straight-through gradients."""

import numpy as np
import pytest

from supernas.engine import ops
from supernas.engine.tensor import Tape, Tensor, backward, recording
from supernas.errors import ConfigError
from supernas.space.quantize import (dorefa_quantize, fake_quantize,
                                     pact_quantize)

import fd


def _alpha(value=1.5):
    return Tensor(np.asarray(value, dtype=np.float32))


def test_pact_output_lies_on_clipped_grid():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(0, 1.2, (64,)).reshape(4, 16).astype(np.float32))
    for bits in (1, 2, 4):
        a = 1.5
        y = pact_quantize(x, bits, _alpha(a)).data
        levels = (1 << bits) - 1
        steps = y * levels / a
        np.testing.assert_allclose(steps, np.round(steps), atol=1e-6)
        assert y.min() >= 0 and y.max() <= a


def test_pact_is_idempotent_on_its_grid():
    # alpha/levels = 0.5 is exact in binary, so requantizing is a no-op
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(0.7, 0.6, (5, 7)).astype(np.float32))
    y1 = pact_quantize(x, 2, _alpha(1.5))
    y2 = pact_quantize(y1, 2, _alpha(1.5))
    np.testing.assert_array_equal(y1.data, y2.data)


def test_pact_straight_through_gradients():
    # compare against the same loss applied to the already-quantized values:
    # x receives the downstream gradient masked to the open clip interval,
    # alpha the sum over saturated positions
    rng = np.random.default_rng(2)
    vals = np.concatenate([
        rng.uniform(-1, -0.1, 5), rng.uniform(0.1, 1.4, 10),
        rng.uniform(1.6, 3.0, 5)]).reshape(4, 5).astype(np.float32)
    labels = np.array([0, 2, 1, 3])
    x = Tensor(vals.copy())
    alpha = _alpha(1.5)
    with recording(Tape()) as tape:
        y = pact_quantize(x, 2, alpha)
        backward(tape, ops.softmax_cross_entropy(y, labels))
    ref = Tensor(pact_quantize(Tensor(vals.copy()), 2, _alpha(1.5)).data)
    with recording(Tape()) as tape:
        backward(tape, ops.softmax_cross_entropy(ref, labels))
    down = ref.grad
    inside = (vals > 0) & (vals < 1.5)
    np.testing.assert_allclose(x.grad, down * inside, atol=1e-7)
    want_alpha = (down * (vals >= 1.5)).sum()
    np.testing.assert_allclose(alpha.grad, want_alpha, atol=1e-7)


def test_pact_alpha_gradient_matches_fd_when_saturated():
    # with every input clipped or negative the alpha gradient is exact,
    # so a finite difference must agree
    rng = np.random.default_rng(3)
    vals = np.concatenate([rng.uniform(-2, -0.3, 8),
                           rng.uniform(2.0, 4.0, 8)])
    rng.shuffle(vals)
    x = Tensor(vals.reshape(4, 4), dtype=np.float64)
    alpha = Tensor(np.asarray(1.5), dtype=np.float64)
    checks = fd.check_case(
        "pact/alpha",
        lambda: pact_quantize(x, 2, alpha),
        {"alpha": alpha}, rng, coords=1)
    assert all(rel < 1e-3 for _, rel in checks)


def test_pact_validation():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ConfigError):
        pact_quantize(x, 0, _alpha())
    with pytest.raises(ConfigError):
        pact_quantize(x, 9, _alpha())
    with pytest.raises(ConfigError):
        pact_quantize(x, 4, _alpha(0.0))


def test_dorefa_grid_and_extremes():
    rng = np.random.default_rng(4)
    w = Tensor(rng.normal(0, 1, (6, 6)).astype(np.float32))
    for bits in (1, 2, 4):
        y = dorefa_quantize(w, bits).data
        levels = (1 << bits) - 1
        steps = (y + 1) / 2 * levels
        np.testing.assert_allclose(steps, np.round(steps), atol=1e-5)
        assert y.min() >= -1 and y.max() <= 1
    # the largest-magnitude weights map to the grid ends
    i = np.unravel_index(np.argmax(np.abs(np.tanh(w.data))), w.data.shape)
    y4 = dorefa_quantize(w, 4).data
    assert abs(y4[i]) == 1.0


def test_dorefa_one_bit_is_sign():
    w = Tensor(np.array([[-0.8, -0.01, 0.3], [1.2, -2.0, 0.05]],
                        dtype=np.float32))
    y = dorefa_quantize(w, 1).data
    np.testing.assert_array_equal(y, np.sign(w.data))


def test_dorefa_zero_weights_stay_zero():
    w = Tensor(np.zeros((3, 3), dtype=np.float32))
    np.testing.assert_array_equal(dorefa_quantize(w, 3).data, 0)


def test_dorefa_straight_through_is_identity():
    rng = np.random.default_rng(5)
    vals = rng.normal(0, 1, (4, 6)).astype(np.float32)
    labels = np.array([1, 0, 5, 2])
    w = Tensor(vals.copy())
    with recording(Tape()) as tape:
        y = dorefa_quantize(w, 2)
        backward(tape, ops.softmax_cross_entropy(y, labels))
    ref = Tensor(dorefa_quantize(Tensor(vals.copy()), 2).data)
    with recording(Tape()) as tape:
        backward(tape, ops.softmax_cross_entropy(ref, labels))
    np.testing.assert_allclose(w.grad, ref.grad, atol=1e-7)


def test_fake_quantize_dispatch():
    x = Tensor(np.full((2, 2), 0.4, dtype=np.float32))
    got = fake_quantize(x, 2, mode="activation", alpha=_alpha())
    np.testing.assert_array_equal(
        got.data, pact_quantize(x, 2, _alpha()).data)
    got = fake_quantize(x, 2, mode="weight")
    np.testing.assert_array_equal(got.data, dorefa_quantize(x, 2).data)
    with pytest.raises(ConfigError):
        fake_quantize(x, 2, mode="activation")
    with pytest.raises(ConfigError):
        fake_quantize(x, 2, mode="bogus")
