"""Engine primitive tests: finite-difference gradients plus op semantics."""

import numpy as np
import pytest

from supernas.engine import ops
from supernas.engine.tensor import Tape, Tensor, backward, recording
from supernas.errors import GroupsError, LabelError, ShapeError, TapeError

import fd

PRIMITIVES = (
    "conv2d", "batch_norm", "relu", "linear", "global_avg_pool",
    "channel_split", "channel_concat", "channel_shuffle",
    "channel_interleave", "softmax_cross_entropy", "prefix_slice",
)


@pytest.fixture(scope="module")
def fd_results():
    return fd.run_all(seed=20)


@pytest.mark.parametrize("primitive", PRIMITIVES)
def test_gradients_match_finite_differences(fd_results, primitive):
    checks = fd_results[primitive]
    assert len(checks) >= 20
    worst = max(checks, key=lambda c: c[1])
    assert worst[1] < 1e-3, f"{worst[0]}: rel err {worst[1]:.2e}"


# ---------------------------------------------------------------------------
# conv dispatch correctness against a naive reference


def naive_conv(x, w, stride, padding, groups):
    b, c, h, wd = x.shape
    cout, cper, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    og = cout // groups
    out = np.zeros((b, cout, ho, wo), dtype=x.dtype)
    for bi in range(b):
        for oc in range(cout):
            g = oc // og
            xs = xp[bi, g * cper:(g + 1) * cper]
            for i in range(ho):
                for j in range(wo):
                    patch = xs[:, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[bi, oc, i, j] = (patch * w[oc]).sum()
    return out


@pytest.mark.parametrize("xs,ws,stride,padding,groups", [
    ((2, 5, 4, 4), (3, 5, 1, 1), 1, 0, 1),     # pointwise path
    ((2, 4, 6, 6), (4, 1, 3, 3), 1, 1, 4),     # depthwise stride 1
    ((1, 3, 7, 7), (3, 1, 5, 5), 2, 2, 3),     # depthwise stride 2
    ((2, 6, 5, 5), (4, 3, 3, 3), 2, 1, 2),     # grouped generic
    ((1, 4, 5, 5), (3, 4, 1, 1), 2, 0, 1),     # strided 1x1 -> generic
])
def test_conv_matches_naive_reference(xs, ws, stride, padding, groups):
    rng = np.random.default_rng(hash((xs, ws)) % 2**32)
    x = rng.normal(0, 1, xs)
    w = rng.normal(0, 1, ws)
    got = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                     stride=stride, padding=padding, groups=groups).data
    want = naive_conv(x, w, stride, padding, groups)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_untaped_big_batch_conv_chunks_consistently():
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (300, 3, 6, 6)).astype(np.float32)
    w = rng.normal(0, 1, (4, 3, 3, 3)).astype(np.float32)
    big = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
    small = np.concatenate([
        ops.conv2d(Tensor(x[i:i + 50]), Tensor(w), stride=1, padding=1).data
        for i in range(0, 300, 50)
    ])
    np.testing.assert_array_equal(big, small)


def test_conv_input_grad_flag_skips_input():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(0, 1, (2, 3, 4, 4)))
    w = Tensor(rng.normal(0, 1, (2, 3, 3, 3)))
    with recording(Tape()) as tape:
        y = ops.conv2d(x, w, padding=1, input_grad=False)
        sq = ops.global_avg_pool(y)
        loss = ops.softmax_cross_entropy(sq, np.array([0, 1]))
        backward(tape, loss)
    assert x.grad is None
    assert w.grad is not None


def test_conv_shape_and_group_errors():
    x = Tensor(np.zeros((2, 4, 4, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((4, 4, 4), dtype=np.float32)),
                   Tensor(np.zeros((2, 4, 1, 1), dtype=np.float32)))
    with pytest.raises(GroupsError):
        ops.conv2d(x, Tensor(np.zeros((2, 4, 1, 1), dtype=np.float32)),
                   groups=3)
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 1, 1), dtype=np.float32)))


# ---------------------------------------------------------------------------
# op semantics


def test_batch_norm_train_output_is_normalized():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(3.0, 2.0, (8, 5, 6, 6)).astype(np.float32))
    bn = ops.BnState.create(5)
    y = ops.batch_norm(x, bn, mode="train").data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_batch_norm_updates_running_stats_with_momentum():
    rng = np.random.default_rng(4)
    x = rng.normal(1.5, 1.2, (16, 3, 4, 4)).astype(np.float32)
    bn = ops.BnState.create(3)
    ops.batch_norm(Tensor(x), bn, mode="train")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(bn.running_mean, 0.9 * 0 + 0.1 * mean,
                               rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, 0.9 * 1 + 0.1 * var,
                               rtol=1e-5)


def test_batch_norm_calibrate_reports_exact_stats_untouched_buffers():
    rng = np.random.default_rng(5)
    x = rng.normal(-1.0, 0.7, (32, 4, 3, 3)).astype(np.float32)
    bn = ops.BnState.create(4)
    seen = {}
    ops.batch_norm(Tensor(x), bn, mode="calibrate",
                   on_stats=lambda m, v: seen.update(m=m, v=v))
    np.testing.assert_allclose(seen["m"], x.mean(axis=(0, 2, 3)), atol=1e-6)
    np.testing.assert_allclose(seen["v"], x.var(axis=(0, 2, 3)), atol=1e-6)
    assert np.all(bn.running_mean == 0) and np.all(bn.running_var == 1)


def test_batch_norm_eval_uses_override_stats():
    x = Tensor(np.ones((2, 2, 2, 2), dtype=np.float32))
    bn = ops.BnState.create(2)
    stats = (np.array([1.0, 1.0], dtype=np.float32),
             np.array([4.0, 4.0], dtype=np.float32))
    y = ops.batch_norm(x, bn, mode="eval", stats=stats).data
    np.testing.assert_allclose(y, 0.0, atol=1e-5)


def test_channel_interleave_equals_shuffle_of_concat():
    rng = np.random.default_rng(6)
    a = Tensor(rng.normal(0, 1, (2, 4, 3, 3)).astype(np.float32))
    b = Tensor(rng.normal(0, 1, (2, 4, 3, 3)).astype(np.float32))
    fused = ops.channel_interleave(a, b).data
    ref = ops.channel_shuffle(ops.channel_concat(a, b), groups=2).data
    np.testing.assert_array_equal(fused, ref)


def test_shuffle_permutation_values():
    np.testing.assert_array_equal(ops.shuffle_permutation(4, 2), [0, 2, 1, 3])
    np.testing.assert_array_equal(ops.shuffle_permutation(6, 3),
                                  [0, 2, 4, 1, 3, 5])
    with pytest.raises(ShapeError):
        ops.shuffle_permutation(5, 2)


def test_channel_split_halves_and_rejoins():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(0, 1, (2, 6, 2, 2)).astype(np.float32))
    a, b = ops.channel_split(x)
    assert a.data.shape == (2, 3, 2, 2)
    np.testing.assert_array_equal(ops.channel_concat(a, b).data, x.data)
    with pytest.raises(ShapeError):
        ops.channel_split(Tensor(np.zeros((2, 5, 2, 2), dtype=np.float32)))


def test_softmax_cross_entropy_matches_manual_value():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]], dtype=np.float64)
    labels = np.array([0, 2])
    got = float(ops.softmax_cross_entropy(
        Tensor(logits, dtype=np.float64), labels).data)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -np.log(p[[0, 1], labels]).mean()
    assert abs(got - want) < 1e-12


def test_softmax_cross_entropy_label_validation():
    logits = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(LabelError):
        ops.softmax_cross_entropy(logits, np.array([0.5, 1.0]))
    with pytest.raises(LabelError):
        ops.softmax_cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(ShapeError):
        ops.softmax_cross_entropy(logits, np.array([0]))


def test_prefix_slice_full_extent_is_identity():
    t = Tensor(np.zeros((3, 2, 1, 1), dtype=np.float32))
    assert ops.prefix_slice(t, 3) is t
    assert ops.prefix_slice(t, 3, 2) is t
    assert ops.prefix_slice(t, 2).data.shape == (2, 2, 1, 1)


def test_prefix_slice_grad_stays_in_region():
    rng = np.random.default_rng(8)
    base = Tensor(rng.normal(0, 1, (6, 5, 1, 1)).astype(np.float32))
    x = Tensor(rng.normal(0, 1, (2, 4, 3, 3)).astype(np.float32))
    with recording(Tape()) as tape:
        y = ops.conv2d(x, ops.prefix_slice(base, 5, 4))
        loss = ops.softmax_cross_entropy(ops.global_avg_pool(y),
                                         np.array([0, 1]))
        backward(tape, loss)
    assert np.all(base.grad[5:] == 0)
    assert np.all(base.grad[:5, 4:] == 0)
    assert np.any(base.grad[:5, :4] != 0)


def test_backward_rejects_foreign_and_nonscalar_losses():
    x = Tensor(np.zeros((2, 2), dtype=np.float32))
    with recording(Tape()) as tape:
        y = ops.linear(x, Tensor(np.zeros((2, 2), dtype=np.float32)),
                       Tensor(np.zeros(2, dtype=np.float32)))
    with pytest.raises(TapeError):
        backward(tape, Tensor(np.zeros((), dtype=np.float32)))
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_gradient_accumulates_across_reuse():
    # one tensor used twice must receive the sum of both slot contributions
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(0, 1, (2, 3, 2, 2)), dtype=np.float64)
    labels = np.array([0, 1])
    with recording(Tape()) as tape:
        y = ops.channel_concat(x, x)
        loss = ops.softmax_cross_entropy(ops.global_avg_pool(y), labels)
        backward(tape, loss)
    g2 = x.grad.copy()
    x.grad = None
    xc = Tensor(x.data.copy(), dtype=np.float64)
    with recording(Tape()) as tape:
        y = ops.channel_concat(x, xc)
        loss = ops.softmax_cross_entropy(ops.global_avg_pool(y), labels)
        backward(tape, loss)
    np.testing.assert_allclose(g2, x.grad + xc.grad, rtol=1e-12)
