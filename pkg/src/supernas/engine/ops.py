"""Differentiable array primitives.

Every op takes and returns ``Tensor`` objects, computes forward with plain
numpy, and (when a tape is active) records a pull closure that accumulates
input gradients.  Convolution dispatches to one of three lowerings: a pure
batched matmul for 1x1 convs, a kernel-offset loop for depthwise convs, and
a grouped patch-view (im2col) + matmul for everything else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..errors import GroupsError, LabelError, ShapeError, SliceError
from .tensor import Tensor, active_tape

__all__ = [
    "BnState",
    "conv2d",
    "batch_norm",
    "relu",
    "linear",
    "global_avg_pool",
    "channel_split",
    "channel_concat",
    "channel_shuffle",
    "channel_interleave",
    "shuffle_permutation",
    "softmax_cross_entropy",
    "prefix_slice",
]

# Above this batch size an untaped generic conv2d processes inputs in slices
# to keep the patch buffer bounded (calibration feeds the whole set at once).
_EVAL_CHUNK = 256


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    return t


def prefix_slice(t: Tensor, c_out: int, c_in: Optional[int] = None) -> Tensor:
    """A leading-prefix view of ``t`` along axis 0 (and axis 1 if ``c_in``).

    The result shares storage with ``t``; its backward accumulates into the
    matching region of ``t.grad``.  Slicing the full extent returns ``t``
    itself unchanged.
    """
    shape = t.data.shape
    if not 1 <= c_out <= shape[0]:
        raise SliceError(f"prefix {c_out} out of range for axis of size {shape[0]}")
    if c_in is not None:
        if t.data.ndim < 2:
            raise SliceError("c_in given for a tensor with fewer than 2 axes")
        if not 1 <= c_in <= shape[1]:
            raise SliceError(f"prefix {c_in} out of range for axis of size {shape[1]}")
    if c_out == shape[0] and (c_in is None or c_in == shape[1]):
        return t

    out = _wrap(t.data[:c_out] if c_in is None else t.data[:c_out, :c_in])

    tape = active_tape()
    if tape is not None:
        if c_in is None:
            def pull(g, t=t, c_out=c_out):
                t.ensure_grad()[:c_out] += g
        else:
            def pull(g, t=t, c_out=c_out, c_in=c_in):
                t.ensure_grad()[:c_out, :c_in] += g
        tape.record(out, pull)
    return out


def _conv_out_size(h: int, w: int, kh: int, kw: int, stride: int,
                   padding: int) -> tuple[int, int]:
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    return ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           groups: int = 1, input_grad: bool = True) -> Tensor:
    """Grouped 2d cross-correlation, NCHW layout, no bias.

    ``w`` has shape (C_out, C_in/groups, Kh, Kw).  ``input_grad=False`` skips
    the input-gradient computation in backward (for convs fed by leaf data).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv input must be 4d NCHW, got shape {x.data.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv weight must be 4d, got shape {w.data.shape}")
    b, c, h, wd = x.data.shape
    cout, cper, kh, kw = w.data.shape
    if groups < 1:
        raise GroupsError(f"groups must be positive, got {groups}")
    if c % groups != 0 or cout % groups != 0:
        raise GroupsError(
            f"channels in={c} out={cout} not divisible by groups={groups}"
        )
    if cper * groups != c:
        raise ShapeError(
            f"weight expects {cper * groups} input channels (groups={groups}), got {c}"
        )
    ho, wo = _conv_out_size(h, wd, kh, kw, stride, padding)

    # Untaped big-batch forwards (calibration, eval) go through in chunks so
    # the intermediate buffers stay small.
    if active_tape() is None and b > _EVAL_CHUNK:
        out = np.empty((b, cout, ho, wo), dtype=x.data.dtype)
        for lo in range(0, b, _EVAL_CHUNK):
            hi = min(lo + _EVAL_CHUNK, b)
            piece = conv2d(_wrap(x.data[lo:hi]), w, stride, padding, groups)
            out[lo:hi] = piece.data
        return _wrap(out)

    if groups == 1 and kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv_pointwise(x, w, input_grad)
    if groups == c and cout == c:
        return _conv_depthwise(x, w, stride, padding, ho, wo, input_grad)
    return _conv_generic(x, w, stride, padding, groups, ho, wo, input_grad)


def _conv_pointwise(x: Tensor, w: Tensor, input_grad: bool = True) -> Tensor:
    b, c, h, wd = x.data.shape
    cout = w.data.shape[0]
    x3 = np.ascontiguousarray(x.data).reshape(b, c, h * wd)
    w2 = np.ascontiguousarray(w.data.reshape(cout, c))
    y = _wrap(np.matmul(w2, x3).reshape(b, cout, h, wd))

    tape = active_tape()
    if tape is not None:
        def pull(g):
            g3 = g.reshape(b, cout, h * wd)
            gw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)
            w.add_grad(gw.reshape(w.data.shape), own=True)
            if input_grad:
                gx = np.matmul(w2.T, g3).reshape(x.data.shape)
                x.add_grad(gx, own=True)
        tape.record(y, pull)
    return y


def _pad2d(a: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return a
    b, c, h, w = a.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=a.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = a
    return out


def _dw_fwd_offsets(xp, wk, stride, ho, wo):
    b, c = xp.shape[:2]
    kh, kw = wk.shape[1:]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            np.multiply(sl, wk[None, :, i, j, None, None], out=tmp)
            out += tmp
    return out


def _dw_fwd_parity(xp, wk, ho, wo):
    # stride-2 window sums split by kernel-offset parity so every inner
    # slice is over a contiguous quarter-resolution copy
    b, c = xp.shape[:2]
    kh, kw = wk.shape[1:]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    tmp = np.empty_like(out)
    subs = {}
    for p in (0, 1):
        for q in (0, 1):
            sub = np.ascontiguousarray(xp[:, :, p::2, q::2])
            subs[p, q] = sub
            for i in range(p, kh, 2):
                for j in range(q, kw, 2):
                    sl = sub[:, :, i // 2:i // 2 + ho, j // 2:j // 2 + wo]
                    np.multiply(sl, wk[None, :, i, j, None, None], out=tmp)
                    out += tmp
    return out, subs


def _dw_bwd_parity(g, subs, wk, xp_shape, input_grad):
    # backward mirror of _dw_fwd_parity: contiguous reads for the weight
    # grad, contiguous accumulation for the input grad, one strided write
    # per parity plane at the end
    kh, kw = wk.shape[1:]
    ho, wo = g.shape[2:]
    c = wk.shape[0]
    gw = np.empty((c, kh, kw), dtype=g.dtype)
    gxp = np.empty(xp_shape, dtype=g.dtype) if input_grad else None
    tmp = np.empty_like(g) if input_grad else None
    for p in (0, 1):
        for q in (0, 1):
            sub = subs[p, q]
            gsub = np.zeros(sub.shape, dtype=g.dtype) if input_grad else None
            for i in range(p, kh, 2):
                for j in range(q, kw, 2):
                    sl = sub[:, :, i // 2:i // 2 + ho, j // 2:j // 2 + wo]
                    gw[:, i, j] = np.einsum("bcij,bcij->c", g, sl)
                    if input_grad:
                        np.multiply(g, wk[None, :, i, j, None, None], out=tmp)
                        gsub[:, :, i // 2:i // 2 + ho, j // 2:j // 2 + wo] += tmp
            if input_grad:
                gxp[:, :, p::2, q::2] = gsub
    return gw, gxp


def _dw_fwd_positions(xp, wk, stride, ho, wo):
    b, c = xp.shape[:2]
    kh, kw = wk.shape[1:]
    out = np.empty((b, c, ho, wo), dtype=xp.dtype)
    tmp = np.empty((b, c, kh, kw), dtype=xp.dtype)
    for y in range(ho):
        for x in range(wo):
            win = xp[:, :, stride * y:stride * y + kh, stride * x:stride * x + kw]
            np.multiply(win, wk[None], out=tmp)
            out[:, :, y, x] = tmp.reshape(b, c, -1).sum(axis=2)
    return out


def _dw_bwd_positions(g, xp, wk, stride, input_grad):
    b, c = xp.shape[:2]
    kh, kw = wk.shape[1:]
    ho, wo = g.shape[2:]
    gw = np.zeros((c, kh, kw), dtype=g.dtype)
    gxp = np.zeros(xp.shape, dtype=g.dtype) if input_grad else None
    for y in range(ho):
        for x in range(wo):
            win = xp[:, :, stride * y:stride * y + kh, stride * x:stride * x + kw]
            gy = g[:, :, y, x]
            gw += np.einsum("bcij,bc->cij", win, gy)
            if input_grad:
                gxp[:, :, stride * y:stride * y + kh,
                    stride * x:stride * x + kw] += gy[:, :, None, None] * wk[None]
    return gw, gxp


def _dw_gx_corr(g, wk, h, wd, padding):
    # stride-1 input grad as a correlation with the flipped kernel: reads
    # from padded g, writes contiguously
    b, c = g.shape[:2]
    kh, kw = wk.shape[1:]
    pb = kh - 1 - padding
    gp = _pad2d(g, pb) if pb else g
    gx = np.zeros((b, c, h, wd), dtype=g.dtype)
    tmp = np.empty_like(gx)
    for i in range(kh):
        for j in range(kw):
            sl = gp[:, :, i:i + h, j:j + wd]
            np.multiply(sl, wk[None, :, kh - 1 - i, kw - 1 - j, None, None], out=tmp)
            gx += tmp
    return gx


def _dw_bwd_offsets(g, xp, wk, stride, ho, wo, input_grad):
    b, c = xp.shape[:2]
    kh, kw = wk.shape[1:]
    gw = np.empty((c, kh, kw), dtype=g.dtype)
    gxp = np.zeros(xp.shape, dtype=g.dtype) if input_grad else None
    tmp = np.empty_like(g) if input_grad else None
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            gw[:, i, j] = np.einsum("bcij,bcij->c", g, sl)
            if input_grad:
                np.multiply(g, wk[None, :, i, j, None, None], out=tmp)
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += tmp
    return gw, gxp


def _conv_depthwise(x: Tensor, w: Tensor, stride: int, padding: int,
                    ho: int, wo: int, input_grad: bool = True) -> Tensor:
    """Per-channel conv via kernel-offset (or output-position) passes.

    The loop order and slicing strategy are picked per call: output-position
    passes when the output plane is smaller than the kernel, parity-split
    contiguous slices for large stride-2 planes, offset passes otherwise.
    """
    b, c, h, wd = x.data.shape
    kh, kw = w.data.shape[2:]
    wk = w.data[:, 0]
    xp = _pad2d(x.data, padding)
    hp, wp = h + 2 * padding, wd + 2 * padding
    by_position = 2 * ho * wo < kh * kw
    by_parity = not by_position and stride == 2 and kh >= 3 and ho * wo >= 64
    subs = None
    if by_position:
        out = _dw_fwd_positions(xp, wk, stride, ho, wo)
    elif by_parity:
        out, subs = _dw_fwd_parity(xp, wk, ho, wo)
    else:
        out = _dw_fwd_offsets(xp, wk, stride, ho, wo)
    y = _wrap(out)

    tape = active_tape()
    if tape is not None:
        def pull(g):
            if by_position:
                gw, gxp = _dw_bwd_positions(g, xp, wk, stride, input_grad)
            elif by_parity:
                gw, gxp = _dw_bwd_parity(g, subs, wk, xp.shape, input_grad)
            elif stride == 1 and kh >= 5 and input_grad:
                gw, _ = _dw_bwd_offsets(g, xp, wk, stride, ho, wo, False)
                gxp = None
                gx = _dw_gx_corr(g, wk, h, wd, padding)
            else:
                gw, gxp = _dw_bwd_offsets(g, xp, wk, stride, ho, wo, input_grad)
            w.add_grad(gw.reshape(w.data.shape), own=True)
            if input_grad:
                if gxp is not None:
                    gx = gxp[:, :, padding:hp - padding, padding:wp - padding] \
                        if padding else gxp
                x.add_grad(gx, own=True)
        tape.record(y, pull)
    return y


def _patch_cols(xp: np.ndarray, groups: int, kh: int, kw: int,
                sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """im2col with the group split built into the view.

    Returns a contiguous (G, B*Ho*Wo, Cg*Kh*Kw) array.
    """
    b, c, _, _ = xp.shape
    cg = c // groups
    sb, sc, sy, sx = xp.strides
    v = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, groups, cg, kh, kw, ho, wo),
        strides=(sb, cg * sc, sc, sy, sx, sh * sy, sw * sx),
        writeable=False,
    )
    # (G, B, Ho, Wo, Cg, Kh, Kw) then flatten
    cols = np.ascontiguousarray(v.transpose(1, 0, 5, 6, 2, 3, 4))
    return cols.reshape(groups, b * ho * wo, cg * kh * kw)


def _scatter_cols(gcols: np.ndarray, b: int, c: int, hp: int, wp: int,
                  groups: int, kh: int, kw: int, sh: int, sw: int,
                  ho: int, wo: int, pad: int) -> np.ndarray:
    """Inverse of ``_patch_cols``: accumulate column grads into image grads."""
    cg = c // groups
    g7 = gcols.reshape(groups, b, ho, wo, cg, kh, kw)
    # (B, C, Kh, Kw, Ho, Wo)
    g6 = g7.transpose(1, 0, 4, 5, 6, 2, 3).reshape(b, c, kh, kw, ho, wo)
    gxp = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += g6[:, :, i, j]
    if pad:
        return gxp[:, :, pad:hp - pad, pad:wp - pad]
    return gxp


def _conv_generic(x: Tensor, w: Tensor, stride: int, padding: int,
                  groups: int, ho: int, wo: int, input_grad: bool = True) -> Tensor:
    b, c, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    tape = active_tape()
    ydata, cols, wm = _generic_forward(x.data, w.data, stride, padding,
                                       groups, kh, kw, ho, wo,
                                       keep=tape is not None)
    y = _wrap(ydata)

    if tape is not None:
        cog = cout // groups
        hp, wp = h + 2 * padding, wd + 2 * padding

        def pull(g):
            go = g.reshape(b, groups, cog, ho, wo).transpose(1, 0, 3, 4, 2)
            go = np.ascontiguousarray(go).reshape(groups, b * ho * wo, cog)
            gw = np.matmul(go.transpose(0, 2, 1), cols)
            w.add_grad(gw.reshape(w.data.shape), own=True)
            if input_grad:
                gcols = np.matmul(go, wm)
                gx = _scatter_cols(gcols, b, c, hp, wp, groups, kh, kw,
                                   stride, stride, ho, wo, padding)
                x.add_grad(gx, own=True)

        tape.record(y, pull)
    return y


def _generic_forward(xd: np.ndarray, wd: np.ndarray, stride: int, padding: int,
                     groups: int, kh: int, kw: int, ho: int, wo: int,
                     keep: bool = False):
    b = xd.shape[0]
    cout = wd.shape[0]
    cog = cout // groups
    xp = _pad2d(xd, padding)
    cols = _patch_cols(xp, groups, kh, kw, stride, stride, ho, wo)
    wm = np.ascontiguousarray(wd.reshape(groups, cog, -1))
    out = np.matmul(cols, wm.transpose(0, 2, 1))  # (G, B*Ho*Wo, Cog)
    out = out.reshape(groups, b, ho, wo, cog).transpose(1, 0, 4, 2, 3)
    out = np.ascontiguousarray(out).reshape(b, cout, ho, wo)
    if keep:
        return out, cols, wm
    return out, None, None


@dataclass
class BnState:
    """Per-channel affine batch norm state sized for the widest path.

    ``key`` identifies the site across supernet and derived subnets so that
    calibration statistics computed on one can be applied to the other.
    """
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    key: str = ""
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, key: str = "") -> "BnState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=np.float32)),
            beta=Tensor(np.zeros(channels, dtype=np.float32)),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            key=key,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batch_norm(x: Tensor, bn: BnState, mode: str = "train",
               channels: Optional[int] = None,
               stats: Optional[tuple[np.ndarray, np.ndarray]] = None,
               on_stats: Optional[Callable[[np.ndarray, np.ndarray], None]] = None,
               ) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    mode "train": normalize by biased batch statistics and fold them into the
    running estimates; "eval": normalize by ``stats`` if given else the
    running estimates; "calibrate": normalize by exact statistics of this
    input and hand them to ``on_stats`` without touching the running state.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm input must be 4d NCHW, got {x.data.shape}")
    c = x.data.shape[1]
    if channels is None:
        channels = c
    if channels != c:
        raise ShapeError(f"channels={channels} does not match input channels {c}")
    if c > bn.channels:
        raise ShapeError(f"input has {c} channels but state holds {bn.channels}")
    if mode not in ("train", "eval", "calibrate"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    gamma = prefix_slice(bn.gamma, c)
    beta = prefix_slice(bn.beta, c)
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    if mode == "train":
        if n < 2:
            raise ShapeError("train-mode batch_norm needs at least 2 values per channel")
        s1 = np.einsum("bchw->c", x.data)
        s2 = np.einsum("bchw,bchw->c", x.data, x.data)
        mean = s1 / n
        var = s2 / n - mean * mean
        np.maximum(var, 0, out=var)
        m = bn.momentum
        bn.running_mean[:c] = (1 - m) * bn.running_mean[:c] + m * mean
        bn.running_var[:c] = (1 - m) * bn.running_var[:c] + m * var
    elif mode == "calibrate":
        # whole-set statistics; accumulate in float64 for exactness
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(x.data.dtype)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64).astype(x.data.dtype)
        if on_stats is not None:
            on_stats(mean.astype(np.float32), var.astype(np.float32))
    else:
        if stats is not None:
            mean, var = stats
            mean = np.asarray(mean, dtype=x.data.dtype)
            var = np.asarray(var, dtype=x.data.dtype)
            if mean.shape != (c,) or var.shape != (c,):
                raise ShapeError(
                    f"override stats have shape {mean.shape}/{var.shape}, expected ({c},)"
                )
        else:
            mean = bn.running_mean[:c].astype(x.data.dtype)
            var = bn.running_var[:c].astype(x.data.dtype)

    dt = x.data.dtype
    invstd = (1.0 / np.sqrt(var + bn.eps)).astype(dt, copy=False)
    mean = mean.astype(dt, copy=False)
    scale = gamma.data * invstd
    shift = beta.data - mean * scale
    ydata = x.data * scale[None, :, None, None]
    ydata += shift[None, :, None, None]
    y = _wrap(ydata)

    tape = active_tape()
    if tape is not None:
        batch_stats = mode == "train"

        def pull(g):
            # sum g and sum g*x per channel; dgamma follows from
            # sum g*xhat = invstd * (sum g*x - mean * sum g)
            dbeta = np.einsum("bchw->c", g)
            gx_sum = np.einsum("bchw,bchw->c", g, x.data)
            dgamma = invstd * (gx_sum - mean * dbeta)
            gamma.add_grad(dgamma.astype(gamma.data.dtype, copy=False), own=True)
            beta.add_grad(dbeta.astype(beta.data.dtype, copy=False), own=True)
            if batch_stats:
                # gx = scale*(g - dbeta/n - xhat*dgamma/n) = scale*(g - x*k2 + k3)
                k2 = (invstd * dgamma / n).astype(dt, copy=False)
                k3 = (mean * k2 - dbeta / n).astype(dt, copy=False)
                t = np.multiply(x.data, k2[None, :, None, None])
                np.subtract(g, t, out=t)
                t += k3[None, :, None, None]
                t *= scale[None, :, None, None]
                x.add_grad(t, own=True)
            else:
                x.add_grad(g * scale[None, :, None, None], own=True)

        tape.record(y, pull)
    return y


def relu(x: Tensor) -> Tensor:
    y = _wrap(np.maximum(x.data, 0))
    tape = active_tape()
    if tape is not None:
        def pull(g):
            # g is dead after this pull; masking in place avoids a buffer
            np.multiply(g, y.data > 0, out=g)
            x.add_grad(g, own=True)
        tape.record(y, pull)
    return y


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w.T + b for 2d input (N, F)."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear input must be 2d, got {x.data.shape}")
    if w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"linear weight {w.data.shape} incompatible with input {x.data.shape}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"linear bias shape {b.data.shape} != ({w.data.shape[0]},)")
    y = _wrap(x.data @ w.data.T + b.data)
    tape = active_tape()
    if tape is not None:
        def pull(g):
            w.add_grad(g.T @ x.data, own=True)
            b.add_grad(g.sum(axis=0), own=True)
            x.add_grad(g @ w.data, own=True)
        tape.record(y, pull)
    return y


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: (N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4d, got {x.data.shape}")
    _, _, h, w = x.data.shape
    y = _wrap(x.data.mean(axis=(2, 3)))
    tape = active_tape()
    if tape is not None:
        def pull(g):
            gx = np.broadcast_to((g / (h * w))[:, :, None, None], x.data.shape)
            x.add_grad(gx)
        tape.record(y, pull)
    return y


def channel_split(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split NCHW input into two equal channel halves (views)."""
    c = x.data.shape[1]
    if c % 2 != 0:
        raise ShapeError(f"channel_split needs an even channel count, got {c}")
    half = c // 2
    a = _wrap(x.data[:, :half])
    b = _wrap(x.data[:, half:])
    tape = active_tape()
    if tape is not None:
        def pull_a(g):
            x.ensure_grad()[:, :half] += g
        def pull_b(g):
            x.ensure_grad()[:, half:] += g
        tape.record(a, pull_a)
        tape.record(b, pull_b)
    return a, b


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("channel_concat expects 4d inputs")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(
            f"channel_concat shapes {a.data.shape} and {b.data.shape} disagree "
            "outside the channel axis"
        )
    ca = a.data.shape[1]
    y = _wrap(np.concatenate([a.data, b.data], axis=1))
    tape = active_tape()
    if tape is not None:
        def pull(g):
            a.add_grad(g[:, :ca])
            b.add_grad(g[:, ca:])
        tape.record(y, pull)
    return y


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Channel order produced by reshape(g, c/g) -> transpose -> flatten."""
    if channels % groups != 0:
        raise ShapeError(f"{channels} channels not divisible by {groups} groups")
    return np.arange(channels).reshape(groups, channels // groups).T.ravel()


def channel_shuffle(x: Tensor, groups: int = 2) -> Tensor:
    """Interleave channel groups so later group convs mix information."""
    c = x.data.shape[1]
    perm = shuffle_permutation(c, groups)
    y = _wrap(np.ascontiguousarray(x.data[:, perm]))
    tape = active_tape()
    if tape is not None:
        def pull(g):
            gx = np.empty_like(g)
            gx[:, perm] = g
            x.add_grad(gx, own=True)
        tape.record(y, pull)
    return y


def channel_interleave(a: Tensor, b: Tensor) -> Tensor:
    """Fused channel_shuffle(channel_concat(a, b), groups=2).

    With two equal groups the shuffled order is exactly [a0, b0, a1, b1, ...],
    so the concat copy and the permutation copy collapse into two strided
    writes.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"channel_interleave inputs must match, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.ndim != 4:
        raise ShapeError("channel_interleave expects 4d inputs")
    bsz, c, h, w = a.data.shape
    out = np.empty((bsz, 2 * c, h, w), dtype=a.data.dtype)
    out[:, 0::2] = a.data
    out[:, 1::2] = b.data
    y = _wrap(out)
    tape = active_tape()
    if tape is not None:
        def pull(g):
            a.add_grad(np.ascontiguousarray(g[:, 0::2]), own=True)
            b.add_grad(np.ascontiguousarray(g[:, 1::2]), own=True)
        tape.record(y, pull)
    return y


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2d (N, classes), got {logits.data.shape}")
    n, k = logits.data.shape
    if n < 1:
        raise ShapeError("cross entropy needs at least one example")
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(
            f"labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    loss_val = -logp[rows, labels].mean()
    y = _wrap(np.asarray(loss_val, dtype=logits.data.dtype))
    tape = active_tape()
    if tape is not None:
        def pull(g):
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            logits.add_grad(g * p / n, own=True)
        tape.record(y, pull)
    return y
