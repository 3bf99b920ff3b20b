"""Weight-shared building blocks for the single-path supernet.

Every candidate operation is allocated once at its maximum width; a forward
pass slices leading-channel prefixes out of the shared kernels, so narrower
paths reuse (and train) the front slice of the same storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..engine.ops import BnState, batch_norm, channel_interleave, channel_split, conv2d, prefix_slice, relu
from ..engine.tensor import Tensor, active_tape
from ..errors import ArchitectureError
from .quantize import dorefa_quantize, pact_quantize

PACT_ALPHA_INIT = 8.0

# kernel size of the depthwise conv in each main branch
VARIANT_KERNEL = {"choice_3": 3, "choice_5": 5, "choice_7": 7, "choice_x": 3}


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Kaiming-normal init: std = sqrt(2 / fan_in)."""
    std = float(np.sqrt(2.0 / fan_in))
    return rng.normal(0.0, std, size=shape).astype(np.float32)


@dataclass
class ForwardContext:
    """How batch-norm sites behave during one forward pass.

    mode "train" updates running statistics, "eval" normalizes by running
    (or overridden) statistics, "calibrate" normalizes by the exact batch
    statistics and records them into ``collected``.  ``bn_stats`` maps a BN
    site key to a (mean, var) override used in eval mode.
    """

    mode: str = "eval"
    bn_stats: Optional[dict[str, tuple[np.ndarray, np.ndarray]]] = None
    collected: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def stats_for(self, key: str) -> Optional[tuple[np.ndarray, np.ndarray]]:
        if self.mode == "eval" and self.bn_stats is not None:
            return self.bn_stats.get(key)
        return None

    def sink_for(self, key: str) -> Optional[Callable[[np.ndarray, np.ndarray], None]]:
        if self.mode != "calibrate":
            return None

        def sink(mean: np.ndarray, var: np.ndarray) -> None:
            self.collected[key] = (mean, var)

        return sink


class ConvBnUnit:
    """Conv + BN (+ ReLU) pair whose channels can be prefix-sliced.

    ``quantized`` units fake-quantize their input activations (learned clip
    threshold) and weights at the bit widths passed to ``forward``.
    """

    def __init__(self, rng: np.random.Generator, key: str, in_ch: int, out_ch: int,
                 kernel: int, stride: int = 1, depthwise: bool = False,
                 act: bool = True, quantized: bool = False, input_grad: bool = True):
        if depthwise and in_ch != out_ch:
            raise ArchitectureError(
                f"depthwise unit {key} needs in_ch == out_ch, got {in_ch}/{out_ch}")
        self.key = key
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.depthwise = depthwise
        self.act = act
        self.input_grad = input_grad
        if depthwise:
            shape = (out_ch, 1, kernel, kernel)
            fan_in = kernel * kernel
        else:
            shape = (out_ch, in_ch, kernel, kernel)
            fan_in = in_ch * kernel * kernel
        self.weight = Tensor(he_normal(rng, shape, fan_in))
        self.bn = BnState.create(out_ch, key=key + ".bn")
        self.alpha = Tensor(np.float32(PACT_ALPHA_INIT)) if quantized else None

    def forward(self, ctx: ForwardContext, x: Tensor,
                out: Optional[int] = None, inp: Optional[int] = None,
                bits: Optional[tuple[int, int]] = None) -> Tensor:
        co = self.out_ch if out is None else out
        ci = x.data.shape[1]
        if inp is not None and inp != ci:
            raise ArchitectureError(
                f"unit {self.key} expected {inp} input channels, got {ci}")
        if self.depthwise:
            if co != ci:
                raise ArchitectureError(
                    f"depthwise unit {self.key} cannot map {ci} -> {co} channels")
            w = prefix_slice(self.weight, co)
            groups = co
        else:
            w = prefix_slice(self.weight, co, ci)
            groups = 1
        if bits is not None:
            if self.alpha is None:
                raise ArchitectureError(f"unit {self.key} has no quantizer state")
            w_bits, a_bits = bits
            x = pact_quantize(x, a_bits, self.alpha)
            w = dorefa_quantize(w, w_bits)
        y = conv2d(x, w, stride=self.stride, padding=self.kernel // 2,
                   groups=groups, input_grad=self.input_grad)
        y = batch_norm(y, self.bn, mode=ctx.mode,
                       stats=ctx.stats_for(self.bn.key),
                       on_stats=ctx.sink_for(self.bn.key))
        if self.act:
            y = relu(y)
        tape = active_tape()
        if tape is not None:
            region = (co,) if self.depthwise else (co, ci)
            tape.touch(self.weight, region)
            tape.touch(self.bn.gamma, (co,))
            tape.touch(self.bn.beta, (co,))
            if bits is not None:
                tape.touch(self.alpha, None)
        return y

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [(self.key + ".w", self.weight),
               (self.key + ".bn.gamma", self.bn.gamma),
               (self.key + ".bn.beta", self.bn.beta)]
        if self.alpha is not None:
            out.append((self.key + ".alpha", self.alpha))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(self.key + ".bn.mean", self.bn.running_mean),
                (self.key + ".bn.var", self.bn.running_var)]


class ShuffleUnit:
    """One complete block variant, including the skip/projection branch.

    Stride-1 variants split the input in half, transform one half, and
    re-interleave; stride-2 variants transform the full input on the main
    branch and in parallel project it through a depthwise+pointwise pair,
    halving spatial size and re-interleaving to the block's output width.

    The main branch of choice_3/5/7 is pw -> dw(k) -> pw; choice_x chains
    three 3x3 depthwise convs interleaved with pointwise convs.  The middle
    (bottleneck) width is chosen per forward pass; kernels are allocated at
    ``max_mid`` and sliced.
    """

    def __init__(self, rng: np.random.Generator, key: str, variant: str,
                 in_ch: int, out_ch: int, stride: int, max_mid: int,
                 quantized: bool):
        if variant not in VARIANT_KERNEL:
            raise ArchitectureError(f"unknown block variant {variant!r}")
        self.key = key
        self.variant = variant
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        self.max_mid = max_mid
        out_half = out_ch // 2
        branch_in = in_ch if stride == 2 else in_ch // 2
        self.branch_in = branch_in
        k = VARIANT_KERNEL[variant]

        self.units: list[ConvBnUnit] = []

        def unit(name: str, *a, **kw) -> ConvBnUnit:
            u = ConvBnUnit(rng, f"{key}.{name}", *a, **kw)
            self.units.append(u)
            return u

        if variant == "choice_x":
            self.dw0 = unit("dw0", branch_in, branch_in, 3, stride=stride,
                            depthwise=True, act=False)
            self.pw0 = unit("pw0", branch_in, max_mid, 1, quantized=quantized)
            self.dw1 = unit("dw1", max_mid, max_mid, 3, depthwise=True, act=False)
            self.pw1 = unit("pw1", max_mid, max_mid, 1, quantized=quantized)
            self.dw2 = unit("dw2", max_mid, max_mid, 3, depthwise=True, act=False)
            self.pw2 = unit("pw2", max_mid, out_half, 1, quantized=quantized)
        else:
            self.pw0 = unit("pw0", branch_in, max_mid, 1, quantized=quantized)
            self.dw = unit("dw", max_mid, max_mid, k, stride=stride,
                           depthwise=True, act=False)
            self.pw1 = unit("pw1", max_mid, out_half, 1, quantized=quantized)

        if stride == 2:
            self.proj_dw = unit("proj.dw", in_ch, in_ch, 3, stride=2,
                                depthwise=True, act=False)
            self.proj_pw = unit("proj.pw", in_ch, out_half, 1)

    def _main(self, ctx: ForwardContext, x: Tensor, mid: int,
              bits: Optional[tuple[int, int]]) -> Tensor:
        if self.variant == "choice_x":
            h = self.dw0.forward(ctx, x)
            h = self.pw0.forward(ctx, h, out=mid, bits=bits)
            h = self.dw1.forward(ctx, h, out=mid)
            h = self.pw1.forward(ctx, h, out=mid, bits=bits)
            h = self.dw2.forward(ctx, h, out=mid)
            return self.pw2.forward(ctx, h, bits=bits)
        h = self.pw0.forward(ctx, x, out=mid, bits=bits)
        h = self.dw.forward(ctx, h, out=mid)
        return self.pw1.forward(ctx, h, bits=bits)

    def forward(self, ctx: ForwardContext, x: Tensor, mid: int,
                bits: Optional[tuple[int, int]] = None) -> Tensor:
        if not 1 <= mid <= self.max_mid:
            raise ArchitectureError(
                f"block {self.key}: mid width {mid} outside [1, {self.max_mid}]")
        if self.stride == 1:
            keep, work = channel_split(x)
            y = self._main(ctx, work, mid, bits)
            return channel_interleave(keep, y)
        p = self.proj_dw.forward(ctx, x)
        p = self.proj_pw.forward(ctx, p)
        y = self._main(ctx, x, mid, bits)
        return channel_interleave(p, y)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for u in self.units:
            out.extend(u.named_params())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for u in self.units:
            out.extend(u.named_buffers())
        return out

    def bn_states(self) -> list[BnState]:
        return [u.bn for u in self.units]
