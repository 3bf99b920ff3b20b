"""The weight-sharing supernet and single-path execution.

One set of shared kernels covers every candidate architecture; a forward
pass activates exactly one candidate per choice block, so gradients reach
only the tensors on the sampled path.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..engine.ops import BnState, global_avg_pool, linear
from ..engine.tensor import Tensor, active_tape
from ..errors import ArchitectureError
from .blocks import ConvBnUnit, ForwardContext, ShuffleUnit, he_normal
from .spec import (
    Architecture,
    ChoiceBlockSpec,
    Gene,
    SupernetSpec,
    validate_architecture,
)

__all__ = [
    "ChoiceBlock",
    "ForwardContext",
    "Supernet",
    "build_supernet",
    "default_architecture",
    "forward_single_path",
    "instantiate_subnet",
]


class ChoiceBlock:
    """A choice point: one ShuffleUnit per block variant, gene-addressed."""

    def __init__(self, rng: np.random.Generator, key: str,
                 spec: ChoiceBlockSpec, in_ch: int):
        self.key = key
        self.spec = spec
        self.in_ch = in_ch
        self.units = {
            v: ShuffleUnit(rng, f"{key}.{v}", v, in_ch, spec.base_channels,
                           spec.stride, spec.max_mid_channels, spec.quantized)
            for v in spec.variants
        }

    def forward(self, ctx: ForwardContext, x: Tensor, gene: Gene) -> Tensor:
        v, c, q = gene
        variant = self.spec.variants[v]
        mid = self.spec.mid_channels(self.spec.multipliers[c])
        bits = self.spec.bit_pairs[q] if self.spec.quantized else None
        return self.units[variant].forward(ctx, x, mid, bits)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for v in self.spec.variants:
            out.extend(self.units[v].named_params())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for v in self.spec.variants:
            out.extend(self.units[v].named_buffers())
        return out

    def bn_states(self) -> list[BnState]:
        out: list[BnState] = []
        for v in self.spec.variants:
            out.extend(self.units[v].bn_states())
        return out


class Supernet:
    """Stem, choice blocks, head conv, and classifier over shared weights."""

    def __init__(self, spec: SupernetSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.stem = ConvBnUnit(rng, "stem", spec.input_channels,
                               spec.stem_channels, 3, stride=spec.stem_stride,
                               input_grad=False)
        self.blocks: list[ChoiceBlock] = []
        in_ch = spec.stem_channels
        for i, bspec in enumerate(spec.blocks):
            self.blocks.append(ChoiceBlock(rng, f"blocks.{i}", bspec, in_ch))
            in_ch = bspec.base_channels
        self.head = ConvBnUnit(rng, "head", in_ch, spec.head_channels, 1)
        self.fc_w = Tensor(he_normal(rng, (spec.num_classes, spec.head_channels),
                                     spec.head_channels))
        self.fc_b = Tensor(np.zeros(spec.num_classes, dtype=np.float32))

    def forward(self, x: Tensor, arch: Architecture,
                ctx: Optional[ForwardContext] = None) -> Tensor:
        """Run one architecture through the shared weights; returns logits."""
        if ctx is None:
            ctx = ForwardContext(mode="eval")
        validate_architecture(self.spec, arch)
        h = self.stem.forward(ctx, x)
        for block, gene in zip(self.blocks, arch):
            h = block.forward(ctx, h, gene)
        h = self.head.forward(ctx, h)
        h = global_avg_pool(h)
        logits = linear(h, self.fc_w, self.fc_b)
        tape = active_tape()
        if tape is not None:
            tape.touch(self.fc_w, None)
            tape.touch(self.fc_b, None)
        return logits

    def named_params(self) -> dict[str, Tensor]:
        """All trainable tensors in a fixed, deterministic order."""
        items: list[tuple[str, Tensor]] = []
        items.extend(self.stem.named_params())
        for block in self.blocks:
            items.extend(block.named_params())
        items.extend(self.head.named_params())
        items.append(("classifier.w", self.fc_w))
        items.append(("classifier.b", self.fc_b))
        return dict(items)

    def named_buffers(self) -> dict[str, np.ndarray]:
        """Running BN statistics, keyed like the parameters."""
        items: list[tuple[str, np.ndarray]] = []
        items.extend(self.stem.named_buffers())
        for block in self.blocks:
            items.extend(block.named_buffers())
        items.extend(self.head.named_buffers())
        return dict(items)

    def bn_states(self) -> list[BnState]:
        out = [self.stem.bn]
        for block in self.blocks:
            out.extend(block.bn_states())
        out.append(self.head.bn)
        return out


def build_supernet(spec: SupernetSpec, seed: int = 0) -> Supernet:
    """Construct a supernet with deterministic seed-driven initialization."""
    return Supernet(spec, seed=seed)


def forward_single_path(net: Supernet, arch: Architecture, x: Tensor,
                        ctx: Optional[ForwardContext] = None) -> Tensor:
    return net.forward(x, arch, ctx)


def default_architecture(spec: SupernetSpec) -> Architecture:
    """The all-first-candidate architecture (gene (0, 0, 0) everywhere)."""
    return tuple((0, 0, 0) for _ in spec.blocks)


def _reduced_block(bspec: ChoiceBlockSpec, gene: Gene) -> ChoiceBlockSpec:
    v, c, q = gene
    return ChoiceBlockSpec(
        kind=bspec.kind,
        stride=bspec.stride,
        base_channels=bspec.base_channels,
        variants=(bspec.variants[v],),
        multipliers=(bspec.multipliers[c],),
        bit_pairs=(bspec.bit_pairs[q],) if bspec.quantized else (),
    )


def reduced_spec(spec: SupernetSpec, arch: Architecture) -> SupernetSpec:
    """A spec whose only candidate in every block is the one ``arch`` picks."""
    validate_architecture(spec, arch)
    return SupernetSpec(
        num_classes=spec.num_classes,
        stem_channels=spec.stem_channels,
        stem_stride=spec.stem_stride,
        stages=spec.stages,
        blocks=tuple(_reduced_block(b, g) for b, g in zip(spec.blocks, arch)),
        head_channels=spec.head_channels,
        input_size=spec.input_size,
        input_channels=spec.input_channels,
    )


def instantiate_subnet(net: Supernet, arch: Architecture,
                       copy_weights: bool = True, seed: int = 0) -> Supernet:
    """Stand-alone network for one architecture.

    With ``copy_weights`` the active slices of the shared tensors (and the
    matching running-statistics prefixes) are copied over, so the subnet
    reproduces the supernet's single-path outputs exactly.  Without it the
    subnet keeps its own fresh seed-driven initialization (for retraining).
    BN site keys carry over, so calibration statistics gathered on the
    supernet along ``arch`` apply to the subnet unchanged.
    """
    sub = Supernet(reduced_spec(net.spec, arch), seed=seed)
    if not copy_weights:
        return sub
    src_p = net.named_params()
    for name, dst in sub.named_params().items():
        src = src_p.get(name)
        if src is None:
            raise ArchitectureError(f"no shared tensor named {name}")
        idx = tuple(slice(0, d) for d in dst.data.shape)
        if src.data[idx].shape != dst.data.shape:
            raise ArchitectureError(
                f"{name}: cannot slice {src.data.shape} down to {dst.data.shape}")
        dst.data[...] = src.data[idx]
    src_b = net.named_buffers()
    for name, dst in sub.named_buffers().items():
        src = src_b.get(name)
        if src is None:
            raise ArchitectureError(f"no shared buffer named {name}")
        dst[...] = src[: dst.shape[0]]
    return sub
