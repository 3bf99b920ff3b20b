"""Declarative search-space descriptions and the architecture codec.

A supernet is described by a stem, a list of stages, one ChoiceBlockSpec per
choice block, and a head.  An architecture is a fixed-length gene vector with
one (variant, channel, quant) index triple per block; dimensions a block does
not search hold a single candidate and their gene slot stays 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable

from ..errors import ArchitectureError, CodecError, SpecError

BLOCK_VARIANTS = ("choice_3", "choice_5", "choice_7", "choice_x")
CHANNEL_MULTIPLIERS = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)
QUANT_MENU = ((1, 2), (2, 2), (1, 4), (2, 4), (3, 4), (4, 4))

BLOCK_KINDS = ("block", "channel", "quant", "joint")

Gene = tuple[int, int, int]
Architecture = tuple[Gene, ...]


@dataclass(frozen=True)
class ChoiceBlockSpec:
    """One choice block: which variants/widths/bit pairs it searches over."""

    kind: str
    stride: int
    base_channels: int
    variants: tuple[str, ...] = ("choice_3",)
    multipliers: tuple[float, ...] = (1.0,)
    bit_pairs: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise SpecError(f"unknown block kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise SpecError(f"block stride must be 1 or 2, got {self.stride}")
        if self.base_channels < 2 or self.base_channels % 2 != 0:
            raise SpecError(
                f"block channels must be even and >= 2, got {self.base_channels}"
            )
        if not self.variants:
            raise SpecError("block needs at least one variant candidate")
        if len(set(self.variants)) != len(self.variants):
            raise SpecError(f"duplicate variants in {self.variants}")
        for v in self.variants:
            if v not in BLOCK_VARIANTS:
                raise SpecError(f"unknown block variant {v!r}")
        if not self.multipliers:
            raise SpecError("block needs at least one channel multiplier")
        if any(m <= 0 for m in self.multipliers):
            raise SpecError(f"multipliers must be positive, got {self.multipliers}")
        if any(b >= a for a, b in zip(self.multipliers[1:], self.multipliers)):
            raise SpecError(f"multipliers must be strictly increasing, got {self.multipliers}")
        if len(set(self.bit_pairs)) != len(self.bit_pairs):
            raise SpecError(f"duplicate bit pairs in {self.bit_pairs}")
        for bp in self.bit_pairs:
            if bp not in QUANT_MENU:
                raise SpecError(f"bit pair {bp} outside the menu {QUANT_MENU}")
        if self.kind in ("quant", "joint") and not self.bit_pairs:
            raise SpecError(f"kind {self.kind!r} requires bit pairs")
        if self.kind in ("block", "channel") and self.bit_pairs:
            raise SpecError(f"kind {self.kind!r} must not carry bit pairs")

    @property
    def quantized(self) -> bool:
        return bool(self.bit_pairs)

    @property
    def gene_sizes(self) -> tuple[int, int, int]:
        """Candidate counts per gene slot (variant, channel, quant)."""
        return (len(self.variants), len(self.multipliers),
                len(self.bit_pairs) if self.bit_pairs else 1)

    @property
    def num_candidates(self) -> int:
        a, b, c = self.gene_sizes
        return a * b * c

    def mid_channels(self, multiplier: float) -> int:
        """Output width of the unit's first 1x1 conv under a multiplier."""
        return max(1, int(multiplier * (self.base_channels // 2) + 0.5))

    @property
    def max_mid_channels(self) -> int:
        return self.mid_channels(self.multipliers[-1])


@dataclass(frozen=True)
class SupernetSpec:
    """Full network description: stem, staged choice blocks, head, classifier."""

    num_classes: int
    stem_channels: int
    stem_stride: int
    stages: tuple[tuple[int, int, int], ...]  # (block count, out channels, first stride)
    blocks: tuple[ChoiceBlockSpec, ...]
    head_channels: int
    input_size: int = 32
    input_channels: int = 3

    def __post_init__(self):
        if self.num_classes < 2:
            raise SpecError(f"need at least 2 classes, got {self.num_classes}")
        if self.stem_channels < 1 or self.head_channels < 1:
            raise SpecError("stem/head channels must be positive")
        if self.stem_stride not in (1, 2):
            raise SpecError(f"stem stride must be 1 or 2, got {self.stem_stride}")
        if self.input_size < 1 or self.input_channels < 1:
            raise SpecError("input size and channels must be positive")
        total = 0
        for count, channels, stride in self.stages:
            if count < 1:
                raise SpecError(f"stage block count must be positive, got {count}")
            if channels % 2 != 0:
                raise SpecError(f"stage channels must be even, got {channels}")
            if stride not in (1, 2):
                raise SpecError(f"stage stride must be 1 or 2, got {stride}")
            total += count
        if total != len(self.blocks):
            raise SpecError(
                f"stages promise {total} blocks but {len(self.blocks)} specs given"
            )
        i = 0
        for count, channels, stride in self.stages:
            for j in range(count):
                blk = self.blocks[i]
                if blk.base_channels != channels:
                    raise SpecError(
                        f"block {i} channels {blk.base_channels} != stage's {channels}"
                    )
                want = stride if j == 0 else 1
                if blk.stride != want:
                    raise SpecError(f"block {i} stride {blk.stride}, expected {want}")
                i += 1

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def block_channels(self) -> list[tuple[int, int]]:
        """(in_channels, out_channels) per block, following the stages."""
        out = []
        prev = self.stem_channels
        for blk in self.blocks:
            out.append((prev, blk.base_channels))
            prev = blk.base_channels
        return out

    def space_size(self) -> int:
        n = 1
        for blk in self.blocks:
            n *= blk.num_candidates
        return n


def iter_architectures(spec: SupernetSpec):
    """Yield every architecture of the space in lexicographic gene order."""
    per_block = []
    for blk in spec.blocks:
        nv, nc, nq = blk.gene_sizes
        per_block.append([(v, c, q)
                          for v in range(nv)
                          for c in range(nc)
                          for q in range(nq)])
    for combo in itertools.product(*per_block):
        yield tuple(combo)


def validate_architecture(spec: SupernetSpec, arch: Architecture) -> None:
    if len(arch) != spec.num_blocks:
        raise ArchitectureError(
            f"architecture has {len(arch)} genes, supernet has {spec.num_blocks} blocks"
        )
    for i, (gene, blk) in enumerate(zip(arch, spec.blocks)):
        if len(gene) != 3:
            raise ArchitectureError(f"gene {i} must be a (v, c, q) triple, got {gene!r}")
        sizes = blk.gene_sizes
        for slot, (idx, limit) in enumerate(zip(gene, sizes)):
            if not 0 <= idx < limit:
                raise ArchitectureError(
                    f"gene {i} slot {slot} index {idx} out of range [0, {limit})"
                )


def encode_architecture(arch: Architecture) -> str:
    """Compact text form: 'v.c.q-v.c.q-...'."""
    return "-".join(f"{v}.{c}.{q}" for v, c, q in arch)


def decode_architecture(text: str, spec: SupernetSpec) -> Architecture:
    """Parse the codec text form, reporting the character position of errors."""
    if not text:
        raise CodecError("empty architecture text", position=0)
    genes = []
    pos = 0
    for part in text.split("-"):
        fields = part.split(".")
        if len(fields) != 3:
            raise CodecError(
                f"gene {part!r} must have 3 dot-separated indices", position=pos
            )
        idx = []
        fpos = pos
        for f in fields:
            if not f.isdigit():
                raise CodecError(f"invalid index {f!r}", position=fpos)
            idx.append(int(f))
            fpos += len(f) + 1
        genes.append(tuple(idx))
        pos += len(part) + 1
    arch = tuple(genes)
    validate_architecture(spec, arch)
    return arch


def _make_blocks(stages: Iterable[tuple[int, int, int]], kind: str,
                 variants: tuple[str, ...], multipliers: tuple[float, ...],
                 bit_pairs: tuple[tuple[int, int], ...]) -> tuple[ChoiceBlockSpec, ...]:
    blocks = []
    for count, channels, stride in stages:
        for j in range(count):
            blocks.append(ChoiceBlockSpec(
                kind=kind,
                stride=stride if j == 0 else 1,
                base_channels=channels,
                variants=variants,
                multipliers=multipliers,
                bit_pairs=bit_pairs,
            ))
    return tuple(blocks)


def _space(kind: str, stages, num_classes, stem_channels, stem_stride,
           head_channels, input_size) -> SupernetSpec:
    if kind == "block":
        variants, mults, bits = BLOCK_VARIANTS, (1.0,), ()
    elif kind == "channel":
        variants, mults, bits = ("choice_3",), CHANNEL_MULTIPLIERS, ()
    elif kind == "quant":
        variants, mults, bits = ("choice_3",), (1.0,), QUANT_MENU
    elif kind == "joint":
        variants, mults, bits = ("choice_3",), (0.5, 1.0, 1.5), QUANT_MENU
    else:
        raise SpecError(f"unknown space kind {kind!r}")
    stages = tuple(tuple(s) for s in stages)
    return SupernetSpec(
        num_classes=num_classes,
        stem_channels=stem_channels,
        stem_stride=stem_stride,
        stages=stages,
        blocks=_make_blocks(stages, kind, variants, mults, bits),
        head_channels=head_channels,
        input_size=input_size,
    )


def imagenet_space(kind: str = "block") -> SupernetSpec:
    """The 20-block large-scale preset: stem 16, stages 64x4/160x4/320x8/640x4,
    head 1024, 1000 classes, 224x224 input."""
    return _space(
        kind,
        stages=((4, 64, 2), (4, 160, 2), (8, 320, 2), (4, 640, 2)),
        num_classes=1000,
        stem_channels=16,
        stem_stride=2,
        head_channels=1024,
        input_size=224,
    )


def desk_space(kind: str = "block", num_classes: int = 10) -> SupernetSpec:
    """The enumerable 8-block preset: 32x32 input, stem stride 1,
    stages 16x2/32x2/64x4."""
    return _space(
        kind,
        stages=((2, 16, 2), (2, 32, 2), (4, 64, 2)),
        num_classes=num_classes,
        stem_channels=16,
        stem_stride=1,
        head_channels=128,
        input_size=32,
    )
