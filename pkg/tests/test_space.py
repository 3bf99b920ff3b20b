"""Search-space descriptions, the gene codec, and architecture validation."""

import itertools

import pytest

from supernas.errors import ArchitectureError, CodecError, SpecError
from supernas.space.spec import (BLOCK_VARIANTS, CHANNEL_MULTIPLIERS,
                                 QUANT_MENU, ChoiceBlockSpec, SupernetSpec,
                                 decode_architecture, desk_space,
                                 encode_architecture, imagenet_space,
                                 iter_architectures, validate_architecture)


def test_desk_space_structure():
    spec = desk_space("block")
    assert spec.num_blocks == 8
    assert spec.stem_channels == 16 and spec.stem_stride == 1
    assert spec.head_channels == 128 and spec.input_size == 32
    assert [b.stride for b in spec.blocks] == [2, 1, 2, 1, 2, 1, 1, 1]
    assert spec.block_channels() == [
        (16, 16), (16, 16), (16, 32), (32, 32),
        (32, 64), (64, 64), (64, 64), (64, 64)]


def test_imagenet_space_structure():
    spec = imagenet_space()
    assert spec.num_blocks == 20
    assert spec.input_size == 224 and spec.num_classes == 1000
    assert spec.stem_stride == 2 and spec.head_channels == 1024
    assert [b.base_channels for b in spec.blocks] == \
        [64] * 4 + [160] * 4 + [320] * 8 + [640] * 4


@pytest.mark.parametrize("kind,sizes,total", [
    ("block", (4, 1, 1), 4 ** 8),
    ("channel", (1, 8, 1), 8 ** 8),
    ("quant", (1, 1, 6), 6 ** 8),
    ("joint", (1, 3, 6), 18 ** 8),
])
def test_desk_space_kinds_and_sizes(kind, sizes, total):
    spec = desk_space(kind)
    assert spec.blocks[0].gene_sizes == sizes
    assert spec.space_size() == total


def test_mid_channels_rounding():
    blk = ChoiceBlockSpec(kind="channel", stride=1, base_channels=16,
                          multipliers=CHANNEL_MULTIPLIERS)
    # width = round(mult * base/2), floored at 1
    assert blk.mid_channels(0.2) == 2
    assert blk.mid_channels(1.0) == 8
    assert blk.mid_channels(1.6) == 13
    assert blk.max_mid_channels == 13
    tiny = ChoiceBlockSpec(kind="channel", stride=1, base_channels=2,
                           multipliers=(0.2, 1.0))
    assert tiny.mid_channels(0.2) == 1


def test_choice_block_spec_validation():
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="bogus", stride=1, base_channels=16)
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="block", stride=3, base_channels=16)
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="block", stride=1, base_channels=15)
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="block", stride=1, base_channels=16,
                        variants=("choice_3", "choice_3"))
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="channel", stride=1, base_channels=16,
                        multipliers=(0.4, 0.2))
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="quant", stride=1, base_channels=16)
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="block", stride=1, base_channels=16,
                        bit_pairs=((4, 4),))
    with pytest.raises(SpecError):
        ChoiceBlockSpec(kind="quant", stride=1, base_channels=16,
                        bit_pairs=((5, 5),))


def test_supernet_spec_cross_validation():
    stages = ((2, 16, 2),)
    blocks = (
        ChoiceBlockSpec(kind="block", stride=2, base_channels=16),
        ChoiceBlockSpec(kind="block", stride=1, base_channels=16),
    )
    SupernetSpec(num_classes=10, stem_channels=8, stem_stride=1,
                 stages=stages, blocks=blocks, head_channels=32)
    with pytest.raises(SpecError):
        SupernetSpec(num_classes=10, stem_channels=8, stem_stride=1,
                     stages=stages, blocks=blocks[:1], head_channels=32)
    bad = (blocks[0],
           ChoiceBlockSpec(kind="block", stride=2, base_channels=16))
    with pytest.raises(SpecError):
        SupernetSpec(num_classes=10, stem_channels=8, stem_stride=1,
                     stages=stages, blocks=bad, head_channels=32)
    with pytest.raises(SpecError):
        SupernetSpec(num_classes=1, stem_channels=8, stem_stride=1,
                     stages=stages, blocks=blocks, head_channels=32)


def test_validate_architecture_bounds():
    spec = desk_space("block")
    ok = tuple((i % 4, 0, 0) for i in range(8))
    validate_architecture(spec, ok)
    with pytest.raises(ArchitectureError):
        validate_architecture(spec, ok[:7])
    with pytest.raises(ArchitectureError):
        validate_architecture(spec, ok[:7] + ((4, 0, 0),))
    with pytest.raises(ArchitectureError):
        validate_architecture(spec, ok[:7] + ((0, 1, 0),))
    with pytest.raises(ArchitectureError):
        validate_architecture(spec, ok[:7] + ((0, 0),))


def test_codec_roundtrip_random(rng):
    spec = desk_space("joint")
    for _ in range(50):
        arch = tuple(
            (int(rng.integers(s[0])), int(rng.integers(s[1])),
             int(rng.integers(s[2])))
            for s in (b.gene_sizes for b in spec.blocks))
        assert decode_architecture(encode_architecture(arch), spec) == arch


def test_codec_error_positions():
    spec = desk_space("block")
    with pytest.raises(CodecError) as e:
        decode_architecture("", spec)
    assert e.value.position == 0
    with pytest.raises(CodecError) as e:
        decode_architecture("0.0.0-0.0-0.0.0", spec)
    assert e.value.position == 6
    with pytest.raises(CodecError) as e:
        decode_architecture("0.0.0-0.x.0", spec)
    assert e.value.position == 8
    # structurally valid but out of range -> architecture error
    with pytest.raises(ArchitectureError):
        decode_architecture("-".join(["9.0.0"] * 8), spec)


def test_iter_architectures_lexicographic_and_complete():
    spec = SupernetSpec(
        num_classes=10, stem_channels=8, stem_stride=1,
        stages=((2, 16, 1),),
        blocks=(
            ChoiceBlockSpec(kind="block", stride=1, base_channels=16,
                            variants=BLOCK_VARIANTS[:2]),
            ChoiceBlockSpec(kind="quant", stride=1, base_channels=16,
                            bit_pairs=QUANT_MENU[:3]),
        ),
        head_channels=32)
    archs = list(iter_architectures(spec))
    assert len(archs) == spec.space_size() == 6
    assert archs[0] == ((0, 0, 0), (0, 0, 0))
    assert archs[-1] == ((1, 0, 0), (0, 0, 2))
    assert archs == sorted(archs)
    assert len(set(archs)) == len(archs)


def test_iter_architectures_matches_gene_sizes():
    spec = desk_space("block")
    seen = set(itertools.islice(iter_architectures(spec), 300))
    assert len(seen) == 300
    for arch in seen:
        validate_architecture(spec, arch)
