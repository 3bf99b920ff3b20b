"""Search space: block/channel/quantization choices over a shared supernet."""

from .blocks import ConvBnUnit, ForwardContext, ShuffleUnit, he_normal
from .quantize import dorefa_quantize, fake_quantize, pact_quantize
from .spec import (
    BLOCK_KINDS,
    BLOCK_VARIANTS,
    CHANNEL_MULTIPLIERS,
    QUANT_MENU,
    Architecture,
    ChoiceBlockSpec,
    Gene,
    SupernetSpec,
    decode_architecture,
    desk_space,
    encode_architecture,
    imagenet_space,
    validate_architecture,
)
from .supernet import (
    ChoiceBlock,
    Supernet,
    build_supernet,
    default_architecture,
    forward_single_path,
    instantiate_subnet,
    reduced_spec,
)

__all__ = [
    "BLOCK_KINDS",
    "BLOCK_VARIANTS",
    "CHANNEL_MULTIPLIERS",
    "QUANT_MENU",
    "Architecture",
    "ChoiceBlock",
    "ChoiceBlockSpec",
    "ConvBnUnit",
    "ForwardContext",
    "Gene",
    "ShuffleUnit",
    "Supernet",
    "SupernetSpec",
    "build_supernet",
    "decode_architecture",
    "default_architecture",
    "desk_space",
    "dorefa_quantize",
    "encode_architecture",
    "fake_quantize",
    "forward_single_path",
    "he_normal",
    "imagenet_space",
    "instantiate_subnet",
    "pact_quantize",
    "reduced_spec",
    "validate_architecture",
]
