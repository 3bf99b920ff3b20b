import numpy as np
import pytest

from supernas.data import make_synthetic, stratified_split
from supernas.space.spec import (BLOCK_VARIANTS, ChoiceBlockSpec,
                                 SupernetSpec)


def toy_space(num_blocks: int = 3) -> SupernetSpec:
    """Tiny enumerable space (4^num_blocks) for sampler and search tests."""
    stages = ((num_blocks, 16, 2),)
    blocks = tuple(
        ChoiceBlockSpec(kind="block", stride=2 if j == 0 else 1,
                        base_channels=16, variants=BLOCK_VARIANTS)
        for j in range(num_blocks))
    return SupernetSpec(num_classes=10, stem_channels=16, stem_stride=1,
                        stages=stages, blocks=blocks, head_channels=32,
                        input_size=32)


@pytest.fixture(scope="session")
def synth512():
    """Small shared synthetic dataset for trainer and CLI tests."""
    return make_synthetic(512, seed=3)


@pytest.fixture(scope="session")
def synth512_split(synth512):
    return stratified_split(synth512, 0.125, seed=0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
