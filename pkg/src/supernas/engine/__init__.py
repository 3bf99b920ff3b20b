"""Minimal numpy tensor engine with reverse-mode autodiff."""

from .ops import (
    BnState,
    batch_norm,
    channel_concat,
    channel_interleave,
    channel_shuffle,
    channel_split,
    conv2d,
    global_avg_pool,
    linear,
    prefix_slice,
    relu,
    shuffle_permutation,
    softmax_cross_entropy,
)
from .optim import SGD
from .tensor import Tape, Tensor, active_tape, backward, recording

__all__ = [
    "Tensor", "Tape", "recording", "active_tape", "backward",
    "BnState", "conv2d", "batch_norm", "relu", "linear", "global_avg_pool",
    "channel_split", "channel_concat", "channel_shuffle", "channel_interleave",
    "shuffle_permutation",
    "softmax_cross_entropy", "prefix_slice", "SGD",
]
