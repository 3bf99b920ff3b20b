"""Supernet training, from-scratch retraining, and checkpointing.

One optimization step touches exactly one sampled path: forward and
backward run through that path only, and the optimizer updates only the
parameter regions the pass recorded.  Everything else (weights, BN
statistics, velocities of inactive choices) stays bitwise put.

Checkpoints are a small versioned binary: a header with the iteration and
RNG bookkeeping, then length-prefixed named float32 tensors.  Restoring
one reproduces the subsequent training trajectory bit for bit.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import BatchStream, Dataset
from .engine.optim import SGD
from .engine.ops import softmax_cross_entropy
from .engine.tensor import Tape, Tensor, backward, recording
from .errors import CheckpointError, ConfigError
from .sampler import PathSampler, SamplerConfig
from .space.blocks import ForwardContext
from .space.spec import Architecture, SupernetSpec
from .space.supernet import Supernet, build_supernet, default_architecture, reduced_spec

CHECKPOINT_MAGIC = b"SPOS"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; give exactly one of iterations or epochs."""

    iterations: Optional[int] = None
    epochs: Optional[int] = None
    batch: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    augment: bool = True
    checkpoint_every: int = 0
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if (self.iterations is None) == (self.epochs is None):
            raise ConfigError("give exactly one of iterations or epochs")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch < 2:
            raise ConfigError(
                f"batch must be >= 2 so batch statistics exist, got {self.batch}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.log_every < 1:
            raise ConfigError("log_every must be >= 1")

    def resolve_iterations(self, dataset_size: int) -> int:
        if self.iterations is not None:
            return self.iterations
        steps_per_epoch = -(-dataset_size // self.batch)
        return self.epochs * steps_per_epoch


class FixedSampler:
    """Sampler stand-in that always returns one architecture (retraining)."""

    def __init__(self, arch: Architecture):
        self.arch = arch
        self.rng = None

    def sample(self) -> Architecture:
        return self.arch


def train_step_single_path(net: Supernet, batch: tuple[np.ndarray, np.ndarray],
                           sampler, opt: SGD) -> tuple[float, Architecture]:
    """Sample a path, run one SGD step through it, return (loss, arch)."""
    x, y = batch
    arch = sampler.sample()
    tape = Tape()
    with recording(tape):
        logits = net.forward(Tensor(x), arch, ctx=ForwardContext(mode="train"))
        loss = softmax_cross_entropy(logits, y)
    backward(tape, loss)
    opt.step(tape)
    opt.zero_grad(tape)
    return float(loss.data), arch


# ---------------------------------------------------------------------------
# checkpoint file format


def save_checkpoint(path, iteration: int, tensors: dict[str, np.ndarray],
                    meta: Optional[dict] = None) -> None:
    """Write magic, version, iteration, a JSON meta blob, then named
    float32 tensors.  The write is staged through a temp file."""
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, iteration))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            # asarray keeps 0-dim shapes (clip thresholds are scalars)
            arr = np.asarray(tensors[name], dtype=np.float32, order="C")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    version: int
    iteration: int
    meta: dict
    tensors: dict[str, np.ndarray]


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(
                f"checkpoint {path} truncated while reading {what} "
                f"at byte {pos}")
        piece = data[pos:pos + n]
        pos += n
        return piece

    pos = 0
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, iteration = struct.unpack("<IQ", take(12, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4, "meta length"))
    meta = json.loads(take(meta_len, "meta").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape"))
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = take(4 * n, f"tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(
            f"{path}: {len(data) - pos} trailing bytes after tensors")
    return Checkpoint(version=version, iteration=iteration, meta=meta,
                      tensors=tensors)


def _training_tensors(net: Supernet, opt: SGD) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, p in net.named_params().items():
        out["param." + name] = p.data
    for name, b in net.named_buffers().items():
        out["buffer." + name] = b
    for name, v in opt.state_tensors().items():
        out[name] = v
    return out


def _rng_meta(sampler, stream: BatchStream) -> dict:
    meta = {"stream": stream.state()}
    if getattr(sampler, "rng", None) is not None:
        meta["sampler_rng"] = sampler.rng.bit_generator.state
    return meta


def _restore_training(net: Supernet, opt: SGD, sampler,
                      stream: BatchStream, ck: Checkpoint) -> int:
    params = net.named_params()
    buffers = net.named_buffers()
    want = set("param." + n for n in params) \
        | set("buffer." + n for n in buffers) \
        | set(opt.state_tensors())
    have = set(ck.tensors)
    if want != have:
        missing = sorted(want - have)[:3]
        extra = sorted(have - want)[:3]
        raise CheckpointError(
            f"checkpoint does not match the model: missing {missing}, "
            f"unexpected {extra}")
    for name, p in params.items():
        arr = ck.tensors["param." + name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"param {name}: checkpoint shape {arr.shape} != {p.data.shape}")
        p.data[...] = arr
    for name, b in buffers.items():
        arr = ck.tensors["buffer." + name]
        if arr.shape != b.shape:
            raise CheckpointError(
                f"buffer {name}: checkpoint shape {arr.shape} != {b.shape}")
        b[...] = arr
    opt.load_state_tensors(ck.tensors)
    if "stream" in ck.meta:
        stream.load_state(ck.meta["stream"])
    if "sampler_rng" in ck.meta and getattr(sampler, "rng", None) is not None:
        state = ck.meta["sampler_rng"]
        state["state"] = {k: int(v) for k, v in state["state"].items()}
        sampler.rng.bit_generator.state = state
    return ck.iteration


def load_model_weights(net: Supernet, ck: Checkpoint) -> None:
    """Restore parameters and buffers only, ignoring optimizer state."""
    params = net.named_params()
    buffers = net.named_buffers()
    want = set("param." + n for n in params) \
        | set("buffer." + n for n in buffers)
    have = set(n for n in ck.tensors if not n.startswith("velocity."))
    if want != have:
        missing = sorted(want - have)[:3]
        extra = sorted(have - want)[:3]
        raise CheckpointError(
            f"checkpoint does not match the model: missing {missing}, "
            f"unexpected {extra}")
    for name, p in params.items():
        arr = ck.tensors["param." + name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"param {name}: checkpoint shape {arr.shape} != {p.data.shape}")
        p.data[...] = arr
    for name, b in buffers.items():
        arr = ck.tensors["buffer." + name]
        if arr.shape != b.shape:
            raise CheckpointError(
                f"buffer {name}: checkpoint shape {arr.shape} != {b.shape}")
        b[...] = arr


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    losses: list[float]
    start_iteration: int
    total_iterations: int
    checkpoints: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _check_dataset(spec: SupernetSpec, ds: Dataset, cfg: TrainConfig) -> None:
    if len(ds) == 0:
        raise ConfigError("dataset is empty")
    n, c, h, w = ds.images.shape
    if c != spec.input_channels or h != spec.input_size or w != spec.input_size:
        raise ConfigError(
            f"dataset images are {c}x{h}x{w}, spec wants "
            f"{spec.input_channels}x{spec.input_size}x{spec.input_size}")
    if ds.num_classes != spec.num_classes:
        raise ConfigError(
            f"dataset has {ds.num_classes} classes, spec wants "
            f"{spec.num_classes}")
    if len(ds) < cfg.batch:
        raise ConfigError(
            f"dataset of {len(ds)} cannot fill batches of {cfg.batch}")


def train_supernet(net: Supernet, ds: Dataset, cfg: TrainConfig,
                   sampler=None, out_dir=None,
                   resume: Optional[str] = None,
                   progress: Optional[Callable[[int, float], None]] = None
                   ) -> TrainResult:
    """Run the single-path step loop with a linearly decaying LR.

    Writes periodic and final checkpoints under ``out_dir`` when given;
    ``resume`` restores one and continues as if never interrupted.
    """
    _check_dataset(net.spec, ds, cfg)
    total = cfg.resolve_iterations(len(ds))
    if sampler is None:
        sampler = PathSampler(net.spec, SamplerConfig(seed=cfg.seed + 1))
    opt = SGD(net.named_params(), cfg.lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay)
    stream = BatchStream(ds, cfg.batch, seed=cfg.seed, augment=cfg.augment)
    start = 0
    if resume is not None:
        start = _restore_training(net, opt, sampler, stream,
                                  load_checkpoint(resume))
        if start > total:
            raise ConfigError(
                f"checkpoint is at iteration {start}, config stops at {total}")

    losses: list[float] = []
    written: list[str] = []

    def dump(iteration: int, name: str) -> None:
        path = os.path.join(out_dir, name)
        save_checkpoint(path, iteration, _training_tensors(net, opt),
                        meta=_rng_meta(sampler, stream))
        written.append(path)

    for t in range(start, total):
        opt.lr = cfg.lr * (1.0 - t / total)
        loss, _arch = train_step_single_path(net, stream.next_batch(),
                                             sampler, opt)
        losses.append(loss)
        done = t + 1
        if progress is not None and (done % cfg.log_every == 0 or done == total):
            progress(done, loss)
        if out_dir and cfg.checkpoint_every \
                and done % cfg.checkpoint_every == 0 and done < total:
            dump(done, f"checkpoint_{done:07d}.bin")
    if out_dir:
        dump(total, "checkpoint_final.bin")
    return TrainResult(
        losses=losses, start_iteration=start, total_iterations=total,
        checkpoints=written,
        meta={"iterations": total, "epochs": cfg.epochs, "batch": cfg.batch,
              "lr": cfg.lr, "seed": cfg.seed})


def evaluate_accuracy(net: Supernet, arch: Architecture, ds: Dataset,
                      bn_stats: Optional[dict] = None,
                      batch: int = 256) -> float:
    """Top-1 accuracy in eval mode; weights and statistics are read-only."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    ctx = ForwardContext(mode="eval", bn_stats=bn_stats)
    correct = 0
    for lo in range(0, len(ds), batch):
        x = Tensor(ds.images[lo:lo + batch])
        logits = net.forward(x, arch, ctx=ctx)
        pred = np.argmax(logits.data, axis=1)
        correct += int((pred == ds.labels[lo:lo + batch]).sum())
    return correct / len(ds)


def retrain_architecture(arch: Architecture, spec: SupernetSpec,
                         train_ds: Dataset, cfg: TrainConfig,
                         val_ds: Optional[Dataset] = None,
                         out_dir=None,
                         progress: Optional[Callable[[int, float], None]] = None
                         ) -> tuple[Supernet, Optional[float], TrainResult]:
    """Train the chosen architecture from scratch (fresh initialization,
    no inherited weights) and report its validation accuracy."""
    sub_spec = reduced_spec(spec, arch)
    net = build_supernet(sub_spec, seed=cfg.seed)
    fixed = default_architecture(sub_spec)
    result = train_supernet(net, train_ds, cfg, sampler=FixedSampler(fixed),
                            out_dir=out_dir, progress=progress)
    acc = None
    if val_ds is not None:
        acc = evaluate_accuracy(net, fixed, val_ds)
    return net, acc, result
