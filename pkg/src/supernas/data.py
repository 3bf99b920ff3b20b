"""Datasets: CIFAR-10 binary files, a synthetic teacher task, and splits.

The synthetic task exists so the whole pipeline can run and be graded on a
CPU without shipping real data.  Images are smooth (low-resolution latents
upsampled to 32x32 plus mild pixel noise) and labels come from a fixed
hidden convolutional teacher, so the mapping is deterministic, balanced,
and learnable from a few thousand examples.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DatasetFormatError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_CLASSES = 10

# the teacher is the same network regardless of dataset seed
_TEACHER_SEED = 761204389
_TEACHER_CALIB = 4096


@dataclass(frozen=True)
class Dataset:
    """Images as float32 (N, C, H, W) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetFormatError(
                f"images must be (N, C, H, W), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(
                f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices],
                       self.num_classes)


def load_cifar10_binary(path) -> Dataset:
    """Parse one or more CIFAR-10 binary batch files.

    ``path`` may be a single file, a list of files, or a directory (all
    ``*.bin`` files inside, sorted).  Each record is one label byte then
    3072 channel-major RGB bytes.  Pixels are scaled to [-1, 1].
    """
    if isinstance(path, (list, tuple)):
        files = [str(p) for p in path]
    elif os.path.isdir(path):
        files = sorted(os.path.join(path, f) for f in os.listdir(path)
                       if f.endswith(".bin"))
        if not files:
            raise DatasetFormatError(f"no .bin files under {path}")
    else:
        files = [str(path)]

    images = []
    labels = []
    for f in files:
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
            offset = raw.size - raw.size % CIFAR_RECORD
            raise DatasetFormatError(
                f"{f}: truncated record at byte offset {offset} "
                f"(file holds {raw.size} bytes, records are {CIFAR_RECORD})")
        recs = raw.reshape(-1, CIFAR_RECORD)
        labs = recs[:, 0]
        bad = np.nonzero(labs >= CIFAR_CLASSES)[0]
        if bad.size:
            i = int(bad[0])
            raise DatasetFormatError(
                f"{f}: label {int(labs[i])} out of range at byte offset "
                f"{i * CIFAR_RECORD}")
        pix = recs[:, 1:].reshape(-1, 3, 32, 32)
        images.append((pix.astype(np.float32) - 127.5) / 127.5)
        labels.append(labs.astype(np.int64))
    return Dataset(np.concatenate(images), np.concatenate(labels),
                   CIFAR_CLASSES)


# ---------------------------------------------------------------------------
# synthetic teacher task


def _bilinear_upsample(z: np.ndarray, factor: int) -> np.ndarray:
    """Upsample (N, C, h, w) by an integer factor, half-pixel aligned."""
    n, c, h, w = z.shape
    out = h * factor
    pos = (np.arange(out, dtype=np.float64) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, h - 1)
    i1 = np.clip(i0 + 1, 0, h - 1)
    frac = (pos - np.floor(pos)).astype(np.float32)
    rows = z[:, :, i0, :] * (1 - frac)[None, None, :, None] \
        + z[:, :, i1, :] * frac[None, None, :, None]
    cols = rows[:, :, :, i0] * (1 - frac)[None, None, None, :] \
        + rows[:, :, :, i1] * frac[None, None, None, :]
    return cols.astype(np.float32)


class _Teacher:
    """Small fixed conv net whose argmax defines the synthetic labels."""

    def __init__(self, num_classes: int, channels: int, size: int):
        rng = np.random.default_rng(_TEACHER_SEED)
        self.w1 = rng.normal(0, np.sqrt(2.0 / (channels * 9)),
                             (12, channels, 3, 3)).astype(np.float32)
        self.w2 = rng.normal(0, np.sqrt(2.0 / (12 * 9)),
                             (24, 12, 3, 3)).astype(np.float32)
        self.wl = rng.normal(0, 1.0 / np.sqrt(24),
                             (num_classes, 24)).astype(np.float32)
        # z-normalization constants from the teacher's own calibration pool,
        # so the effective labeling function is fixed across dataset seeds
        pool = _smooth_images(rng, _TEACHER_CALIB, channels, size)
        raw = self._raw_logits(pool)
        self.mu = raw.mean(axis=0)
        self.sigma = raw.std(axis=0) + 1e-6

    def _raw_logits(self, x: np.ndarray) -> np.ndarray:
        from .engine.ops import conv2d
        from .engine.tensor import Tensor

        h = conv2d(Tensor(x), Tensor(self.w1), stride=2, padding=1).data
        h = np.maximum(h, 0)
        h = conv2d(Tensor(h), Tensor(self.w2), stride=2, padding=1).data
        h = np.maximum(h, 0)
        feat = h.mean(axis=(2, 3))
        return feat @ self.wl.T

    def labels(self, x: np.ndarray) -> np.ndarray:
        z = (self._raw_logits(x) - self.mu) / self.sigma
        return np.argmax(z, axis=1).astype(np.int64)

    def labels_and_margins(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Labels plus the gap between the top two normalized logits."""
        z = (self._raw_logits(x) - self.mu) / self.sigma
        top2 = np.partition(z, -2, axis=1)[:, -2:]
        margins = (top2[:, 1] - top2[:, 0]).astype(np.float32)
        return np.argmax(z, axis=1).astype(np.int64), margins


def _smooth_images(rng: np.random.Generator, n: int, channels: int,
                   size: int) -> np.ndarray:
    latent = rng.normal(0, 1, (n, channels, size // 4, size // 4))
    x = _bilinear_upsample(latent.astype(np.float32), 4)
    x += rng.normal(0, 0.1, x.shape).astype(np.float32)
    return x


_teacher_cache: dict[tuple[int, int, int], _Teacher] = {}


def make_synthetic(n: int, seed: int, num_classes: int = 10,
                   channels: int = 3, size: int = 32,
                   margin: float = 0.0) -> Dataset:
    """Generate a balanced synthetic dataset of ``n`` teacher-labeled images.

    Class counts are exact (within +-1 when n is not divisible by the class
    count); images are drawn until every class quota fills, so the result
    is a pure function of the arguments.  ``margin`` drops images whose top
    two teacher logits are closer than the given gap, which removes
    boundary cases and makes the task cleaner to learn.
    """
    if n < num_classes:
        raise ConfigError(f"need at least {num_classes} samples, got {n}")
    if size % 4 != 0:
        raise ConfigError(f"synthetic image size must be divisible by 4, got {size}")
    if margin < 0:
        raise ConfigError(f"margin must be nonnegative, got {margin}")
    key = (num_classes, channels, size)
    if key not in _teacher_cache:
        _teacher_cache[key] = _Teacher(*key)
    teacher = _teacher_cache[key]

    rng = np.random.default_rng(seed)
    quota = np.full(num_classes, n // num_classes, dtype=np.int64)
    quota[:n % num_classes] += 1
    parts_x = []
    parts_y = []
    need = int(quota.sum())
    rounds = 0
    while need > 0:
        rounds += 1
        if rounds > 1000:
            raise ConfigError(
                f"margin {margin} too strict: quota unfilled after "
                f"{rounds - 1} sampling rounds")
        batch = max(256, 2 * need)
        x = _smooth_images(rng, batch, channels, size)
        y, m = teacher.labels_and_margins(x)
        wide = m >= margin
        for c in np.nonzero(quota > 0)[0]:
            idx = np.nonzero((y == c) & wide)[0][:quota[c]]
            if idx.size:
                parts_x.append(x[idx])
                parts_y.append(y[idx])
                quota[c] -= idx.size
        need = int(quota.sum())
    images = np.concatenate(parts_x)
    labels = np.concatenate(parts_y)
    order = rng.permutation(images.shape[0])
    return Dataset(images[order], labels[order], num_classes)


# ---------------------------------------------------------------------------
# splits and batches


def stratified_split(ds: Dataset, fraction: float,
                     seed: int) -> tuple[Dataset, Dataset]:
    """Carve a validation split with per-class proportions kept within one
    sample of exact.  Returns (train, val)."""
    if not 0 < fraction < 1:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    val_idx = []
    train_idx = []
    for c in range(ds.num_classes):
        idx = np.nonzero(ds.labels == c)[0]
        idx = idx[rng.permutation(idx.size)]
        take = int(idx.size * fraction + 0.5)
        val_idx.append(idx[:take])
        train_idx.append(idx[take:])
    val = np.sort(np.concatenate(val_idx))
    train = np.sort(np.concatenate(train_idx))
    return ds.subset(train), ds.subset(val)


def augment_batch(x: np.ndarray, rng: np.random.Generator,
                  pad: int = 4) -> np.ndarray:
    """Random crop (zero padding) plus horizontal flip, per sample."""
    n, c, h, w = x.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = x
    out = np.empty_like(x)
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        win = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = win[:, :, ::-1] if flip[i] else win
    return out


class BatchStream:
    """Deterministic shuffled-epoch batch iterator over a dataset.

    Epoch permutations and per-batch augmentation draws are keyed by
    (seed, counter), so the stream's position is fully described by three
    integers and can be restored exactly from a checkpoint.
    """

    def __init__(self, ds: Dataset, batch: int, seed: int,
                 augment: bool = False):
        if batch < 1:
            raise ConfigError(f"batch size must be positive, got {batch}")
        if len(ds) < batch:
            raise ConfigError(
                f"dataset of {len(ds)} cannot fill batches of {batch}")
        self.ds = ds
        self.batch = batch
        self.augment = augment
        self.seed = seed
        self._epoch = -1
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0
        self._count = 0

    def _refill(self) -> None:
        self._epoch += 1
        rng = np.random.default_rng([self.seed, 17, self._epoch])
        self._order = rng.permutation(len(self.ds))
        self._pos = 0

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        take = []
        need = self.batch
        while need > 0:
            if self._pos >= self._order.size:
                self._refill()
            grab = min(need, self._order.size - self._pos)
            take.append(self._order[self._pos:self._pos + grab])
            self._pos += grab
            need -= grab
        idx = np.concatenate(take)
        x = self.ds.images[idx]
        if self.augment:
            x = augment_batch(x, np.random.default_rng(
                [self.seed, 29, self._count]))
        self._count += 1
        return x, self.ds.labels[idx]

    def state(self) -> dict[str, int]:
        return {"epoch": self._epoch, "pos": self._pos, "count": self._count}

    def load_state(self, state: dict[str, int]) -> None:
        epoch = int(state["epoch"])
        if epoch >= 0:
            self._epoch = epoch - 1
            self._refill()
        else:
            self._epoch = -1
            self._order = np.empty(0, dtype=np.int64)
        self._pos = int(state["pos"])
        self._count = int(state["count"])
