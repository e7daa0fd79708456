"""Datasets: a seeded teacher-network task and MNIST-style IDX files."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .nn import MLP, predict

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int
    teacher: MLP | None = None

    def __post_init__(self):
        for x, y in ((self.x_train, self.y_train), (self.x_val, self.y_val)):
            if len(x) != len(y):
                raise ConfigError("feature/label count mismatch")
            if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
                raise ConfigError("label outside class range")

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    def probe(self, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Fixed random subset of the training data."""
        n = len(self.y_train)
        idx = np.sort(rng.permutation(n)[: min(size, n)])
        return self.x_train[idx], self.y_train[idx]


def split(x, y, n_classes, val_fraction, rng, teacher=None) -> Dataset:
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must be in [0, 1)")
    order = rng.permutation(len(y))
    n_val = int(round(val_fraction * len(y)))
    val, train = order[:n_val], order[n_val:]
    return Dataset(x[train], y[train], x[val], y[val], n_classes, teacher)


def _balance_bias(logits: np.ndarray, iters: int = 500) -> np.ndarray:
    """Output-bias shift that makes argmax classes roughly equally frequent."""
    n, c = logits.shape
    if c == 2:
        # exact: split at the median of the logit margin
        return np.array([0.0, float(np.median(logits[:, 0] - logits[:, 1]))])
    b = np.zeros(c)
    step = float(logits.std())
    for _ in range(iters):
        freq = np.bincount((logits + b).argmax(axis=1), minlength=c) / n
        if np.abs(freq - 1.0 / c).max() < 0.5 / np.sqrt(n):
            break
        b -= step * (freq - 1.0 / c)
        step *= 0.99
    return b


def make_synthetic(
    sizes: Sequence[int],
    n_samples: int,
    noise: float = 0.0,
    seed: int = 0,
    val_fraction: float = 0.2,
    balanced: bool = True,
) -> Dataset:
    """Labels from the argmax of a seeded random teacher MLP.

    Inputs are standard normal.  With ``balanced`` the teacher's output bias
    is shifted so classes are about equally likely.  ``noise`` is the fraction
    of labels replaced by a different, uniformly chosen class.
    """
    if len(sizes) < 2 or sizes[-1] < 2:
        raise ConfigError("teacher needs at least two output classes")
    if not 0.0 <= noise <= 1.0:
        raise ConfigError("noise must be in [0, 1]")
    ss = np.random.SeedSequence(seed)
    teacher_seed, x_seq, cal_seq, noise_seq, split_seq = ss.spawn(5)
    teacher = MLP.from_sizes(sizes, seed=teacher_seed.generate_state(1)[0])
    n_classes = sizes[-1]
    if balanced:
        cal = np.random.default_rng(cal_seq).standard_normal((max(4096, n_samples), sizes[0]))
        teacher.linears()[-1].bias += _balance_bias(predict(teacher, cal))
    x = np.random.default_rng(x_seq).standard_normal((n_samples, sizes[0]))
    y = predict(teacher, x).argmax(axis=1)
    if noise:
        rng = np.random.default_rng(noise_seq)
        flip = np.flatnonzero(rng.random(n_samples) < noise)
        shift = rng.integers(1, n_classes, size=flip.size)
        y[flip] = (y[flip] + shift) % n_classes
    return split(x, y.astype(np.int64), n_classes, val_fraction, np.random.default_rng(split_seq), teacher)


def _read_idx(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head != count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, val_fraction: float = 0.0, seed: int = 0, n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 1
    return split(x, y, n_classes, val_fraction, np.random.default_rng(seed))


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as an IDX file (3-d images or 1-d labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise FormatError("only 3-d image and 1-d label arrays are supported")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())
