"""Dataset loading, synthesis, and minibatch scheduling.

Two sources are supported: IDX image/label file pairs (big-endian binary,
pixels scaled to [0, 1]) and synthetic Gaussian blobs for desk-scale runs
without any files on disk. Minibatch order is a pure function of
(shuffle_seed, epoch_index) so reruns reproduce the exact same batches.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .mlp import Batch

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """IDX file violated the expected binary layout."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) float64 plus labels (n,) and a class count."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.ndim != 1:
            raise ValueError("features must be (n, d) and labels (n,)")
        if features.shape[0] != labels.shape[0]:
            raise ValueError("feature row count does not match label count")
        if features.shape[0] < 1:
            raise ValueError("dataset must hold at least one sample")
        if not np.isfinite(features).all():
            raise ValueError("dataset features must be finite")
        if int(self.num_classes) < 2:
            raise ValueError("dataset needs at least 2 classes")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError("labels out of range for num_classes")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def n(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class SamplerConfig:
    """Minibatch plan: block size over a per-epoch permutation."""

    batch_size: int
    shuffle_seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def _read_exact(handle, count, path):
    data = handle.read(count)
    if len(data) != count:
        offset = handle.tell() - len(data)
        raise IdxFormatError(
            f"short read in {path}: wanted {count} bytes at offset {offset}, "
            f"got {len(data)}"
        )
    return data


def load_idx(images_path, labels_path, limit=None):
    """Load an IDX image/label pair into a flat-feature Dataset.

    Pixels are scaled to [0, 1] by dividing by 255. ``limit`` truncates both
    files to the first ``limit`` samples.
    """
    with open(images_path, "rb") as handle:
        magic, count, rows, cols = struct.unpack(
            ">IIII", _read_exact(handle, 16, images_path)
        )
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"magic number mismatch in image file: got 0x{magic:08x}, "
                f"expected 0x{IMAGE_MAGIC:08x}"
            )
        keep = count if limit is None else min(count, int(limit))
        pixels = np.frombuffer(
            _read_exact(handle, keep * rows * cols, images_path), dtype=np.uint8
        )
    with open(labels_path, "rb") as handle:
        magic, label_count = struct.unpack(
            ">II", _read_exact(handle, 8, labels_path)
        )
        if magic != LABEL_MAGIC:
            raise IdxFormatError(
                f"magic number mismatch in label file: got 0x{magic:08x}, "
                f"expected 0x{LABEL_MAGIC:08x}"
            )
        keep_labels = label_count if limit is None else min(label_count, int(limit))
        labels = np.frombuffer(
            _read_exact(handle, keep_labels, labels_path), dtype=np.uint8
        )
    if keep != keep_labels:
        raise IdxFormatError(
            f"image count {keep} does not match label count {keep_labels} "
            f"after truncation"
        )
    if keep < 1:
        raise IdxFormatError("IDX pair holds no samples after truncation")
    features = pixels.reshape(keep, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1)


def synth_blobs(seed, n_per_class, num_classes, dim, separation):
    """Gaussian blobs: class c sits at separation * u_c with unit-variance noise.

    Centers use deterministic unit directions on the circle spanned by the
    first two coordinates, so the dataset is a pure function of the
    arguments. ``separation = 0`` collapses every class onto the origin.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 2:
        raise ValueError("need at least 2 feature dimensions")
    if n_per_class < 1:
        raise ValueError("need at least 1 sample per class")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    centers = np.zeros((num_classes, dim))
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    centers[:, 0] = separation * np.cos(angles)
    centers[:, 1] = separation * np.sin(angles)
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    noise = rng.standard_normal((num_classes * n_per_class, dim))
    return Dataset(centers[labels] + noise, labels, num_classes)


def full_batch(dataset):
    """The whole dataset as one batch, in stored order."""
    return Batch(dataset.features, dataset.labels)


def epoch_batches(dataset, sampler, epoch_index):
    """Minibatches for one epoch: permutation keyed by (shuffle_seed, epoch).

    Consecutive blocks of ``batch_size``; the final short block is dropped
    only when ``drop_last`` is set.
    """
    if sampler.batch_size > dataset.n:
        raise ValueError(
            f"batch_size {sampler.batch_size} exceeds dataset size {dataset.n}"
        )
    if epoch_index < 0:
        raise ValueError("epoch_index must be nonnegative")
    rng = np.random.default_rng([sampler.shuffle_seed, epoch_index])
    perm = rng.permutation(dataset.n)
    batches = []
    for start in range(0, dataset.n, sampler.batch_size):
        idx = perm[start:start + sampler.batch_size]
        if idx.size < sampler.batch_size and sampler.drop_last:
            break
        batches.append(Batch(dataset.features[idx], dataset.labels[idx]))
    return batches
