"""Labeled example sets: synthetic Gaussian clusters and IDX (MNIST) ingestion."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

ROLES = ("pretrain", "finetune-train", "finetune-test")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Examples with integer labels restricted to ``class_set``.

    ``ids`` are stable example identifiers (row positions in the set the
    examples were first drawn into); subsets keep them so that scores and
    retraining weights can always be traced back.
    """

    features: np.ndarray
    labels: np.ndarray
    role: str
    class_set: tuple
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1) if feats.size else feats.reshape(0, 0)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if feats.shape[0] != labels.shape[0]:
            raise DataFormatError(f"{feats.shape[0]} feature rows but {labels.shape[0]} labels")
        classes = tuple(sorted(int(c) for c in self.class_set))
        if len(set(classes)) != len(classes):
            raise DataFormatError(f"repeated classes in {self.class_set}")
        if labels.size and not np.isin(labels, classes).all():
            bad = sorted(set(labels.tolist()) - set(classes))
            raise DataFormatError(f"labels {bad} outside class set {classes}")
        if self.role not in ROLES:
            raise DataFormatError(f"unknown role {self.role!r}")
        ids = np.arange(labels.size) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != labels.shape:
            raise DataFormatError("ids must align with labels")
        for name, arr in (("features", feats), ("labels", labels), ("ids", ids)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "class_set", classes)

    def __len__(self):
        return int(self.labels.size)

    @property
    def dim(self):
        return int(self.features.shape[1]) if self.features.ndim == 2 else 0

    @property
    def targets(self):
        """Labels re-indexed to ``0..len(class_set)-1`` for the classifier heads."""
        return np.searchsorted(np.asarray(self.class_set), self.labels)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return Dataset(self.features[idx], self.labels[idx], self.role, self.class_set, self.ids[idx])

    def without(self, indices):
        mask = np.ones(len(self), dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = False
        return self.subset(np.flatnonzero(mask))

    def position(self, example_id):
        hits = np.flatnonzero(self.ids == example_id)
        if hits.size != 1:
            raise KeyError(f"example id {example_id} not present exactly once")
        return int(hits[0])

    def with_role(self, role, class_set=None):
        return Dataset(self.features, self.labels, role,
                       self.class_set if class_set is None else class_set, self.ids)

    def filter_classes(self, classes, role=None):
        classes = tuple(sorted(int(c) for c in classes))
        keep = np.flatnonzero(np.isin(self.labels, classes))
        sub = self.subset(keep)
        return Dataset(sub.features, sub.labels, role or self.role, classes, np.arange(keep.size))

    def digest(self):
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.ids):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.role, self.class_set)).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    dim: int
    per_class: int
    class_means_seed: int = 0
    noise_sigma: float = 1.0
    mean_scale: float = 1.0
    sample_seed: int = 0


def class_means(num_classes, dim, seed, scale=1.0):
    return np.random.default_rng(seed).normal(size=(num_classes, dim)) * scale


def make_synthetic(spec, role="pretrain", classes=None):
    """Gaussian clusters, one deterministic mean per class.

    Means depend only on ``class_means_seed`` so that sets drawn with different
    ``sample_seed`` values share the same class geometry. ``classes`` picks the
    subset of the ``num_classes`` universe to sample (all by default); examples
    are emitted class by class.
    """
    if spec.num_classes < 2:
        raise DataFormatError("num_classes must be at least 2")
    if spec.dim <= 0:
        raise DataFormatError("dim must be positive")
    if spec.per_class < 1:
        raise DataFormatError("per_class must be at least 1")
    if not spec.noise_sigma > 0:
        raise DataFormatError("noise_sigma must be positive")
    classes = tuple(range(spec.num_classes)) if classes is None else tuple(sorted(classes))
    if any(c < 0 or c >= spec.num_classes for c in classes):
        raise DataFormatError(f"classes {classes} outside 0..{spec.num_classes - 1}")
    means = class_means(spec.num_classes, spec.dim, spec.class_means_seed, spec.mean_scale)
    rng = np.random.default_rng([spec.sample_seed, spec.class_means_seed])
    feats, labels = [], []
    for c in classes:
        feats.append(means[c] + spec.noise_sigma * rng.normal(size=(spec.per_class, spec.dim)))
        labels.append(np.full(spec.per_class, c))
    return Dataset(np.concatenate(feats), np.concatenate(labels), role, classes)


# ---------------------------------------------------------------------------
# IDX


def _read_header(raw, expected_magic, path):
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    return count


def read_idx_labels(path):
    raw = Path(path).read_bytes()
    count = _read_header(raw, LABEL_MAGIC, path)
    if len(raw) != 8 + count:
        raise DataFormatError(f"{path}: payload has {len(raw) - 8} bytes, header says {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def read_idx_images(path):
    raw = Path(path).read_bytes()
    count = _read_header(raw, IMAGE_MAGIC, path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    rows, cols = struct.unpack(">II", raw[8:16])
    if len(raw) != 16 + count * rows * cols:
        raise DataFormatError(
            f"{path}: payload has {len(raw) - 16} bytes, header says {count}x{rows}x{cols}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 image stack and labels in IDX layout (used for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, labels.size) + labels.tobytes())


def load_idx(images_path, labels_path, class_filter, limit=None, role="pretrain"):
    """Load an IDX image/label pair, keeping at most ``limit`` matching records in file order."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    classes = tuple(sorted(int(c) for c in class_filter))
    keep = np.flatnonzero(np.isin(labels, classes))
    if limit is not None:
        keep = keep[:limit]
    feats = images[keep].reshape(keep.size, -1 if keep.size else int(np.prod(images.shape[1:])))
    feats = feats.astype(np.float64) / 255.0
    if keep.size == 0:
        feats = feats.reshape(0, images.shape[1] * images.shape[2])
    return Dataset(feats, labels[keep], role, classes)
