"""Dataset plumbing: IDX files, synthetic shape corpora, imbalance
induction, and stratified splits.

The synthetic generator draws one template shape per class (square, ring,
cross, ...) with positional jitter, intensity jitter, and pixel noise, so
classifiers have something honest to learn at 16x16. Imbalance keeps
ceil(keep_rate * n) random samples of one class; test sets are built
balanced by splitting before induction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    ClassTooSmall,
    CountMismatch,
    TruncatedFile,
    UnknownClass,
    UnsupportedClassCount,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # [n x C x H x W], values in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int
    provenance: str = "unknown"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images {self.images.shape} and labels {self.labels.shape} disagree"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx, provenance: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            provenance=provenance or self.provenance,
        )


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFile(f"{path}: wanted {n} bytes, got {len(data)}")
    return data


def load_idx(image_path, label_path) -> LabeledDataset:
    """Read an IDX image/label pair (big-endian, pixels scaled to [0,1])."""
    with open(image_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, image_path))
        if magic != IMAGE_MAGIC:
            raise BadMagic(f"{image_path}: magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
        raw = _read_exact(fh, count * rows * cols, image_path)
    with open(label_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, label_path))
        if magic != LABEL_MAGIC:
            raise BadMagic(f"{label_path}: magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
        raw_labels = _read_exact(fh, label_count, label_path)
    if count != label_count:
        raise CountMismatch(f"{count} images vs {label_count} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if count else 1
    return LabeledDataset(images, labels, num_classes, provenance=str(image_path))


def write_idx(ds: LabeledDataset, image_path, label_path) -> None:
    """Inverse of load_idx; grayscale only (C=1), pixels rounded to uint8."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError(f"IDX export is single-channel, got C={c}")
    pixels = np.rint(ds.images * 255.0).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def _template(kind: str, size: int) -> np.ndarray:
    """One binary shape on an empty square canvas."""
    img = np.zeros((size, size))
    q, mid = size // 4, size // 2
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - (size - 1) / 2, xx - (size - 1) / 2)
    if kind == "square":
        img[q : size - q, q : size - q] = 1.0
    elif kind == "ring":
        # one-pixel ring: pixel mass well below the filled square's, so a
        # pixel-count probe separates classes 0/1 cleanly
        img[np.abs(r - size * 0.36) <= 0.7] = 1.0
    elif kind == "cross":
        img[mid - 1 : mid + 1, q : size - q] = 1.0
        img[q : size - q, mid - 1 : mid + 1] = 1.0
    elif kind == "stripes":
        img[q : size - q : 3, q : size - q] = 1.0
        img[q + 1 : size - q : 3, q : size - q] = 1.0
    elif kind == "checker":
        img[(yy // 2 + xx // 2) % 2 == 0] = 1.0
        img[r > size * 0.45] = 0.0
    elif kind == "disk":
        img[r <= size * 0.3] = 1.0
    elif kind == "frame":
        img[q : size - q, q : size - q] = 1.0
        img[q + 2 : size - q - 2, q + 2 : size - q - 2] = 0.0
    elif kind == "diag":
        img[np.abs(yy - xx) <= 1] = 1.0
    elif kind == "vee":
        img[np.abs(yy - np.abs(2 * xx - size + 1) // 2) <= 1] = 1.0
    elif kind == "dots":
        for cy in (q, size - q - 1):
            for cx in (q, mid, size - q - 1):
                img[max(cy - 1, 0) : cy + 2, max(cx - 1, 0) : cx + 2] = 1.0
    else:
        raise ValueError(f"unknown template {kind!r}")
    return img


TEMPLATES = (
    "square", "ring", "cross", "stripes", "checker",
    "disk", "frame", "diag", "vee", "dots",
)


def make_synthetic(
    num_classes: int, per_class: int, image_size: int = 16, seed: int = 0
) -> LabeledDataset:
    """Shape-per-class corpus with jittered position, intensity, and noise."""
    if num_classes > len(TEMPLATES):
        raise UnsupportedClassCount(
            f"at most {len(TEMPLATES)} synthetic classes, asked for {num_classes}"
        )
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    rng = np.random.default_rng(seed)
    images = np.empty((num_classes * per_class, 1, image_size, image_size))
    labels = np.repeat(np.arange(num_classes), per_class)
    for c in range(num_classes):
        base = _template(TEMPLATES[c], image_size)
        for j in range(per_class):
            dy, dx = rng.integers(-2, 3, size=2)
            img = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
            img = img * rng.uniform(0.7, 1.0)
            img = img + rng.normal(0.0, 0.08, img.shape)
            images[c * per_class + j, 0] = np.clip(img, 0.0, 1.0)
    order = rng.permutation(len(labels))
    return LabeledDataset(
        images[order], labels[order], num_classes, provenance=f"synthetic(seed={seed})"
    )


@dataclass
class ImbalanceSpec:
    target_class: int
    keep_rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.keep_rate <= 1.0:
            raise ValueError(f"keep_rate must lie in (0, 1], got {self.keep_rate}")


def induce_imbalance(ds: LabeledDataset, spec: ImbalanceSpec) -> LabeledDataset:
    """Keep ceil(keep_rate * n) random samples of the target class."""
    mask = ds.labels == spec.target_class
    count = int(mask.sum())
    if count == 0:
        raise UnknownClass(f"class {spec.target_class} not present")
    keep = int(np.ceil(spec.keep_rate * count))
    rng = np.random.default_rng(spec.seed)
    target_idx = np.flatnonzero(mask)
    kept = rng.choice(target_idx, size=keep, replace=False)
    idx = np.sort(np.concatenate([np.flatnonzero(~mask), kept]))
    return ds.subset(
        idx, provenance=f"{ds.provenance}|keep({spec.target_class})={spec.keep_rate}"
    )


def split(ds: LabeledDataset, test_fraction: float, seed: int = 0):
    """Stratified (train, test) partition; every class lands on both sides."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(ds.num_classes):
        rows = np.flatnonzero(ds.labels == c)
        if rows.size == 0:
            continue
        n_test = int(round(test_fraction * rows.size))
        if n_test == 0 or n_test == rows.size:
            raise ClassTooSmall(
                f"class {c} with {rows.size} sample(s) cannot give both sides "
                f"at fraction {test_fraction}"
            )
        test_idx.append(rng.permutation(rows)[:n_test])
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(len(ds), dtype=bool)
    train_mask[test_idx] = False
    return (
        ds.subset(np.flatnonzero(train_mask), provenance=f"{ds.provenance}|train"),
        ds.subset(test_idx, provenance=f"{ds.provenance}|test"),
    )


def filter_classes(ds: LabeledDataset, class_ids) -> LabeledDataset:
    """Restrict to the given classes and relabel them 0..k-1 in that order
    (the two-class task builder)."""
    class_ids = list(class_ids)
    if len(set(class_ids)) != len(class_ids):
        raise ValueError(f"duplicate class ids in {class_ids}")
    for c in class_ids:
        if not (ds.labels == c).any():
            raise UnknownClass(f"class {c} not present")
    remap = {c: i for i, c in enumerate(class_ids)}
    mask = np.isin(ds.labels, class_ids)
    labels = np.array([remap[int(c)] for c in ds.labels[mask]], dtype=np.int64)
    return LabeledDataset(
        ds.images[mask], labels, len(class_ids),
        provenance=f"{ds.provenance}|classes{tuple(class_ids)}",
    )
