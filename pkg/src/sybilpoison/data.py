"""Datasets: IDX ingestion, synthetic generation, Dirichlet splits, label edits."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


class BadMagicError(IDXError):
    pass


class TruncatedError(IDXError):
    pass


class CountMismatchError(IDXError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (n, *image_shape), float64 in [0, 1]
    labels: np.ndarray  # (n,), int64
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# --- IDX --------------------------------------------------------------------

def _read_idx(path, magic):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedError(f"{path}: header truncated")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise TruncatedError(f"{path}: payload has {len(raw) - head} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, num_classes=10) -> LabeledDataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], shape (n, 1, rows, cols)."""
    images = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    images = images.astype(np.float64) / 255.0
    return LabeledDataset(images.reshape(images.shape[0], 1, *images.shape[1:]), labels, num_classes)


def write_idx(dataset: LabeledDataset, images_path, labels_path):
    """Inverse of load_idx (pixels rounded back to bytes)."""
    n = len(dataset)
    hw = dataset.image_shape[-2:]
    pix = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8).reshape(n, *hw)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, n, *hw) + pix.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx_dir(directory, split="train") -> LabeledDataset:
    img, lab = MNIST_FILES[split]
    return load_idx(Path(directory) / img, Path(directory) / lab)


# --- synthetic --------------------------------------------------------------

def make_synthetic(num_classes, per_class, image_shape, seed, noise=0.1, spread=0.25):
    """Gaussian class prototypes plus per-sample noise, clipped to [0, 1].

    Samples are ordered class by class. Prototypes depend on the seed only,
    so train and test sets must be cut from the same call.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(image_shape)
    protos = np.clip(0.5 + spread * rng.standard_normal((num_classes,) + shape), 0.0, 1.0)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = protos[labels]
    if noise > 0 and len(labels):
        images = images + noise * rng.standard_normal(images.shape)
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, num_classes)


def train_test_split(dataset: LabeledDataset, test_per_class: int, seed: int):
    """Stratified split: ``test_per_class`` samples of every class go to the test set."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        test_idx.extend(rng.permutation(members)[:test_per_class])
    mask = np.zeros(len(dataset), dtype=bool)
    mask[test_idx] = True
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(np.flatnonzero(mask))


# --- partitioning -----------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    assignments: dict
    alpha: float
    seed: int

    def sizes(self):
        return [len(self.assignments[k]) for k in sorted(self.assignments)]


def _largest_remainder(total, proportions):
    raw = np.asarray(proportions) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels, num_clients, alpha, seed) -> PartitionSpec:
    """Per-class Dirichlet(alpha) proportions over clients; counts by largest remainder."""
    if num_clients < 1:
        raise ValueError("num_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        counts = _largest_remainder(len(members), props)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(num_clients):
            parts[k].extend(members[bounds[k]:bounds[k + 1]].tolist())
    return PartitionSpec({k: np.sort(np.asarray(p, dtype=np.int64)) for k, p in enumerate(parts)},
                         float(alpha), seed)


def iid_partition(n, num_clients, seed) -> PartitionSpec:
    perm = np.random.default_rng(seed).permutation(n)
    return PartitionSpec({k: np.sort(p) for k, p in enumerate(np.array_split(perm, num_clients))},
                         float("inf"), seed)


# --- label-set transformations ----------------------------------------------

def flip_labels(dataset: LabeledDataset, y_tar: int, y_adv: int) -> LabeledDataset:
    """Relabel every ``y_tar`` sample as ``y_adv``."""
    if y_tar == y_adv:
        raise ValueError("y_tar and y_adv must differ")
    for y in (y_tar, y_adv):
        if not 0 <= y < dataset.num_classes:
            raise ValueError(f"class {y} outside [0, {dataset.num_classes})")
    labels = np.where(dataset.labels == y_tar, y_adv, dataset.labels)
    return LabeledDataset(dataset.images, labels, dataset.num_classes)


def select_class(dataset: LabeledDataset, y: int) -> LabeledDataset:
    """Samples labelled ``y``, order preserved (possibly empty)."""
    return dataset.subset(np.flatnonzero(dataset.labels == y))


def select_base(dataset: LabeledDataset, y_adv: int) -> LabeledDataset:
    """The poison carriers: a client's samples already labelled ``y_adv``."""
    return select_class(dataset, y_adv)
