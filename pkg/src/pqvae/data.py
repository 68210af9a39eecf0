"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, synthetic clusters."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 32 * 32 * 3


@dataclass
class Normalization:
    """``features = raw * scale + offset`` (scalars or per-feature arrays)."""

    scale: float | np.ndarray = 1.0
    offset: float | np.ndarray = 0.0

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) * self.scale + self.offset

    def invert(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.offset) / self.scale


@dataclass
class Dataset:
    features: np.ndarray  # (n, L) float64
    labels: np.ndarray  # (n,) int64
    source: str
    normalization: Normalization = field(default_factory=Normalization)
    centers: np.ndarray | None = None  # synthetic data only

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ParseError(
                f"features {self.features.shape} and labels {self.labels.shape} are inconsistent"
            )
        if not np.all(np.isfinite(self.features)):
            raise ParseError("dataset features contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.features[idx], self.labels[idx], self.source, self.normalization, self.centers
        )


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _parse_idx(buf: bytes, magic: int, what: str, path) -> tuple[tuple[int, ...], memoryview]:
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise ParseError(f"{path}: truncated {what} file at byte offset {len(buf)} (need 4-byte magic)")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise ParseError(f"{path}: bad {what} magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(buf) < header:
        raise ParseError(f"{path}: truncated {what} header at byte offset {len(buf)}")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = header + int(np.prod(dims))
    if len(buf) < need:
        raise ParseError(
            f"{path}: truncated {what} data at byte offset {len(buf)}, expected {need} bytes"
        )
    return dims, memoryview(buf)[header:need]


def load_idx(images_path, labels_path, source: str = "mnist") -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    img_dims, img = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, "image", images_path)
    lab_dims, lab = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, "label", labels_path)
    if img_dims[0] != lab_dims[0]:
        raise ParseError(
            f"image count {img_dims[0]} does not match label count {lab_dims[0]}"
        )
    n = img_dims[0]
    L = img_dims[1] * img_dims[2]
    raw = np.frombuffer(img, dtype=np.uint8).reshape(n, L)
    norm = Normalization(1.0 / 255.0, 0.0)
    return Dataset(norm.apply(raw), np.frombuffer(lab, dtype=np.uint8).astype(np.int64), source, norm)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(path, split: str = "train") -> Dataset:
    """Load MNIST from a directory holding the standard (uncompressed) IDX files.

    ``path`` may also be a ``(images_file, labels_file)`` pair.
    """
    if isinstance(path, (tuple, list)):
        images, labels = path
    else:
        if split not in MNIST_FILES:
            raise ConfigurationError(f"unknown MNIST split {split!r}")
        images, labels = (os.path.join(path, f) for f in MNIST_FILES[split])
    return load_idx(images, labels, f"mnist:{split}")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def parse_cifar10_batch(buf: bytes, source: str = "cifar10") -> Dataset:
    if len(buf) % CIFAR_RECORD:
        raise ParseError(
            f"{source}: size {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    norm = Normalization(1.0 / 255.0, 0.0)
    return Dataset(norm.apply(rec[:, 1:]), rec[:, 0].astype(np.int64), source, norm)


CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


def load_cifar10(path, split: str | None = None) -> Dataset:
    """Load a CIFAR-10 binary batch file, or a whole split from its directory.

    A directory with ``split="train"`` concatenates ``data_batch_1..5`` (50000
    images); ``split="test"`` reads ``test_batch.bin`` (10000).
    """
    if os.path.isdir(path):
        if split not in CIFAR_FILES:
            raise ConfigurationError(f"unknown CIFAR-10 split {split!r}")
        parts = [parse_cifar10_batch(_read(os.path.join(path, f)), f) for f in CIFAR_FILES[split]]
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            f"cifar10:{split}",
            parts[0].normalization,
        )
    return parse_cifar10_batch(_read(path), f"cifar10:{os.path.basename(path)}")


def write_cifar10_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, 3072)`` and labels as one CIFAR-10 binary batch."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


@dataclass
class SyntheticSpec:
    num_clusters: int = 10
    points_per_cluster: int = 100
    dimension: int = 32
    cluster_std: float = 1.0
    seed: int = 0
    center_scale: float = 4.0  # std of the Gaussian the centres are drawn from

    def validate(self) -> "SyntheticSpec":
        if min(self.num_clusters, self.points_per_cluster, self.dimension) < 1:
            raise ConfigurationError("synthetic counts and dimension must be positive")
        if self.cluster_std < 0 or self.center_scale <= 0:
            raise ConfigurationError("cluster_std must be >= 0 and center_scale > 0")
        return self


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Isotropic Gaussian clusters; labels are cluster ids, rows grouped by cluster."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.center_scale, size=(spec.num_clusters, spec.dimension))
    labels = np.repeat(np.arange(spec.num_clusters), spec.points_per_cluster)
    noise = rng.normal(0.0, 1.0, size=(len(labels), spec.dimension))
    feats = centers[labels] + spec.cluster_std * noise
    return Dataset(feats, labels, f"synthetic:seed={spec.seed}", Normalization(), centers)


def split_dataset(ds: Dataset, query_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint (database, query) split."""
    if not 0.0 <= query_fraction < 1.0:
        raise ConfigurationError(f"query_fraction must lie in [0, 1), got {query_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_q = int(round(query_fraction * len(ds)))
    q_idx, db_idx = np.sort(perm[:n_q]), np.sort(perm[n_q:])
    return ds.subset(db_idx), ds.subset(q_idx)
