"""Dataset readers: IDX (MNIST), CIFAR-10/100 binary, CSV and synthetic blobs.

All loaders return float64 images scaled to [0, 1] (raw pixel / 255) and
int64 labels. Image data is channels-last ``(n, h, w, c)``.
"""

from __future__ import annotations

import gzip
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3072


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DatasetError(f"{len(self.x)} inputs but {len(self.y)} labels")
        if not np.all(np.isfinite(self.x)):
            raise DatasetError("dataset contains non-finite values")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    def __iter__(self):
        # unpacks as (x, labels)
        return iter((self.x, self.y))

    def head(self, n: int | None) -> "Dataset":
        if n is None:
            return self
        return Dataset(self.x[:n], self.y[:n], self.num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"file not found: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(raw: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an IDX blob (big-endian ``magic, dims..., data``)."""
    if len(raw) < 4:
        raise DatasetError("IDX data too short for a header")
    magic = int.from_bytes(raw[:4], "big")
    if expected_magic is not None and magic != expected_magic:
        raise DatasetError(f"bad IDX magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in IDX_DTYPES:
        raise DatasetError(f"bad IDX magic number 0x{magic:08x}")
    dtype = IDX_DTYPES[(magic >> 8) & 0xFF]
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError("IDX header truncated")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected = math.prod(dims) * dtype.itemsize
    body = raw[header:]
    if len(body) != expected:
        raise DatasetError(f"IDX body has {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def load_idx(path, expected_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic)


def _find(directory: Path, stem: str) -> Path:
    # both "train-images-idx3-ubyte" and "train-images.idx3-ubyte" occur in the wild
    variants = [stem, stem.replace("-idx", ".idx")]
    for name in variants:
        for suffix in ("", ".gz"):
            p = directory / (name + suffix)
            if p.exists():
                return p
    raise DatasetError(f"no {stem}[.gz] in {directory}")


def load_idx_pair(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = load_idx(images_path, IDX_IMAGES_MAGIC)
    labels = load_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[..., None] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def load_mnist_dir(directory) -> tuple[Dataset, Dataset]:
    d = Path(directory)
    train = load_idx_pair(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    test = load_idx_pair(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    return train, test


def parse_cifar(raw: bytes, label_bytes: int = 1, label_index: int = -1,
                num_classes: int = 10) -> Dataset:
    """CIFAR binary records: ``label_bytes`` label bytes then 3072 CHW pixels.

    CIFAR-100 records carry (coarse, fine) labels; ``label_index`` picks one
    (default: the last, i.e. the fine label).
    """
    record = label_bytes + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % record:
        raise DatasetError(f"CIFAR data of {len(raw)} bytes is not a whole number of "
                           f"{record}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = arr[:, label_index if label_index >= 0 else label_bytes + label_index]
    x = arr[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(x.astype(np.float64) / 255.0, labels.astype(np.int64), num_classes)


def load_cifar(paths, label_bytes: int = 1, num_classes: int = 10) -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    parts = [parse_cifar(_read_bytes(p), label_bytes, num_classes=num_classes) for p in paths]
    return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]),
                   num_classes)


def load_csv(path, shape=None, num_classes: int | None = None) -> Dataset:
    """Rows of ``label, feature_1, ..., feature_d``; features are used as given."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    labels = data[:, 0]
    if not np.all(labels == np.round(labels)):
        raise DatasetError("CSV labels must be integers")
    x = data[:, 1:]
    if shape is not None:
        x = x.reshape((len(x),) + tuple(shape))
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(x, labels, k)


def synthetic_blobs(n: int = 400, classes: int = 2, noise: float = 0.5, seed: int = 0,
                    dim: int = 2, radius: float = 2.0) -> Dataset:
    """Gaussian blobs around class centres evenly spaced on a circle of ``radius``."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centres = np.zeros((classes, dim))
    centres[:, 0] = radius * np.cos(angles)
    if dim > 1:
        centres[:, 1] = radius * np.sin(angles)
    labels = rng.integers(0, classes, n)
    x = centres[labels] + noise * rng.standard_normal((n, dim))
    return Dataset(x, labels.astype(np.int64), classes)


@dataclass
class DatasetSource:
    kind: str
    path: str | None = None
    paths: dict = field(default_factory=dict)
    n_train: int | None = None
    n_test: int | None = None
    num_classes: int | None = None
    params: dict = field(default_factory=dict)

    KINDS = ("idx_mnist", "cifar10_binary", "cifar100_binary", "synthetic_blobs", "csv")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DatasetError(f"unknown dataset kind {self.kind!r}; expected one of {self.KINDS}")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "DatasetSource":
        if not isinstance(d, dict):
            raise DatasetError("dataset source must be a JSON object")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DatasetError(f"unknown dataset keys: {sorted(unknown)}")
        src = cls(**d)
        if base_dir is not None:
            def resolve(v):
                if isinstance(v, list):
                    return [resolve(x) for x in v]
                if isinstance(v, str) and not Path(v).is_absolute():
                    return str(Path(base_dir) / v)
                return v
            src.path = resolve(src.path)
            src.paths = {k: resolve(v) for k, v in src.paths.items()}
        return src

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def load_dataset(src: DatasetSource | dict) -> tuple[Dataset, Dataset]:
    """Return ``(train, test)`` for a dataset source."""
    if isinstance(src, dict):
        src = DatasetSource.from_dict(src)
    if src.kind == "idx_mnist":
        if src.paths:
            p = src.paths
            train = load_idx_pair(p["train_images"], p["train_labels"])
            test = load_idx_pair(p["test_images"], p["test_labels"])
        else:
            train, test = load_mnist_dir(src.path)
    elif src.kind in ("cifar10_binary", "cifar100_binary"):
        fine = src.kind == "cifar100_binary"
        label_bytes, k = (2, 100) if fine else (1, 10)
        base = Path(src.path) if src.path else None
        train_files = src.paths.get("train") or (
            [base / "train.bin"] if fine else [base / f"data_batch_{i}.bin" for i in range(1, 6)])
        test_files = src.paths.get("test") or [base / "test.bin" if fine else base / "test_batch.bin"]
        train = load_cifar(train_files, label_bytes, src.num_classes or k)
        test = load_cifar(test_files, label_bytes, src.num_classes or k)
    elif src.kind == "csv":
        shape = src.params.get("shape")
        train = load_csv(src.paths["train"], shape, src.num_classes)
        test = load_csv(src.paths["test"], shape, src.num_classes or train.num_classes)
    else:
        p = dict(src.params)
        seed = int(p.pop("seed", 0))
        n_train = src.n_train or p.pop("n", 400)
        p.pop("n", None)
        n_test = src.n_test or n_train
        train = synthetic_blobs(n_train, seed=seed, **p)
        test = synthetic_blobs(n_test, seed=seed + 1, **p)
        return train, test
    return train.head(src.n_train), test.head(src.n_test)
