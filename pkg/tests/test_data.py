import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from aolkit.data import (DatasetError, DatasetSource, load_dataset, load_idx_pair,
                         load_mnist_dir, parse_cifar, parse_idx, synthetic_blobs)

DATA = Path(__file__).resolve().parents[1] / "data" / "mnist"


def idx_bytes(arr, code=0x08):
    arr = np.asarray(arr)
    header = struct.pack(">I", (code << 8) | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(">u1").tobytes()


def test_idx_header_shapes():
    images = np.arange(2 * 3 * 4).reshape(2, 3, 4) % 256
    out = parse_idx(idx_bytes(images), 0x00000803)
    assert out.shape == (2, 3, 4) and np.array_equal(out, images)
    labels = parse_idx(idx_bytes(np.array([1, 7])), 0x00000801)
    assert labels.shape == (2,)


def test_idx_bad_magic():
    with pytest.raises(DatasetError, match="magic"):
        parse_idx(idx_bytes(np.zeros((2, 2))), 0x00000801)
    with pytest.raises(DatasetError, match="magic"):
        parse_idx(b"\x01\x02\x08\x01\x00\x00\x00\x01\x00")


def test_idx_truncated():
    raw = idx_bytes(np.zeros((2, 3, 3)))
    with pytest.raises(DatasetError):
        parse_idx(raw[:-1])
    with pytest.raises(DatasetError):
        parse_idx(raw[:6])


def test_idx_pair_gz_and_scaling(tmp_path):
    images = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
    (tmp_path / "img.gz").write_bytes(gzip.compress(idx_bytes(images)))
    (tmp_path / "lab").write_bytes(idx_bytes(np.array([3])))
    ds = load_idx_pair(tmp_path / "img.gz", tmp_path / "lab")
    assert ds.x.shape == (1, 2, 2, 1)
    assert np.array_equal(ds.x[0, :, :, 0], images[0] / 255.0)
    assert ds.y.tolist() == [3]


def test_label_out_of_range(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(np.zeros((1, 2, 2))))
    (tmp_path / "lab").write_bytes(idx_bytes(np.array([12])))
    with pytest.raises(DatasetError, match="labels"):
        load_idx_pair(tmp_path / "img", tmp_path / "lab")


def test_cifar_records():
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, (2, 3, 32, 32), dtype=np.uint8)
    raw = b"".join(bytes([lab]) + p.tobytes() for lab, p in zip([4, 9], pix))
    ds = parse_cifar(raw)
    assert ds.x.shape == (2, 32, 32, 3)
    assert ds.y.tolist() == [4, 9]
    assert np.array_equal(ds.x[1], pix[1].transpose(1, 2, 0) / 255.0)


def test_cifar100_fine_label():
    raw = bytes([3, 77]) + bytes(3072)
    ds = parse_cifar(raw, label_bytes=2, num_classes=100)
    assert ds.y.tolist() == [77]


def test_cifar_truncated_record():
    with pytest.raises(DatasetError):
        parse_cifar(bytes(3072))
    with pytest.raises(DatasetError):
        parse_cifar(bytes(3073 * 2 - 5))


def test_blobs_deterministic():
    a = synthetic_blobs(n=200, classes=2, seed=7)
    b = synthetic_blobs(n=200, classes=2, seed=7)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    c = synthetic_blobs(n=200, classes=2, seed=8)
    assert not np.array_equal(a.x, c.x)


def test_csv_source(tmp_path):
    (tmp_path / "tr.csv").write_text("0,0.1,0.2\n1,0.5,0.6\n")
    (tmp_path / "te.csv").write_text("1,0.3,0.4\n")
    src = DatasetSource.from_dict({"kind": "csv", "paths": {"train": "tr.csv", "test": "te.csv"}},
                                  tmp_path)
    train, test = load_dataset(src)
    assert train.x.shape == (2, 2) and test.y.tolist() == [1]
    assert train.num_classes == 2


def test_unknown_kind_and_keys():
    with pytest.raises(DatasetError):
        DatasetSource.from_dict({"kind": "imagenet"})
    with pytest.raises(DatasetError):
        DatasetSource.from_dict({"kind": "csv", "pathz": {}})


def test_missing_file():
    with pytest.raises(DatasetError):
        load_dataset({"kind": "idx_mnist", "path": "/nonexistent"})


def test_bundled_mnist_subset():
    train, test = load_mnist_dir(DATA)
    assert train.x.shape == (5000, 28, 28, 1) and test.x.shape == (1000, 28, 28, 1)
    assert 0.0 <= train.x.min() and train.x.max() <= 1.0
    assert set(np.unique(train.y)) == set(range(10))
