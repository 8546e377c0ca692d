import json
import struct
from pathlib import Path

import numpy as np
import pytest

from aolkit.checkpoint import (MAGIC, CheckpointError, load_checkpoint, read_header,
                               save_checkpoint)
from aolkit.config import RunConfig
from aolkit.layers import build_model, forward

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SPEC = {"input_shape": [8, 8, 1], "layers": [
    {"type": "concat_pool", "patch": 2},
    {"type": "aol_conv", "out_channels": 4, "kernel_size": 3, "activation": "maxmin"},
    {"type": "aol_conv", "out_channels": 6, "kernel_size": 2, "stride": 2},
    {"type": "flatten"},
    {"type": "aol_fc", "out_dim": 10}]}


def perturbed_model():
    m = build_model(SPEC, 3)
    rng = np.random.default_rng(0)
    for p in m.params:
        if p is not None:
            for v in p.values():
                v += rng.standard_normal(v.shape)
    return m


def test_round_trip_is_bitwise(tmp_path):
    m = perturbed_model()
    save_checkpoint(tmp_path / "m.ckpt", m, seed=3, epoch=7, metrics={"val_acc": 0.5})
    loaded, header = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(1).random((5, 8, 8, 1))
    assert np.array_equal(forward(m, x), forward(loaded, x))
    assert header["seed"] == 3 and header["epoch"] == 7 and header["metrics"] == {"val_acc": 0.5}
    assert loaded.spec == m.spec


def test_float32_storage_is_close(tmp_path):
    m = perturbed_model()
    save_checkpoint(tmp_path / "m.ckpt", m, storage="float32")
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    x = np.random.default_rng(2).random((3, 8, 8, 1))
    assert np.allclose(forward(m, x), forward(loaded, x), atol=1e-5)


def test_layout_is_little_endian_with_shapes(tmp_path):
    m = perturbed_model()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    assert header["format_version"] == 1
    off = 12 + n
    first_name, first = next(iter(m.named_params()))
    assert header["params"][0] == first_name
    (ndim,) = struct.unpack("<I", raw[off:off + 4])
    shape = struct.unpack(f"<{ndim}I", raw[off + 4:off + 4 + 4 * ndim])
    assert shape == first.shape
    start = off + 4 + 4 * ndim
    data = np.frombuffer(raw[start:start + first.size * 8], "<f8").reshape(shape)
    assert np.array_equal(data, first)


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        read_header(tmp_path / "x.ckpt")


def test_truncated(tmp_path):
    m = perturbed_model()
    save_checkpoint(tmp_path / "m.ckpt", m)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "e.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "e.ckpt")


def test_unknown_storage(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "m.ckpt", perturbed_model(), storage="float16")


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_config_round_trip_is_idempotent(name):
    cfg = RunConfig.from_file(CONFIGS / name)
    once = cfg.to_json()
    again = RunConfig.from_dict(json.loads(once)).to_json()
    assert once == again


def test_config_rejects_unknown_section():
    with pytest.raises(ValueError):
        RunConfig.from_dict({"model": SPEC, "optimizer": {}})
