"""Checkpoint format.

Layout::

    b"AOLKCKPT"                      8-byte magic
    u32 header_len                   little-endian
    header_len bytes of UTF-8 JSON   format version, model spec, seed, epoch, metrics
    for each parameter, in spec order (layer index, then name):
        u32 ndim, ndim * u32 dims, then float64/float32 little-endian data

The parameter table is listed in the header so the blob section can be read
without the model code.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from aolkit.layers import Model, ModelSpec

MAGIC = b"AOLKCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, *, seed: int | None = None, epoch: int = 0,
                    metrics: dict | None = None, storage: str = "float64",
                    extra: dict | None = None) -> None:
    if storage not in ("float64", "float32"):
        raise CheckpointError(f"unknown storage mode {storage!r}")
    dtype = np.dtype("<f8") if storage == "float64" else np.dtype("<f4")
    names = [name for name, _ in model.named_params()]
    header = {
        "format_version": FORMAT_VERSION,
        "storage": storage,
        "model": model.spec.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "metrics": metrics or {},
        "params": names,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in model.named_params():
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def _read_header(f) -> dict:
    if f.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an aolkit checkpoint (bad magic)")
    raw = f.read(4)
    if len(raw) != 4:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<I", raw)
    blob = f.read(n)
    if len(blob) != n:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(blob)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header


def load_checkpoint(path) -> tuple[Model, dict]:
    """Return ``(model, header)``. float32 checkpoints are widened to float64."""
    path = Path(path)
    with open(path, "rb") as f:
        header = _read_header(f)
        dtype = np.dtype("<f8") if header["storage"] == "float64" else np.dtype("<f4")
        spec = ModelSpec.from_dict(header["model"])
        params: list = [None] * len(spec.layers)
        for name in header["params"]:
            raw = f.read(4)
            if len(raw) != 4:
                raise CheckpointError(f"truncated checkpoint at parameter {name}")
            (ndim,) = struct.unpack("<I", raw)
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = f.read(count * dtype.itemsize)
            if len(data) != count * dtype.itemsize:
                raise CheckpointError(f"truncated checkpoint at parameter {name}")
            idx, pname = name.split(".", 1)
            slot = params[int(idx)]
            if slot is None:
                slot = params[int(idx)] = {}
            slot[pname] = np.frombuffer(data, dtype=dtype).astype(np.float64).reshape(shape)
        if f.read(1):
            raise CheckpointError("trailing bytes after the last parameter")
    model = Model(spec, params)
    for i, (layer, p) in enumerate(zip(spec.layers, params)):
        if layer.has_params != (p is not None):
            raise CheckpointError(f"parameter table does not match layer {i} ({layer.kind})")
    return model, header
