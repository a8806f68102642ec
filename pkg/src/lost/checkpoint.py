"""Binary checkpoints.

Layout, all integers little-endian:

    magic "LOST1" | version u32 | config length u64 + utf-8 text |
    tensor count u64 | per tensor: name length u64 + name, dtype code u8,
    ndim u64, dims u64 each, raw little-endian scalars

Tensors are written in the model walk order (trainable params, then the
channel index buffers), so save -> load -> save is byte-identical. Loading
rebuilds the model from the embedded config and validates every shape.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .config import ExperimentConfig, parse_config
from .model import Model, build_model

MAGIC = b"LOST1"
VERSION = 1

_DTYPE_CODES = {"float32": 0, "float64": 1, "int64": 2}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    kind = str(arr.dtype)
    if kind not in _DTYPE_CODES:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {kind}")
    nb = name.encode("utf-8")
    buf.write(struct.pack("<Q", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", _DTYPE_CODES[kind]))
    buf.write(struct.pack("<Q", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(path: str | Path, model: Model, config_text: str = "") -> None:
    tensors = list(model.named_params()) + list(model.named_buffers())
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cb = config_text.encode("utf-8")
    buf.write(struct.pack("<Q", len(cb)))
    buf.write(cb)
    buf.write(struct.pack("<Q", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def load_checkpoint(path: str | Path) -> tuple[str, dict]:
    """Returns (config text echo, ordered name -> array dict)."""
    with open(path, "rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<Q", _read_exact(f, 8))
        config_text = _read_exact(f, clen).decode("utf-8")
        (count,) = struct.unpack("<Q", _read_exact(f, 8))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<Q", _read_exact(f, 8))
            name = _read_exact(f, nlen).decode("utf-8")
            (code,) = struct.unpack("<B", _read_exact(f, 1))
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            (ndim,) = struct.unpack("<Q", _read_exact(f, 8))
            shape = tuple(
                struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim)
            )
            dtype = _CODE_DTYPES[code]
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            arr = np.frombuffer(_read_exact(f, nbytes), dtype=dtype).reshape(shape)
            tensors[name] = arr.astype(arr.dtype.newbyteorder("=")).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after the last tensor record")
    return config_text, tensors


def restore_model(path: str | Path, dtype=None) -> tuple[Model, ExperimentConfig]:
    """Rebuild the model a checkpoint describes and load its tensors,
    validating every shape against the embedded config."""
    config_text, tensors = load_checkpoint(path)
    if not config_text:
        raise CheckpointError("checkpoint has no config echo; cannot rebuild the model")
    cfg = parse_config(config_text)
    first = next(iter(tensors.values()))
    model = build_model(cfg.model, dtype=dtype if dtype is not None else first.dtype)
    expected = dict(model.named_params())
    buffers = dict(model.named_buffers())
    seen = set()
    for name, arr in tensors.items():
        if name in expected:
            if expected[name].shape != arr.shape:
                raise CheckpointError(
                    f"tensor {name!r}: shape {arr.shape} != expected {expected[name].shape}"
                )
            expected[name][...] = arr
        elif name in buffers:
            if buffers[name].shape != arr.shape:
                raise CheckpointError(
                    f"index list {name!r}: shape {arr.shape} != expected {buffers[name].shape}"
                )
            buffers[name][...] = arr
        else:
            raise CheckpointError(f"unexpected tensor {name!r} for this config")
        seen.add(name)
    missing = (set(expected) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return model, cfg
