"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DGRD"  u32 version
    u64 len  config JSON (model config + run metadata)
    u64 n    n tensor records
    u8 flag  1 if an optimizer section follows
    [u64 len optimizer JSON, u64 n, n tensor records]

A tensor record is ``u32 name_len, name bytes, u8 dtype tag, u64 rank,
rank x u64 dims, raw little-endian values``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from typing import Dict, Optional, Tuple

import numpy as np

from .model import DenseNetConfig, Model, build_model
from .tensor import default_dtype, get_default_dtype

MAGIC = b"DGRD"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


def _write_tensor(f, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    try:
        tag = _TAGS[arr.dtype]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}") from None
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<BQ", tag, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def _read_tensor(f) -> Tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, nlen).decode("utf-8")
    tag, rank = struct.unpack("<BQ", _read_exact(f, 9))
    if tag not in _DTYPES:
        raise CheckpointError(f"unknown dtype tag {tag} for {name}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    dt = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64))
    arr = np.frombuffer(_read_exact(f, count * dt.itemsize), dtype=dt).reshape(dims)
    return name, arr.astype(dt.newbyteorder("="))


def _write_records(f, arrays: Dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<Q", len(arrays)))
    for name, arr in arrays.items():
        _write_tensor(f, name, arr)


def _read_records(f) -> Dict[str, np.ndarray]:
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    out = {}
    for _ in range(n):
        name, arr = _read_tensor(f)
        out[name] = arr
    return out


def _write_json(f, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    f.write(struct.pack("<Q", len(raw)))
    f.write(raw)


def _read_json(f):
    (n,) = struct.unpack("<Q", _read_exact(f, 8))
    return json.loads(_read_exact(f, n).decode("utf-8"))


def save_checkpoint(model: Model, path, optimizer: Optional[dict] = None) -> None:
    """Write ``model`` (and optionally optimizer state) to ``path`` atomically.

    ``optimizer`` is ``{"meta": json-able dict, "arrays": {name: ndarray}}``.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_json(buf, {"model": model.config.to_dict(), "meta": model.meta})
    _write_records(buf, model.state_arrays())
    if optimizer is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        _write_json(buf, optimizer.get("meta", {}))
        _write_records(buf, optimizer.get("arrays", {}))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path):
    """Parse a checkpoint file into ``(header, arrays, optimizer-or-None)``."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a DGRD checkpoint (bad magic bytes)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        header = _read_json(f)
        arrays = _read_records(f)
        (flag,) = struct.unpack("<B", _read_exact(f, 1))
        optimizer = None
        if flag:
            optimizer = {"meta": _read_json(f), "arrays": _read_records(f)}
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return header, arrays, optimizer


def load_checkpoint(path, config: Optional[DenseNetConfig] = None, with_optimizer: bool = False):
    """Rebuild a model from ``path``.

    With ``config`` given, the stored tensors must match the names that
    config produces. Returns the model, or ``(model, optimizer)``.
    """
    header, arrays, optimizer = read_checkpoint(path)
    stored_cfg = DenseNetConfig.from_dict(header["model"])
    cfg = config if config is not None else stored_cfg
    dtypes = {a.dtype for a in arrays.values() if a.dtype.kind == "f"}
    with default_dtype(dtypes.pop() if len(dtypes) == 1 else get_default_dtype()):
        model = build_model(cfg, 0)
    expected = model.state_arrays()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(
            f"{path}: tensor names do not match config "
            f"({len(missing)} missing e.g. {missing[:2]}, {len(extra)} unexpected e.g. {extra[:2]})")
    for name, dst in expected.items():
        src = arrays[name]
        if src.shape != dst.shape:
            raise CheckpointError(f"{path}: {name} has shape {src.shape}, config expects {dst.shape}")
        dst[...] = src
    model.meta = header.get("meta", {})
    if with_optimizer:
        return model, optimizer
    return model

