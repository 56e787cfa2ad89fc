"""Self-describing binary checkpoints.

Layout: magic ``TRCK``, version byte, little-endian u32 header length, UTF-8
JSON header, then raw little-endian tensors in the header's declared order.
The header carries the artifact kind, its config, the dtype, and the tensor
names/shapes, so a file can be validated before any tensor is read.

Tensors default to float64 so that save/load round-trips training state
exactly; ``dtype="f4"`` writes compact little-endian float32 instead.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"TRCK"
_VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4"}


def save_checkpoint(path: str | Path, kind: str, config: dict,
                    named_tensors: list[tuple[str, np.ndarray]],
                    dtype: str = "f8", meta: dict | None = None) -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    header = {
        "kind": kind,
        "format_version": _VERSION,
        "dtype": dtype,
        "config": config,
        "tensors": [[name, list(arr.shape)] for name, arr in named_tensors],
        "meta": meta or {},
    }
    raw_header = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(bytes([_VERSION]))
        fh.write(struct.pack("<I", len(raw_header)))
        fh.write(raw_header)
        for _, arr in named_tensors:
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())


def load_checkpoint(path: str | Path, expected_kind: str | None = None):
    """Returns (kind, config, tensors dict, meta)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version = fh.read(1)[0]
        if version != _VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if expected_kind is not None and header["kind"] != expected_kind:
            raise DataError(
                f"{path}: checkpoint kind {header['kind']!r}, expected "
                f"{expected_kind!r}")
        np_dtype = _DTYPES[header["dtype"]]
        tensors = {}
        for name, shape in header["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(n * np.dtype(np_dtype).itemsize)
            if len(raw) < n * np.dtype(np_dtype).itemsize:
                raise DataError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=np_dtype).reshape(
                shape).astype(np.float64)
    return header["kind"], header["config"], tensors, header["meta"]
