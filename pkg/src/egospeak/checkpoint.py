"""Binary checkpoint container.

Layout::

    b"EGOCKPT\\0"            8-byte magic
    uint32 LE                format version
    uint64 LE                header length H
    H bytes                  UTF-8 JSON header
    raw tensor data          little-endian, concatenated in header order

The header holds ``{"meta": {...}, "tensors": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}``; offsets are relative to the start of the data
block. Tensors round-trip bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .errors import DataError

MAGIC = b"EGOCKPT\0"
VERSION = 1
_DTYPES = {"float32", "float64", "int64", "int32", "uint8", "bool"}


def _as_numpy(t: Any) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")  # ascontiguousarray would turn 0-d into 1-d
    if arr.dtype.name not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {arr.dtype}")
    return arr


def save_checkpoint(path: str | Path, tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = _as_numpy(t)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Returns ``(tensors, meta)``; tensors are numpy arrays in native order."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    base = start + hlen
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        lo = base + e["offset"]
        arr = np.frombuffer(data, dtype=dt, count=e["nbytes"] // dt.itemsize, offset=lo)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return tensors, header["meta"]


def state_to_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
    state = {k[len(prefix) :]: torch.from_numpy(np.array(v)) for k, v in tensors.items() if k.startswith(prefix)}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if strict and (missing or unexpected):
        raise DataError(f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
