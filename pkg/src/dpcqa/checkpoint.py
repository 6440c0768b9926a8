"""Single-file tensor checkpoints.

Layout: 8-byte little-endian header length, UTF-8 JSON header, then raw
little-endian payloads in header order. The header maps each tensor name
to ``{"shape", "dtype", "offset", "nbytes"}`` (offset relative to the
payload start) and may carry a free-form ``__meta__`` object.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header: dict = {}
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.name
        if dt not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {dt}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)}
        payloads.append(raw)
        offset += len(raw)
    if meta is not None:
        header["__meta__"] = meta
    head = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payloads:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", blob[:8])
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    meta = header.pop("__meta__", {})
    base = 8 + hlen
    tensors = {}
    for name, info in header.items():
        start = base + info["offset"]
        end = start + info["nbytes"]
        if end > len(blob):
            raise ValueError(f"{path}: payload for {name} truncated")
        arr = np.frombuffer(blob[start:end], dtype=_DTYPES[info["dtype"]])
        tensors[name] = arr.astype(info["dtype"]).reshape(info["shape"])
    return tensors, meta
