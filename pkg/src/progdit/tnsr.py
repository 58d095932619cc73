"""TNSR1 binary tensor files and named parameter tables.

Layout of one blob: ``b"TNSR1"``, dtype code (u8: 0=f32, 1=f64), rank (u8),
``rank`` extents as little-endian u64, then the row-major little-endian payload.
A parameter table is a directory holding ``manifest.json`` (names, shapes,
dtypes, free-form metadata) next to one ``<name>.tnsr`` blob per entry.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, BinaryIO, Mapping

import numpy as np

MAGIC = b"TNSR1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_blob(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    code = _CODES[arr.dtype]
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_blob(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    code, rank = struct.unpack("<BB", fh.read(2))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64))
    buf = fh.read(n * dt.itemsize)
    if len(buf) != n * dt.itemsize:
        raise FormatError("truncated payload")
    return np.frombuffer(buf, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_blob(fh, arr)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_blob(fh)


def _safe(name: str) -> str:
    return name.replace("/", "_")


def save_table(directory: str | os.PathLike, arrays: Mapping[str, np.ndarray],
               meta: Mapping[str, Any] | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        fname = _safe(name) + ".tnsr"
        save(d / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "dtype": "f32" if arr.dtype == np.float32 else "f64"})
    manifest = {"format": "TNSR1-table", "entries": entries, "meta": dict(meta or {})}
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return d


def load_table(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    d = Path(directory)
    try:
        with open(d / "manifest.json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"no TNSR1 table at {d}") from None
    arrays = {}
    for e in manifest["entries"]:
        arr = load(d / e["file"])
        if list(arr.shape) != e["shape"]:
            raise FormatError(f"{e['name']}: blob shape {arr.shape} != manifest {e['shape']}")
        arrays[e["name"]] = arr
    return arrays, manifest.get("meta", {})
