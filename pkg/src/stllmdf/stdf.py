"""STDF binary tensor files and parameter bundles.

Layout of one tensor file (all integers little-endian)::

    b"STDF" | version u16 | dtype tag u8 | rank u8 | extents u64 * rank | payload

Dtype tags: 1 = float32, 2 = float64, 3 = int64.  The payload is row-major.

A bundle is a directory holding one ``<name>.stdf`` per array plus a
``manifest.txt`` of ``key = value`` lines.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"STDF"
VERSION = 1
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind in "iu":
        arr = arr.astype(np.int64)
    tag = _TAG_OF.get(arr.dtype)
    if tag is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<HBB", VERSION, tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise IntegrityError("header", f"file is {len(buf)} bytes, shorter than the fixed header")
    if buf[:4] != MAGIC:
        raise IntegrityError("magic", f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    version, tag, rank = struct.unpack_from("<HBB", buf, 4)
    if version != VERSION:
        raise IntegrityError("version", f"unsupported format version {version}")
    if tag not in _TAGS:
        raise IntegrityError("dtype", f"unknown dtype tag {tag}")
    offset = 8 + 8 * rank
    if len(buf) < offset:
        raise IntegrityError("extents", f"expected {rank} extents, file ends early")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    dtype = _TAGS[tag]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - offset
    if actual != expected:
        raise IntegrityError("payload", f"expected {expected} bytes for shape {shape}, found {actual}")
    out = np.frombuffer(buf, dtype=dtype, offset=offset).reshape(shape)
    return out.astype(dtype.newbyteorder("="), copy=True)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise IntegrityError("manifest", f"line {n} is not 'key = value': {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_bundle(directory, arrays: dict, manifest: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        save(directory / f"{name}.stdf", arr)
    entries = dict(manifest or {})
    entries["arrays"] = ",".join(sorted(arrays))
    entries["format_version"] = VERSION
    write_manifest(directory / "manifest.txt", entries)


def load_bundle(directory) -> tuple:
    """Return ``(arrays, manifest)`` for a bundle directory."""
    directory = Path(directory)
    if not (directory / "manifest.txt").exists():
        raise FileNotFoundError(f"no bundle manifest in {directory}")
    manifest = read_manifest(directory / "manifest.txt")
    names = [n for n in manifest.get("arrays", "").split(",") if n]
    arrays = {}
    for name in names:
        path = directory / f"{name}.stdf"
        if not path.exists():
            raise IntegrityError(name, f"listed in manifest but {os.fspath(path)} is missing")
        arrays[name] = load(path)
    return arrays, manifest
