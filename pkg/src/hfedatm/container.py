"""Framed binary container used for checkpoints, Gram sidecars and data dumps.

Layout (all integers little-endian)::

    magic      4 bytes   b"HFAM" | b"HFGM" | b"HFDT" | b"HFUP"
    version    u16
    length     u32       byte length of the manifest
    manifest   UTF-8 JSON, keys sorted
    payload    arrays back to back, raw little-endian, in manifest order

The manifest carries an ``"arrays"`` list of ``{"name", "dtype", "shape"}``
entries describing the payload. Floats are always stored as ``<f8``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

FORMAT_VERSION = 1

CHECKPOINT_MAGIC = b"HFAM"
GRAM_MAGIC = b"HFGM"
DATASET_MAGIC = b"HFDT"
UPDATE_MAGIC = b"HFUP"

_HEADER = struct.Struct("<4sHI")
_DTYPES = {"f8": "<f8", "i8": "<i8"}

PathLike = Union[str, Path]


class ContainerFormatError(ValueError):
    """Bad magic, unsupported version, corrupt manifest or truncated payload."""


def _dtype_tag(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(magic: bytes, manifest: Dict[str, Any], arrays: List[Tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    manifest = dict(manifest)
    entries = []
    blobs = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    manifest["arrays"] = entries
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(magic, FORMAT_VERSION, len(text)) + text + b"".join(blobs)


def decode(data: bytes, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if len(data) < _HEADER.size:
        raise ContainerFormatError("file too short for header")
    got_magic, version, length = _HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise ContainerFormatError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    start = _HEADER.size
    if len(data) < start + length:
        raise ContainerFormatError("truncated manifest")
    try:
        manifest = json.loads(data[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"corrupt manifest: {exc}") from exc

    offset = start + length
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.get("arrays", []):
        try:
            dtype = np.dtype(_DTYPES[entry["dtype"]])
            shape = tuple(int(s) for s in entry["shape"])
            name = entry["name"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"bad array entry {entry!r}") from exc
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise ContainerFormatError(f"truncated payload in array {name!r}")
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        arrays[name] = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        offset += nbytes
    if offset != len(data):
        raise ContainerFormatError(f"{len(data) - offset} trailing bytes after payload")
    return manifest, arrays


def write(path: PathLike, magic: bytes, manifest: Dict[str, Any],
          arrays: List[Tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(magic, manifest, arrays))


def read(path: PathLike, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
