"""DSPN binary tensor files and checkpoint manifests.

Layout: ``b"DSPN"``, version byte 0x01, dtype byte (0 float32, 1 int32),
rank byte, ``rank`` little-endian uint32 extents, then the row-major
little-endian payload.
"""

import json
import os
import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"DSPN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


class FormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype.kind == "f":
        code = 0
    elif a.dtype.kind in "iub":
        code = 1
    else:
        raise FormatError(f"unsupported dtype {a.dtype}")
    if a.ndim > 255:
        raise FormatError("rank exceeds 255")
    data = np.ascontiguousarray(a, dtype=_DTYPES[code])
    head = MAGIC + bytes([VERSION, code, a.ndim]) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + data.tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 7 or blob[:4] != MAGIC:
        raise FormatError("bad magic, not a DSPN tensor")
    version, code, rank = blob[4], blob[5], blob[6]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    end = 7 + 4 * rank
    if len(blob) < end:
        raise FormatError("truncated header")
    shape = struct.unpack(f"<{rank}I", blob[7:end])
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - end != expected:
        raise FormatError(f"payload is {len(blob) - end} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=end).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_checkpoint(directory, params: Mapping[str, np.ndarray], meta: dict = None) -> str:
    """Write one DSPN file per parameter plus ``manifest.json``; returns its path."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for name, value in params.items():
        fname = name.replace("/", "_") + ".dspn"
        save_tensor(os.path.join(directory, fname), value)
        files[name] = fname
    manifest = dict(meta or {})
    manifest["params"] = files
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_checkpoint(manifest_path) -> (dict, Dict[str, np.ndarray]):
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    params = {name: load_tensor(os.path.join(base, f)) for name, f in manifest["params"].items()}
    return manifest, params
