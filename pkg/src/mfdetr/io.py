"""MFDT tensor files and single-file checkpoints.

MFDT layout (little endian): b"MFDT", version 0x01, dtype byte
(0=f64, 1=f32, 2=u8), rank byte, rank u64 extents, row-major payload.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MFDT"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES = {"f8": 0, "f4": 1, "u1": 2}

CKPT_MAGIC = b"MFDCKPT1"


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.str[1:])
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = MAGIC + bytes([VERSION, code, arr.ndim])
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one MFDT blob starting at ``offset``; returns (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad MFDT magic")
    version, code, rank = buf[offset + 4], buf[offset + 5], buf[offset + 6]
    if version != VERSION:
        raise FormatError(f"unsupported MFDT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 7
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if pos + nbytes > len(buf):
        raise FormatError("truncated MFDT payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())[0]


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    """Write manifest (name -> shape, dtype, offset) followed by MFDT payloads."""
    blobs, entries, offset = [], [], 0
    for name in sorted(tensors):
        blob = encode(np.asarray(tensors[name], dtype=np.float64))
        entries.append({"name": name, "shape": list(np.shape(tensors[name])),
                        "dtype": "f64", "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(manifest)) + manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    (mlen,) = struct.unpack_from("<Q", buf, 8)
    manifest = json.loads(buf[16:16 + mlen])
    base = 16 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        arr, end = decode(buf, base + e["offset"])
        if list(arr.shape) != e["shape"] or end - (base + e["offset"]) != e["nbytes"]:
            raise FormatError(f"checkpoint entry {e['name']} disagrees with manifest")
        tensors[e["name"]] = arr
    return tensors, manifest["config"]
