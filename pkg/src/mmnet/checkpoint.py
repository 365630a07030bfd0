"""Checkpoint I/O.

Little-endian binary format:
  magic "MMNK1" (5 bytes)
  u32 config length, then that many bytes of UTF-8 JSON
  per parameter, repeated until EOF:
    u32 name length, name bytes (UTF-8)
    u8 dtype tag (0 = float32, 1 = float64)
    u32 rank, then rank u32 dims
    raw little-endian array data
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import InputError

MAGIC = b"MMNK1"
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save(path, config: dict, params: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        blob = json.dumps(config, sort_keys=True).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, arr in params.items():
            arr = np.asarray(arr)
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr).astype(
                arr.dtype.newbyteorder("<")).tobytes())


def load(path):
    """Return (config dict, {name: array})."""
    with open(path, "rb") as f:
        if f.read(5) != MAGIC:
            raise InputError(f"{path} is not a checkpoint (bad magic)")
        (clen,) = struct.unpack("<I", f.read(4))
        config = json.loads(f.read(clen).decode())
        params = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = f.read(nlen).decode()
            (tag,) = struct.unpack("<B", f.read(1))
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            dtype = _TAG_DTYPES[tag]
            count = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
            params[name] = arr.reshape(dims).copy()
    return config, params
