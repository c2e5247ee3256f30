"""Named-parameter checkpoint container with a bit-exact binary layout.

Layout: magic "DFCK", version u16, entry count u32, then per entry:
name length u16 + UTF-8 name, dtype u8 (0 = f32, 1 = f64), rank u8, one
u32 per dim, then the raw little-endian values. Entry order is preserved,
so save -> load -> save reproduces the file byte for byte.

Run metadata (architecture, best metric, epoch, training assets) lives in
a JSON sidecar next to the binary; the container itself holds only
parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DFCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save(path, params, meta=None):
    """Write named arrays (dict preserving order) and an optional sidecar."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(params)))
        for name, value in params.items():
            arr = np.asarray(getattr(value, "data", value))
            if arr.dtype not in _CODES:
                raise ValueError(f"{name!r} has unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                      copy=False).tobytes())
    if meta is not None:
        sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load(path):
    """Read arrays back in file order; returns dict[str, np.ndarray]."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", fh.read(2))
            if code not in _DTYPES:
                raise ValueError(f"{name!r}: unknown dtype code {code}")
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            dtype = _DTYPES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise ValueError(f"truncated checkpoint while reading {name!r}")
            out[name] = np.frombuffer(buf, dtype=dtype).reshape(dims).copy()
    return out


def load_meta(path):
    side = sidecar_path(path)
    if not side.exists():
        return {}
    return json.loads(side.read_text())


def sidecar_path(path):
    return Path(str(path) + ".meta.json")
