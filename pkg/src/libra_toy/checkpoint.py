"""Self-describing array container.

Layout::

    b"LBTOY1\\n" | u64 little-endian header length | header JSON | raw array bytes

The header holds caller metadata plus an ``arrays`` list of
``{name, dtype, shape, offset, nbytes}``; array data is little-endian and
C-ordered, written in sorted name order so identical inputs give identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LBTOY1\n"


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        a = np.ascontiguousarray(a.astype(a.dtype.newbyteorder("<")))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({**meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC) or len(buf) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (hlen,) = struct.unpack("<Q", buf[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    base = start + hlen
    arrays = {}
    for e in header.get("arrays", []):
        if e["name"] in arrays:
            raise CheckpointError(f"{path}: duplicate array {e['name']}")
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * dt.itemsize != e["nbytes"] or base + e["offset"] + e["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: array {e['name']} truncated or inconsistent")
        a = np.frombuffer(buf, dtype=dt, count=n, offset=base + e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(dt.newbyteorder("="), copy=True)
    return arrays, header
