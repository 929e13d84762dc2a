"""Portable binary container for named arrays plus JSON metadata.

Layout (all integers little-endian)::

    magic      8 bytes   b"RRRCKPT\\0"
    version    u32
    hdr_len    u64
    header     hdr_len bytes of UTF-8 JSON (sorted keys, compact)
    payload    concatenated raw array bytes, little-endian, C order

The header holds ``{"meta": ..., "arrays": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}`` with offsets relative to the payload start.
Writing the same inputs twice yields identical bytes.
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RRRCKPT\0"
VERSION = 1


def save(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr))
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": a.dtype.str,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(Path(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint container")
    version, hdr_len = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hdr_len])
    payload = memoryview(data)[start + hdr_len:]
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]
