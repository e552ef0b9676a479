"""Versioned binary container for datasets and checkpoints.

Layout (all integers little-endian)::

    magic     4 bytes   e.g. b"ENKD" (dataset) or b"ENKC" (checkpoint)
    version   uint32
    hlen      uint64    length of the JSON header in bytes
    header    hlen bytes of UTF-8 JSON, keys sorted
    payload   concatenated raw arrays, each '<f8' or '<i8' in C order

The header's ``arrays`` entry lists ``{name, dtype, shape, offset}`` for each
payload array (offsets relative to the payload start).  Nothing time- or
host-dependent is written, so equal inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class ContainerError(ValueError):
    """File is not a valid container of the expected kind."""


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        code = "i8" if np.issubdtype(a.dtype, np.integer) else "f8"
        raw = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True,
                        separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != magic:
        raise ContainerError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < 16:
        raise ContainerError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    header = json.loads(data[16:16 + hlen].decode())
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = _DTYPES[e["dtype"]]
        n = int(np.prod(e["shape"], dtype=int))
        start = base + e["offset"]
        if start + n * dt.itemsize > len(data):
            raise ContainerError(f"{path}: payload for {e['name']!r} is truncated")
        arrays[e["name"]] = np.frombuffer(data, dtype=dt, count=n, offset=start).reshape(e["shape"]).copy()
    return header["meta"], arrays
