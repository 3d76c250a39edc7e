"""Versioned single-file binary container: a JSON manifest followed by raw
C-order array bytes. Byte-for-byte deterministic for identical inputs (unlike
zip-based formats, which embed timestamps), so fixed-seed reruns produce
identical files. Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

MAGIC = b"SPCONT1\n"
FORMAT_VERSION = 1


def save_container(path: str, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": FORMAT_VERSION, "arrays": entries,
                         "meta": meta or {}}, sort_keys=True).encode()
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-container-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(header).to_bytes(8, "little"))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path: str):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a scanpose container")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        if header["version"] > FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported container version "
                             f"{header['version']}")
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return arrays, header["meta"]
