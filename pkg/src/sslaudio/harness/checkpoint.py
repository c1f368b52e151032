"""Versioned binary checkpoint container.

Layout: 8 magic bytes, a little-endian uint32 header length, a UTF-8
JSON header, then the raw array payload.  The header maps array names to
(dtype, shape, byte offset, byte length) within the payload and carries
a ``meta`` dict (counters, seed, method).  Model parameters are stored
as float32 (float64 for the 64-bit test mode), optimizer moments as
written, batch-norm running statistics as float64.

Loading parses and validates the whole file before anything is applied,
so a corrupt or version-mismatched file can never leave a model half
restored.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"SSLACKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Write named arrays plus JSON-serializable metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format_version": FORMAT_VERSION, "arrays": entries,
                         "meta": meta}).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Return (arrays dict, meta dict); raises CheckpointError on any defect."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} "
            f"(this build reads {FORMAT_VERSION})"
        )
    payload = raw[header_start + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        buf = payload[start : start + nbytes]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return arrays, header["meta"]
