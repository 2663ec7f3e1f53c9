"""Named-tensor archive used for dataset cases and checkpoints.

Layout::

    b"NTAR" | uint32 LE header length | JSON header | raw tensor bytes

The JSON header is a list of ``{"name", "dtype", "shape", "offset", "nbytes"}``
records; ``offset`` counts from the first byte after the header.  Tensors are
float32, little-endian, C-order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ValidationError

MAGIC = b"NTAR"
DTYPE = "<f4"


def encode(tensors: Mapping[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    header, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE))
        raw = a.tobytes(order="C")
        header.append({"name": name, "dtype": "float32", "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks), header


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValidationError("not a named-tensor archive")
    (n,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + n])
    base = 8 + n
    out = {}
    for rec in header:
        if rec["dtype"] != "float32":
            raise ValidationError(f"unsupported dtype {rec['dtype']}")
        start = base + rec["offset"]
        raw = blob[start : start + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise ValidationError(f"archive truncated in tensor {rec['name']!r}")
        out[rec["name"]] = np.frombuffer(raw, dtype=DTYPE).reshape(rec["shape"]).copy()
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> dict:
    """Write an archive and return ``{"sha256", "tensors"}`` metadata."""
    blob, header = encode(tensors)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return {"sha256": hashlib.sha256(blob).hexdigest(), "tensors": header}


def load(path: str | os.PathLike, sha256: str | None = None) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if sha256 is not None and hashlib.sha256(blob).hexdigest() != sha256:
        raise ValidationError(f"checksum mismatch for {path}")
    return decode(blob)


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
