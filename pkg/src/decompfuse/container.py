"""Single-file container for named arrays plus a JSON metadata block.

Layout::

    magic     8 bytes   b"DCFUSE\\x00" + format-version byte
    hlen      8 bytes   little-endian uint64, length of the JSON header
    header    hlen      UTF-8 JSON: {"kind", "meta", "arrays": [{name, dtype, shape, offset, nbytes}]}
    payload   ...       raw C-order array bytes, offsets relative to payload start

Used for model checkpoints and for exported fused features.  Writes are
atomic (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"DCFUSE\x00"
VERSION = 1


def write_container(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write the container and return the sha256 hex digest of the file."""
    path = Path(path)
    index = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.tobytes()
        index.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": index}, sort_keys=True).encode("utf-8")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        digest = hashlib.sha256()
        with os.fdopen(fd, "wb") as fh:
            for chunk in (MAGIC + bytes([VERSION]), struct.pack("<Q", len(header)), header, *blobs):
                fh.write(chunk)
                digest.update(chunk)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"failed to write {path}: {exc}") from exc
    return digest.hexdigest()


def read_container(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; ``header`` holds ``kind`` and ``meta``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if raw[:7] != MAGIC:
        raise CheckpointError(f"{path} is not a decompfuse container (bad magic)")
    if raw[7] != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {raw[7]}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path} holds a {header['kind']!r}, expected {expect_kind!r}")
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = raw[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, arrays


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
