"""Versioned binary checkpoint container.

Layout: magic, format version, a canonical-JSON header describing the
named arrays and free-form metadata, the raw array payload, and a
sha256 trailer over everything before it. Canonical JSON (sorted keys,
fixed separators) plus name-sorted payload order make a save of loaded
content byte-identical to its source, which the resume tests rely on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"IDASEGCK"
FORMAT_VERSION = 1
_DIGEST_LEN = 32


class CheckpointError(ValueError):
    """Unreadable checkpoint: bad magic, version, or structure."""


class IntegrityError(CheckpointError):
    """Checksum mismatch: the file is truncated or corrupt."""


@dataclass
class Checkpoint:
    """Named float/int arrays plus JSON-serializable metadata."""

    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.arrays)
    entries = []
    payload = bytearray()
    for name in names:
        # tobytes() always emits C order; asarray keeps 0-d shapes intact
        # where ascontiguousarray would promote them to 1-d
        arr = np.asarray(ckpt.arrays[name])
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": len(payload),
        })
        payload += arr.tobytes()
    header = _canonical_json({"arrays": entries, "meta": ckpt.meta})
    blob = bytearray()
    blob += MAGIC
    blob += FORMAT_VERSION.to_bytes(4, "little")
    blob += len(header).to_bytes(8, "little")
    blob += header
    blob += payload
    blob += hashlib.sha256(blob).digest()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 12 + _DIGEST_LEN:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, file corrupt or truncated")
    pos = len(MAGIC)
    version = int.from_bytes(blob[pos:pos + 4], "little")
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
        )
    header_len = int.from_bytes(blob[pos:pos + 8], "little")
    pos += 8
    try:
        header = json.loads(blob[pos:pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from None
    pos += header_len
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        start = pos + entry["offset"]
        raw = body[start:start + nbytes]
        if len(raw) != nbytes:
            raise IntegrityError(f"{path}: payload truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(bytes(raw), dtype=dtype).reshape(shape).copy()
    return Checkpoint(arrays=arrays, meta=header.get("meta", {}))
