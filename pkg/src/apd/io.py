"""Binary parameter blocks and JSON sidecars.

A block is ``b"APD1"``, a little-endian uint32 element count, then that many
little-endian float32 values. Several blocks may be concatenated in one file;
readers consume them in order. Sidecar metadata is JSON next to the binary
file (``<stem>.json`` beside ``<stem>.bin``).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"APD1"
_HEADER = struct.Struct("<4sI")


def encode_block(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise ValueError("refusing to persist non-finite values")
    return _HEADER.pack(MAGIC, values.size) + values.astype("<f4").tobytes()


def decode_blocks(buf):
    """Split a byte string into float64 arrays, one per block."""
    out = []
    pos = 0
    while pos < len(buf):
        if len(buf) - pos < _HEADER.size:
            raise FormatError(f"truncated block header at byte {pos}")
        magic, n = _HEADER.unpack_from(buf, pos)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte {pos}; expected {MAGIC!r}")
        pos += _HEADER.size
        end = pos + 4 * n
        if end > len(buf):
            raise FormatError(f"block at byte {pos - _HEADER.size} claims {n} values, file is truncated")
        out.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64))
        pos = end
    return out


def write_blocks(path, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for a in arrays:
            f.write(encode_block(a))
    return path


def read_blocks(path):
    return decode_blocks(Path(path).read_bytes())


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def as_float32_grid(values):
    """Round through float32, the precision of persisted payloads."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)
