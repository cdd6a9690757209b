"""Versioned binary checkpoints: a named directory of float64 arrays.

Layout: 4 magic bytes, one version byte, a u32 array count, then per
array a u16 name length, the utf-8 name, a u8 rank, u32 extents, and the
little-endian float64 payload; a 32-byte config hash closes the file.
Loading is all-or-nothing: truncation or a bad magic/version raises
before any array is returned, and a hash mismatch warns but loads.
"""

from __future__ import annotations

import struct
import warnings

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"DTCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_hash: bytes):
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{max(arr.ndim, 1)}I",
                                 *(arr.shape or (1,))))
            fh.write(arr.tobytes())
        fh.write(config_hash)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return data


def load_checkpoint(path, expected_hash: bytes | None = None):
    """Read every array and the stored hash; no partial results."""
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version = struct.unpack("<B", _read_exact(fh, 1, "version"))[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        count = struct.unpack("<I", _read_exact(fh, 4, "count"))[0]
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2, "name length"))[0]
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            ndim = struct.unpack("<B", _read_exact(fh, 1, "rank"))[0]
            shape = struct.unpack(f"<{max(ndim, 1)}I",
                                  _read_exact(fh, 4 * max(ndim, 1), "shape"))
            shape = shape[:ndim] if ndim else ()
            n_items = int(np.prod(shape)) if ndim else 1
            payload = _read_exact(fh, 8 * n_items, f"payload of {name!r}")
            arr = np.frombuffer(payload, dtype="<f8").copy()
            arrays[name] = arr.reshape(shape) if ndim else arr.reshape(())
        stored_hash = _read_exact(fh, 32, "config hash")
    if expected_hash is not None and stored_hash != expected_hash:
        warnings.warn("checkpoint config hash does not match the current "
                      "configuration", stacklevel=2)
    return arrays, stored_hash
