"""Checksummed binary container used by dataset and parameter files.

Layout: 4-byte magic, little-endian u16 version, u32 header length, UTF-8
JSON header, raw little-endian float64 arrays in the order declared by the
header, and a trailing 8-byte blake2b checksum of every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

CONTAINER_VERSION = 1


class FileFormatError(OSError):
    """Bad magic or unsupported container version."""


class ChecksumError(OSError):
    """Trailing checksum does not match the file contents (truncation/corruption)."""


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no whitespace padding)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_container(path, magic: bytes, header: dict, arrays) -> None:
    """Write ``arrays`` (list of (name, float64 ndarray)) under ``header``."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    header = dict(header)
    header["arrays"] = [
        {"name": name, "shape": list(arr.shape)} for name, arr in arrays
    ]
    head_bytes = canonical_json(header).encode("utf-8")
    parts = [magic, struct.pack("<H", CONTAINER_VERSION), struct.pack("<I", len(head_bytes)), head_bytes]
    for _, arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(_checksum(payload))


def read_container(path, magic: bytes):
    """Read a container, returning ``(header, {name: array})``.

    The checksum is verified before anything is decoded, so a truncated or
    corrupted file raises ChecksumError without returning partial data.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 18:
        raise ChecksumError(f"{path}: file too short to be a container")
    payload, tail = blob[:-8], blob[-8:]
    if _checksum(payload) != tail:
        raise ChecksumError(f"{path}: checksum mismatch")
    if payload[:4] != magic:
        raise FileFormatError(f"{path}: bad magic {payload[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", payload[4:6])
    if version != CONTAINER_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    (head_len,) = struct.unpack("<I", payload[6:10])
    header = json.loads(payload[10 : 10 + head_len].decode("utf-8"))
    arrays = {}
    offset = 10 + head_len
    for decl in header["arrays"]:
        shape = tuple(decl["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[decl["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise ChecksumError(f"{path}: trailing bytes after declared arrays")
    return header, arrays
