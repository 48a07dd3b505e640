"""Binary container used for prototype libraries and checkpoints.

Layout (little-endian)::

    magic      4 bytes
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON
    n_arrays   u32
    per array: name_len u16, name (UTF-8), ndim u8, dims u64 * ndim,
               payload f64 * prod(dims)
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def write_envelope(path, magic: bytes, version: int, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    assert len(magic) == 4
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<II", version, len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8", order="C")
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), a.ndim) + nb)
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos}, size {len(self.data)})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_envelope(path, magic: bytes, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    found = r.take(4)
    if found != magic:
        raise FormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    (found_version, meta_len) = r.unpack("<II")
    if found_version != version:
        raise FormatError(f"{path}: format version mismatch: expected {version}, found {found_version}")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name_len, ndim = r.unpack("<HB")
        name = r.take(name_len).decode()
        shape = r.unpack(f"<{ndim}Q")
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return meta, arrays
