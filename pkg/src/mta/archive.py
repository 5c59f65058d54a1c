"""
NTA1 named-tensor archive.

Layout (all integers little-endian)::

    b"NTA1" | version:u32 | count:u32 | entries...

    entry := name_len:u16 | name:utf8 | dtype:u8 | rank:u8 | dims:u32*rank | payload

dtype 0 is float32, 1 is float64, 2 is raw UTF-8 bytes (rank 1).  The last
entry is always ``__manifest__`` (dtype 2) holding a JSON document.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NTA1"
VERSION = 1
MANIFEST = "__manifest__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_UTF8 = 2


class ArchiveFormatError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], manifest: dict) -> bytes:
    """Serialize ``tensors`` (in sorted name order) plus a manifest."""
    if MANIFEST in tensors:
        raise ValueError(f"{MANIFEST!r} is a reserved entry name")
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors) + 1)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = 0 if arr.dtype == np.float32 else 1
        arr = np.asarray(arr, dtype=_DTYPES[code])
        raw = name.encode("utf-8")
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    raw = MANIFEST.encode("utf-8")
    parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BBI", _UTF8, 1, len(text)) + text)
    return b"".join(parts)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ArchiveFormatError(f"truncated archive: need {n} bytes at offset {pos}, have {len(buf) - pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ArchiveFormatError("bad magic; not an NTA1 archive")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    tensors: dict[str, np.ndarray] = {}
    manifest = None
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArchiveFormatError(f"entry name is not UTF-8: {exc}") from None
        code, rank = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        if code == _UTF8:
            if rank != 1:
                raise ArchiveFormatError(f"{name}: text entry must have rank 1")
            text = take(dims[0])
            if name != MANIFEST:
                raise ArchiveFormatError(f"unexpected text entry {name!r}")
            try:
                manifest = json.loads(text.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ArchiveFormatError(f"manifest is not valid JSON: {exc}") from None
            continue
        if code not in _DTYPES:
            raise ArchiveFormatError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise ArchiveFormatError(f"{len(buf) - pos} trailing bytes after last entry")
    if manifest is None:
        raise ArchiveFormatError("archive has no manifest entry")
    return tensors, manifest


def save(path, tensors: dict[str, np.ndarray], manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(tensors, manifest))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise ArchiveFormatError(f"archive not found: {path}")
    return loads(path.read_bytes())
