"""On-disk feature cache: one binary file per feature kind.

File layout (little-endian)::

    b"ISLC"  u16 version  u16 len(kind)  kind (utf-8)  u32 dim  u32 count
    count x [u16 len(record_id) record_id  u16 len(variation) variation  u64 offset  u32 length]
    payload: float32 vectors, offsets relative to the payload start

The cache is single-writer; concurrent writers must be serialized by the caller.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"ISLC"
SCHEMA_VERSION = 1

FEATURE_DIMS: dict[str, int] = {
    "style-default": 1920,
    "cnn-224": 25088,
}


class CacheError(ValueError):
    pass


def register_kind(kind: str, dim: int) -> None:
    if kind in FEATURE_DIMS and FEATURE_DIMS[kind] != dim:
        raise CacheError(f"feature kind {kind!r} already registered with dim {FEATURE_DIMS[kind]}")
    FEATURE_DIMS[kind] = int(dim)


class FeatureCache:
    """Map (record_id, feature_kind, variation) -> float32 vector, persisted per kind."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        self._entries: dict[str, dict[tuple[str, str], np.ndarray]] = {}
        self._dirty: set[str] = set()
        if self.root is not None and self.root.exists():
            for path in sorted(self.root.glob("*.islc")):
                kind, entries = read_cache_file(path)
                self._entries[kind] = entries

    def put(self, record_id: str, kind: str, variation: str, vector) -> None:
        if kind not in FEATURE_DIMS:
            raise CacheError(f"unknown feature kind {kind!r}")
        vec = np.asarray(vector, dtype=np.float32).ravel()
        if vec.size != FEATURE_DIMS[kind]:
            raise CacheError(f"{kind} vectors have length {FEATURE_DIMS[kind]}, got {vec.size}")
        self._entries.setdefault(kind, {})[(record_id, variation)] = vec.copy()
        self._dirty.add(kind)

    def get(self, record_id: str, kind: str, variation: str = "") -> Optional[np.ndarray]:
        """Stored vector, or ``None`` when the key is absent."""
        vec = self._entries.get(kind, {}).get((record_id, variation))
        return None if vec is None else vec.copy()

    def __contains__(self, key) -> bool:
        record_id, kind, variation = key
        return (record_id, variation) in self._entries.get(kind, {})

    def keys(self, kind: str) -> list[tuple[str, str]]:
        return sorted(self._entries.get(kind, {}))

    def __len__(self) -> int:
        return sum(len(v) for v in self._entries.values())

    def flush(self) -> None:
        if self.root is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        for kind in sorted(self._dirty):
            write_cache_file(self.root / f"{kind}.islc", kind, self._entries[kind])
        self._dirty.clear()


def write_cache_file(path: Path, kind: str, entries: dict[tuple[str, str], np.ndarray]) -> None:
    dim = FEATURE_DIMS[kind]
    keys = sorted(entries)
    header = bytearray(MAGIC)
    kb = kind.encode("utf-8")
    header += struct.pack("<HH", SCHEMA_VERSION, len(kb)) + kb
    header += struct.pack("<II", dim, len(keys))
    offset = 0
    for record_id, variation in keys:
        rb, vb = record_id.encode("utf-8"), variation.encode("utf-8")
        header += struct.pack("<H", len(rb)) + rb + struct.pack("<H", len(vb)) + vb
        header += struct.pack("<QI", offset, dim)
        offset += 4 * dim
    tmp = path.with_suffix(".tmp")
    with tmp.open("wb") as fh:
        fh.write(bytes(header))
        for key in keys:
            fh.write(entries[key].astype("<f4").tobytes())
    tmp.replace(path)


def read_cache_file(path: Path) -> tuple[str, dict[tuple[str, str], np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CacheError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    version, klen = struct.unpack_from("<HH", data, pos)
    pos += 4
    if version != SCHEMA_VERSION:
        raise CacheError(f"{path}: unsupported cache version {version}")
    kind = data[pos:pos + klen].decode("utf-8")
    pos += klen
    dim, count = struct.unpack_from("<II", data, pos)
    pos += 8
    register_kind(kind, dim)
    index = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        record_id = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        (n,) = struct.unpack_from("<H", data, pos)
        variation = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        offset, length = struct.unpack_from("<QI", data, pos)
        pos += 12
        index.append((record_id, variation, offset, length))
    entries = {}
    for record_id, variation, offset, length in index:
        start = pos + offset
        if start + 4 * length > len(data):
            raise CacheError(f"{path}: truncated payload for {record_id}")
        vec = np.frombuffer(data, dtype="<f4", count=length, offset=start)
        entries[(record_id, variation)] = vec.astype(np.float32)
    return kind, entries
