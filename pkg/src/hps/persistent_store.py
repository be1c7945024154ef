"""Level-3 durable store: one directory per table, append-only log segments.

Layout under ``root``::

    <table-dir>/manifest.json        table name, dim, dtype, default vector
    <table-dir>/segment-000001.log   fixed-size LogRecords, appended in order

LogRecord (little-endian): key u64 | version u64 | dim u16 | dtype u8 |
payload (dim scalars) | crc32 u32 over all preceding record bytes.

The in-memory index (key -> segment, offset, version) is rebuilt on open and
keeps only the highest version per key.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from urllib.parse import quote

import numpy as np

from .core import (
    BATCH_MAGIC,
    DType,
    DimensionError,
    HPSError,
    InvariantError,
    TableMeta,
    UnknownTableError,
    VersionedEntry,
    decode_update_batch,
    split_frames,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_FORMAT = 1
DEFAULT_SEGMENT_BYTES = 64 << 20
_SEGMENT_RE = re.compile(r"^segment-(\d{6,})\.log$")
_RECORD_HEAD = struct.Struct("<QQHB")
_CRC = struct.Struct("<I")


class StoreOpenError(HPSError):
    pass


class CorruptionError(HPSError):
    pass


def table_dirname(table: str) -> str:
    """Filesystem-safe, injective directory name for a table."""
    name = quote(table, safe="")
    if name.startswith("."):
        name = "%2E" + name[1:]
    if len(name) > 200:
        name = name[:120] + "~" + hashlib.sha256(table.encode("utf-8")).hexdigest()
    return name


def record_size(dim: int, dtype: DType) -> int:
    return _RECORD_HEAD.size + dim * dtype.itemsize + _CRC.size


def encode_record(key: int, version: int, vector: np.ndarray, dtype: DType) -> bytes:
    body = _RECORD_HEAD.pack(key, version, len(vector), int(dtype)) + vector.astype(dtype.numpy, copy=False).tobytes()
    return body + _CRC.pack(zlib.crc32(body))


@dataclass(frozen=True)
class PdbConfig:
    segment_bytes: int = DEFAULT_SEGMENT_BYTES
    sync_every_batch: bool = False


class _Table:
    def __init__(self, meta: TableMeta, path: Path, config: PdbConfig):
        self.meta = meta
        self.path = path
        self.config = config
        self.rsize = record_size(meta.dim, meta.dtype)
        self.index: dict[int, tuple[int, int, int]] = {}  # key -> (segment, offset, version)
        self.fds: dict[int, int] = {}
        self.active: int = 0
        self.active_file = None
        self.active_size = 0
        self.lock = threading.RLock()
        self.dropped_tail_records = 0

    def segment_path(self, n: int) -> Path:
        return self.path / f"segment-{n:06d}.log"

    def segments(self) -> list[int]:
        nums = []
        for p in self.path.iterdir():
            m = _SEGMENT_RE.match(p.name)
            if m:
                nums.append(int(m.group(1)))
        return sorted(nums)

    def decode(self, raw: bytes, where: str) -> VersionedEntry:
        key, version, dim, dtype = _RECORD_HEAD.unpack_from(raw, 0)
        if dim != self.meta.dim or dtype != int(self.meta.dtype):
            raise CorruptionError(f"{where}: record shape ({dim}, {dtype}) does not match manifest")
        vec = np.frombuffer(raw, dtype=self.meta.dtype.numpy, count=dim, offset=_RECORD_HEAD.size).copy()
        vec.flags.writeable = False
        return VersionedEntry(key, vec, version)

    def valid(self, raw: bytes) -> bool:
        (crc,) = _CRC.unpack_from(raw, len(raw) - _CRC.size)
        return zlib.crc32(raw[: -_CRC.size]) == crc

    def load(self) -> None:
        segs = self.segments()
        for i, n in enumerate(segs):
            p = self.segment_path(n)
            data = p.read_bytes()
            last = i == len(segs) - 1
            usable = len(data)
            for off in range(0, len(data), self.rsize):
                raw = data[off : off + self.rsize]
                ok = len(raw) == self.rsize and self.valid(raw)
                if not ok:
                    at_tail = last and len(data) - off <= self.rsize
                    if not at_tail:
                        raise CorruptionError(f"{p}: bad record at offset {off}")
                    logger.warning("%s: dropping torn tail record at offset %d", p, off)
                    self.dropped_tail_records += 1
                    usable = off
                    break
                e = self.decode(raw, f"{p}@{off}")
                cur = self.index.get(e.key)
                if cur is None or e.version > cur[2]:
                    self.index[e.key] = (n, off, e.version)
            if usable != len(data):
                with open(p, "r+b") as f:
                    f.truncate(usable)
            self.fds[n] = os.open(p, os.O_RDONLY)
        self.active = segs[-1] if segs else 0
        if self.active:
            self.active_size = self.segment_path(self.active).stat().st_size
            self.active_file = open(self.segment_path(self.active), "ab")

    def rotate(self) -> None:
        if self.active_file is not None:
            self.active_file.flush()
            os.fsync(self.active_file.fileno())
            self.active_file.close()
        self.active += 1
        p = self.segment_path(self.active)
        self.active_file = open(p, "ab")
        self.active_size = 0
        self.fds[self.active] = os.open(p, os.O_RDONLY)

    def append(self, records: list[bytes]) -> list[tuple[int, int]]:
        """Append encoded records, returning their (segment, offset) locations."""
        locs = []
        buf = []
        for rec in records:
            if self.active_file is None or self.active_size + self.rsize > self.config.segment_bytes and self.active_size:
                if buf:
                    self.active_file.write(b"".join(buf))
                    buf = []
                self.rotate()
            locs.append((self.active, self.active_size))
            buf.append(rec)
            self.active_size += self.rsize
        if buf:
            self.active_file.write(b"".join(buf))
        if self.active_file is not None:
            self.active_file.flush()
            if self.config.sync_every_batch:
                os.fsync(self.active_file.fileno())
        return locs

    def read(self, seg: int, off: int, fds=None) -> VersionedEntry:
        raw = os.pread((fds or self.fds)[seg], self.rsize, off)
        if len(raw) != self.rsize or not self.valid(raw):
            raise CorruptionError(f"{self.segment_path(seg)}: bad record at offset {off}")
        return self.decode(raw, f"segment {seg}@{off}")

    def close(self) -> None:
        if self.active_file is not None:
            self.active_file.flush()
            os.fsync(self.active_file.fileno())
            self.active_file.close()
            self.active_file = None
        for fd in self.fds.values():
            os.close(fd)
        self.fds.clear()


class _Scan:
    """Iterator over an index snapshot; holds duplicated fds so compaction can unlink segments."""

    def __init__(self, table: _Table, items, fds):
        self._table = table
        self._items = iter(items)
        self._fds = fds

    def __iter__(self):
        return self

    def __next__(self) -> VersionedEntry:
        if self._fds is None:
            raise StopIteration
        try:
            _, (seg, off, _) = next(self._items)
        except StopIteration:
            self.close()
            raise
        return self._table.read(seg, off, self._fds)

    def close(self) -> None:
        if self._fds is not None:
            for fd in self._fds.values():
                os.close(fd)
            self._fds = None

    def __del__(self):
        self.close()


def _write_manifest(path: Path, meta: TableMeta) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "table": meta.table,
        "dim": meta.dim,
        "dtype": meta.dtype.name,
        "default_vector": meta.default_vector.tobytes().hex(),
    }
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    os.replace(tmp, path / MANIFEST)


def _read_manifest(path: Path) -> TableMeta:
    try:
        doc = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        dtype = DType.parse(doc["dtype"])
        default = np.frombuffer(bytes.fromhex(doc["default_vector"]), dtype=dtype.numpy)
        return TableMeta(doc["table"], int(doc["dim"]), dtype, default)
    except (OSError, ValueError, KeyError, TypeError, HPSError) as exc:
        raise StoreOpenError(f"unreadable manifest in {path}: {exc}") from exc


class PersistentStore:
    """Full copy of every table on disk; the ground truth for all other tiers."""

    def __init__(self, root, config: PdbConfig | None = None):
        self.root = Path(root)
        self.config = config or PdbConfig()
        self._tables: dict[str, _Table] = {}
        self._lock = threading.Lock()
        self.closed = False

    @classmethod
    def open(cls, root, config: PdbConfig | None = None) -> "PersistentStore":
        store = cls(root, config)
        store.root.mkdir(parents=True, exist_ok=True)
        for d in sorted(store.root.iterdir()):
            if not d.is_dir():
                continue
            if not (d / MANIFEST).exists():
                if any(_SEGMENT_RE.match(p.name) for p in d.iterdir()):
                    raise StoreOpenError(f"{d} has segments but no manifest")
                continue
            meta = _read_manifest(d)
            t = _Table(meta, d, store.config)
            t.load()
            store._tables[meta.table] = t
        return store

    @property
    def dropped_tail_records(self) -> int:
        return sum(t.dropped_tail_records for t in self._tables.values())

    def create_table(self, meta: TableMeta) -> None:
        with self._lock:
            existing = self._tables.get(meta.table)
            if existing is not None:
                if existing.meta != meta:
                    raise InvariantError(f"table {meta.table!r} exists with different metadata")
                return
            d = self.root / table_dirname(meta.table)
            d.mkdir(parents=True, exist_ok=True)
            _write_manifest(d, meta)
            t = _Table(meta, d, self.config)
            t.load()
            self._tables[meta.table] = t

    def has_table(self, table: str) -> bool:
        return table in self._tables

    def tables(self) -> list[str]:
        return list(self._tables)

    def meta(self, table: str) -> TableMeta:
        return self._table(table).meta

    def _table(self, table: str) -> _Table:
        try:
            return self._tables[table]
        except KeyError:
            raise UnknownTableError(table) from None

    def put_batch(self, table: str, entries) -> int:
        t = self._table(table)
        dtype = t.meta.dtype
        for e in entries:
            if len(e.vector) != t.meta.dim or e.vector.dtype != dtype.numpy:
                raise DimensionError(f"entry for key {e.key} does not match table {table!r} shape")
        with t.lock:
            fresh = {}
            for e in entries:
                cur = t.index.get(e.key)
                prev = fresh.get(e.key)
                if (cur is None or e.version > cur[2]) and (prev is None or e.version > prev.version):
                    fresh[e.key] = e
            if not fresh:
                return 0
            batch = list(fresh.values())
            locs = t.append([encode_record(e.key, e.version, e.vector, dtype) for e in batch])
            for e, (seg, off) in zip(batch, locs):
                t.index[e.key] = (seg, off, e.version)
            return len(batch)

    def get_batch(self, table: str, keys) -> tuple[list[VersionedEntry], list[int]]:
        t = self._table(table)
        found, missing = [], []
        with t.lock:
            for key in keys:
                loc = t.index.get(key)
                if loc is None:
                    missing.append(key)
                else:
                    found.append(t.read(loc[0], loc[1]))
        return found, missing

    def version_of(self, table: str, key: int) -> int | None:
        loc = self._table(table).index.get(key)
        return None if loc is None else loc[2]

    def __contains__(self, item) -> bool:
        table, key = item
        return key in self._table(table).index

    def count(self, table: str) -> int:
        return len(self._table(table).index)

    def scan(self, table: str):
        """Yield latest-version entries from a snapshot of the index taken now."""
        t = self._table(table)
        with t.lock:
            items = list(t.index.items())
            fds = {n: os.dup(fd) for n, fd in t.fds.items()}
        return _Scan(t, items, fds)

    def live_bytes(self, table: str) -> int:
        t = self._table(table)
        return sum(t.segment_path(n).stat().st_size for n in t.segments())

    def compact(self, table: str) -> int:
        """Rewrite latest versions into fresh segments; returns bytes reclaimed."""
        t = self._table(table)
        with t.lock:
            old = t.segments()
            before = sum(t.segment_path(n).stat().st_size for n in old)
            if not old or before == len(t.index) * t.rsize:
                return 0
            live = [t.read(seg, off) for seg, off, _ in t.index.values()]
            t.rotate()
            locs = t.append([encode_record(e.key, e.version, e.vector, t.meta.dtype) for e in live])
            t.active_file.flush()
            os.fsync(t.active_file.fileno())
            t.index = {e.key: (seg, off, e.version) for e, (seg, off) in zip(live, locs)}
            for n in old:
                os.close(t.fds.pop(n))
                t.segment_path(n).unlink()
            after = sum(t.segment_path(n).stat().st_size for n in t.segments())
            return before - after

    def close(self) -> None:
        for t in self._tables.values():
            with t.lock:
                t.close()
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_snapshot_dir(pdb: PersistentStore, path) -> dict[str, int]:
    """Bulk-load a directory of per-table snapshot files at version 0.

    Each file is either one encoded UpdateBatch or a sequence of
    u32-length-prefixed batches, all with seq 0. Tables are created (zero
    default vector) when missing.
    """
    loaded: dict[str, int] = {}
    for f in sorted(Path(path).iterdir()):
        if not f.is_file():
            continue
        data = f.read_bytes()
        frames = [data] if data[:4] == BATCH_MAGIC else split_frames(data)
        for frame in frames:
            batch = decode_update_batch(frame)
            if batch.seq != 0:
                raise InvariantError(f"{f}: snapshot batches must carry seq 0, got {batch.seq}")
            if not pdb.has_table(batch.table):
                pdb.create_table(TableMeta(batch.table, batch.dim, batch.dtype))
            n = pdb.put_batch(batch.table, [VersionedEntry(k, v, 0) for k, v in batch.entries])
            loaded[batch.table] = loaded.get(batch.table, 0) + n
    return loaded
