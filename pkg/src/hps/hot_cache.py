"""Level-1 embedding cache: set-associative LFU with lazy aging.

Each key lives in set ``key_hash(key) % num_sets``. A full set evicts the
resident with the lowest ``(freq, last_touch)``. Every set carries its own
lock, so operations on different sets never contend.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, fields

import numpy as np

from .core import (
    DimensionError,
    InvariantError,
    TableMeta,
    UnknownTableError,
    VersionedEntry,
    key_hash,
)

FREQ_MAX = 255


@dataclass(frozen=True)
class CacheConfig:
    capacity: int
    ways: int = 8
    aging_interval: int | None = None  # defaults to 10 * capacity

    def __post_init__(self):
        if not self.capacity >= self.ways >= 1:
            raise InvariantError(f"need capacity >= ways >= 1, got {self.capacity}, {self.ways}")
        if self.capacity % self.ways:
            raise InvariantError(f"capacity {self.capacity} not divisible by ways {self.ways}")
        if self.aging_interval is None:
            object.__setattr__(self, "aging_interval", 10 * self.capacity)
        if self.aging_interval < 1:
            raise InvariantError("aging_interval must be positive")

    @property
    def num_sets(self) -> int:
        return self.capacity // self.ways


@dataclass
class CacheStats:
    queries: int = 0
    hits: int = 0
    misses: int = 0
    insertions: int = 0
    admissions_rejected: int = 0
    refresh_replacements: int = 0
    evictions: int = 0

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


class CacheEntry:
    __slots__ = ("key", "vector", "version", "freq", "last_touch")

    def __init__(self, key, vector, version, freq, last_touch):
        self.key = key
        self.vector = vector
        self.version = version
        self.freq = freq
        self.last_touch = last_touch


class _CacheSet:
    __slots__ = ("lock", "entries", "accesses")

    def __init__(self):
        self.lock = threading.Lock()
        self.entries: dict[int, CacheEntry] = {}
        self.accesses = 0


class _Table:
    def __init__(self, meta: TableMeta, config: CacheConfig):
        self.meta = meta
        self.config = config
        self.num_sets = config.num_sets
        self.sets = [_CacheSet() for _ in range(self.num_sets)]
        # per-set share of the global aging interval
        self.set_aging = max(1, config.aging_interval // self.num_sets)
        self.stats = CacheStats()
        self._clock = 0
        self._clock_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self.fill_lock = threading.Lock()

    def tick(self) -> int:
        with self._clock_lock:
            self._clock += 1
            return self._clock

    def bump(self, **deltas) -> None:
        with self._stats_lock:
            for name, d in deltas.items():
                setattr(self.stats, name, getattr(self.stats, name) + d)

    def set_of(self, key: int) -> _CacheSet:
        return self.sets[key_hash(key) % self.num_sets]

    def check(self, entry: VersionedEntry) -> None:
        if len(entry.vector) != self.meta.dim:
            raise DimensionError(f"entry dim {len(entry.vector)} != table dim {self.meta.dim}")
        if entry.vector.dtype != self.meta.dtype.numpy:
            raise DimensionError(f"entry dtype {entry.vector.dtype} != table dtype {self.meta.dtype.name}")


class HotCache:
    """Bounded per-table cache of the most frequently used embeddings."""

    def __init__(self):
        self._tables: dict[str, _Table] = {}

    def create_table(self, meta: TableMeta, config: CacheConfig) -> None:
        if meta.table in self._tables:
            raise InvariantError(f"table {meta.table!r} already registered")
        self._tables[meta.table] = _Table(meta, config)

    def tables(self) -> list[str]:
        return list(self._tables)

    def has_table(self, table: str) -> bool:
        return table in self._tables

    def _table(self, table: str) -> _Table:
        try:
            return self._tables[table]
        except KeyError:
            raise UnknownTableError(table) from None

    def fill_lock(self, table: str) -> threading.Lock:
        """Serializes read-lower-tier-then-write-L1 sequences (refresh, migration) per table."""
        return self._table(table).fill_lock

    def config(self, table: str) -> CacheConfig:
        return self._table(table).config

    def query(self, table: str, keys) -> tuple[list[tuple[int, np.ndarray]], list[int]]:
        t = self._table(table)
        found, missing = [], []
        for key in keys:
            s = t.set_of(key)
            now = t.tick()
            with s.lock:
                e = s.entries.get(key)
                if e is not None:
                    if e.freq < FREQ_MAX:
                        e.freq += 1
                    e.last_touch = now
                    found.append((key, e.vector))
                else:
                    missing.append(key)
                self._age(t, s)
        t.bump(queries=len(found) + len(missing), hits=len(found), misses=len(missing))
        return found, missing

    def _age(self, t: _Table, s: _CacheSet) -> None:
        s.accesses += 1
        if s.accesses >= t.set_aging:
            s.accesses = 0
            for e in s.entries.values():
                e.freq = max(1, e.freq >> 1)

    def insert(self, table: str, entries) -> int:
        t = self._table(table)
        for entry in entries:
            t.check(entry)
        admitted = rejected = replaced = evicted = 0
        for entry in entries:
            s = t.set_of(entry.key)
            now = t.tick()
            with s.lock:
                e = s.entries.get(entry.key)
                if e is not None:
                    if entry.version > e.version:
                        e.vector, e.version = entry.vector, entry.version
                        replaced += 1
                    else:
                        rejected += 1
                    continue
                if len(s.entries) >= t.config.ways:
                    victim = min(s.entries.values(), key=lambda c: (c.freq, c.last_touch))
                    del s.entries[victim.key]
                    evicted += 1
                s.entries[entry.key] = CacheEntry(entry.key, entry.vector, entry.version, 1, now)
                admitted += 1
        t.bump(
            insertions=admitted,
            admissions_rejected=rejected,
            refresh_replacements=replaced,
            evictions=evicted,
        )
        return admitted

    def refresh(self, table: str, entries) -> int:
        """Replace resident entries with strictly newer versions; never inserts."""
        t = self._table(table)
        for entry in entries:
            t.check(entry)
        replaced = 0
        for entry in entries:
            s = t.set_of(entry.key)
            with s.lock:
                e = s.entries.get(entry.key)
                if e is not None and entry.version > e.version:
                    e.vector, e.version = entry.vector, entry.version
                    replaced += 1
        t.bump(refresh_replacements=replaced)
        return replaced

    def peek(self, table: str, keys) -> list[VersionedEntry | None]:
        """Side-effect free read of resident entries (None where absent)."""
        t = self._table(table)
        out = []
        for key in keys:
            s = t.set_of(key)
            with s.lock:
                e = s.entries.get(key)
                out.append(None if e is None else VersionedEntry(e.key, e.vector, e.version))
        return out

    def resident_keys(self, table: str) -> list[int]:
        t = self._table(table)
        keys = []
        for s in t.sets:
            with s.lock:
                keys.extend(s.entries)
        return keys

    def snapshot(self, table: str) -> list[VersionedEntry]:
        t = self._table(table)
        out = []
        for s in t.sets:
            with s.lock:
                out.extend(VersionedEntry(e.key, e.vector, e.version) for e in s.entries.values())
        return out

    def __len__(self) -> int:
        return sum(self.occupancy(t) for t in self._tables)

    def occupancy(self, table: str) -> int:
        return sum(len(s.entries) for s in self._table(table).sets)

    def stats(self, table: str) -> CacheStats:
        t = self._table(table)
        with t._stats_lock:
            return CacheStats(*t.stats.as_tuple())

    def reset_stats(self, table: str) -> None:
        t = self._table(table)
        with t._stats_lock:
            t.stats = CacheStats()
