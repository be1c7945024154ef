"""Level-2 store: hash-partitioned in-memory shards holding a partial copy of each table."""
from __future__ import annotations

import enum
import heapq
import threading
from dataclasses import dataclass

from .core import (
    DimensionError,
    HPSError,
    InvariantError,
    TableMeta,
    UnknownTableError,
    VersionedEntry,
    key_hash,
)


class OverflowPolicy(enum.Enum):
    REJECT_NEW = "RejectNew"
    EVICT_OLDEST_VERSION = "EvictOldestVersion"


@dataclass(frozen=True)
class VdbConfig:
    num_shards: int = 8
    per_shard_capacity: int = 1 << 20
    overflow_policy: OverflowPolicy = OverflowPolicy.EVICT_OLDEST_VERSION

    def __post_init__(self):
        if self.num_shards < 1:
            raise InvariantError("num_shards must be >= 1")
        if self.per_shard_capacity < 1:
            raise InvariantError("per_shard_capacity must be >= 1")
        object.__setattr__(self, "overflow_policy", OverflowPolicy(self.overflow_policy))


def partition_of(key: int, num_shards: int) -> int:
    if num_shards < 1:
        raise InvariantError("num_shards must be >= 1")
    return key_hash(key) % num_shards


class _Shard:
    __slots__ = ("lock", "entries", "heap")

    def __init__(self):
        self.lock = threading.Lock()
        self.entries: dict[int, VersionedEntry] = {}
        # (version, key); stale items are skipped on pop
        self.heap: list[tuple[int, int]] = []

    def pop_oldest(self) -> int:
        while True:
            version, key = heapq.heappop(self.heap)
            e = self.entries.get(key)
            if e is not None and e.version == version:
                del self.entries[key]
                return key

    def compact_heap(self) -> None:
        if len(self.heap) > 4 * len(self.entries) + 64:
            self.heap = [(e.version, k) for k, e in self.entries.items()]
            heapq.heapify(self.heap)


class VolatileStore:
    """Sharded in-memory tier. Shards stand in for separate memory nodes."""

    def __init__(self):
        self._tables: dict[str, tuple[TableMeta, VdbConfig, list[_Shard]]] = {}
        self.evictions = 0
        self.rejections = 0

    def create_table(self, meta: TableMeta, config: VdbConfig | None = None) -> None:
        if meta.table in self._tables:
            raise InvariantError(f"table {meta.table!r} already registered")
        config = config or VdbConfig()
        self._tables[meta.table] = (meta, config, [_Shard() for _ in range(config.num_shards)])

    def has_table(self, table: str) -> bool:
        return table in self._tables

    def tables(self) -> list[str]:
        return list(self._tables)

    def _get(self, table):
        try:
            return self._tables[table]
        except KeyError:
            raise UnknownTableError(table) from None

    def config(self, table: str) -> VdbConfig:
        return self._get(table)[1]

    def put_batch(self, table: str, entries) -> int:
        meta, config, shards = self._get(table)
        for e in entries:
            if len(e.vector) != meta.dim or e.vector.dtype != meta.dtype.numpy:
                raise DimensionError(f"entry for key {e.key} does not match table {table!r} shape")
        stored = 0
        for e in entries:
            shard = shards[key_hash(e.key) % config.num_shards]
            with shard.lock:
                cur = shard.entries.get(e.key)
                if cur is not None:
                    if e.version <= cur.version:
                        continue
                elif len(shard.entries) >= config.per_shard_capacity:
                    if config.overflow_policy is OverflowPolicy.REJECT_NEW:
                        self.rejections += 1
                        continue
                    shard.pop_oldest()
                    self.evictions += 1
                shard.entries[e.key] = e
                heapq.heappush(shard.heap, (e.version, e.key))
                shard.compact_heap()
                stored += 1
        return stored

    def get_batch(self, table: str, keys) -> tuple[list[VersionedEntry], list[int]]:
        _, config, shards = self._get(table)
        found, missing = [], []
        for key in keys:
            e = shards[key_hash(key) % config.num_shards].entries.get(key)
            if e is None:
                missing.append(key)
            else:
                found.append(e)
        return found, missing

    def shard_snapshot(self, table: str, idx: int) -> list[VersionedEntry]:
        _, config, shards = self._get(table)
        if not 0 <= idx < config.num_shards:
            raise ShardIndexError(f"shard {idx} outside 0..{config.num_shards - 1}")
        shard = shards[idx]
        with shard.lock:
            return list(shard.entries.values())

    def shard_sizes(self, table: str) -> list[int]:
        return [len(s.entries) for s in self._get(table)[2]]

    def __len__(self) -> int:
        return sum(sum(self.shard_sizes(t)) for t in self._tables)


class ShardIndexError(HPSError, IndexError):
    pass
