"""Read path across the three tiers with background promotion of misses.

A lookup probes L1, then L2, then L3 and falls back to the table's default
vector. Keys found below L1 are migrated upward on a worker pool (L3 hits go
to L2 and L1, L2 hits go to L1) while the caller carries on; the returned
ticket tells the caller when that work is visible.
"""
from __future__ import annotations

import enum
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .core import HPSError, UnknownTableError, VersionedEntry

logger = logging.getLogger(__name__)


class Source(enum.IntEnum):
    L1 = 0
    L2 = 1
    L3 = 2
    DEFAULT = 3


class TierError(HPSError):
    def __init__(self, tier: Source, cause: BaseException):
        super().__init__(f"{tier.name} failed: {cause}")
        self.tier = tier
        self.cause = cause


@dataclass
class LookupResult:
    vectors: list[np.ndarray]
    sources: list[Source]
    source_counts: list[int] = field(default_factory=lambda: [0, 0, 0, 0])

    def count(self, source: Source) -> int:
        return self.source_counts[source]

    def as_array(self) -> np.ndarray:
        return np.stack(self.vectors) if self.vectors else np.empty((0, 0), dtype=np.float32)


class MigrationTicket:
    """Completion handle for one lookup's background migrations."""

    def __init__(self, done: bool = False, dropped: bool = False):
        self._event = threading.Event()
        self.dropped = dropped
        self.error: BaseException | None = None
        if done:
            self._event.set()

    def done(self) -> bool:
        return self._event.is_set()

    def _complete(self, error: BaseException | None = None) -> None:
        self.error = error
        self._event.set()

    def wait(self, timeout: float | None = None) -> bool:
        return self._event.wait(timeout)


@dataclass
class OrchestratorStats:
    lookups: int = 0
    keys: int = 0
    migrations_scheduled: int = 0
    migrated_keys: int = 0
    migration_drops: int = 0
    migration_errors: int = 0


class Orchestrator:
    def __init__(self, cache, vdb, pdb, max_callers: int = 4, queue_depth: int | None = None, workers: int = 1):
        self.cache = cache
        self.vdb = vdb
        self.pdb = pdb
        self.queue_depth = queue_depth if queue_depth is not None else 2 * max_callers
        self.stats = OrchestratorStats()
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="hps-migrate")
        self._pending = 0
        self._lock = threading.Lock()

    def _check(self, table: str):
        if not (self.cache.has_table(table) and self.vdb.has_table(table) and self.pdb.has_table(table)):
            raise UnknownTableError(table)
        return self.pdb.meta(table)

    def lookup(self, table: str, keys) -> tuple[LookupResult, MigrationTicket]:
        meta = self._check(table)
        keys = [int(k) for k in keys]
        distinct = list(dict.fromkeys(keys))
        hit: dict[int, tuple[np.ndarray, Source]] = {}

        try:
            found, missing = self.cache.query(table, distinct)
        except HPSError:
            raise
        except Exception as exc:
            raise TierError(Source.L1, exc) from exc
        for k, v in found:
            hit[k] = (v, Source.L1)

        from_l2: list[VersionedEntry] = []
        from_l3: list[VersionedEntry] = []
        if missing:
            try:
                from_l2, missing = self.vdb.get_batch(table, missing)
            except Exception as exc:
                raise TierError(Source.L2, exc) from exc
            for e in from_l2:
                hit[e.key] = (e.vector, Source.L2)
        if missing:
            try:
                from_l3, missing = self.pdb.get_batch(table, missing)
            except Exception as exc:
                raise TierError(Source.L3, exc) from exc
            for e in from_l3:
                hit[e.key] = (e.vector, Source.L3)
        for k in missing:
            hit[k] = (meta.default_vector, Source.DEFAULT)

        result = LookupResult([], [])
        for k in keys:
            v, src = hit[k]
            result.vectors.append(v)
            result.sources.append(src)
            result.source_counts[src] += 1
        with self._lock:
            self.stats.lookups += 1
            self.stats.keys += len(keys)

        return result, self._schedule(table, from_l2, from_l3)

    def _schedule(self, table: str, from_l2, from_l3) -> MigrationTicket:
        if not from_l2 and not from_l3:
            return MigrationTicket(done=True)
        with self._lock:
            if self._pending >= self.queue_depth:
                self.stats.migration_drops += len(from_l2) + len(from_l3)
                return MigrationTicket(done=True, dropped=True)
            self._pending += 1
            self.stats.migrations_scheduled += 1
        ticket = MigrationTicket()
        self._pool.submit(self._migrate, table, from_l2, from_l3, ticket)
        return ticket

    def _migrate(self, table: str, from_l2, from_l3, ticket: MigrationTicket) -> None:
        error = None
        try:
            if from_l3:
                # L2 first so an L1 eviction still leaves the entry one probe away
                self.vdb.put_batch(table, from_l3)
            with self.cache.fill_lock(table):
                # an update may have landed since the probe; never install an older copy
                current, gone = self.vdb.get_batch(table, [e.key for e in from_l2 + from_l3])
                if gone:
                    current += self.pdb.get_batch(table, gone)[0]
                newest = {e.key: e for e in from_l2 + from_l3}
                for e in current:
                    if e.version > newest[e.key].version:
                        newest[e.key] = e
                self.cache.insert(table, list(newest.values()))
        except Exception as exc:
            error = exc
            logger.exception("migration for table %r failed", table)
        with self._lock:
            self._pending -= 1
            if error is None:
                self.stats.migrated_keys += len(from_l2) + len(from_l3)
            else:
                self.stats.migration_errors += 1
        ticket._complete(error)

    def await_migrations(self, ticket: MigrationTicket, timeout: float | None = None) -> bool:
        return ticket.wait(timeout)

    def warmup(self, table: str, budget: int, frequencies: Mapping[int, int] | None = None) -> int:
        """Preload up to ``budget`` PDB entries into L1, hottest first when frequencies are given."""
        self._check(table)
        if budget <= 0:
            return 0
        if frequencies is not None:
            ranked = sorted(frequencies.items(), key=lambda kv: (-kv[1], kv[0]))
            wanted = []
            for key, _ in ranked:
                if len(wanted) >= budget:
                    break
                if (table, key) in self.pdb:
                    wanted.append(key)
            entries, _ = self.pdb.get_batch(table, wanted)
        else:
            entries = []
            scan = self.pdb.scan(table)
            for e in scan:
                entries.append(e)
                if len(entries) >= budget:
                    break
            scan.close()
        self.cache.insert(table, entries)
        return len(entries)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
