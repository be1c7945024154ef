"""One inference node: L1 cache, VDB, PDB, update queues and the orchestrator."""
from __future__ import annotations

import threading
from pathlib import Path

from .core import TableMeta, UnknownTableError
from .hot_cache import CacheConfig, CacheStats, HotCache
from .orchestrator import LookupResult, MigrationTicket, Orchestrator
from .persistent_store import PdbConfig, PersistentStore
from .pipeline import MessageQueues, RefreshConfig, RefreshLoop, Subscription, drain, refresh_once
from .volatile_store import VdbConfig, VolatileStore


class ParameterServer:
    """Owns every tier under ``root`` (``root/pdb`` and ``root/queues``)."""

    def __init__(
        self,
        root,
        pdb_config: PdbConfig | None = None,
        max_callers: int = 4,
        migration_queue_depth: int | None = None,
        migration_workers: int = 1,
    ):
        self.root = Path(root)
        self.pdb = PersistentStore.open(self.root / "pdb", pdb_config)
        self.vdb = VolatileStore()
        self.cache = HotCache()
        self.queues = MessageQueues(self.root / "queues")
        self.orchestrator = Orchestrator(
            self.cache, self.vdb, self.pdb, max_callers=max_callers, queue_depth=migration_queue_depth, workers=migration_workers
        )
        self.subscriptions: dict[str, Subscription] = {}
        self._apply_lock = threading.Lock()
        self._refresh_loop: RefreshLoop | None = None

    def create_table(self, meta: TableMeta, cache: CacheConfig, vdb: VdbConfig | None = None) -> None:
        self.pdb.create_table(meta)
        self.vdb.create_table(meta, vdb)
        self.cache.create_table(meta, cache)

    def tables(self) -> list[str]:
        return self.cache.tables()

    def meta(self, table: str) -> TableMeta:
        if not self.cache.has_table(table):
            raise UnknownTableError(table)
        return self.pdb.meta(table)

    def lookup(self, table: str, keys) -> tuple[LookupResult, MigrationTicket]:
        return self.orchestrator.lookup(table, keys)

    def publish(self, table: str, entries) -> int:
        return self.queues.publish(self.meta(table), entries)

    def subscription(self, table: str) -> Subscription | None:
        sub = self.subscriptions.get(table)
        if sub is None and table in self.queues.list_queues():
            sub = self.subscriptions[table] = self.queues.subscribe(table, 0)
        return sub

    def apply_pending(self, table: str | None = None) -> int:
        """Drain queued updates into the PDB and VDB."""
        applied = 0
        with self._apply_lock:
            for name in [table] if table else self.tables():
                sub = self.subscription(name)
                if sub is not None:
                    applied += drain(self.queues, sub, self.vdb, self.pdb)
        return applied

    def refresh(self, table: str) -> int:
        """Apply pending updates, then run one L1 refresh cycle for ``table``."""
        self.meta(table)
        self.apply_pending(table)
        return refresh_once(table, self.cache, self.vdb, self.pdb)

    def refresh_all(self) -> int:
        return sum(self.refresh(t) for t in self.tables())

    def start_refresh_loop(self, config: RefreshConfig) -> RefreshLoop:
        self.stop_refresh_loop()
        self._refresh_loop = RefreshLoop(config, self.refresh_all).start()
        return self._refresh_loop

    def stop_refresh_loop(self) -> None:
        if self._refresh_loop is not None:
            self._refresh_loop.stop()
            self._refresh_loop = None

    def stats(self, table: str) -> CacheStats:
        return self.cache.stats(table)

    def close(self) -> None:
        self.stop_refresh_loop()
        self.orchestrator.close()
        self.queues.close()
        self.pdb.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
