"""Online update propagation.

Training-side producers publish per-table batches into an embedded durable
log (one queue file per table). Inference-side sources subscribe, apply the
batches to the PDB and then the VDB, and a refresh engine pushes fresher
versions into the L1 cache.

Queue file: a sequence of frames ``length u32 LE | encoded UpdateBatch``.
A batch's seq doubles as the version of every entry it carries.
"""
from __future__ import annotations

import enum
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .core import (
    DecodeError,
    HPSError,
    InvariantError,
    TableMeta,
    UnknownTableError,
    UpdateBatch,
    decode_update_batch,
    encode_update_batch,
)
from .persistent_store import table_dirname

logger = logging.getLogger(__name__)

QUEUE_SUFFIX = ".queue"
_LEN = struct.Struct("<I")


class QueueIOError(HPSError):
    pass


class _Queue:
    def __init__(self, path: Path):
        self.path = path
        self.table: str | None = None
        self.offsets: list[tuple[int, int, int]] = []  # (seq, byte offset of payload, length)
        self.next_seq = 1
        self.lock = threading.Lock()
        self._recover()
        self.file = open(path, "ab")
        self.fd = os.open(path, os.O_RDONLY)

    def _recover(self) -> None:
        if not self.path.exists():
            return
        data = self.path.read_bytes()
        pos = 0
        while pos < len(data):
            if len(data) - pos < _LEN.size:
                break
            (n,) = _LEN.unpack_from(data, pos)
            if len(data) - pos - _LEN.size < n:
                break
            payload = data[pos + _LEN.size : pos + _LEN.size + n]
            try:
                batch = decode_update_batch(payload)
            except DecodeError:
                break
            self.table = self.table or batch.table
            self.offsets.append((batch.seq, pos + _LEN.size, n))
            self.next_seq = batch.seq + 1
            pos += _LEN.size + n
        if pos != len(data):
            logger.warning("%s: dropping %d bytes of torn tail", self.path, len(data) - pos)
            with open(self.path, "r+b") as f:
                f.truncate(pos)

    def append(self, batch: UpdateBatch) -> None:
        payload = encode_update_batch(batch)
        offset = self.file.tell()
        try:
            self.file.write(_LEN.pack(len(payload)) + payload)
            self.file.flush()
        except OSError as exc:
            raise QueueIOError(f"{self.path}: {exc}") from exc
        self.offsets.append((batch.seq, offset + _LEN.size, len(payload)))
        self.next_seq = batch.seq + 1

    def read_after(self, cursor: int, limit: int) -> list[bytes]:
        with self.lock:
            offsets = self.offsets
            # seqs are strictly increasing; binary search the first seq > cursor
            lo, hi = 0, len(offsets)
            while lo < hi:
                mid = (lo + hi) // 2
                if offsets[mid][0] <= cursor:
                    lo = mid + 1
                else:
                    hi = mid
            window = offsets[lo : lo + limit]
        return [os.pread(self.fd, n, off) for _, off, n in window]

    def close(self) -> None:
        self.file.close()
        os.close(self.fd)


@dataclass
class Subscription:
    table: str
    cursor: int = 0


class MessageQueues:
    """Embedded broker: per-table ordered, durable, replayable queues."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._queues: dict[str, _Queue] = {}
        self._lock = threading.Lock()
        for p in sorted(self.root.glob("*" + QUEUE_SUFFIX)):
            q = _Queue(p)
            if q.table is None:
                q.close()
                continue
            self._queues[q.table] = q

    def list_queues(self) -> list[str]:
        return sorted(self._queues)

    def _queue(self, table: str) -> _Queue:
        try:
            return self._queues[table]
        except KeyError:
            raise UnknownTableError(table) from None

    def _queue_for_write(self, table: str) -> _Queue:
        with self._lock:
            q = self._queues.get(table)
            if q is None:
                q = _Queue(self.root / (table_dirname(table) + QUEUE_SUFFIX))
                q.table = table
                self._queues[table] = q
            return q

    def next_seq(self, table: str) -> int:
        q = self._queues.get(table)
        return 1 if q is None else q.next_seq

    def publish(self, meta: TableMeta, entries) -> int:
        """Serialize ``entries`` as the table's next batch and append it; returns its seq."""
        q = self._queue_for_write(meta.table)
        with q.lock:
            batch = UpdateBatch.build(meta, q.next_seq, entries)
            q.append(batch)
            return batch.seq

    def publish_batch(self, batch: UpdateBatch) -> int:
        """Append a pre-built batch, overriding its seq with the queue's next one."""
        q = self._queue_for_write(batch.table)
        with q.lock:
            batch = UpdateBatch(batch.table, q.next_seq, batch.dim, batch.dtype, batch.entries)
            q.append(batch)
            return batch.seq

    def subscribe(self, table: str, from_seq: int = 0) -> Subscription:
        self._queue(table)
        return Subscription(table, from_seq)

    def fetch(self, sub: Subscription, max_batches: int) -> list[UpdateBatch]:
        """Read up to ``max_batches`` past the cursor without advancing it."""
        return [decode_update_batch(b) for b in self.fetch_raw(sub, max_batches)]

    def fetch_raw(self, sub: Subscription, max_batches: int) -> list[bytes]:
        return self._queue(sub.table).read_after(sub.cursor, max_batches)

    def poll(self, sub: Subscription, max_batches: int = 64) -> list[UpdateBatch]:
        batches = self.fetch(sub, max_batches)
        if batches:
            sub.cursor = batches[-1].seq
        return batches

    def close(self) -> None:
        for q in self._queues.values():
            q.close()
        self._queues.clear()


class MessageProducer:
    """Stages updates per table and publishes them in batches.

    Staging the same key twice before a flush keeps only the latest vector,
    which keeps every published batch free of duplicate keys.
    """

    def __init__(self, queues: MessageQueues, tables: dict[str, TableMeta], max_batch_entries: int = 4096):
        self.queues = queues
        self.tables = tables
        self.max_batch_entries = max_batch_entries
        self._staged: dict[str, dict[int, object]] = {}

    def stage(self, table: str, key: int, vector) -> None:
        if table not in self.tables:
            raise UnknownTableError(table)
        staged = self._staged.setdefault(table, {})
        staged[key] = vector
        if len(staged) >= self.max_batch_entries:
            self.flush(table)

    def flush(self, table: str | None = None) -> list[int]:
        seqs = []
        for name in [table] if table else list(self._staged):
            staged = self._staged.pop(name, None)
            if staged:
                seqs.append(self.queues.publish(self.tables[name], staged.items()))
        return seqs


def apply_updates(queues: MessageQueues, sub: Subscription, vdb, pdb, max_batches: int = 64) -> int:
    """Apply polled batches to the PDB, then the VDB. Returns entries handed to the stores.

    The cursor only advances past batches that were fully applied.
    """
    applied = 0
    for batch in queues.fetch(sub, max_batches):
        entries = batch.versioned()
        pdb.put_batch(batch.table, entries)
        vdb.put_batch(batch.table, entries)
        sub.cursor = batch.seq
        applied += len(entries)
    return applied


def drain(queues: MessageQueues, sub: Subscription, vdb, pdb, max_batches: int = 64) -> int:
    total = 0
    while True:
        n_before = sub.cursor
        total += apply_updates(queues, sub, vdb, pdb, max_batches)
        if sub.cursor == n_before:
            return total


def refresh_once(table: str, cache, vdb, pdb) -> int:
    """Re-read every L1-resident key from the VDB (falling back to the PDB) and refresh it."""
    with cache.fill_lock(table):
        keys = cache.resident_keys(table)
        if not keys:
            return 0
        found, missing = vdb.get_batch(table, keys)
        if missing:
            from_pdb, _ = pdb.get_batch(table, missing)
            found.extend(from_pdb)
        return cache.refresh(table, found)


class RefreshMode(enum.Enum):
    PERIODIC = "Periodic"
    EXPLICIT_ONLY = "ExplicitOnly"


@dataclass(frozen=True)
class RefreshConfig:
    period: float = 60.0  # seconds
    mode: RefreshMode = RefreshMode.EXPLICIT_ONLY

    def __post_init__(self):
        object.__setattr__(self, "mode", RefreshMode(self.mode))
        if self.mode is RefreshMode.PERIODIC and not self.period > 0:
            raise InvariantError("period must be positive in Periodic mode")


class RefreshLoop:
    """Runs ``cycle`` every ``config.period`` seconds on a background thread.

    In ExplicitOnly mode nothing runs automatically; :meth:`trigger` is the
    only way to start a cycle. ``cycle`` would typically drain subscriptions
    and call :func:`refresh_once` for each table.
    """

    def __init__(self, config: RefreshConfig, cycle):
        self.config = config
        self._cycle = cycle
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self.cycles = 0
        self.replaced = 0
        self.errors = 0

    def trigger(self) -> int:
        with self._lock:
            n = self._cycle() or 0
            self.cycles += 1
            self.replaced += n
            return n

    def start(self) -> "RefreshLoop":
        if self.config.mode is RefreshMode.PERIODIC and self._thread is None:
            self._stop.clear()
            self._thread = threading.Thread(target=self._run, name="hps-refresh", daemon=True)
            self._thread.start()
        return self

    def _run(self) -> None:
        next_at = time.monotonic() + self.config.period
        while not self._stop.wait(max(0.0, next_at - time.monotonic())):
            next_at += self.config.period
            try:
                self.trigger()
            except Exception:
                self.errors += 1
                logger.exception("refresh cycle failed")

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def run_refresh_loop(config: RefreshConfig, tables, cache, vdb, pdb, queues=None, subs=None) -> RefreshLoop:
    """Start a refresh loop over ``tables``; with ``queues``/``subs`` each cycle drains updates first."""

    def cycle() -> int:
        replaced = 0
        for table in tables:
            if queues is not None and subs and table in subs:
                drain(queues, subs[table], vdb, pdb)
            replaced += refresh_once(table, cache, vdb, pdb)
        return replaced

    return RefreshLoop(config, cycle).start()
