"""Trace replay through a parameter server, with concurrent update publishing."""
from __future__ import annotations

import threading
import time

import numpy as np

from ..core import UpdateBatch, encode_update_batch
from ..pipeline import RefreshConfig, RefreshMode
from ..service import Client
from .report import LEVELS, MetricsReport
from .workload import WorkloadSpec, ZipfSampler


class LocalBackend:
    def __init__(self, stack, await_migrations: bool = True):
        self.stack = stack
        self.await_migrations = await_migrations

    def lookup(self, table, keys):
        result, ticket = self.stack.lookup(table, keys)
        return result.source_counts, ticket

    def settle(self, ticket) -> None:
        if self.await_migrations and ticket is not None:
            ticket.wait()

    def publish(self, table, entries) -> int:
        seq = self.stack.publish(table, entries)
        self.stack.apply_pending(table)
        return seq

    def refresh(self, table) -> int:
        return self.stack.refresh(table)

    def refresh_replacements(self, table) -> int:
        return self.stack.cache.stats(table).refresh_replacements

    def migration_drops(self) -> int:
        return self.stack.orchestrator.stats.migration_drops

    def start_refresh_loop(self, config):
        return self.stack.start_refresh_loop(config)

    def stop_refresh_loop(self):
        self.stack.stop_refresh_loop()


class RemoteBackend:
    """Same surface over the wire protocol; migrations are the server's business."""

    def __init__(self, client: Client, meta):
        self.client = client
        self.meta = meta
        self._loop = None

    def lookup(self, table, keys):
        return list(self.client.lookup(table, keys).source_counts), None

    def settle(self, ticket) -> None:
        pass

    def publish(self, table, entries) -> int:
        batch = UpdateBatch.build(self.meta, 0, entries)
        return self.client.publish(encode_update_batch(batch))

    def refresh(self, table) -> int:
        return self.client.refresh(table)

    def refresh_replacements(self, table) -> int:
        return self.client.stats(table)[5]

    def migration_drops(self) -> int:
        return 0

    def start_refresh_loop(self, config):
        from ..pipeline import RefreshLoop

        self._loop = RefreshLoop(config, lambda: self.client.refresh(self.meta.table)).start()
        return self._loop

    def stop_refresh_loop(self):
        if self._loop is not None:
            self._loop.stop()
            self._loop = None


def replay(
    spec: WorkloadSpec,
    backend,
    table: str,
    dim: int,
    keys: np.ndarray | None = None,
    warmup_batches: int = 0,
    workers: int = 1,
    refresh: RefreshConfig | None = None,
    refresh_every: int = 0,
) -> MetricsReport:
    """Run ``warmup_batches`` unmeasured then ``spec.n_batches`` measured lookups.

    ``keys`` overrides the generated stream (e.g. a trace file); it must hold
    ``(warmup_batches + n_batches) * batch_size`` keys. Each measured batch
    is followed by ``spec.update_rate`` published updates whose keys follow
    the same Zipf law. With ExplicitOnly refresh, ``refresh_every > 0``
    triggers a refresh cycle every that many measured batches.
    """
    refresh = refresh or RefreshConfig()
    total_batches = warmup_batches + spec.n_batches
    if keys is None:
        keys = ZipfSampler(spec.n_keys, spec.zipf_s, spec.seed).sample(total_batches * spec.batch_size)
    keys = np.asarray(keys, dtype=np.uint64)
    if len(keys) < total_batches * spec.batch_size:
        raise ValueError(f"need {total_batches * spec.batch_size} keys, got {len(keys)}")
    batches = keys[: total_batches * spec.batch_size].reshape(total_batches, spec.batch_size)

    for b in batches[:warmup_batches]:
        _, ticket = backend.lookup(table, b.tolist())
        backend.settle(ticket)

    update_sampler = ZipfSampler(spec.n_keys, spec.zipf_s, spec.seed, stream=1)
    update_rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(3)[2])
    publish_lock = threading.Lock()
    report = MetricsReport()
    hits = dict.fromkeys(LEVELS, 0)
    latencies = np.zeros(spec.n_batches)
    counters = {"published": 0, "done": 0}
    lock = threading.Lock()
    replaced_before = backend.refresh_replacements(table)
    drops_before = backend.migration_drops()
    loop = backend.start_refresh_loop(refresh) if refresh.mode is RefreshMode.PERIODIC else None

    def publish_updates():
        with publish_lock:
            upd_keys = list(dict.fromkeys(update_sampler.sample(spec.update_rate).tolist()))
            values = update_rng.uniform(-1.0, 1.0, size=(len(upd_keys), dim)).astype(np.float32)
            backend.publish(table, zip(upd_keys, values))
            return len(upd_keys)

    def worker(indices):
        for i in indices:
            b = batches[warmup_batches + i].tolist()
            t0 = time.perf_counter()
            counts, ticket = backend.lookup(table, b)
            latencies[i] = (time.perf_counter() - t0) * 1e6 / len(b)
            backend.settle(ticket)
            published = publish_updates() if spec.update_rate else 0
            with lock:
                for lvl, c in zip(LEVELS, counts):
                    hits[lvl] += c
                counters["published"] += published
                counters["done"] += 1
                due = refresh_every and refresh.mode is RefreshMode.EXPLICIT_ONLY and counters["done"] % refresh_every == 0
            if due:
                backend.refresh(table)

    start = time.perf_counter()
    try:
        if workers <= 1:
            worker(range(spec.n_batches))
        else:
            threads = [
                threading.Thread(target=worker, args=(range(w, spec.n_batches, workers),)) for w in range(workers)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
    finally:
        if loop is not None:
            backend.stop_refresh_loop()
    elapsed = time.perf_counter() - start

    report.batches = spec.n_batches
    report.keys_served = sum(hits.values())
    report.level_hits = hits
    if spec.n_batches:
        p50, p95, p99 = np.percentile(latencies, [50, 95, 99])
        report.latency_us = {"p50": float(p50), "p95": float(p95), "p99": float(p99)}
    report.elapsed_s = elapsed
    report.throughput_keys_per_s = report.keys_served / elapsed if elapsed > 0 else 0.0
    report.refresh_replacements = backend.refresh_replacements(table) - replaced_before
    report.migration_drops = backend.migration_drops() - drops_before
    report.updates_published = counters["published"]
    return report
