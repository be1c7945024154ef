import os

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hps import DType, PdbConfig, PersistentStore, TableMeta, UpdateBatch, VersionedEntry, encode_update_batch
from hps.core import DimensionError, UnknownTableError
from hps.persistent_store import CorruptionError, StoreOpenError, load_snapshot_dir, record_size, table_dirname

from conftest import vec


def entries(n, version=1, dim=4, seed=0, start=0):
    rng = np.random.default_rng(seed)
    return [VersionedEntry(k, vec(*rng.uniform(-1, 1, dim)), version) for k in range(start, start + n)]


def opened(root, *tables, config=None):
    pdb = PersistentStore.open(root, config)
    for t in tables:
        pdb.create_table(TableMeta(t, 4))
    return pdb


def as_map(pdb, table, keys):
    found, _ = pdb.get_batch(table, keys)
    return {e.key: (e.vector.tobytes(), e.version) for e in found}


def test_empty_root(tmp_path):
    assert PersistentStore.open(tmp_path / "pdb").tables() == []


def test_durability_round_trip(tmp_path):
    pdb = opened(tmp_path, "t")
    data = entries(10_000)
    assert pdb.put_batch("t", data) == 10_000
    pdb.close()
    pdb = PersistentStore.open(tmp_path)
    found, missing = pdb.get_batch("t", range(10_000))
    assert not missing
    assert all(a.vector.tobytes() == b.vector.tobytes() and a.version == b.version for a, b in zip(found, data))
    pdb.close()


def test_highest_version_wins_after_reopen(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.put_batch("t", [VersionedEntry(1, vec(1, 1, 1, 1), 1)])
    pdb.put_batch("t", [VersionedEntry(1, vec(2, 2, 2, 2), 2)])
    assert pdb.put_batch("t", [VersionedEntry(1, vec(0, 0, 0, 0), 1)]) == 0
    pdb.close()
    pdb = PersistentStore.open(tmp_path)
    (e,), _ = pdb.get_batch("t", [1])
    assert e.version == 2 and e.vector[0] == 2
    pdb.close()


def test_namespace_isolation(tmp_path):
    pdb = opened(tmp_path, "a", "b")
    pdb.put_batch("a", [VersionedEntry(7, vec(1, 1, 1, 1), 1)])
    pdb.put_batch("b", [VersionedEntry(7, vec(2, 2, 2, 2), 1)])
    assert pdb.get_batch("a", [7])[0][0].vector[0] == 1
    assert pdb.get_batch("b", [7])[0][0].vector[0] == 2
    with pytest.raises(UnknownTableError):
        pdb.get_batch("c", [7])
    pdb.close()


def test_manifest_and_layout(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.put_batch("t", entries(3))
    d = tmp_path / table_dirname("t")
    assert (d / "manifest.json").exists()
    assert (d / "segment-000001.log").stat().st_size == 3 * record_size(4, DType.F32) == 3 * (19 + 16 + 4)
    pdb.close()


def test_awkward_table_names(tmp_path):
    names = ["a/b", "..", "ünï code", "x" * 255]
    pdb = PersistentStore.open(tmp_path)
    for n in names:
        pdb.create_table(TableMeta(n, 2))
        pdb.put_batch(n, [VersionedEntry(1, vec(len(n), 0), 1)])
    pdb.close()
    pdb = PersistentStore.open(tmp_path)
    assert sorted(pdb.tables()) == sorted(names)
    for n in names:
        assert pdb.get_batch(n, [1])[0][0].vector[0] == len(n)
    pdb.close()


def test_scan(tmp_path):
    pdb = opened(tmp_path, "t")
    assert list(pdb.scan("t")) == []
    pdb.put_batch("t", entries(50))
    pdb.put_batch("t", entries(10, version=2, seed=1))
    scanned = {e.key: (e.vector.tobytes(), e.version) for e in pdb.scan("t")}
    assert len(scanned) == 50
    assert scanned == as_map(pdb, "t", range(50))
    pdb.close()


def test_scan_survives_compaction(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.put_batch("t", entries(20))
    pdb.put_batch("t", entries(20, version=2, seed=3))
    it = pdb.scan("t")
    first = next(it)
    pdb.compact("t")
    rest = list(it)
    assert len(rest) == 19 and first.version == 2
    pdb.close()


def test_compaction(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.put_batch("t", entries(100))
    assert pdb.compact("t") == 0
    pdb.put_batch("t", entries(100, version=2, seed=5))
    before = as_map(pdb, "t", range(100))
    reclaimed = pdb.compact("t")
    assert reclaimed == 100 * record_size(4, DType.F32)
    assert as_map(pdb, "t", range(100)) == before
    assert pdb.live_bytes("t") == 100 * record_size(4, DType.F32)
    pdb.close()
    pdb = PersistentStore.open(tmp_path)
    assert as_map(pdb, "t", range(100)) == before
    pdb.close()


def test_segment_rotation(tmp_path):
    rs = record_size(4, DType.F32)
    pdb = opened(tmp_path, "t", config=PdbConfig(segment_bytes=10 * rs))
    pdb.put_batch("t", entries(35))
    d = tmp_path / table_dirname("t")
    assert sorted(p.name for p in d.glob("segment-*")) == [f"segment-00000{i}.log" for i in range(1, 5)]
    before = as_map(pdb, "t", range(35))
    pdb.close()
    pdb = PersistentStore.open(tmp_path, PdbConfig(segment_bytes=10 * rs))
    assert as_map(pdb, "t", range(35)) == before
    pdb.close()


def test_torn_tail_is_dropped(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.put_batch("t", entries(5))
    pdb.close()
    seg = tmp_path / table_dirname("t") / "segment-000001.log"
    with open(seg, "r+b") as f:
        f.truncate(seg.stat().st_size - 3)
    pdb = PersistentStore.open(tmp_path)
    assert pdb.dropped_tail_records == 1
    assert pdb.count("t") == 4
    # appends after recovery land on a record boundary
    pdb.put_batch("t", entries(1, version=9, start=4))
    pdb.close()
    pdb = PersistentStore.open(tmp_path)
    assert pdb.count("t") == 5 and pdb.dropped_tail_records == 0
    pdb.close()


def test_corrupt_tail_checksum_is_dropped(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.put_batch("t", entries(5))
    pdb.close()
    seg = tmp_path / table_dirname("t") / "segment-000001.log"
    raw = bytearray(seg.read_bytes())
    raw[-10] ^= 0xFF
    seg.write_bytes(bytes(raw))
    pdb = PersistentStore.open(tmp_path)
    assert pdb.count("t") == 4 and pdb.dropped_tail_records == 1
    pdb.close()


def test_interior_corruption_is_fatal(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.put_batch("t", entries(5))
    pdb.close()
    seg = tmp_path / table_dirname("t") / "segment-000001.log"
    raw = bytearray(seg.read_bytes())
    raw[5] ^= 0xFF
    seg.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        PersistentStore.open(tmp_path)


def test_unreadable_manifest(tmp_path):
    pdb = opened(tmp_path, "t")
    pdb.close()
    (tmp_path / table_dirname("t") / "manifest.json").write_text("{nope")
    with pytest.raises(StoreOpenError):
        PersistentStore.open(tmp_path)


def test_dim_mismatch(tmp_path):
    pdb = opened(tmp_path, "t")
    with pytest.raises(DimensionError):
        pdb.put_batch("t", [VersionedEntry(1, vec(1.0), 1)])
    pdb.close()


def test_f16_table(tmp_path):
    pdb = PersistentStore.open(tmp_path)
    meta = TableMeta("h", 3, DType.F16)
    pdb.create_table(meta)
    pdb.put_batch("h", [meta.entry(1, [0.5, -1.0, 0.25], 1)])
    pdb.close()
    pdb = PersistentStore.open(tmp_path)
    (e,), _ = pdb.get_batch("h", [1])
    assert e.vector.dtype == np.dtype("<f2") and e.vector.tolist() == [0.5, -1.0, 0.25]
    assert pdb.meta("h") == meta
    pdb.close()


def test_snapshot_bulk_load(tmp_path):
    snap = tmp_path / "snap"
    snap.mkdir()
    meta = TableMeta("ads", 2)
    raw = encode_update_batch(UpdateBatch.build(meta, 0, [(k, [k, -k]) for k in range(10)]))
    (snap / "ads.hpsu").write_bytes(raw)
    pdb = PersistentStore.open(tmp_path / "pdb")
    assert load_snapshot_dir(pdb, snap) == {"ads": 10}
    (e,), _ = pdb.get_batch("ads", [3])
    assert e.version == 0 and e.vector.tolist() == [3.0, -3.0]
    pdb.close()


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 8), st.floats(-1, 1, width=32)), max_size=120))
def test_matches_max_version_reference(tmp_path_factory, ops):
    root = tmp_path_factory.mktemp("pdb")
    pdb = opened(root, "t", config=PdbConfig(segment_bytes=record_size(4, DType.F32) * 7))
    ref = {}
    for key, version, x in ops:
        pdb.put_batch("t", [VersionedEntry(key, vec(x, x, x, x), version)])
        if key not in ref or version > ref[key][1]:
            ref[key] = (vec(x, x, x, x).tobytes(), version)
    assert as_map(pdb, "t", range(31)) == ref
    pdb.compact("t")
    assert as_map(pdb, "t", range(31)) == ref
    pdb.close()
    pdb = PersistentStore.open(root)
    assert as_map(pdb, "t", range(31)) == ref
    assert {e.key: (e.vector.tobytes(), e.version) for e in pdb.scan("t")} == ref
    pdb.close()


def test_sync_every_batch_flag(tmp_path, monkeypatch):
    calls = []
    real = os.fsync
    monkeypatch.setattr(os, "fsync", lambda fd: calls.append(fd) or real(fd))
    pdb = opened(tmp_path, "t", config=PdbConfig(sync_every_batch=True))
    pdb.put_batch("t", entries(2))
    pdb.put_batch("t", entries(2, version=2))
    assert len(calls) >= 2
    pdb.close()
