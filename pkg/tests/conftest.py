import struct

import numpy as np
import pytest

from hps import CacheConfig, ParameterServer, TableMeta, VdbConfig


def fnv1a64_reference(data: bytes) -> int:
    """Textbook FNV-1a, kept independent of the package implementation."""
    h = 14695981039346656037
    for b in data:
        h ^= b
        h = (h * 1099511628211) % 2**64
    return h


def ref_key_hash(key: int) -> int:
    return fnv1a64_reference(struct.pack("<Q", key))


def vec(*values, dtype="<f4"):
    v = np.asarray(values, dtype=dtype)
    v.flags.writeable = False
    return v


@pytest.fixture
def meta():
    return TableMeta("ads", 4)


@pytest.fixture
def stack(tmp_path):
    s = ParameterServer(tmp_path / "node")
    yield s
    s.close()


def make_stack(root, tables, capacity=1024, ways=8, vdb=None):
    s = ParameterServer(root)
    for name, dim in tables:
        s.create_table(TableMeta(name, dim), CacheConfig(capacity, ways), vdb or VdbConfig(num_shards=4))
    return s


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            name = nodeid.rsplit("::", 1)[-1]
            if "test_acceptance.py" not in nodeid or not name.startswith("test_criterion_"):
                continue
            n = int(name.split("_")[2])
            if lines.get(n) != "FAIL":
                lines[n] = "PASS" if outcome == "passed" else "FAIL"
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(f"criterion {n}: {lines[n]}")
