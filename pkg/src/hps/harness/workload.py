"""Synthetic Zipf workloads, trace files and seeded bulk loads."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..core import InvariantError, TableMeta, VersionedEntry

TRACE_HEADER = struct.Struct("<4Q")  # n_keys, batch_size, n_batches, seed


@dataclass(frozen=True)
class WorkloadSpec:
    n_keys: int
    zipf_s: float = 1.0
    batch_size: int = 1024
    n_batches: int = 100
    seed: int = 0
    update_rate: int = 0

    def __post_init__(self):
        if self.n_keys < 1:
            raise InvariantError("n_keys must be >= 1")
        if self.zipf_s < 0:
            raise InvariantError("zipf_s must be >= 0")
        if self.batch_size < 1 or self.n_batches < 0 or self.update_rate < 0:
            raise InvariantError("batch_size >= 1, n_batches >= 0, update_rate >= 0 required")
        if not 0 <= self.seed < 1 << 64:
            raise InvariantError("seed must fit in 64 bits")

    def to_dict(self) -> dict:
        return asdict(self)


def zipf_probabilities(n: int, s: float) -> np.ndarray:
    """P(rank k) = k^-s / sum_j j^-s for k = 1..n."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(s)
    return w / w.sum()


def top_mass(n: int, s: float, k: int) -> float:
    """Probability mass of the ``k`` most popular ranks."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -float(s)
    return float(w[:k].sum() / w.sum())


class ZipfSampler:
    """Inverse-CDF sampler; rank r maps to key ``perm[r - 1]``.

    The permutation and the draw stream come from independent children of
    one SeedSequence, so a seed fixes both.
    """

    def __init__(self, n_keys: int, s: float, seed: int, stream: int = 0):
        perm_seq, draw_seq = np.random.SeedSequence(seed).spawn(2)
        self.n_keys = n_keys
        self.s = s
        self.perm = np.random.default_rng(perm_seq).permutation(n_keys).astype(np.uint64)
        self.cdf = np.cumsum(zipf_probabilities(n_keys, s))
        self.cdf[-1] = 1.0
        if stream:
            draw_seq = draw_seq.spawn(stream + 1)[stream]
        self.rng = np.random.default_rng(draw_seq)

    def ranks(self, size: int) -> np.ndarray:
        """1-based ranks."""
        idx = np.searchsorted(self.cdf, self.rng.random(size), side="right")
        return np.minimum(idx, self.n_keys - 1) + 1

    def sample(self, size: int) -> np.ndarray:
        return self.perm[self.ranks(size) - 1]

    def probability_of_key(self) -> np.ndarray:
        """P(key) indexed by key id."""
        p = np.empty(self.n_keys)
        p[self.perm.astype(np.int64)] = zipf_probabilities(self.n_keys, self.s)
        return p


def gen_zipf(spec: WorkloadSpec) -> np.ndarray:
    """The full key stream for ``spec``: ``n_batches * batch_size`` uint64 keys."""
    return ZipfSampler(spec.n_keys, spec.zipf_s, spec.seed).sample(spec.batch_size * spec.n_batches)


def write_trace(path, spec: WorkloadSpec, keys: np.ndarray | None = None) -> int:
    keys = gen_zipf(spec) if keys is None else np.asarray(keys, dtype="<u8")
    with open(path, "wb") as f:
        f.write(TRACE_HEADER.pack(spec.n_keys, spec.batch_size, spec.n_batches, spec.seed))
        f.write(keys.astype("<u8").tobytes())
    return len(keys)


def read_trace(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < TRACE_HEADER.size:
        raise InvariantError(f"{path}: trace shorter than its header")
    n_keys, batch_size, n_batches, seed = TRACE_HEADER.unpack_from(data, 0)
    body = len(data) - TRACE_HEADER.size
    if body % 8 or body // 8 != batch_size * n_batches:
        raise InvariantError(f"{path}: expected {batch_size * n_batches} keys, found {body / 8:g}")
    keys = np.frombuffer(data, dtype="<u8", offset=TRACE_HEADER.size)
    header = {"n_keys": n_keys, "batch_size": batch_size, "n_batches": n_batches, "seed": seed}
    return header, keys


def table_vectors(n_keys: int, dim: int, seed: int) -> np.ndarray:
    """Seeded initial embeddings, uniform in [-1, 1]."""
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(n_keys, dim)).astype(np.float32)


def bulk_load(meta: TableMeta, n_keys: int, seed: int, pdb, chunk: int = 1 << 16) -> int:
    """Write keys ``0..n_keys-1`` with seeded vectors into the PDB at version 0."""
    if not pdb.has_table(meta.table):
        pdb.create_table(meta)
    if n_keys <= 0:
        return 0
    values = table_vectors(n_keys, meta.dim, seed)
    stored = 0
    for lo in range(0, n_keys, chunk):
        hi = min(n_keys, lo + chunk)
        stored += pdb.put_batch(meta.table, [VersionedEntry(k, meta.vector(values[k]), 0) for k in range(lo, hi)])
    return stored
