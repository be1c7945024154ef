"""Shared domain types, key hashing, the update-batch wire codec and FP16 compression.

Vectors are plain 1-D numpy arrays (``<f4`` or ``<f2``). Every ingestion point
goes through :func:`coerce_vector`, which validates the dimension, rejects
non-finite values and freezes the array so tiers can share it without copying.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

MAX_DIM = 4096
MAX_TABLE_NAME_BYTES = 255
F16_MAX = 65504.0

BATCH_MAGIC = b"HPSU"
BATCH_FORMAT_VERSION = 1
# magic | version u8 | name length u16
_BATCH_PREFIX = struct.Struct("<4sBH")
# seq u64 | entry count u32 | dim u16 | dtype u8
_BATCH_HEADER = struct.Struct("<QIHB")


class HPSError(Exception):
    """Base class for all errors raised by this package."""


class InvariantError(HPSError, ValueError):
    pass


class DimensionError(InvariantError):
    pass


class UnknownTableError(HPSError, KeyError):
    def __str__(self):
        return f"unknown table {self.args[0]!r}"


class EncodeError(HPSError, ValueError):
    pass


class DecodeError(HPSError, ValueError):
    pass


class BadMagicError(DecodeError):
    pass


class UnsupportedVersionError(DecodeError):
    pass


class TruncatedError(DecodeError):
    pass


class DuplicateKeyError(DecodeError):
    pass


class TrailingBytesError(DecodeError):
    pass


class SaturationError(HPSError, ValueError):
    pass


class DType(enum.IntEnum):
    F32 = 0
    F16 = 1

    @property
    def numpy(self) -> np.dtype:
        return _NUMPY_DTYPES[self]

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

    @classmethod
    def parse(cls, value) -> "DType":
        if isinstance(value, DType):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


_NUMPY_DTYPES = {DType.F32: np.dtype("<f4"), DType.F16: np.dtype("<f2")}


def validate_table_name(name: str) -> str:
    if not isinstance(name, str):
        raise InvariantError(f"table name must be str, got {type(name).__name__}")
    n = len(name.encode("utf-8"))
    if n == 0:
        raise InvariantError("table name must be non-empty")
    if n > MAX_TABLE_NAME_BYTES:
        raise EncodeError(f"table name is {n} bytes, limit is {MAX_TABLE_NAME_BYTES}")
    return name


def validate_key(key) -> int:
    k = int(key)
    if not 0 <= k <= _U64:
        raise InvariantError(f"key {key} outside unsigned 64-bit range")
    return k


def key_hash(key: int) -> int:
    """FNV-1a 64 over the 8-byte little-endian encoding of ``key``."""
    h = FNV_OFFSET_BASIS
    for b in (key & _U64).to_bytes(8, "little"):
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


def key_hash_array(keys) -> np.ndarray:
    """Vectorized :func:`key_hash` for uint64 arrays (numpy wraps modulo 2**64)."""
    k = np.asarray(keys, dtype=np.uint64)
    h = np.full(k.shape, FNV_OFFSET_BASIS, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    with np.errstate(over="ignore"):
        for shift in range(0, 64, 8):
            h ^= (k >> np.uint64(shift)) & np.uint64(0xFF)
            h *= prime
    return h


def compress_f16(values) -> np.ndarray:
    """Narrow to IEEE binary16 with round-to-nearest-even.

    Raises SaturationError for magnitudes beyond the largest finite half
    instead of letting them become infinities.
    """
    v = np.asarray(values, dtype=np.float32)
    if not np.all(np.isfinite(v)):
        raise InvariantError("non-finite value cannot be compressed")
    if v.size and float(np.max(np.abs(v))) > F16_MAX:
        raise SaturationError(f"magnitude {float(np.max(np.abs(v)))} exceeds binary16 max {F16_MAX}")
    return v.astype("<f2")


def decompress_f16(values) -> np.ndarray:
    return np.asarray(values, dtype="<f2").astype("<f4")


def coerce_vector(values, dim: int, dtype: DType) -> np.ndarray:
    """Validate ``values`` against a table's shape and return a frozen array in ``dtype``."""
    v = np.asarray(values)
    if v.ndim != 1:
        raise DimensionError(f"vector must be 1-D, got shape {v.shape}")
    if v.shape[0] != dim:
        raise DimensionError(f"vector has dim {v.shape[0]}, table expects {dim}")
    if v.dtype == dtype.numpy:
        out = v
        if not np.all(np.isfinite(out)):
            raise InvariantError("non-finite values are not admitted")
    elif dtype is DType.F16:
        out = compress_f16(v)
    else:
        out = v.astype("<f4")
        if not np.all(np.isfinite(out)):
            raise InvariantError("non-finite values are not admitted")
    if out.flags.writeable or out.base is not None:
        out = out.copy()
        out.flags.writeable = False
    return out


def vectors_equal(a: np.ndarray, b: np.ndarray) -> bool:
    """Bitwise equality including dtype."""
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


class VersionedEntry(NamedTuple):
    key: int
    vector: np.ndarray
    version: int


@dataclass(frozen=True)
class TableMeta:
    table: str
    dim: int
    dtype: DType = DType.F32
    default_vector: np.ndarray | None = None

    def __post_init__(self):
        validate_table_name(self.table)
        if not 1 <= int(self.dim) <= MAX_DIM:
            raise InvariantError(f"dim must be in 1..{MAX_DIM}, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "dtype", DType.parse(self.dtype))
        default = self.default_vector
        if default is None:
            default = np.zeros(self.dim, dtype=self.dtype.numpy)
        object.__setattr__(self, "default_vector", coerce_vector(default, self.dim, self.dtype))

    def vector(self, values) -> np.ndarray:
        return coerce_vector(values, self.dim, self.dtype)

    def entry(self, key, values, version: int) -> VersionedEntry:
        return VersionedEntry(validate_key(key), self.vector(values), int(version))

    def __eq__(self, other):
        if not isinstance(other, TableMeta):
            return NotImplemented
        return (
            self.table == other.table
            and self.dim == other.dim
            and self.dtype == other.dtype
            and vectors_equal(self.default_vector, other.default_vector)
        )

    def __hash__(self):
        return hash((self.table, self.dim, self.dtype))


@dataclass
class UpdateBatch:
    table: str
    seq: int
    dim: int
    dtype: DType
    entries: list  # list of (key, vector)

    def __post_init__(self):
        self.dtype = DType.parse(self.dtype)

    def validate(self) -> None:
        validate_table_name(self.table)
        if not 1 <= self.dim <= MAX_DIM:
            raise InvariantError(f"dim must be in 1..{MAX_DIM}, got {self.dim}")
        seen = set()
        for key, vec in self.entries:
            if key in seen:
                raise InvariantError(f"duplicate key {key} in batch")
            seen.add(key)
            if len(vec) != self.dim:
                raise InvariantError(f"mixed dims in batch: {len(vec)} != {self.dim}")

    def versioned(self) -> list[VersionedEntry]:
        return [VersionedEntry(k, v, self.seq) for k, v in self.entries]

    @classmethod
    def build(cls, meta: TableMeta, seq: int, entries: Iterable) -> "UpdateBatch":
        items = [(validate_key(k), meta.vector(v)) for k, v in entries]
        batch = cls(meta.table, int(seq), meta.dim, meta.dtype, items)
        batch.validate()
        return batch

    def __eq__(self, other):
        if not isinstance(other, UpdateBatch):
            return NotImplemented
        if (self.table, self.seq, self.dim, self.dtype) != (other.table, other.seq, other.dim, other.dtype):
            return False
        if len(self.entries) != len(other.entries):
            return False
        return all(
            ka == kb and np.asarray(va, dtype=self.dtype.numpy).tobytes() == np.asarray(vb, dtype=other.dtype.numpy).tobytes()
            for (ka, va), (kb, vb) in zip(self.entries, other.entries)
        )


def _record_dtype(dim: int, dtype: DType) -> np.dtype:
    return np.dtype([("key", "<u8"), ("vec", dtype.numpy, (dim,))])


def encode_update_batch(batch: UpdateBatch) -> bytes:
    name = batch.table.encode("utf-8")
    if len(name) > MAX_TABLE_NAME_BYTES:
        raise EncodeError(f"table name is {len(name)} bytes, limit is {MAX_TABLE_NAME_BYTES}")
    batch.validate()
    dtype = DType.parse(batch.dtype)
    records = np.empty(len(batch.entries), dtype=_record_dtype(batch.dim, dtype))
    for i, (key, vec) in enumerate(batch.entries):
        records[i] = (key, vec)
    return b"".join(
        (
            _BATCH_PREFIX.pack(BATCH_MAGIC, BATCH_FORMAT_VERSION, len(name)),
            name,
            _BATCH_HEADER.pack(batch.seq, len(batch.entries), batch.dim, int(dtype)),
            records.tobytes(),
        )
    )


def decode_update_batch(data: bytes) -> UpdateBatch:
    data = memoryview(data)
    if len(data) < 4:
        raise TruncatedError("payload shorter than magic")
    if bytes(data[:4]) != BATCH_MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
    if len(data) < _BATCH_PREFIX.size:
        raise TruncatedError("payload shorter than batch prefix")
    _, version, name_len = _BATCH_PREFIX.unpack_from(data, 0)
    if version != BATCH_FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported batch format version {version}")
    pos = _BATCH_PREFIX.size
    if len(data) < pos + name_len + _BATCH_HEADER.size:
        raise TruncatedError("payload shorter than batch header")
    try:
        table = bytes(data[pos : pos + name_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"table name is not UTF-8: {exc}") from None
    if not table:
        raise DecodeError("empty table name")
    pos += name_len
    seq, count, dim, dtype_code = _BATCH_HEADER.unpack_from(data, pos)
    pos += _BATCH_HEADER.size
    if not 1 <= dim <= MAX_DIM:
        raise DecodeError(f"dim {dim} outside 1..{MAX_DIM}")
    try:
        dtype = DType(dtype_code)
    except ValueError:
        raise DecodeError(f"unknown dtype code {dtype_code}") from None
    rec = _record_dtype(dim, dtype)
    need = count * rec.itemsize
    if len(data) - pos < need:
        raise TruncatedError(f"need {need} entry bytes, have {len(data) - pos}")
    if len(data) - pos > need:
        raise TrailingBytesError(f"{len(data) - pos - need} trailing bytes after batch")
    records = np.frombuffer(data, dtype=rec, count=count, offset=pos)
    keys = records["key"]
    if len(np.unique(keys)) != count:
        raise DuplicateKeyError("duplicate keys in batch")
    vecs = records["vec"]
    if not np.all(np.isfinite(vecs)):
        raise DecodeError("non-finite values in batch")
    entries = []
    for k, v in zip(keys.tolist(), vecs):
        v = v.copy()
        v.flags.writeable = False
        entries.append((k, v))
    return UpdateBatch(table, seq, dim, dtype, entries)


def split_frames(blob: bytes) -> list[bytes]:
    """Split a buffer of u32-length-prefixed frames; used for queue files and snapshots."""
    out = []
    pos = 0
    while pos < len(blob):
        if len(blob) - pos < 4:
            raise TruncatedError("dangling frame length")
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if len(blob) - pos < n:
            raise TruncatedError("frame extends past end of buffer")
        out.append(bytes(blob[pos : pos + n]))
        pos += n
    return out


def dedupe(keys: Sequence[int]) -> list[int]:
    return list(dict.fromkeys(keys))
