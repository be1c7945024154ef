"""Three-tier parameter server for embedding lookups.

L1 is a bounded frequency-aware cache, L2 a sharded in-memory store, L3 a
durable log-structured store holding every table. Updates flow in through
per-table queues and are propagated upward by refresh cycles.
"""
from .core import (
    DType,
    HPSError,
    TableMeta,
    UpdateBatch,
    VersionedEntry,
    compress_f16,
    decode_update_batch,
    decompress_f16,
    encode_update_batch,
    key_hash,
)
from .hot_cache import CacheConfig, CacheStats, HotCache
from .orchestrator import LookupResult, MigrationTicket, Orchestrator, Source
from .persistent_store import PdbConfig, PersistentStore
from .pipeline import MessageProducer, MessageQueues, RefreshConfig, RefreshMode, apply_updates, refresh_once
from .stack import ParameterServer
from .volatile_store import OverflowPolicy, VdbConfig, VolatileStore, partition_of

__version__ = "0.1.0"

__all__ = [
    "CacheConfig",
    "CacheStats",
    "DType",
    "HPSError",
    "HotCache",
    "LookupResult",
    "MessageProducer",
    "MessageQueues",
    "MigrationTicket",
    "Orchestrator",
    "OverflowPolicy",
    "ParameterServer",
    "PdbConfig",
    "PersistentStore",
    "RefreshConfig",
    "RefreshMode",
    "Source",
    "TableMeta",
    "UpdateBatch",
    "VdbConfig",
    "VersionedEntry",
    "VolatileStore",
    "apply_updates",
    "compress_f16",
    "decode_update_batch",
    "decompress_f16",
    "encode_update_batch",
    "key_hash",
    "partition_of",
    "refresh_once",
]
