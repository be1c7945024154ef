"""Declarative experiment config (JSON) with dotted-path overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from ..core import TableMeta
from ..hot_cache import CacheConfig
from ..persistent_store import PdbConfig
from ..pipeline import RefreshConfig
from ..volatile_store import VdbConfig
from .workload import WorkloadSpec

DEFAULTS = {
    "root": "hps-data",
    "table": {"name": "ads", "dim": 16, "dtype": "F32"},
    "cache": {"capacity": 8192, "ways": 8},
    "vdb": {"num_shards": 8, "per_shard_capacity": 1 << 20, "overflow_policy": "EvictOldestVersion"},
    "pdb": {"segment_bytes": 64 << 20, "sync_every_batch": False},
    "workload": {"n_keys": 100000, "zipf_s": 1.2, "batch_size": 1024, "n_batches": 200, "seed": 0, "update_rate": 0},
    "replay": {
        "warmup_batches": 0,
        "workers": 1,
        "refresh_every": 0,
        "refresh": {"mode": "ExplicitOnly", "period": 1.0},
    },
    "server": {"host": "127.0.0.1", "port": 7411},
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as JSON when possible."""
    path, sep, raw = assignment.partition("=")
    if not sep:
        raise ValueError(f"override {assignment!r} must look like key.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = path.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text(encoding="utf-8")))
    for o in overrides:
        apply_override(cfg, o)
    return cfg


def table_meta(cfg: dict) -> TableMeta:
    t = cfg["table"]
    return TableMeta(t["name"], int(t["dim"]), t.get("dtype", "F32"))


def cache_config(cfg: dict) -> CacheConfig:
    return CacheConfig(**cfg["cache"])


def vdb_config(cfg: dict) -> VdbConfig:
    return VdbConfig(**cfg["vdb"])


def pdb_config(cfg: dict) -> PdbConfig:
    return PdbConfig(**cfg["pdb"])


def workload_spec(cfg: dict) -> WorkloadSpec:
    return WorkloadSpec(**cfg["workload"])


def refresh_config(cfg: dict) -> RefreshConfig:
    return RefreshConfig(**cfg["replay"]["refresh"])
