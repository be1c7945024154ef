"""Embedding placement over abstract devices and a per-iteration all-to-all volume model.

Three strategies:

* localized slot: every slot lives whole on one device (greedy LPT by bytes)
* distributed slot: each key goes to ``key_hash(key) % G``
* hybrid sparse: the most frequent keys are replicated on every device, the
  rest are sharded as in the distributed plan
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import HPSError, InvariantError, key_hash, key_hash_array

FLOAT_BYTES = 4
IMBALANCE_ALLOWANCE = 0.05
REPLICATED = -1


class InfeasiblePlacementError(HPSError):
    pass


class Strategy(enum.Enum):
    LOCALIZED_SLOT = "LocalizedSlot"
    DISTRIBUTED_SLOT = "DistributedSlot"
    HYBRID_SPARSE = "HybridSparse"


@dataclass(frozen=True)
class SlotSpec:
    slot: int
    table: str
    vocab_size: int
    dim: int
    hotness: int = 1

    def __post_init__(self):
        if self.vocab_size < 1 or self.hotness < 1 or self.dim < 1:
            raise InvariantError(f"slot {self.slot}: vocab_size, dim and hotness must be >= 1")

    @property
    def bytes_per_key(self) -> int:
        return self.dim * FLOAT_BYTES

    @property
    def nbytes(self) -> int:
        return self.vocab_size * self.bytes_per_key


@dataclass(frozen=True)
class DeviceSpec:
    device: int
    memory_budget: int

    def __post_init__(self):
        if self.memory_budget <= 0:
            raise InvariantError(f"device {self.device}: budget must be positive")


@dataclass
class FrequencyTable:
    """Access counts for listed keys plus the mass of everything unlisted."""

    counts: dict[int, float]
    residual: float = 0.0

    def __post_init__(self):
        if self.residual < 0 or any(c < 0 for c in self.counts.values()):
            raise InvariantError("frequency counts must be non-negative")

    @property
    def total(self) -> float:
        return float(sum(self.counts.values())) + self.residual

    def ranked(self) -> list[int]:
        """Keys by count descending, ties by ascending key id."""
        return sorted(self.counts, key=lambda k: (-self.counts[k], k))


@dataclass
class PlacementPlan:
    strategy: Strategy
    num_devices: int
    slot_device: dict[int, int] = field(default_factory=dict)
    hot_keys: dict[str, list[int]] = field(default_factory=dict)
    device_memory: list[int] = field(default_factory=list)

    def device_of(self, table: str, key: int, slot: int | None = None) -> int:
        """Owning device of a key; ``REPLICATED`` for hybrid hot keys."""
        if self.strategy is Strategy.LOCALIZED_SLOT:
            if slot is None:
                raise InvariantError("localized plans resolve by slot")
            return self.slot_device[slot]
        if self.strategy is Strategy.HYBRID_SPARSE and key in self._hot(table):
            return REPLICATED
        return key_hash(key) % self.num_devices

    def assign(self, table: str, keys) -> np.ndarray:
        """Vectorized :meth:`device_of` for non-localized plans."""
        keys = np.asarray(keys, dtype=np.uint64)
        out = (key_hash_array(keys) % np.uint64(self.num_devices)).astype(np.int64)
        if self.strategy is Strategy.HYBRID_SPARSE:
            hot = self.hot_keys.get(table, [])
            if hot:
                out[np.isin(keys, np.asarray(hot, dtype=np.uint64))] = REPLICATED
        return out

    def _hot(self, table: str) -> set:
        cache = self.__dict__.setdefault("_hot_sets", {})
        if table not in cache:
            cache[table] = set(self.hot_keys.get(table, ()))
        return cache[table]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "num_devices": self.num_devices,
            "slot_device": {str(k): v for k, v in sorted(self.slot_device.items())},
            "hot_keys": {t: list(ks) for t, ks in sorted(self.hot_keys.items())},
            "device_memory": list(self.device_memory),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PlacementPlan":
        return cls(
            Strategy(doc["strategy"]),
            int(doc["num_devices"]),
            {int(k): int(v) for k, v in doc.get("slot_device", {}).items()},
            {t: [int(k) for k in ks] for t, ks in doc.get("hot_keys", {}).items()},
            [int(m) for m in doc.get("device_memory", [])],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def __eq__(self, other):
        if not isinstance(other, PlacementPlan):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def render(self) -> str:
        lines = [f"strategy: {self.strategy.value}", f"devices:  {self.num_devices}"]
        if self.slot_device:
            lines.append("slot -> device:")
            lines += [f"  slot {s:>4} -> device {d}" for s, d in sorted(self.slot_device.items())]
        if self.strategy is not Strategy.LOCALIZED_SLOT:
            lines.append(f"cold shard rule: fnv1a64(key) mod {self.num_devices}")
        for table, keys in sorted(self.hot_keys.items()):
            lines.append(f"hot keys [{table}]: {len(keys)} replicated")
        if self.device_memory:
            lines.append("memory per device (bytes):")
            lines += [f"  device {i}: {m}" for i, m in enumerate(self.device_memory)]
        return "\n".join(lines)


@dataclass(frozen=True)
class CommEstimate:
    bytes_all_to_all_fwd: float
    bytes_all_to_all_bwd: float
    device_memory: tuple[int, ...]


def _check_devices(devices: Sequence[DeviceSpec]) -> None:
    if not devices:
        raise InvariantError("at least one device required")


def plan_localized(slots: Sequence[SlotSpec], devices: Sequence[DeviceSpec]) -> PlacementPlan:
    _check_devices(devices)
    remaining = [d.memory_budget for d in devices]
    used = [0] * len(devices)
    assignment = {}
    for slot in sorted(slots, key=lambda s: (-s.nbytes, s.slot)):
        best = max(range(len(devices)), key=lambda i: (remaining[i], -i))
        if slot.nbytes > remaining[best]:
            raise InfeasiblePlacementError(
                f"slot {slot.slot} ({slot.table}, {slot.nbytes} bytes) does not fit on any device"
            )
        remaining[best] -= slot.nbytes
        used[best] += slot.nbytes
        assignment[slot.slot] = devices[best].device
    return PlacementPlan(Strategy.LOCALIZED_SLOT, len(devices), assignment, {}, used)


def _cold_capacity_check(cold_bytes: int, devices: Sequence[DeviceSpec], reserved: int) -> None:
    g = len(devices)
    room = min(d.memory_budget for d in devices) - reserved
    if cold_bytes / g > room * (1 + IMBALANCE_ALLOWANCE):
        raise InfeasiblePlacementError(
            f"sharded share {cold_bytes / g:.0f} bytes/device exceeds capacity {room} (+{IMBALANCE_ALLOWANCE:.0%})"
        )


def plan_distributed(slots: Sequence[SlotSpec], devices: Sequence[DeviceSpec]) -> PlacementPlan:
    _check_devices(devices)
    total = sum(s.nbytes for s in slots)
    _cold_capacity_check(total, devices, 0)
    g = len(devices)
    return PlacementPlan(Strategy.DISTRIBUTED_SLOT, g, {}, {}, [int(round(total / g))] * g)


def _freq_for(freq, table: str) -> FrequencyTable | None:
    if isinstance(freq, FrequencyTable):
        return freq
    return freq.get(table)


def plan_hybrid(
    slots: Sequence[SlotSpec],
    devices: Sequence[DeviceSpec],
    freq: FrequencyTable | Mapping[str, FrequencyTable],
    hot_budget_per_device: int,
) -> PlacementPlan:
    """Replicate the hottest keys within ``hot_budget_per_device`` bytes; shard the rest.

    Candidates are ranked by (count desc, table, key asc) across all slots and
    taken in order until the next one no longer fits, so the hot set is always
    a prefix of that ranking.
    """
    _check_devices(devices)
    by_table = {}
    for s in slots:
        f = _freq_for(freq, s.table)
        if f is None:
            raise InvariantError(f"no frequency data for table {s.table!r}")
        by_table[s.table] = (s, f)
    candidates = []
    for table, (s, f) in by_table.items():
        for k in f.counts:
            if k < s.vocab_size:
                candidates.append((-f.counts[k], table, k, s.bytes_per_key))
    candidates.sort()
    hot: dict[str, list[int]] = {}
    used = 0
    for _, table, k, nbytes in candidates:
        if used + nbytes > hot_budget_per_device:
            break
        used += nbytes
        hot.setdefault(table, []).append(k)
    cold = sum(s.nbytes for s in slots) - used
    _cold_capacity_check(cold, devices, used)
    g = len(devices)
    return PlacementPlan(Strategy.HYBRID_SPARSE, g, {}, hot, [used + int(round(cold / g))] * g)


def cold_fraction(plan: PlacementPlan, slot: SlotSpec, freq: FrequencyTable) -> float:
    total = freq.total
    if total == 0:
        return 1.0
    hot_mass = sum(freq.counts.get(k, 0) for k in plan.hot_keys.get(slot.table, ()))
    return max(0.0, (total - hot_mass) / total)


def estimate_comm(
    plan: PlacementPlan,
    batch_size: int,
    slots: Sequence[SlotSpec],
    freq: FrequencyTable | Mapping[str, FrequencyTable] | None = None,
) -> CommEstimate:
    """All-to-all bytes per iteration so every device ends with the full batch's outputs.

    Localized / distributed: B * sum(dim) * 4 * (G-1)/G.
    Hybrid: only cold lookups travel, B * sum(hotness * p_cold * dim) * 4 * (G-1)/G.
    Backward traffic mirrors forward.
    """
    g = plan.num_devices
    share = (g - 1) / g
    if plan.strategy is Strategy.HYBRID_SPARSE:
        if freq is None:
            raise InvariantError("hybrid estimate needs frequency data")
        per_sample = 0.0
        for s in slots:
            f = _freq_for(freq, s.table)
            if f is None:
                raise InvariantError(f"no frequency data for table {s.table!r}")
            per_sample += s.hotness * cold_fraction(plan, s, f) * s.dim * FLOAT_BYTES
    else:
        per_sample = float(sum(s.dim * FLOAT_BYTES for s in slots))
    fwd = batch_size * per_sample * share
    return CommEstimate(fwd, fwd, tuple(plan.device_memory))
