"""Replay metrics: per-level hits, latency percentiles, throughput."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

LEVELS = ("L1", "L2", "L3", "Default")


@dataclass
class MetricsReport:
    keys_served: int = 0
    batches: int = 0
    level_hits: dict = field(default_factory=lambda: dict.fromkeys(LEVELS, 0))
    latency_us: dict = field(default_factory=lambda: {"p50": 0.0, "p95": 0.0, "p99": 0.0})
    throughput_keys_per_s: float = 0.0
    elapsed_s: float = 0.0
    refresh_replacements: int = 0
    migration_drops: int = 0
    updates_published: int = 0

    @property
    def level_rates(self) -> dict:
        if not self.keys_served:
            return dict.fromkeys(LEVELS, 0.0)
        return {lvl: self.level_hits[lvl] / self.keys_served for lvl in LEVELS}

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["level_rates"] = self.level_rates
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        doc = dict(doc)
        doc.pop("level_rates", None)
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def report_render(report: MetricsReport, path=None) -> str:
    """Text table for humans; also writes the JSON form to ``path`` when given."""
    rates = report.level_rates
    lines = [
        f"{'level':<10}{'hits':>14}{'rate':>10}",
        "-" * 34,
    ]
    for lvl in LEVELS:
        lines.append(f"{lvl:<10}{report.level_hits[lvl]:>14d}{rates[lvl]:>10.4f}")
    lines += [
        "-" * 34,
        f"{'total':<10}{report.keys_served:>14d}",
        "",
        f"batches                {report.batches}",
        f"latency p50 (us/key)   {report.latency_us['p50']:.4f}",
        f"latency p95 (us/key)   {report.latency_us['p95']:.4f}",
        f"latency p99 (us/key)   {report.latency_us['p99']:.4f}",
        f"throughput (keys/s)    {report.throughput_keys_per_s:.4f}",
        f"refresh replacements   {report.refresh_replacements}",
        f"migration drops        {report.migration_drops}",
        f"updates published      {report.updates_published}",
    ]
    if path is not None:
        report.save(path)
    return "\n".join(lines)
