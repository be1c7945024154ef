from .replay import LocalBackend, RemoteBackend, replay
from .report import MetricsReport, report_render
from .workload import WorkloadSpec, ZipfSampler, bulk_load, gen_zipf, read_trace, top_mass, write_trace, zipf_probabilities

__all__ = [
    "LocalBackend",
    "MetricsReport",
    "RemoteBackend",
    "WorkloadSpec",
    "ZipfSampler",
    "bulk_load",
    "gen_zipf",
    "read_trace",
    "replay",
    "report_render",
    "top_mass",
    "write_trace",
    "zipf_probabilities",
]
