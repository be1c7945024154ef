"""Command line entry point: ``hps gen|load|replay|plan|report|serve``."""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from ..persistent_store import load_snapshot_dir
from ..placement import (
    DeviceSpec,
    FrequencyTable,
    SlotSpec,
    estimate_comm,
    plan_distributed,
    plan_hybrid,
    plan_localized,
)
from ..service import Client, serve
from ..stack import ParameterServer
from . import config as C
from .replay import LocalBackend, RemoteBackend, replay
from .report import MetricsReport, report_render
from .workload import ZipfSampler, bulk_load, read_trace, write_trace


def _open_stack(cfg) -> ParameterServer:
    stack = ParameterServer(Path(cfg["root"]), C.pdb_config(cfg), max_callers=int(cfg["replay"]["workers"]))
    stack.create_table(C.table_meta(cfg), C.cache_config(cfg), C.vdb_config(cfg))
    return stack


def cmd_gen(cfg, args) -> int:
    spec = C.workload_spec(cfg)
    n = write_trace(args.out, spec)
    print(f"wrote {n} keys to {args.out}")
    return 0


def cmd_load(cfg, args) -> int:
    with ParameterServer(Path(cfg["root"]), C.pdb_config(cfg)) as stack:
        if args.snapshot:
            for table, n in load_snapshot_dir(stack.pdb, args.snapshot).items():
                print(f"{table}: loaded {n} entries")
        else:
            spec = C.workload_spec(cfg)
            n = bulk_load(C.table_meta(cfg), spec.n_keys, spec.seed, stack.pdb)
            print(f"{cfg['table']['name']}: loaded {n} entries")
    return 0


def cmd_replay(cfg, args) -> int:
    spec = C.workload_spec(cfg)
    rp = cfg["replay"]
    meta = C.table_meta(cfg)
    keys = None
    if args.trace:
        header, keys = read_trace(args.trace)
        spec = C.WorkloadSpec(
            header["n_keys"], spec.zipf_s, header["batch_size"], header["n_batches"] - rp["warmup_batches"],
            header["seed"], spec.update_rate,
        )
    kwargs = dict(
        keys=keys,
        warmup_batches=int(rp["warmup_batches"]),
        workers=int(rp["workers"]),
        refresh=C.refresh_config(cfg),
        refresh_every=int(rp["refresh_every"]),
    )
    if args.remote:
        host, _, port = args.remote.rpartition(":")
        with Client(host or "127.0.0.1", int(port)) as client:
            report = replay(spec, RemoteBackend(client, meta), meta.table, meta.dim, **kwargs)
    else:
        with _open_stack(cfg) as stack:
            if stack.pdb.count(meta.table) == 0:
                bulk_load(meta, spec.n_keys, spec.seed, stack.pdb)
            report = replay(spec, LocalBackend(stack), meta.table, meta.dim, **kwargs)
    print(report_render(report, args.out))
    return 0


def _frequency(pcfg, slots) -> dict:
    fcfg = pcfg.get("frequency", {})
    out = {}
    for s in slots:
        if "file" in fcfg:
            counts = {}
            for line in Path(fcfg["file"]).read_text().split("\n"):
                if line.strip() and not line.startswith("#"):
                    k, c = line.split()[:2]
                    counts[int(k)] = float(c)
            out[s.table] = FrequencyTable(counts, float(fcfg.get("residual", 0.0)))
        else:
            sampler = ZipfSampler(s.vocab_size, float(fcfg.get("zipf_s", 1.0)), int(fcfg.get("seed", 0)))
            p = sampler.probability_of_key()
            out[s.table] = FrequencyTable({k: float(v) for k, v in enumerate(p)})
    return out


def cmd_plan(cfg, args) -> int:
    pcfg = cfg.get("placement")
    if not pcfg:
        print("config has no 'placement' section", file=sys.stderr)
        return 2
    slots = [SlotSpec(**s) for s in pcfg["slots"]]
    dev = pcfg["devices"]
    if isinstance(dev, dict):
        devices = [DeviceSpec(i, int(dev["memory_budget"])) for i in range(int(dev["count"]))]
    else:
        devices = [DeviceSpec(**d) for d in dev]
    strategies = pcfg.get("strategy", "all")
    strategies = ["localized", "distributed", "hybrid"] if strategies == "all" else [strategies]
    batch = int(pcfg.get("batch_size", 1024))
    doc = {}
    for name in strategies:
        freq = None
        if name == "localized":
            plan = plan_localized(slots, devices)
        elif name == "distributed":
            plan = plan_distributed(slots, devices)
        else:
            freq = _frequency(pcfg, slots)
            plan = plan_hybrid(slots, devices, freq, int(pcfg.get("hot_budget_per_device", 0)))
        est = estimate_comm(plan, batch, slots, freq)
        print(plan.render())
        print(f"all-to-all bytes/iteration: fwd {est.bytes_all_to_all_fwd:.1f}, bwd {est.bytes_all_to_all_bwd:.1f}\n")
        doc[name] = {"plan": plan.to_dict(), "comm": {"fwd": est.bytes_all_to_all_fwd, "bwd": est.bytes_all_to_all_bwd}}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return 0


def cmd_report(cfg, args) -> int:
    print(report_render(MetricsReport.load(args.metrics)))
    return 0


def cmd_serve(cfg, args) -> int:
    with _open_stack(cfg) as stack:
        loop_cfg = C.refresh_config(cfg)
        stack.start_refresh_loop(loop_cfg)
        host, port = cfg["server"]["host"], int(cfg["server"]["port"])
        print(f"serving {stack.tables()} on {host}:{port}")
        try:
            asyncio.run(serve(stack, host, port))
        except KeyboardInterrupt:
            pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hps", description="hierarchical embedding parameter server harness")
    p.add_argument("-c", "--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value (dotted path)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a Zipf trace file")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen)

    ld = sub.add_parser("load", help="bulk load the PDB")
    ld.add_argument("--snapshot", help="directory of per-table UpdateBatch files (seq 0)")
    ld.set_defaults(func=cmd_load)

    r = sub.add_parser("replay", help="replay a workload and report metrics")
    r.add_argument("--trace", help="trace file from `gen` (default: generate from config)")
    r.add_argument("--remote", metavar="HOST:PORT", help="replay against a running server")
    r.add_argument("-o", "--out", help="write metrics JSON here")
    r.set_defaults(func=cmd_replay)

    pl = sub.add_parser("plan", help="compute embedding placement plans")
    pl.add_argument("-o", "--out", help="write plans as JSON")
    pl.set_defaults(func=cmd_plan)

    rep = sub.add_parser("report", help="render a saved metrics file")
    rep.add_argument("metrics")
    rep.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", help="run the binary protocol server")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = C.load_config(args.config, args.set)
    return args.func(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
