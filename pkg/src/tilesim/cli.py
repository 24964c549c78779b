"""Command-line entry point: ``tilesim run | validate | compare``."""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Optional

from .architecture import HardwareConfig, Topology, load_hardware
from .engine import DeadlockError
from .errors import CapacityError, ConfigError
from .memory import recompute_needed
from .network import NetworkMode
from .parallelism import CommLayout, ParallelismPlan, Placement, Schedule, load_plan
from .report import SimReport, build_report
from .scheduler import SimOptions, ideal_pipeline_time, prepare_stages, simulate, stage_durations
from .workload import ComputationGraph, Mode, Optimizer, load_workload

OUTPUT_ENV = "TILESIM_OUTPUT_DIR"
EXIT_CONFIG = 2
EXIT_DEADLOCK = 3


def builtin_config(kind: str, name: str) -> Optional[Path]:
    """Path of a shipped config (``kind`` is hardware, workloads or plans) or None."""
    base = resources.files("tilesim") / "configs" / kind
    for candidate in (name, f"{name}.yaml"):
        p = base / candidate
        if p.is_file():
            return Path(str(p))
    return None


def _resolve(kind: str, value: str) -> Path:
    p = Path(value)
    if p.exists():
        return p
    found = builtin_config(kind, value)
    if found is None:
        raise ConfigError(f"{value}: no such file and no built-in {kind} config of that name")
    return found


def _apply_overrides(plan: ParallelismPlan, args: argparse.Namespace) -> ParallelismPlan:
    changes = {}
    if args.schedule:
        changes["schedule"] = Schedule(args.schedule)
    if args.placement:
        changes["placement"] = Placement(args.placement)
    if args.comm_layout:
        changes["comm_layout"] = CommLayout(args.comm_layout)
    if args.inter_group_strategy:
        changes["inter_group_strategy"] = args.inter_group_strategy
    if args.literal_sram_order:
        changes["literal_sram_order"] = True
    if args.zero is not None:
        changes["zero"] = args.zero
    if args.optimizer:
        changes["optimizer"] = Optimizer(args.optimizer)
    return replace(plan, **changes) if changes else plan


def _load_inputs(args):
    graph = load_workload(_resolve("workloads", args.workload))
    hw = load_hardware(_resolve("hardware", args.hardware))
    plans = []
    for p in args.plan:
        path = _resolve("plans", p)
        plan = _apply_overrides(load_plan(path), args)
        plan.name = path.stem
        plans.append((plan, str(path)))
    return graph, hw, plans


def _check_batch(args) -> None:
    if args.batch < 1 or args.microbatch < 1:
        raise ConfigError("--batch and --microbatch must be >= 1")
    if args.mode == "train" and args.batch % args.microbatch:
        raise ConfigError(f"--microbatch {args.microbatch} does not divide --batch {args.batch}")


def _options(args, network_mode: NetworkMode = NetworkMode.CONTENTION) -> SimOptions:
    return SimOptions(
        mode=Mode.TRAINING if args.mode == "train" else Mode.INFERENCE,
        network_mode=network_mode,
        include_comm=not args.no_comm,
        include_dram=not args.no_dram,
        keep_trace=bool(getattr(args, "trace", False)),
        stream_length=args.stream_length,
    )


def _run_one(graph: ComputationGraph, hw: HardwareConfig, plan: ParallelismPlan, source: str, args,
             network_mode: NetworkMode = NetworkMode.CONTENTION):
    batch = args.batch if args.mode == "train" else args.microbatch
    result = simulate(graph, plan, hw, batch, args.microbatch, _options(args, network_mode), source)
    return result, build_report(result, plan.name, timeline=getattr(args, "timeline", False))


def _write_report(out: Path, report: SimReport, result=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "links.csv").write_text(report.links_csv())
    (out / "channels.csv").write_text(report.channels_csv())
    (out / "stages.csv").write_text(report.stages_csv())
    if report.timeline:
        (out / "timeline.csv").write_text(report.timeline_csv())
    if result is not None and result.sim.keep_trace:
        (out / "trace.ndjson").write_text(result.sim.export_trace())


def _output_dir(args) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or args.output)


def _sweep_worker(payload):
    graph, hw, plan, source, args = payload
    result, report = _run_one(graph, hw, plan, source, args)
    trace = result.sim.export_trace() if result.sim.keep_trace else None
    return report, trace


def cmd_run(args) -> int:
    _check_batch(args)
    graph, hw, plans = _load_inputs(args)
    out = _output_dir(args)
    if len(plans) == 1:
        plan, source = plans[0]
        result, report = _run_one(graph, hw, plan, source, args)
        _write_report(out, report, result)
        print(f"{plan.name}: total {report.total_time:.6g} s, throughput {report.throughput:.6g} samples/s "
              f"-> {out / 'report.json'}")
        return 0
    payloads = [(graph, hw, plan, source, args) for plan, source in plans]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]
    rows = []
    for (plan, _), (report, trace) in zip(plans, results):
        sub = out / plan.name
        _write_report(sub, report)
        if trace is not None:
            (sub / "trace.ndjson").write_text(trace)
        rows.append(report)
    rows.sort(key=lambda r: (-r.throughput, r.name))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "plan", "throughput", "total_time", "bubble_ratio"])
    for n, r in enumerate(rows, 1):
        w.writerow([n, r.name, r.throughput, r.total_time, r.bubble_ratio])
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_validate(args) -> int:
    _check_batch(args)
    graph, hw, plans = _load_inputs(args)
    topo = Topology(hw)
    mode = Mode.TRAINING if args.mode == "train" else Mode.INFERENCE
    m = args.batch // args.microbatch if mode is Mode.TRAINING else 1
    for plan, source in plans:
        stages = prepare_stages(graph, plan, topo, args.microbatch, m, mode, source)
        print(f"{source}: {len(stages)} stage(s), schedule {plan.schedule.value}, {m} microbatch(es)")
        for rt in stages:
            led = rt.ledger
            tiles = " ".join(f"{x},{y}" for x, y in rt.binding.tile_group)
            splits = ", ".join(f"{o.op.id}{list(o.split.degrees)}" for o in rt.ops)
            sram_part, dram_part = led.split_by_residence()
            over = recompute_needed(led, hw.sram_per_core, hw.dram_capacity)
            print(f"  stage {rt.stage_id}: tiles [{tiles}] ops {splits}")
            print(f"    strategy {led.strategy.value}; resident {led.resident_wsg_bytes} B + "
                  f"peak activations {led.peak_activation_bytes} B per core; SRAM-held {sram_part} B of "
                  f"{hw.sram_per_core:.6g} B; {'recompute' if led.recompute_enabled else 'fits' if not over else 'over'}")
    return 0


def cmd_compare(args) -> int:
    _check_batch(args)
    graph, hw, plans = _load_inputs(args)
    out = _output_dir(args)
    rows = []
    for plan, source in plans:
        result, report = _run_one(graph, hw, plan, source, args)
        if args.baseline == "pipeline":
            if args.mode != "train":
                raise ConfigError("the pipeline baseline applies to training runs")
            base, _ = _run_one(graph, hw, plan, source, args, NetworkMode.ANALYTICAL)
            fd, bd, gu = stage_durations(base)
            baseline = ideal_pipeline_time(fd, bd, gu, base.num_microbatches) / 1e9
        else:
            base, base_report = _run_one(graph, hw, plan, source, args, NetworkMode.DEGRADED)
            baseline = base_report.total_time
        ratio = baseline / report.total_time if report.total_time else 1.0
        rows.append([plan.name, report.total_time, baseline, ratio])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["plan", "simulated_time", f"{args.baseline}_time", "baseline_over_simulated"])
    w.writerows(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilesim", description="Performance simulator for tiled accelerators")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--workload", "-w", required=True, help="workload YAML (path or built-in name)")
        p.add_argument("--hardware", "-H", required=True, help="hardware YAML/JSON (path or built-in name)")
        p.add_argument("--plan", "-p", required=True, action="append",
                       help="parallelism plan; repeat to sweep several plans")
        p.add_argument("--mode", choices=["train", "infer"], default="train")
        p.add_argument("--batch", "-B", type=int, default=1)
        p.add_argument("--microbatch", "-b", type=int, default=1)
        p.add_argument("--stream-length", type=int, default=None, help="inference microbatches to stream")
        p.add_argument("--output", "-o", default="tilesim_out", help=f"output directory (env {OUTPUT_ENV} wins)")
        p.add_argument("--schedule", choices=[s.value for s in Schedule])
        p.add_argument("--placement", choices=["line", "s_shape"])
        p.add_argument("--comm-layout", choices=[c.value for c in CommLayout])
        p.add_argument("--inter-group-strategy", choices=["auto", "one", "two"])
        p.add_argument("--literal-sram-order", action="store_true", help="check total weights before weights+state when choosing the SRAM strategy")
        p.add_argument("--zero", dest="zero", action="store_true", default=None)
        p.add_argument("--no-zero", dest="zero", action="store_false")
        p.add_argument("--optimizer", choices=[o.value for o in Optimizer])
        p.add_argument("--no-comm", action="store_true", help="charge nothing for collectives and stage passes")
        p.add_argument("--no-dram", action="store_true", help="charge nothing for DRAM traffic")

    run = sub.add_parser("run", help="simulate one plan or sweep several")
    common(run)
    run.add_argument("--timeline", action="store_true", help="also write timeline.csv")
    run.add_argument("--trace", action="store_true", help="also write trace.ndjson")
    run.add_argument("--jobs", "-j", type=int, default=1, help="parallel simulations for sweeps")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check configs and memory feasibility without simulating")
    common(val)
    val.set_defaults(func=cmd_validate)

    cmp_ = sub.add_parser("compare", help="compare the simulation against an analytical baseline")
    common(cmp_)
    cmp_.add_argument("--baseline", choices=["pipeline", "degraded_noc"], default="pipeline",
                      help="pipeline: closed-form bubble estimate from contention-free stage times; "
                           "degraded_noc: store-and-forward network without contention")
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DeadlockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.processes:
            print(f"blocked processes: {', '.join(exc.processes)}", file=sys.stderr)
        return EXIT_DEADLOCK


if __name__ == "__main__":
    sys.exit(main())
