"""Metrics and machine-readable outputs for one simulation run."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .scheduler import SimResult, ideal_pipeline_time, stage_durations


@dataclass
class StageStats:
    stage: int
    ops: list[str]
    tiles: list[list[int]]
    fd_time: float = 0.0                # mean per-microbatch forward, s
    bd_time: float = 0.0                # mean per-microbatch backward, s
    gu_time: float = 0.0
    busy_time: float = 0.0
    idle_time: float = 0.0
    peak_activation_bytes: int = 0
    peak_in_flight: int = 0
    resident_bytes: int = 0
    strategy: str = ""
    recompute: bool = False


@dataclass
class SimReport:
    name: str = ""
    mode: str = "training"
    schedule: str = ""
    batch: int = 0
    microbatch: int = 0
    num_microbatches: int = 0
    total_time: float = 0.0
    throughput: float = 0.0
    ideal_time: float = 0.0
    bubble_ratio: float = 0.0
    noc_occupancy: float = 0.0
    mean_link_utilization: float = 0.0
    peak_live_processes: int = 0
    events: int = 0
    trace_hash: str = ""
    per_stage: list[StageStats] = field(default_factory=list)
    link_utilization: dict[str, float] = field(default_factory=dict)
    channel_utilization: dict[str, float] = field(default_factory=dict)
    timeline: list[dict[str, Any]] = field(default_factory=list)

    # -- serialization --------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimReport":
        data = dict(data)
        data["per_stage"] = [StageStats(**s) for s in data.get("per_stage", [])]
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimReport":
        return cls.from_dict(json.loads(text))

    def links_csv(self) -> str:
        return _csv(["link", "utilization"], sorted(self.link_utilization.items()))

    def channels_csv(self) -> str:
        return _csv(["channel", "utilization"], sorted(self.channel_utilization.items(), key=lambda kv: int(kv[0])))

    def stages_csv(self) -> str:
        cols = [f.name for f in fields(StageStats)]
        rows = []
        for s in self.per_stage:
            d = asdict(s)
            d["ops"] = " ".join(d["ops"])
            d["tiles"] = " ".join(f"{x},{y}" for x, y in d["tiles"])
            rows.append([d[c] for c in cols])
        return _csv(cols, rows)

    def timeline_csv(self) -> str:
        cols = ["stage", "phase", "microbatch", "start", "end"]
        return _csv(cols, [[iv[c] for c in cols] for iv in self.timeline])


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def build_report(result: SimResult, name: str = "", timeline: bool = False) -> SimReport:
    """Summarize a finished run; every metric comes from recorded intervals or resource counters."""
    total_ns = result.total_ns
    total = total_ns / 1e9
    S = len(result.stages)
    busy = [0] * S
    gu = [0] * S
    for iv in result.intervals:
        busy[iv.stage] += iv.end - iv.start
        if iv.phase == "GU":
            gu[iv.stage] += iv.end - iv.start
    fd, bd, gu_max = stage_durations(result)
    per_stage = []
    for rt in result.stages:
        s = rt.stage_id
        per_stage.append(StageStats(
            stage=s,
            ops=list(rt.binding.op_ids),
            tiles=[list(t) for t in rt.binding.tile_group],
            fd_time=fd[s] / 1e9,
            bd_time=bd[s] / 1e9,
            gu_time=gu[s] / 1e9,
            busy_time=busy[s] / 1e9,
            idle_time=(total_ns - busy[s]) / 1e9,
            peak_activation_bytes=rt.ledger.peak_activation_bytes,
            peak_in_flight=result.peak_in_flight[s],
            resident_bytes=rt.ledger.resident_wsg_bytes,
            strategy=rt.ledger.strategy.value,
            recompute=rt.ledger.recompute_enabled,
        ))
    resources = result.sim.resources
    links = {}
    for link in result.topo.all_links():
        res = resources.get(link.link_id)
        links[link.link_id] = (res.busy_ns / total_ns) if (res and total_ns) else 0.0
    channels = {}
    for ch in range(len(result.topo.hw.dram_channel_placement)):
        res = resources.get(f"dram{ch}")
        channels[str(ch)] = (res.busy_ns / total_ns) if (res and total_ns) else 0.0
    occupancy = sum(resources[l].busy_ns for l in links if l in resources) / 1e9
    training = result.mode.value == "training"
    ideal = ideal_pipeline_time(fd, bd, gu_max, result.num_microbatches) / 1e9 if training else 0.0
    return SimReport(
        name=name,
        mode=result.mode.value,
        schedule=result.schedule.value,
        batch=result.batch,
        microbatch=result.microbatch,
        num_microbatches=result.num_microbatches,
        total_time=total,
        throughput=result.throughput if math.isfinite(result.throughput) else 0.0,
        ideal_time=ideal,
        bubble_ratio=(1 - sum(busy) / (S * total_ns)) if total_ns else 0.0,
        noc_occupancy=occupancy,
        mean_link_utilization=(sum(links.values()) / len(links)) if links else 0.0,
        peak_live_processes=result.sim.peak_live,
        events=result.sim.events_processed,
        trace_hash=result.trace_hash,
        per_stage=per_stage,
        link_utilization=links,
        channel_utilization=channels,
        timeline=[
            {"stage": iv.stage, "phase": iv.phase, "microbatch": iv.microbatch,
             "start": iv.start / 1e9, "end": iv.end / 1e9}
            for iv in result.intervals
        ] if timeline else [],
    )


def peak_in_flight_from_intervals(intervals, stage: int) -> int:
    """Largest number of microbatches a stage has forwarded but not yet back-propagated."""
    events = []
    for iv in intervals:
        if iv.stage != stage:
            continue
        if iv.phase == "FD":
            events.append((iv.end, 1))
        elif iv.phase == "BD":
            events.append((iv.end, -1))
    events.sort(key=lambda e: (e[0], e[1]))
    live = peak = 0
    for _, d in events:
        live += d
        peak = max(peak, live)
    return peak
