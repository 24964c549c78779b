import csv
import io
import json

import pytest

from conftest import linear_chain
from tilesim.architecture import HardwareConfig, Topology
from tilesim.engine import to_ns
from tilesim.network import analytical_transfer_time
from tilesim.parallelism import ParallelismPlan, Placement, Schedule
from tilesim.report import SimReport, build_report
from tilesim.scheduler import SimOptions, run_training
from tilesim.workload import ComputationGraph, OperatorSpec, OpKind

QUIET = SimOptions(include_comm=False, include_dram=False)


def uniform_pipeline(S, m, schedule):
    # a zero-cost output operator keeps the loss step free, so every stage is identical
    ops = [OperatorSpec(f"l{i}", OpKind.LINEAR, (1, 64, 64, 64)) for i in range(S)]
    ops.append(OperatorSpec("out", OpKind.LINEAR, (1, 1, 1, 1)))
    ids = [o.id for o in ops]
    g = ComputationGraph(ops, list(zip(ids, ids[1:])))
    stages = [{"ops": [f"l{i}"]} for i in range(S - 1)] + [{"ops": [f"l{S - 1}", "out"]}]
    plan = ParallelismPlan(schedule=schedule, stages=stages, placement=Placement.S_SHAPE)
    hw = HardwareConfig(tiles_x=S, tiles_y=1, compute_per_tile=1e12)
    return run_training(g, plan, hw, m, 1, SimOptions(include_comm=False, include_dram=False))


def test_gpipe_bubble_ratio():
    r = build_report(uniform_pipeline(4, 4, Schedule.GPIPE))
    assert r.bubble_ratio == pytest.approx(6 / 14, abs=1e-12)


@pytest.mark.parametrize("S,m", [(2, 3), (3, 8), (4, 4)])
def test_bubble_ratio_closed_form(S, m):
    for schedule in Schedule:
        r = build_report(uniform_pipeline(S, m, schedule))
        assert r.bubble_ratio == pytest.approx((S - 1) / (m + S - 1), abs=1e-12)


def test_accounting_and_throughput():
    g = linear_chain(4, (4, 128, 16, 128))
    plan = ParallelismPlan(num_stages=4, placement=Placement.S_SHAPE)
    r = build_report(run_training(g, plan, HardwareConfig(tiles_x=2, tiles_y=2), 8, 2))
    for s in r.per_stage:
        assert s.busy_time + s.idle_time == pytest.approx(r.total_time, rel=1e-12)
    assert r.throughput * r.total_time == pytest.approx(8, rel=1e-12)
    for u in list(r.link_utilization.values()) + list(r.channel_utilization.values()):
        assert 0 <= u <= 1


def test_link_utilization_from_pass_count():
    g = linear_chain(2, (1, 64, 64, 64))
    plan = ParallelismPlan(num_stages=2, placement=Placement.S_SHAPE)
    hw = HardwareConfig(tiles_x=2, tiles_y=1, compute_per_tile=1e9)
    opts = SimOptions(include_dram=False)
    res = run_training(g, plan, hw, 3, 1, opts)
    r = build_report(res)
    topo = Topology(hw)
    size = 1 * 64 * 64 * 2
    one = to_ns(analytical_transfer_time(size, topo.route(*res.stages[0].nodes, *res.stages[1].nodes), hw))
    assert r.link_utilization["t0,0>1,0"] == 3 * one / res.total_ns
    assert r.link_utilization["t1,0>0,0"] == 3 * one / res.total_ns
    assert r.noc_occupancy == pytest.approx(6 * one / 1e9)
    assert all(u == 0 for k, u in r.channel_utilization.items())


def test_idle_run_has_zero_utilization():
    r = build_report(uniform_pipeline(2, 2, Schedule.ONE_F_ONE_B))
    assert set(r.link_utilization.values()) == {0.0}
    assert r.noc_occupancy == 0


def test_json_round_trip_is_byte_identical():
    r = build_report(uniform_pipeline(3, 4, Schedule.ONE_F_ONE_B), "u", timeline=True)
    text = r.to_json()
    assert SimReport.from_json(text).to_json() == text
    assert list(json.loads(text))[:3] == ["name", "mode", "schedule"]


def test_empty_report_serializes():
    text = SimReport().to_json()
    data = json.loads(text)
    assert data["total_time"] == 0 and data["per_stage"] == []
    assert SimReport.from_json(text) == SimReport()
    assert SimReport().links_csv() == "link,utilization\n"


def test_csv_tables():
    hw = HardwareConfig(tiles_x=3, tiles_y=2)
    g = linear_chain(3, (1, 64, 64, 64))
    res = run_training(g, ParallelismPlan(num_stages=3), hw, 2, 1)
    r = build_report(res, timeline=True)
    rows = list(csv.reader(io.StringIO(r.links_csv())))
    assert rows[0] == ["link", "utilization"]
    assert len(rows) - 1 == len(Topology(hw).all_links())
    stages = list(csv.DictReader(io.StringIO(r.stages_csv())))
    assert [int(s["stage"]) for s in stages] == [0, 1, 2]
    timeline = list(csv.DictReader(io.StringIO(r.timeline_csv())))
    assert len(timeline) == len(res.intervals)
    channels = list(csv.reader(io.StringIO(r.channels_csv())))
    assert len(channels) - 1 == len(hw.dram_channel_placement)


def test_ideal_time_reported_for_training():
    r = build_report(uniform_pipeline(4, 4, Schedule.GPIPE))
    assert r.ideal_time == pytest.approx(r.total_time, abs=1e-9)
