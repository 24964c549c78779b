import pytest
from hypothesis import given, settings, strategies as st

from conftest import linear_chain
from tilesim.architecture import HardwareConfig, Topology
from tilesim.engine import to_ns
from tilesim.errors import CapacityError, ConfigError
from tilesim.memory import in_flight
from tilesim.parallelism import ParallelismPlan, Phase, Placement, Schedule
from tilesim.report import peak_in_flight_from_intervals
from tilesim.scheduler import (
    SimOptions, ideal_pipeline_time, prepare_stages, prior_select, run_inference, run_training, stage_durations,
)
from tilesim.workload import ComputationGraph, Mode, OperatorSpec, OpKind, flops

DIMS = (1, 64, 64, 64)
HW = HardwareConfig(tiles_x=4, tiles_y=2, compute_per_tile=1e9)
QUIET = dict(include_comm=False, include_dram=False)


def plan(S, schedule=Schedule.ONE_F_ONE_B, **kw):
    return ParallelismPlan(schedule=schedule, num_stages=S, tiles_per_stage=1, placement=Placement.S_SHAPE, **kw)


def fd_ns(dims=DIMS):
    return to_ns(flops(OperatorSpec("x", OpKind.LINEAR, dims)) / HW.compute_per_core)


@pytest.mark.parametrize("schedule,fd,bd,expected", [
    (Schedule.ONE_F_ONE_B, [3], [1], (Phase.BD, 1)),
    (Schedule.GPIPE, [3], [1], (Phase.FD, 3)),
    (Schedule.ONE_F_ONE_B, [2], [], (Phase.FD, 2)),
    (Schedule.GPIPE, [], [0], (Phase.BD, 0)),
    (Schedule.ONE_F_ONE_B, [], [], None),
    (Schedule.ONE_F_ONE_B, [], [4, 2], (Phase.BD, 2)),
])
def test_prior_select(schedule, fd, bd, expected):
    assert prior_select(schedule, fd, bd) == expected


def test_gpipe_holds_backward_until_forwards_finish():
    assert prior_select(Schedule.GPIPE, [], [0], fd_remaining=True) is None


@pytest.mark.parametrize("fd,bd,gu,m,expected", [
    ([1], [1], 5, 3, 3 * 2 + 5),
    ([1, 1, 1], [1, 2, 1], 0, 5, 19),
    ([1, 2], [3, 4], 2, 1, 10 + 2),
])
def test_ideal_pipeline_time(fd, bd, gu, m, expected):
    assert ideal_pipeline_time(fd, bd, gu, m) == expected


def test_ideal_pipeline_needs_a_microbatch():
    with pytest.raises(ValueError):
        ideal_pipeline_time([1], [1], 0, 0)


def test_single_stage_single_microbatch():
    f = fd_ns()
    r = run_training(linear_chain(1, DIMS), plan(1), HW, 1, 1, SimOptions(**QUIET))
    # forward, loss, then a two-forward gradient
    assert r.total_ns == 4 * f


@pytest.mark.parametrize("schedule", list(Schedule))
@pytest.mark.parametrize("S", [1, 2, 3, 4])
@pytest.mark.parametrize("m", [1, 2, 3, 5, 8])
def test_zero_cost_pipeline_matches_closed_form(schedule, S, m):
    f = fd_ns()
    r = run_training(linear_chain(S, DIMS), plan(S, schedule), HW, m, 1, SimOptions(**QUIET))
    fd = [f] * S
    bd = [2 * f] * S
    bd[-1] += f  # loss on the final stage
    assert r.total_ns == ideal_pipeline_time(fd, bd, 0, m)
    mfd, mbd, gu = stage_durations(r)
    assert (mfd, mbd, gu) == (fd, bd, 0)


def _check_dependencies(r):
    S, m = len(r.stages), r.num_microbatches
    iv = {(x.stage, x.phase, x.microbatch): x for x in r.intervals}
    for i in range(m):
        for s in range(S - 1):
            assert iv[(s, "FD", i)].end <= iv[(s + 1, "FD", i)].start
            assert iv[(s + 1, "BD", i)].end <= iv[(s, "BD", i)].start
        for s in range(S):
            assert iv[(s, "FD", i)].end <= iv[(s, "BD", i)].start
    for s in range(S):
        assert iv[(s, "GU", -1)].start >= iv[(s, "BD", m - 1)].end


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.sampled_from(list(Schedule)), st.booleans())
def test_dependency_safety_and_in_flight_bound(S, m, schedule, zero):
    g = linear_chain(S + 2, (4, 128, 16, 128))
    hw = HardwareConfig(tiles_x=2, tiles_y=2, cores_x=2, cores_y=1)
    p = plan(S, schedule, zero=zero, default_splits={OpKind.LINEAR: (2, 1, 1, 1)})
    r = run_training(g, p, hw, 2 * m, 2)
    _check_dependencies(r)
    for s in range(S):
        assert r.peak_in_flight[s] == peak_in_flight_from_intervals(r.intervals, s)
        assert r.peak_in_flight[s] <= in_flight(schedule, s, S, m)
    fd, bd, gu = stage_durations(r)
    assert r.total_ns >= ideal_pipeline_time(fd, bd, gu, m)


def test_one_f_one_b_stage_zero_peak():
    r = run_training(linear_chain(4, DIMS), plan(4), HW, 8, 1, SimOptions(**QUIET))
    assert r.peak_in_flight == [4, 3, 2, 1]
    r = run_training(linear_chain(4, DIMS), plan(4, Schedule.GPIPE), HW, 8, 1, SimOptions(**QUIET))
    assert r.peak_in_flight == [8, 8, 8, 8]


def test_costs_only_add_time():
    g, p = linear_chain(4, (4, 128, 16, 128)), plan(4, default_splits={OpKind.LINEAR: (2, 1, 1, 1)})
    hw = HardwareConfig(tiles_x=2, tiles_y=2, cores_x=2, cores_y=1)
    quiet = run_training(g, p, hw, 8, 4, SimOptions(**QUIET)).total_ns
    full = run_training(g, p, hw, 8, 4).total_ns
    assert full > quiet


def test_microbatch_must_divide_batch():
    with pytest.raises(ConfigError, match="does not divide"):
        run_training(linear_chain(2, DIMS), plan(2), HW, 5, 2)


def test_single_stage_inference():
    r = run_inference(linear_chain(1, DIMS), plan(1), HW, 1, options=SimOptions(**QUIET))
    assert r.throughput == pytest.approx(1 / (fd_ns() / 1e9))


def test_inference_bottleneck_halves_throughput():
    uniform = linear_chain(4, DIMS)
    ops = list(uniform.operators)
    ops[2] = OperatorSpec("l2", OpKind.LINEAR, (1, 64, 64, 128))
    slow = ComputationGraph(ops, uniform.edges)
    a = run_inference(uniform, plan(4), HW, 1, options=SimOptions(**QUIET))
    b = run_inference(slow, plan(4), HW, 1, options=SimOptions(**QUIET))
    assert a.throughput == pytest.approx(2 * b.throughput)


def test_zero_cost_stages_keep_inference_throughput():
    base = linear_chain(2, DIMS)
    ops = list(base.operators) + [OperatorSpec(f"z{i}", OpKind.LINEAR, (1, 1, 1, 1)) for i in range(2)]
    ids = [o.id for o in ops]
    g = ComputationGraph(ops, list(zip(ids, ids[1:])))
    a = run_inference(base, plan(2), HW, 1, options=SimOptions(**QUIET))
    b = run_inference(g, plan(4), HW, 1, options=SimOptions(**QUIET))
    assert a.throughput == pytest.approx(b.throughput)


def test_inference_stream_too_short():
    with pytest.raises(ConfigError, match="2S\\+1"):
        run_inference(linear_chain(2, DIMS), plan(2), HW, 1, stream_length=4)


def test_transformer_stage_emits_one_request_per_tp_group():
    hw = HardwareConfig(tiles_x=1, tiles_y=1, cores_x=2, cores_y=2)
    g = ComputationGraph([OperatorSpec("t", OpKind.TRANSFORMER, (2, 64, 16, 4))], [])
    p = plan(1, default_splits={OpKind.TRANSFORMER: (2, 2)})
    (rt,) = prepare_stages(g, p, Topology(hw), 2, 1, Mode.TRAINING)
    fd = rt.ops[0].fd_comm
    assert len(fd) == 2 and all(len(r.group) == 2 for r in fd)
    assert {n for r in fd for n in r.group} == set(rt.nodes)
    assert rt.ops[0].fd_ns == to_ns(flops(g["t"]) / 4 / hw.compute_per_core)


def test_storage_overflow_without_recompute_is_an_error():
    # weights spill from SRAM, and the capped DRAM cannot hold them either
    hw = HardwareConfig(tiles_x=2, tiles_y=1, sram_per_tile=1e3, dram_capacity=1e3)
    g = linear_chain(2, DIMS)
    with pytest.raises(CapacityError, match="stage 0"):
        run_training(g, plan(2, recompute="never"), hw, 2, 1)
    r = run_training(g, plan(2), hw, 2, 1)
    assert all(rt.ledger.recompute_enabled for rt in r.stages)


def test_recompute_adds_forward_work():
    g = linear_chain(2, DIMS)
    off = run_training(g, plan(2, recompute="never"), HW, 2, 1, SimOptions(**QUIET)).total_ns
    on = run_training(g, plan(2, recompute="always"), HW, 2, 1, SimOptions(**QUIET)).total_ns
    assert on > off


def test_repeatable():
    g, p = linear_chain(4, (4, 128, 16, 128)), plan(4, default_splits={OpKind.LINEAR: (2, 1, 1, 1)})
    hw = HardwareConfig(tiles_x=2, tiles_y=2, cores_x=2, cores_y=1)
    a = run_training(g, p, hw, 8, 4, SimOptions(keep_trace=True))
    b = run_training(g, p, hw, 8, 4, SimOptions(keep_trace=True))
    assert a.trace_hash == b.trace_hash and a.total_ns == b.total_ns
