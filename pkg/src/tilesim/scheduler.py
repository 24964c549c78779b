"""Pipeline scheduler built on virtual tile aggregation.

Each pipeline stage is one engine process that stands in for its whole tile
group: compute and DRAM traffic are charged once on a representative node,
while collectives and inter-stage passes run on the group's real coordinates.
A single data-fetch process feeds microbatches into stage 0, so the number of
live processes depends on the stage count only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .architecture import HardwareConfig, NodeId, Topology
from .engine import EventKind, Signal, Simulator, to_ns
from .errors import CapacityError, ConfigError
from .memory import (
    AccessPlan,
    OpAccess,
    StageMemoryLedger,
    bd_access_size,
    gu_access_size,
    in_flight,
    recompute_needed,
    sram_allocate,
)
from .network import Network, NetworkMode
from .parallelism import (
    CollectiveRequest,
    ParallelismPlan,
    Phase,
    Schedule,
    StageBinding,
    comm_groups,
    comm_requests,
    layout_comm_groups,
    resolve_stages,
    split_for,
    stage_nodes,
)
from .workload import (
    DATA_PARALLEL_AXES,
    ComputationGraph,
    Mode,
    OperatorSpec,
    OpKind,
    SplitDegrees,
    TensorFootprint,
    flops,
    footprint,
)


@dataclass
class SimOptions:
    mode: Mode = Mode.TRAINING
    include_comm: bool = True
    include_dram: bool = True
    network_mode: NetworkMode = NetworkMode.CONTENTION
    non_ring_allreduce: str = "reduce_broadcast"
    keep_trace: bool = False
    stream_length: Optional[int] = None     # inference microbatches; default 2S+2


@dataclass
class OpRuntime:
    op: OperatorSpec
    split: SplitDegrees
    assignment: dict
    fp: TensorFootprint
    fd_ns: int
    access: OpAccess
    fd_comm: list[CollectiveRequest]
    bd_comm: list[CollectiveRequest]
    gu_comm: list[CollectiveRequest]
    dp_degree: int


@dataclass
class StageRuntime:
    binding: StageBinding
    nodes: list[NodeId]
    rep_node: NodeId
    ops: list[OpRuntime]
    access_plan: AccessPlan
    ledger: StageMemoryLedger
    per_microbatch_act: int

    @property
    def stage_id(self) -> int:
        return self.binding.stage_id


@dataclass
class Interval:
    stage: int
    phase: str          # FD, BD or GU
    microbatch: int     # -1 for GU
    start: int
    end: int


@dataclass
class SimResult:
    mode: Mode
    schedule: Schedule
    batch: int
    microbatch: int
    num_microbatches: int
    total_ns: int
    stages: list[StageRuntime]
    intervals: list[Interval]
    peak_in_flight: list[int]
    sim: Simulator
    network: Network
    topo: Topology
    throughput: float
    trace_hash: str
    last_stage_finish: list[int] = field(default_factory=list)


def prior_select(schedule: Schedule, ready_fd: Sequence[int], ready_bd: Sequence[int],
                 fd_remaining: bool = False) -> Optional[tuple[Phase, int]]:
    """Next work item for a stage unit.

    1F1B prefers a ready backward item; GPipe runs forwards first and holds
    backward items while any forward of the batch is still outstanding.
    Within a class the lowest microbatch index wins.
    """
    if schedule is Schedule.ONE_F_ONE_B:
        if ready_bd:
            return Phase.BD, min(ready_bd)
        if ready_fd:
            return Phase.FD, min(ready_fd)
        return None
    if ready_fd:
        return Phase.FD, min(ready_fd)
    if ready_bd and not fd_remaining:
        return Phase.BD, min(ready_bd)
    return None


def ideal_pipeline_time(fd: Sequence[float], bd: Sequence[float], gu_total: float, m: int) -> float:
    """Bubble-aware pipeline estimate from per-stage forward/backward durations."""
    if m < 1:
        raise ValueError("need at least one microbatch")
    per = [f + b for f, b in zip(fd, bd)]
    return (m - 1) * max(per) + sum(per) + gu_total


# -- preparation ----------------------------------------------------------------

def _representative(topo: Topology, binding: StageBinding) -> NodeId:
    """First core of the group's tile farthest from DRAM (ties: placement order)."""
    best, best_hops = None, -1
    for tile in binding.tile_group:
        hops = topo.nearest_dram_channel(NodeId(tuple(tile)))[1].hops
        if hops > best_hops:
            best, best_hops = tuple(tile), hops
    return topo.tile_cores(best)[0]


def prepare_stages(graph: ComputationGraph, plan: ParallelismPlan, topo: Topology, microbatch: int,
                   num_microbatches: int, mode: Mode, source: str = "plan") -> list[StageRuntime]:
    """Resolve the plan for one microbatch size and precompute every per-op cost."""
    hw = topo.hw
    g = graph.with_batch(microbatch)
    bindings = resolve_stages(g, plan, topo, source)
    S = len(bindings)
    out: list[StageRuntime] = []
    for b in bindings:
        nodes = stage_nodes(topo, b.tile_group)
        ops_rt, fps = [], []
        for op_id in b.op_ids:
            op = g[op_id]
            split = split_for(plan, op, len(nodes))
            assignment = layout_comm_groups(nodes, split, plan.comm_layout)
            fp = footprint(op, split, plan.optimizer, mode, hw.bytes_per_element, hw.bytes_per_master_weight)
            fps.append(fp)
            dp = math.prod(split[a] for a in split.names if a in DATA_PARALLEL_AXES)
            reqs = {
                ph: comm_requests(op, split, assignment, ph, hw.bytes_per_element, plan.linear_gu_weight_shape)
                for ph in Phase
            }
            ops_rt.append(OpRuntime(
                op=op, split=split, assignment=assignment, fp=fp,
                fd_ns=to_ns(float(flops(op, split)) / hw.compute_per_core),
                access=None, fd_comm=reqs[Phase.FD], bd_comm=reqs[Phase.BD],
                gu_comm=[r for r in reqs[Phase.GU] if r.axis in DATA_PARALLEL_AXES] +
                        [r for r in reqs[Phase.GU] if r.axis not in DATA_PARALLEL_AXES],
                dp_degree=dp,
            ))
        cap = hw.sram_per_core
        aplan = sram_allocate(fps, cap, list(b.op_ids), literal=plan.literal_sram_order)
        zero = plan.zero and mode is Mode.TRAINING
        resident = sum(
            o.fp.weight_bytes + o.fp.gradient_bytes + o.fp.optimizer_state_bytes // (o.dp_degree if zero else 1)
            for o in ops_rt
        )
        act = sum(fp.input_bytes for fp in fps) if mode is Mode.TRAINING else 0
        peak = act * in_flight(plan.schedule, b.stage_id, S, num_microbatches) if act else 0
        ledger = StageMemoryLedger(resident, peak, aplan.strategy, False,
                                   max((o.dp_degree for o in ops_rt), default=1) if zero else 1)
        needed = mode is Mode.TRAINING and recompute_needed(ledger, cap, hw.dram_capacity)
        if plan.recompute == "always" and mode is Mode.TRAINING:
            ledger.recompute_enabled = True
        elif plan.recompute == "auto":
            ledger.recompute_enabled = needed
        elif needed:
            raise CapacityError(
                f"stage {b.stage_id}: stored data ({resident + peak} bytes) exceeds its storage budget "
                f"and recomputation is disabled"
            )
        for o, acc in zip(ops_rt, aplan.ops):
            acc.bd_access_bytes = bd_access_size(o.fp, acc, cap, ledger.recompute_enabled, mode)
            acc.gu_access_bytes = gu_access_size(o.fp, hw.bytes_per_element, hw.bytes_per_master_weight,
                                                 o.dp_degree if zero else 1, mode)
            o.access = acc
        out.append(StageRuntime(b, nodes, _representative(topo, b), ops_rt, aplan, ledger, act))
    return out


# -- simulation -------------------------------------------------------------------

class _Pipeline:
    def __init__(self, stages: list[StageRuntime], plan: ParallelismPlan, topo: Topology,
                 m: int, options: SimOptions):
        self.stages = stages
        self.plan = plan
        self.topo = topo
        self.hw = topo.hw
        self.m = m
        self.opt = options
        self.training = options.mode is Mode.TRAINING
        self.sim = Simulator(keep_trace=options.keep_trace)
        self.net = Network(self.sim, topo, options.network_mode, options.non_ring_allreduce)
        self.units = [_StageUnit(self, rt) for rt in stages]
        self.intervals: list[Interval] = []
        self.last_finish: list[int] = [0] * m
        # every stage waits here before its update: the batch's backward work is complete
        self.flush = self.sim.signal(label="flush")
        self._drained = 0

    def stage_drained(self) -> None:
        self._drained += 1
        if self._drained == len(self.stages):
            self.flush.succeed()

    # communication helpers: each returns a signal
    def _dram(self, node: NodeId, size: int, write: bool, label: str) -> Signal:
        if not self.opt.include_dram or size <= 0:
            return self.sim.signal().succeed()
        return self.net.dram_access(node, size * self.hw.cores_per_tile, write=write, label=label)

    def _collectives(self, reqs: Sequence[CollectiveRequest], label: str) -> Signal:
        if not self.opt.include_comm or not reqs:
            return self.sim.signal().succeed()
        return self.sim.all_of([self.net.collective(r, label) for r in reqs])

    def _pass(self, src: StageRuntime, dst: StageRuntime, size: int, label: str) -> Signal:
        if not self.opt.include_comm or size <= 0:
            return self.sim.signal().succeed()
        a, b = src.nodes, dst.nodes
        if len(a) == len(b):
            return self.sim.all_of([self.net.transfer(x, y, size, label) for x, y in zip(a, b)])
        return self.net.inter_group_transfer(a, b, size, self.plan.inter_group_strategy, label=label)

    def act_pass(self, s: int, i: int) -> None:
        src, dst = self.stages[s], self.stages[s + 1]
        size = src.ops[-1].fp.output_bytes
        self._pass(src, dst, size, f"act{s}").then(lambda _s: self.units[s + 1].deliver_act(i))

    def grad_pass(self, s: int, i: int) -> None:
        src, dst = self.stages[s], self.stages[s - 1]
        size = src.ops[0].fp.input_bytes
        self._pass(src, dst, size, f"grad{s}").then(lambda _s: self.units[s - 1].deliver_grad(i))

    def data_fetch(self):
        rt = self.stages[0]
        size = rt.ops[0].fp.input_bytes
        for i in range(self.m):
            yield self._dram(rt.rep_node, size, False, "fetch")
            self.units[0].deliver_act(i)

    def run(self) -> int:
        for u in self.units:
            self.sim.process(u.run(), f"stage{u.s}")
        self.sim.process(self.data_fetch(), "fetch")
        return self.sim.run_until_idle()


class _StageUnit:
    def __init__(self, pipe: _Pipeline, rt: StageRuntime):
        self.pipe = pipe
        self.rt = rt
        self.s = rt.stage_id
        self.S = len(pipe.stages)
        self.acts: set[int] = set()
        self.grads: set[int] = set()
        self.next_fd = 0
        self.next_bd = 0
        self.in_flight = 0
        self.peak_in_flight = 0
        self.wake: Optional[Signal] = None
        self.dp_pending: list[Signal] = []

    def _notify(self) -> None:
        if self.wake is not None and not self.wake.triggered:
            self.wake.succeed()

    def deliver_act(self, i: int) -> None:
        self.acts.add(i)
        self._notify()

    def deliver_grad(self, i: int) -> None:
        self.grads.add(i)
        self._notify()

    def _ready(self) -> Optional[tuple[Phase, int]]:
        pipe = self.pipe
        schedule = pipe.plan.schedule if pipe.training else Schedule.GPIPE
        fd = []
        if self.next_fd < pipe.m and self.next_fd in self.acts:
            if schedule is Schedule.GPIPE or self.in_flight < self.S - self.s:
                fd = [self.next_fd]
        bd = []
        if pipe.training and self.next_bd < self.next_fd:
            if self.s == self.S - 1 or self.next_bd in self.grads:
                bd = [self.next_bd]
        return prior_select(schedule, fd, bd, fd_remaining=self.next_fd < pipe.m)

    def run(self):
        pipe, sim = self.pipe, self.pipe.sim
        total = 2 * pipe.m if pipe.training else pipe.m
        done = 0
        while done < total:
            item = self._ready()
            if item is None:
                self.wake = sim.signal()
                yield self.wake
                self.wake = None
                continue
            phase, i = item
            start = sim.now
            if phase is Phase.FD:
                self.next_fd += 1
                yield from self._forward(i)
                if pipe.training:
                    self.in_flight += 1
                    self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            else:
                self.next_bd += 1
                yield from self._backward(i)
                self.in_flight -= 1
            pipe.intervals.append(Interval(self.s, phase.value, i, start, sim.now))
            done += 1
            if phase is Phase.FD:
                if self.s < self.S - 1:
                    pipe.act_pass(self.s, i)
                else:
                    pipe.last_finish[i] = sim.now
            elif self.s > 0:
                pipe.grad_pass(self.s, i)
        if pipe.training:
            pipe.stage_drained()
            yield pipe.flush
            start = sim.now
            yield from self._update()
            pipe.intervals.append(Interval(self.s, Phase.GU.value, -1, start, sim.now))

    def _forward(self, i: int):
        pipe, sim, rt = self.pipe, self.pipe.sim, self.rt
        for o in rt.ops:
            yield pipe._dram(rt.rep_node, o.access.fd_access_bytes, False, f"fd{self.s}")
            yield sim.timeout(o.fd_ns, EventKind.COMPUTE, f"FD s{self.s} mb{i} {o.op.id}")
            if o.fd_comm:
                yield pipe._collectives(o.fd_comm, f"tp{self.s}")

    def _backward(self, i: int):
        pipe, sim, rt = self.pipe, self.pipe.sim, self.rt
        last_mb = i == pipe.m - 1
        for n, o in enumerate(reversed(rt.ops)):
            tag = f"s{self.s} mb{i} {o.op.id}"
            if self.s == self.S - 1 and n == 0:
                yield sim.timeout(o.fd_ns, EventKind.COMPUTE, f"Loss {tag}")
            if rt.ledger.recompute_enabled:
                yield sim.timeout(o.fd_ns, EventKind.COMPUTE, f"Recompute {tag}")
            yield pipe._dram(rt.rep_node, o.access.bd_access_bytes, False, f"bd{self.s}")
            grad_ns = o.fd_ns if o.op.kind is OpKind.POOL else 2 * o.fd_ns
            yield sim.timeout(grad_ns, EventKind.COMPUTE, f"Gradient {tag}")
            if o.bd_comm:
                yield pipe._collectives(o.bd_comm, f"tp{self.s}")
            if last_mb and o.gu_comm:
                # weight-gradient reduction overlaps the rest of the backward chain
                self.dp_pending.append(pipe._collectives(o.gu_comm, f"dp{self.s}"))

    def _update(self):
        pipe, rt = self.pipe, self.rt
        if self.dp_pending:
            yield pipe.sim.all_of(self.dp_pending)
        gu = sum(o.access.gu_access_bytes for o in rt.ops)
        master = sum(o.access.gu_access_bytes - o.fp.gradient_bytes for o in rt.ops) // 2
        if gu:
            yield pipe._dram(rt.rep_node, gu - master, False, f"gu{self.s}")
            yield pipe._dram(rt.rep_node, master, True, f"gu{self.s}")
        if pipe.plan.zero:
            reqs = []
            for o in rt.ops:
                if o.dp_degree > 1 and o.fp.weight_bytes:
                    axis = next(a for a in o.split.names if a in DATA_PARALLEL_AXES)
                    for grp in comm_groups(o.assignment, o.split, axis):
                        if len(grp) > 1:
                            reqs.append((grp, o.fp.weight_bytes))
            if reqs and pipe.opt.include_comm:
                yield pipe.sim.all_of([pipe.net.all_gather(g, size, f"zero{self.s}") for g, size in reqs])


def simulate(graph: ComputationGraph, plan: ParallelismPlan, hw: HardwareConfig, batch: int,
             microbatch: int, options: Optional[SimOptions] = None, source: str = "plan") -> SimResult:
    """Run one training iteration (or an inference stream) and collect raw results."""
    options = options or SimOptions()
    if microbatch < 1 or batch < 1:
        raise ConfigError(f"{source}: batch and microbatch must be >= 1")
    topo = Topology(hw)
    if options.mode is Mode.TRAINING:
        if batch % microbatch:
            raise ConfigError(f"{source}: microbatch {microbatch} does not divide batch {batch}")
        m = batch // microbatch
    else:
        m = 0
    stages = prepare_stages(graph, plan, topo, microbatch, max(m, 1), options.mode, source)
    S = len(stages)
    if options.mode is Mode.INFERENCE:
        m = options.stream_length or 2 * S + 2
        if m < 2 * S + 1:
            raise ConfigError(f"{source}: inference stream of {m} microbatches is shorter than 2S+1 = {2 * S + 1}")
    pipe = _Pipeline(stages, plan, topo, m, options)
    total = pipe.run()
    if options.mode is Mode.TRAINING:
        throughput = batch / (total / 1e9) if total else math.inf
    else:
        lf = pipe.last_finish
        window = lf[m - S - 1] - lf[S - 1]
        period = window / (m - 2 * S)
        throughput = microbatch / (period / 1e9) if period else math.inf
    return SimResult(
        mode=options.mode, schedule=plan.schedule, batch=batch, microbatch=microbatch,
        num_microbatches=m, total_ns=total, stages=stages, intervals=pipe.intervals,
        peak_in_flight=[u.peak_in_flight for u in pipe.units], sim=pipe.sim, network=pipe.net,
        topo=topo, throughput=throughput, trace_hash=pipe.sim.trace_hash, last_stage_finish=list(pipe.last_finish),
    )


def run_training(graph, plan, hw, batch, microbatch, options: Optional[SimOptions] = None) -> SimResult:
    options = options or SimOptions()
    options.mode = Mode.TRAINING
    return simulate(graph, plan, hw, batch, microbatch, options)


def run_inference(graph, plan, hw, microbatch, stream_length: Optional[int] = None,
                  options: Optional[SimOptions] = None) -> SimResult:
    options = options or SimOptions()
    options.mode = Mode.INFERENCE
    if stream_length is not None:
        options.stream_length = stream_length
    return simulate(graph, plan, hw, microbatch, microbatch, options)


def stage_durations(result: SimResult) -> tuple[list[float], list[float], float]:
    """Mean FD and BD item durations per stage and the longest GU, in ns."""
    S = len(result.stages)
    fd = [[] for _ in range(S)]
    bd = [[] for _ in range(S)]
    gu = 0
    for iv in result.intervals:
        d = iv.end - iv.start
        if iv.phase == "FD":
            fd[iv.stage].append(d)
        elif iv.phase == "BD":
            bd[iv.stage].append(d)
        else:
            gu = max(gu, d)
    mean = lambda xs: sum(xs) / len(xs) if xs else 0.0
    return [mean(x) for x in fd], [mean(x) for x in bd], gu
