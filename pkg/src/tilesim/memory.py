"""SRAM strategy selection, DRAM access sizes and activation storage accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .parallelism import Schedule
from .workload import Mode, TensorFootprint


class SramStrategy(Enum):
    ACTIVATION_STREAM = "activation_stream"
    WEIGHT_STREAM = "weight_stream"
    WEIGHT_STATIONARY = "weight_stationary"
    INPUT_STATIONARY = "input_stationary"

    @property
    def is_penalty(self) -> bool:
        return self in (SramStrategy.WEIGHT_STATIONARY, SramStrategy.INPUT_STATIONARY)


@dataclass
class OpAccess:
    op_id: str
    strategy: SramStrategy
    fd_access_bytes: int
    bd_access_bytes: int = 0
    gu_access_bytes: int = 0


@dataclass
class AccessPlan:
    strategy: SramStrategy
    ops: list[OpAccess] = field(default_factory=list)
    weight_total: int = 0
    wsg_total: int = 0
    act_total: int = 0

    def __getitem__(self, op_id: str) -> OpAccess:
        for o in self.ops:
            if o.op_id == op_id:
                return o
        raise KeyError(op_id)


def _penalty(fp: TensorFootprint, capacity: float) -> tuple[SramStrategy, int]:
    phi1 = math.ceil(fp.weight_bytes / capacity) * fp.input_bytes
    phi2 = math.ceil(fp.input_bytes / capacity) * fp.weight_bytes
    if phi1 < phi2:
        return SramStrategy.WEIGHT_STATIONARY, phi1 + fp.output_bytes
    return SramStrategy.INPUT_STATIONARY, phi2 + fp.output_bytes


def sram_allocate(footprints: Sequence[TensorFootprint], capacity: float,
                  op_ids: Optional[Sequence[str]] = None, literal: bool = False) -> AccessPlan:
    """Pick an SRAM strategy and forward DRAM traffic for the shards of one stage.

    Default mode keeps everything resident when WSG fits, else keeps the
    activations when they fit, else falls back to the cheaper stationary
    dataflow per operator. ``literal`` tests total weights before WSG, which
    leaves the weight_stream branch unreachable.
    """
    if not capacity or capacity <= 0:
        raise ValueError("SRAM capacity must be positive")
    op_ids = list(op_ids) if op_ids is not None else [str(i) for i in range(len(footprints))]
    wt = sum(fp.weight_bytes for fp in footprints)
    wsg = sum(fp.wsg_bytes for fp in footprints)
    act = sum(fp.input_bytes for fp in footprints)
    first_ok = (wt if literal else wsg) <= capacity
    second_ok = (wsg if literal else act) <= capacity
    ops = []
    for op_id, fp in zip(op_ids, footprints):
        if first_ok:
            strat, size = SramStrategy.ACTIVATION_STREAM, fp.input_bytes + fp.output_bytes
        elif second_ok:
            strat, size = SramStrategy.WEIGHT_STREAM, fp.weight_bytes
        else:
            strat, size = _penalty(fp, capacity)
        ops.append(OpAccess(op_id, strat, size))
    if first_ok:
        stage = SramStrategy.ACTIVATION_STREAM
    elif second_ok:
        stage = SramStrategy.WEIGHT_STREAM
    else:
        # stage-level label for the penalty case: input stationary when activations dominate
        stage = SramStrategy.INPUT_STATIONARY if act >= wt else SramStrategy.WEIGHT_STATIONARY
    return AccessPlan(stage, ops, wt, wsg, act)


def bd_access_size(fp: TensorFootprint, access: OpAccess, capacity: float,
                   recompute: bool = False, mode: Mode = Mode.TRAINING) -> int:
    """Backward DRAM traffic of one shard: upstream gradient, stored activation, input gradient."""
    if mode is Mode.INFERENCE:
        return 0
    g_out, act_in, g_in = fp.output_bytes, fp.input_bytes, fp.input_bytes
    s = access.strategy
    if s is SramStrategy.ACTIVATION_STREAM:
        size = g_out + act_in + g_in
    elif s is SramStrategy.WEIGHT_STREAM:
        size = g_out + act_in + g_in + fp.weight_bytes
    elif s is SramStrategy.WEIGHT_STATIONARY:
        size = math.ceil(fp.weight_bytes / capacity) * (g_out + act_in) + g_in
    else:
        size = math.ceil((g_out + act_in) / capacity) * fp.weight_bytes + g_in
    if recompute:
        size += access.fd_access_bytes
    return size


def gu_access_size(fp: TensorFootprint, bytes_per_element: int = 2, bytes_per_master_weight: int = 4,
                   zero_degree: int = 1, mode: Mode = Mode.TRAINING) -> int:
    """Master weights read and written back, plus the gradient read."""
    if mode is Mode.INFERENCE:
        return 0
    elements = fp.weight_bytes // bytes_per_element
    master = 2 * elements * bytes_per_master_weight
    return master // zero_degree + fp.gradient_bytes


def in_flight(schedule: Schedule, stage: int, num_stages: int, microbatches: int) -> int:
    """Microbatch activations a stage holds at its peak."""
    if not 0 <= stage < num_stages or microbatches < 1:
        raise ValueError("need 0 <= stage < num_stages and microbatches >= 1")
    if schedule is Schedule.GPIPE:
        return microbatches
    return min(num_stages - stage, microbatches)


def peak_activation(schedule: Schedule, stage: int, num_stages: int, microbatches: int,
                    per_microbatch_act: int) -> int:
    return in_flight(schedule, stage, num_stages, microbatches) * per_microbatch_act


@dataclass
class StageMemoryLedger:
    resident_wsg_bytes: int
    peak_activation_bytes: int
    strategy: SramStrategy
    recompute_enabled: bool = False
    zero_dp_degree: int = 1

    def split_by_residence(self) -> tuple[int, int]:
        """(SRAM-resident bytes, DRAM-spilled bytes) implied by the strategy."""
        if self.strategy is SramStrategy.ACTIVATION_STREAM:
            return self.resident_wsg_bytes, self.peak_activation_bytes
        if self.strategy is SramStrategy.WEIGHT_STREAM:
            return self.peak_activation_bytes, self.resident_wsg_bytes
        return 0, self.resident_wsg_bytes + self.peak_activation_bytes


def resident_wsg(footprints: Sequence[TensorFootprint], zero_degree: int = 1) -> int:
    """Weights + gradients + optimizer state, with optimizer state sharded under ZeRO."""
    return sum(fp.weight_bytes + fp.gradient_bytes + fp.optimizer_state_bytes // zero_degree
               for fp in footprints)


def recompute_needed(ledger: StageMemoryLedger, sram_capacity: float,
                     dram_capacity: Optional[float] = None) -> bool:
    """True when the stage's stored data strictly exceeds its storage budget."""
    sram_part, dram_part = ledger.split_by_residence()
    if sram_part > sram_capacity:
        return True
    return dram_capacity is not None and dram_part > dram_capacity
