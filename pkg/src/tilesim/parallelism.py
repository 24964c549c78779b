"""Parallelism plans: split degrees, stage partition/placement and communication groups."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import yaml

from .architecture import Coord, NodeId, Topology
from .errors import ConfigError
from .workload import (
    DATA_PARALLEL_AXES,
    ComputationGraph,
    Number,
    OperatorSpec,
    OpKind,
    Optimizer,
    SplitDegrees,
    _exact,
    flops,
)


class Phase(Enum):
    FD = "FD"
    BD = "BD"
    GU = "GU"


class CollectiveKind(Enum):
    ALL_REDUCE = "all_reduce"
    REDUCE_SCATTER = "reduce_scatter"
    ALL_GATHER = "all_gather"
    ALL_TO_ALL = "all_to_all"
    REDUCE = "reduce"
    BROADCAST = "broadcast"


class Schedule(Enum):
    GPIPE = "gpipe"
    ONE_F_ONE_B = "1f1b"


class Placement(Enum):
    EXPLICIT = "explicit"
    LINE = "line"
    S_SHAPE = "s_shape"
    BY_COMPUTE = "by_compute"


class CommLayout(Enum):
    COMM1 = "comm1"
    COMM2 = "comm2"


@dataclass(frozen=True)
class CollectiveRequest:
    kind: CollectiveKind
    group: tuple[NodeId, ...]
    size_bytes: int
    phase: Phase
    axis: str = ""

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError("collective size must be positive")
        if len(self.group) < 2:
            raise ValueError("collective group needs at least two members")


@dataclass(frozen=True)
class StageBinding:
    stage_id: int
    op_ids: tuple[str, ...]
    tile_group: tuple[Coord, ...] = ()
    placement_policy: Placement = Placement.BY_COMPUTE
    num_tiles: int = 1


# -- communication sizes ------------------------------------------------------

def _comm_table(op: OperatorSpec, split: SplitDegrees, phase: Phase,
                linear_gu_weight_shape: str) -> list[tuple[Number, str]]:
    d, s = op.dim, split
    if op.kind is OpKind.LINEAR:
        B, M, N, K = d["B"], d["M"], d["N"], d["K"]
        b, m, n, k = s.degrees
        if phase is Phase.FD:
            return [(_exact(B * M * N, b * m * n), "k")]
        if phase is Phase.BD:
            return [(_exact(B * M * K, b * m * k), "n")]
        if linear_gu_weight_shape == "mk":
            w = _exact(M * K, m * k)
        else:
            w = _exact(N * K, n * k)
        return [(w, "b"), (w, "m")]
    if op.kind is OpKind.CONV2:
        B, H, W, C, R, S, K = (d[x] for x in ("B", "H", "W", "C", "R", "S", "K"))
        b, c, i, k = s.degrees
        if phase is Phase.FD:
            return [(_exact(B * H * W * K, b * i * k), "c")]
        if phase is Phase.BD:
            return [(_exact(B * H * W * C, b * i * c), "k")]
        w = _exact(R * S * C * K, c * k)
        return [(w, "b"), (w, "i")]
    if op.kind is OpKind.POOL:
        return []
    B, H, S = d["B"], d["H"], d["S"]
    nd, nm = s.degrees
    if phase in (Phase.FD, Phase.BD):
        return [(_exact(2 * B * S * H, nd), "nm")]
    return [(_exact(12 * H * H, nm), "nd")]


def comm_groups(assignment: dict[tuple[int, ...], NodeId], split: SplitDegrees,
                axis: str) -> list[tuple[NodeId, ...]]:
    """Nodes sharing every split coordinate except ``axis``, ordered along ``axis``."""
    idx = split.names.index(axis)
    groups: dict[tuple[int, ...], list[tuple[int, NodeId]]] = {}
    for coords, node in assignment.items():
        key = coords[:idx] + coords[idx + 1:]
        groups.setdefault(key, []).append((coords[idx], node))
    return [tuple(n for _, n in sorted(members)) for _, members in sorted(groups.items())]


def comm_requests(
    op: OperatorSpec,
    split: SplitDegrees,
    assignment: dict[tuple[int, ...], NodeId],
    phase: Phase,
    bytes_per_element: int = 2,
    linear_gu_weight_shape: str = "table",
) -> list[CollectiveRequest]:
    """All-reduce requests an operator shard pattern generates in one phase."""
    out: list[CollectiveRequest] = []
    for elements, axis in _comm_table(op, split, phase, linear_gu_weight_shape):
        if split[axis] == 1:
            continue
        size = math.ceil(elements) * bytes_per_element
        for group in comm_groups(assignment, split, axis):
            out.append(CollectiveRequest(CollectiveKind.ALL_REDUCE, group, size, phase, axis))
    return out


def transformer_comm_size(B: int, S: int, H: int, N_m: int, N: int,
                          bytes_per_element: int = 2) -> Number:
    """Top-level transformer communication volume for TP degree ``N_m`` out of ``N`` workers."""
    if N % N_m:
        raise ValueError(f"N_m={N_m} must divide N={N}")
    elements = Fraction(8 * B * S * H * N_m, N) + Fraction(24 * H * H, N_m)
    total = elements * bytes_per_element
    return total.numerator if total.denominator == 1 else total


def best_tp_degree(B: int, S: int, H: int, N: int) -> tuple[int, float]:
    """(integer divisor of N minimising the volume, continuous optimum)."""
    divisors = [d for d in range(1, N + 1) if N % d == 0]
    best = min(divisors, key=lambda nm: (transformer_comm_size(B, S, H, nm, N, 1), nm))
    return best, math.sqrt(3 * H * N / (B * S))


# -- stage partition ----------------------------------------------------------

def _min_parts(weights: Sequence[Number], limit: Number) -> int:
    parts, acc = 0, None
    for w in weights:
        if w > limit:
            return len(weights) + 1
        if acc is None or acc + w > limit:
            parts += 1
            acc = w
        else:
            acc += w
    return parts


def balanced_partition(weights: Sequence[Number], num_parts: int) -> list[int]:
    """Contiguous split minimising the largest part sum; returns part sizes.

    Among optimal splits the lexicographically smallest size vector wins, so
    earlier parts hold as few items as possible.
    """
    n = len(weights)
    if not 1 <= num_parts <= n:
        raise ValueError(f"cannot split {n} operators into {num_parts} stages")
    prefix = [0]
    for w in weights:
        prefix.append(prefix[-1] + w)
    candidates = sorted({prefix[j] - prefix[i] for i in range(n) for j in range(i + 1, n + 1)})
    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _min_parts(weights, candidates[mid]) <= num_parts:
            hi = mid
        else:
            lo = mid + 1
    limit = candidates[lo]
    sizes: list[int] = []
    start = 0
    for part in range(num_parts):
        left = num_parts - part - 1
        if left == 0:
            sizes.append(n - start)
            break
        for end in range(start + 1, n + 1):
            if prefix[end] - prefix[start] > limit:
                raise AssertionError("partition search failed")
            rest = weights[end:]
            if len(rest) >= left and _min_parts(rest, limit) <= left:
                sizes.append(end - start)
                start = end
                break
    return sizes


def default_stage_partition(graph: ComputationGraph, num_stages: int) -> list[StageBinding]:
    """Contiguous stages of the topological order with balanced FLOP sums."""
    weights = [flops(op) for op in graph.operators]
    sizes = balanced_partition(weights, num_stages)
    out, start = [], 0
    for sid, size in enumerate(sizes):
        ids = tuple(op.id for op in graph.operators[start:start + size])
        out.append(StageBinding(sid, ids, placement_policy=Placement.BY_COMPUTE))
        start += size
    return out


# -- placement ----------------------------------------------------------------

def placement_curve(tiles_x: int, tiles_y: int, policy: Placement) -> list[Coord]:
    """Tile visiting order for a placement policy.

    ``line`` walks each column top to bottom before moving to the next column,
    so stages pass data vertically; ``s_shape`` snakes row by row so every pair
    of consecutive cells is edge-adjacent.
    """
    if policy is Placement.LINE:
        return [(x, y) for x in range(tiles_x) for y in range(tiles_y)]
    if policy is Placement.S_SHAPE:
        out = []
        for y in range(tiles_y):
            xs = range(tiles_x) if y % 2 == 0 else range(tiles_x - 1, -1, -1)
            out.extend((x, y) for x in xs)
        return out
    raise ValueError(f"no placement curve for policy {policy.value}")


def place_stages(bindings: Sequence[StageBinding], tiles_x: int, tiles_y: int,
                 policy: Placement) -> list[StageBinding]:
    """Assign consecutive cells of the policy's curve to stages in order.

    Under ``line`` with equal multi-tile stages whose width divides the array,
    each stage takes one row of a band that many tiles wide.
    """
    curve = placement_curve(tiles_x, tiles_y, policy)
    widths = {b.num_tiles for b in bindings}
    if policy is Placement.LINE and len(widths) == 1:
        t = widths.pop()
        if t > 1 and tiles_x % t == 0:
            # bands t tiles wide; each stage is one row of a band, stages run down Y
            curve = [(x0 + dx, y) for x0 in range(0, tiles_x, t) for y in range(tiles_y) for dx in range(t)]
    need = sum(b.num_tiles for b in bindings)
    if need > len(curve):
        raise ValueError(f"{need} tiles needed but the array has only {len(curve)}")
    out, pos = [], 0
    for b in bindings:
        group = tuple(curve[pos:pos + b.num_tiles])
        pos += b.num_tiles
        out.append(replace(b, tile_group=group, placement_policy=policy))
    return out


def stage_nodes(topo: Topology, tile_group: Iterable[Coord]) -> list[NodeId]:
    """Worker nodes of a tile group: tiles in placement order, cores snaking inside each."""
    out: list[NodeId] = []
    for tile in tile_group:
        out.extend(topo.tile_cores(tuple(tile)))
    return out


def layout_comm_groups(nodes: Sequence[NodeId], split: SplitDegrees,
                       policy: CommLayout) -> dict[tuple[int, ...], NodeId]:
    """Map every split coordinate to a node along the placement order.

    ``comm1`` lets the model-parallel axes vary fastest along ``nodes`` so
    their groups sit close together; ``comm2`` makes them vary slowest.
    """
    if len(nodes) != split.product:
        raise ValueError(f"group of {len(nodes)} nodes for a split of product {split.product}")
    names = split.names
    tp_axes = [a for a in names if a not in DATA_PARALLEL_AXES]
    dp_axes = [a for a in names if a in DATA_PARALLEL_AXES]
    if policy is CommLayout.COMM1:
        fastest_first = list(reversed(tp_axes)) + dp_axes
    else:
        fastest_first = dp_axes + tp_axes
    radices = [split[a] for a in fastest_first]
    out: dict[tuple[int, ...], NodeId] = {}
    for pos, node in enumerate(nodes):
        digits, rem = {}, pos
        for axis, r in zip(fastest_first, radices):
            digits[axis] = rem % r
            rem //= r
        out[tuple(digits[a] for a in names)] = node
    return out


# -- plan files ---------------------------------------------------------------

@dataclass
class ParallelismPlan:
    schedule: Schedule = Schedule.ONE_F_ONE_B
    num_stages: int = 1
    tiles_per_stage: int = 1
    placement: Placement = Placement.S_SHAPE
    comm_layout: CommLayout = CommLayout.COMM1
    inter_group_strategy: str = "auto"         # auto | one | two
    optimizer: Optimizer = Optimizer.ADAM
    zero: bool = False
    recompute: str = "auto"                    # auto | always | never
    literal_sram_order: bool = False
    linear_gu_weight_shape: str = "table"      # table | mk
    default_splits: dict[OpKind, tuple[int, ...]] = field(default_factory=dict)
    splits: dict[str, tuple[int, ...]] = field(default_factory=dict)
    stages: Optional[list[dict[str, Any]]] = None
    name: str = "plan"

    @classmethod
    def from_dict(cls, data: dict[str, Any], source: str = "plan") -> "ParallelismPlan":
        data = dict(data or {})
        plan = cls(name=str(data.pop("name", source)))

        def enum(key, etype):
            if key in data:
                value = str(data.pop(key)).lower()
                try:
                    setattr(plan, key, etype(value))
                except ValueError:
                    allowed = ", ".join(e.value for e in etype)
                    raise ConfigError(f"{source}: field '{key}' must be one of {allowed} (got {value!r})") from None

        enum("schedule", Schedule)
        enum("placement", Placement)
        enum("comm_layout", CommLayout)
        enum("optimizer", Optimizer)
        for key, allowed in (("inter_group_strategy", ("auto", "one", "two")),
                             ("recompute", ("auto", "always", "never")),
                             ("linear_gu_weight_shape", ("table", "mk"))):
            if key in data:
                value = str(data.pop(key)).lower()
                if value not in allowed:
                    raise ConfigError(f"{source}: field '{key}' must be one of {', '.join(allowed)} (got {value!r})")
                setattr(plan, key, value)
        for key in ("zero", "literal_sram_order"):
            if key in data:
                setattr(plan, key, bool(data.pop(key)))
        for key in ("num_stages", "tiles_per_stage"):
            if key in data:
                value = data.pop(key)
                if not isinstance(value, int) or value < 1:
                    raise ConfigError(f"{source}: field '{key}' must be an integer >= 1 (got {value!r})")
                setattr(plan, key, value)
        for kind_name, degrees in (data.pop("default_splits", None) or {}).items():
            try:
                kind = OpKind(str(kind_name).lower())
            except ValueError:
                raise ConfigError(f"{source}: default_splits: unknown operator kind {kind_name!r}") from None
            plan.default_splits[kind] = _degrees(degrees, f"{source}: default_splits.{kind_name}")
        for op_id, degrees in (data.pop("splits", None) or {}).items():
            plan.splits[str(op_id)] = _degrees(degrees, f"{source}: splits.{op_id}")
        if "stages" in data:
            stages = data.pop("stages")
            if not isinstance(stages, list) or not stages:
                raise ConfigError(f"{source}: field 'stages' must be a non-empty list")
            for n, st in enumerate(stages):
                if not isinstance(st, dict) or "ops" not in st:
                    raise ConfigError(f"{source}: stage {n} needs an 'ops' list")
            plan.stages = stages
            if "placement" not in data and plan.placement is Placement.S_SHAPE and all("tiles" in s for s in stages):
                plan.placement = Placement.EXPLICIT
        if data:
            raise ConfigError(f"{source}: unknown field(s) {', '.join(sorted(data))}")
        return plan


def _degrees(value: Any, where: str) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)) or not value or not all(
        isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value
    ):
        raise ConfigError(f"{where}: split degrees must be a list of integers >= 1 (got {value!r})")
    return tuple(value)


def parse_plan(text: str, source: str = "plan") -> ParallelismPlan:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: malformed plan: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: plan must be a mapping")
    return ParallelismPlan.from_dict(data, source)


def load_plan(path: str | Path) -> ParallelismPlan:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read plan ({exc.strerror})") from None
    return parse_plan(text, source=str(path))


def split_for(plan: ParallelismPlan, op: OperatorSpec, workers: int) -> SplitDegrees:
    """Split of ``op``: explicit per-op entry, repeat-group entry, kind default, else pure DP."""
    base = op.id.rsplit(".", 1)[0] if "." in op.id else op.id
    degrees = plan.splits.get(op.id) or plan.splits.get(base) or plan.default_splits.get(op.kind)
    if degrees is None:
        n = 3 if op.kind is OpKind.POOL else (2 if op.kind is OpKind.TRANSFORMER else 4)
        degrees = (workers,) + (1,) * (n - 1)
    return SplitDegrees(op.kind, degrees)


def resolve_stages(graph: ComputationGraph, plan: ParallelismPlan, topo: Topology,
                   source: str = "plan") -> list[StageBinding]:
    """Turn a plan into placed, validated stage bindings."""
    hw = topo.hw
    if plan.stages is None:
        if plan.num_stages > len(graph):
            raise ConfigError(
                f"{source}: num_stages={plan.num_stages} exceeds the {len(graph)} operators of the workload"
            )
        bindings = [replace(b, num_tiles=plan.tiles_per_stage)
                    for b in default_stage_partition(graph, plan.num_stages)]
    else:
        bindings = []
        expanded = {op.id: [op.id] for op in graph.operators}
        for op in graph.operators:
            if "." in op.id:
                expanded.setdefault(op.id.rsplit(".", 1)[0], []).append(op.id)
        for sid, st in enumerate(plan.stages):
            ids: list[str] = []
            for name in st["ops"]:
                if str(name) not in expanded:
                    raise ConfigError(f"{source}: stage {sid} binds unknown operator {name!r}")
                ids.extend(expanded[str(name)])
            tiles = st.get("tiles")
            bindings.append(StageBinding(sid, tuple(ids), num_tiles=len(tiles) if tiles else plan.tiles_per_stage))
        order = [op.id for op in graph.operators]
        flat = [i for b in bindings for i in b.op_ids]
        if sorted(flat) != sorted(order) or len(set(flat)) != len(flat):
            raise ConfigError(f"{source}: stages must bind every operator exactly once")
        if flat != order:
            raise ConfigError(f"{source}: stage order must follow the workload's topological order")
    if plan.stages is not None and all("tiles" in st for st in plan.stages):
        placed = []
        seen: dict[Coord, int] = {}
        for b, st in zip(bindings, plan.stages):
            group = []
            for t in st["tiles"]:
                try:
                    if isinstance(t, int):
                        coord = topo.tile_from_id(t)
                    else:
                        coord = (int(t[0]), int(t[1]))
                        topo.check_node(NodeId(coord))
                except (ValueError, TypeError, IndexError):
                    raise ConfigError(
                        f"{source}: stage {b.stage_id} is bound to tile {t!r}, outside the "
                        f"{hw.tiles_x}x{hw.tiles_y} tile array"
                    ) from None
                if coord in seen:
                    raise ConfigError(f"{source}: tile {t!r} bound to both stage {seen[coord]} and stage {b.stage_id}")
                seen[coord] = b.stage_id
                group.append(coord)
            placed.append(replace(b, tile_group=tuple(group), placement_policy=Placement.EXPLICIT))
        bindings = placed
    else:
        policy = plan.placement if plan.placement in (Placement.LINE, Placement.S_SHAPE) else Placement.S_SHAPE
        try:
            bindings = place_stages(bindings, hw.tiles_x, hw.tiles_y, policy)
        except ValueError as exc:
            raise ConfigError(f"{source}: {exc}") from None
    for b in bindings:
        workers = len(b.tile_group) * hw.cores_per_tile
        for op_id in b.op_ids:
            op = graph[op_id]
            try:
                split = split_for(plan, op, workers)
            except ValueError as exc:
                raise ConfigError(f"{source}: operator {op_id!r}: {exc}") from None
            if split.product != workers:
                raise ConfigError(
                    f"{source}: operator {op_id!r} in stage {b.stage_id}: product of split degrees "
                    f"{list(split.degrees)} = {split.product} must equal the {workers} workers of its tile group"
                )
            try:
                split.check_divides(op)
            except ValueError as exc:
                raise ConfigError(f"{source}: stage {b.stage_id}: {exc}") from None
    return bindings
