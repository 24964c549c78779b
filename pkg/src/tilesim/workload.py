"""DL workload: typed operators, split degrees, FLOP counts and per-shard footprints."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Union

import yaml

from .errors import ConfigError

Number = Union[int, Fraction]


class OpKind(Enum):
    LINEAR = "linear"
    CONV2 = "conv2"
    POOL = "pool"
    TRANSFORMER = "transformer"


class Optimizer(Enum):
    SGD = "sgd"
    ADAM = "adam"


class Mode(Enum):
    TRAINING = "training"
    INFERENCE = "inference"


DIM_NAMES: dict[OpKind, tuple[str, ...]] = {
    OpKind.LINEAR: ("B", "M", "N", "K"),
    OpKind.CONV2: ("B", "H", "W", "C", "R", "S", "K"),
    OpKind.POOL: ("B", "H", "W", "C", "R", "S"),
    OpKind.TRANSFORMER: ("B", "H", "S", "A"),
}

SPLIT_NAMES: dict[OpKind, tuple[str, ...]] = {
    OpKind.LINEAR: ("b", "m", "n", "k"),
    OpKind.CONV2: ("b", "c", "i", "k"),
    OpKind.POOL: ("b", "c", "i"),
    OpKind.TRANSFORMER: ("nd", "nm"),
}

# degrees that replicate data rather than partition the model
DATA_PARALLEL_AXES = {"b", "nd"}


def _exact(num: int, den: int) -> Number:
    return num // den if num % den == 0 else Fraction(num, den)


@dataclass(frozen=True)
class OperatorSpec:
    id: str
    kind: OpKind
    dims: tuple[int, ...]
    line: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        names = DIM_NAMES[self.kind]
        if len(self.dims) != len(names):
            raise ValueError(f"{self.kind.value} operator {self.id!r} needs dims {list(names)}")
        for name, value in zip(names, self.dims):
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"operator {self.id!r}: dim {name} must be a positive integer (got {value!r})")

    @property
    def dim(self) -> dict[str, int]:
        return dict(zip(DIM_NAMES[self.kind], self.dims))

    def with_batch(self, batch: int) -> "OperatorSpec":
        return replace(self, dims=(batch,) + self.dims[1:])

    @property
    def has_weights(self) -> bool:
        return self.kind is not OpKind.POOL


@dataclass(frozen=True)
class SplitDegrees:
    """Per-operator parallel degrees, named as in the operator's kind.

    Linear (b, m, n, k); Conv2 (b, c, i, k); Pool (b, c, i); Transformer (nd, nm).
    Pool may carry a trailing 1 and Transformer two trailing 1s.
    """

    kind: OpKind
    degrees: tuple[int, ...]

    def __post_init__(self):
        names = SPLIT_NAMES[self.kind]
        degrees = tuple(int(d) for d in self.degrees)
        extra = degrees[len(names):]
        if len(degrees) < len(names) or any(d != 1 for d in extra):
            raise ValueError(f"{self.kind.value} split needs degrees {list(names)} (got {list(self.degrees)})")
        degrees = degrees[: len(names)]
        if any(d < 1 for d in degrees):
            raise ValueError(f"split degrees must be >= 1 (got {list(degrees)})")
        object.__setattr__(self, "degrees", degrees)

    @classmethod
    def unit(cls, kind: OpKind) -> "SplitDegrees":
        return cls(kind, (1,) * len(SPLIT_NAMES[kind]))

    @property
    def names(self) -> tuple[str, ...]:
        return SPLIT_NAMES[self.kind]

    def __getitem__(self, name: str) -> int:
        return self.degrees[self.names.index(name)]

    @property
    def product(self) -> int:
        return math.prod(self.degrees)

    def check_divides(self, op: OperatorSpec) -> None:
        """Raise ValueError unless every degree divides the dimension it splits."""
        if op.kind is not self.kind:
            raise ValueError(f"split for {self.kind.value} applied to {op.kind.value} operator {op.id!r}")
        d = op.dim
        if op.kind is OpKind.LINEAR:
            targets = {"b": d["B"], "m": d["M"], "n": d["N"], "k": d["K"]}
        elif op.kind is OpKind.CONV2:
            targets = {"b": d["B"], "c": d["C"], "i": d["H"] * d["W"], "k": d["K"]}
        elif op.kind is OpKind.POOL:
            targets = {"b": d["B"], "c": d["C"], "i": d["H"] * d["W"]}
        else:
            targets = {"nd": d["B"], "nm": math.gcd(d["A"], d["H"])}
        for name in self.names:
            if targets[name] % self[name]:
                raise ValueError(
                    f"operator {op.id!r}: degree {name}={self[name]} does not divide "
                    f"its dimension ({targets[name]})"
                )


@dataclass(frozen=True)
class TensorFootprint:
    weight_bytes: int
    input_bytes: int
    output_bytes: int
    optimizer_state_bytes: int
    gradient_bytes: int

    @property
    def wsg_bytes(self) -> int:
        return self.weight_bytes + self.optimizer_state_bytes + self.gradient_bytes


def flops(op: OperatorSpec, split: Optional[SplitDegrees] = None) -> Number:
    """FLOPs executed by one shard of ``op`` under ``split``."""
    split = split or SplitDegrees.unit(op.kind)
    d = op.dim
    if op.kind is OpKind.LINEAR:
        return _exact(2 * d["B"] * d["M"] * d["N"] * d["K"], split.product)
    if op.kind is OpKind.CONV2:
        return _exact(2 * d["B"] * d["H"] * d["W"] * d["R"] * d["S"] * d["C"] * d["K"], split.product)
    if op.kind is OpKind.POOL:
        return _exact(2 * d["B"] * d["H"] * d["W"] * d["R"] * d["S"] * d["C"], split.product)
    if op.kind is OpKind.TRANSFORMER:
        b, h, s = d["B"], d["H"], d["S"]
        return _exact(24 * b * s * h * h + 4 * b * s * s * h, split.product)
    raise ValueError(f"unknown operator kind {op.kind!r}")


def shard_elements(op: OperatorSpec, split: Optional[SplitDegrees] = None) -> tuple[Number, Number, Number]:
    """(weight, input, output) element counts held by one shard."""
    split = split or SplitDegrees.unit(op.kind)
    d = op.dim
    if op.kind is OpKind.LINEAR:
        b, m, n, k = split.degrees
        return (_exact(d["M"] * d["K"], m * k),
                _exact(d["B"] * d["N"] * d["K"], b * n * k),
                _exact(d["B"] * d["M"] * d["N"], b * m * n))
    if op.kind is OpKind.CONV2:
        b, c, i, k = split.degrees
        hw = d["H"] * d["W"]  # output spatial extent equals input (stride 1, same padding)
        return (_exact(d["R"] * d["S"] * d["C"] * d["K"], c * k),
                _exact(d["B"] * hw * d["C"], b * i * c),
                _exact(d["B"] * hw * d["K"], b * i * k))
    if op.kind is OpKind.POOL:
        b, c, i = split.degrees
        act = _exact(d["B"] * d["H"] * d["W"] * d["C"], b * c * i)
        return (0, act, act)
    nd, nm = split.degrees
    act = _exact(d["B"] * d["S"] * d["H"], nd)
    return (_exact(12 * d["H"] * d["H"], nm), act, act)


def footprint(
    op: OperatorSpec,
    split: Optional[SplitDegrees] = None,
    optimizer: Optimizer = Optimizer.ADAM,
    mode: Mode = Mode.TRAINING,
    bytes_per_element: int = 2,
    bytes_per_master_weight: int = 4,
) -> TensorFootprint:
    """Per-shard storage of one operator, in bytes."""
    w, i, o = (math.ceil(x) for x in shard_elements(op, split))
    training = mode is Mode.TRAINING
    opt = 2 * w * bytes_per_master_weight if (training and optimizer is Optimizer.ADAM) else 0
    return TensorFootprint(
        weight_bytes=w * bytes_per_element,
        input_bytes=i * bytes_per_element,
        output_bytes=o * bytes_per_element,
        optimizer_state_bytes=opt,
        gradient_bytes=w * bytes_per_element if training else 0,
    )


class ComputationGraph:
    """Operators in a topological order (list order breaks ties) plus dependency edges."""

    def __init__(self, operators: Iterable[OperatorSpec], edges: Iterable[tuple[str, str]] = (),
                 name: str = "workload"):
        ops = list(operators)
        self.name = name
        by_id: dict[str, OperatorSpec] = {}
        for op in ops:
            if op.id in by_id:
                raise ValueError(f"duplicate operator id {op.id!r}")
            by_id[op.id] = op
        edge_list = [(str(a), str(b)) for a, b in edges]
        for a, b in edge_list:
            for end in (a, b):
                if end not in by_id:
                    raise ValueError(f"edge ({a!r}, {b!r}) references unknown operator {end!r}")
        position = {op.id: n for n, op in enumerate(ops)}
        succ: dict[str, list[str]] = {op.id: [] for op in ops}
        indeg = {op.id: 0 for op in ops}
        for a, b in edge_list:
            succ[a].append(b)
            indeg[b] += 1
        heap = [position[i] for i, n in indeg.items() if n == 0]
        heapq.heapify(heap)
        order: list[OperatorSpec] = []
        while heap:
            op = ops[heapq.heappop(heap)]
            order.append(op)
            for nxt in succ[op.id]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    heapq.heappush(heap, position[nxt])
        if len(order) != len(ops):
            stuck = [op for op in ops if indeg[op.id] > 0]
            raise CycleError(stuck[0])
        self.operators: list[OperatorSpec] = order
        self.edges: list[tuple[str, str]] = edge_list
        self._by_id = by_id
        self._succ = succ

    def __len__(self) -> int:
        return len(self.operators)

    def __getitem__(self, op_id: str) -> OperatorSpec:
        return self._by_id[op_id]

    def index(self, op_id: str) -> int:
        return next(n for n, op in enumerate(self.operators) if op.id == op_id)

    def successors(self, op_id: str) -> list[str]:
        return list(self._succ[op_id])

    def with_batch(self, batch: int) -> "ComputationGraph":
        return ComputationGraph((op.with_batch(batch) for op in self.operators), self.edges, self.name)


class CycleError(ValueError):
    def __init__(self, op: OperatorSpec):
        where = f" (line {op.line})" if op.line else ""
        super().__init__(f"dependency cycle through operator {op.id!r}{where}")
        self.op = op


def _node_line(node: yaml.Node) -> int:
    return node.start_mark.line + 1


def parse_workload(text: str, source: str = "workload") -> ComputationGraph:
    """Parse a YAML workload description.

    Schema::

        name: optional string
        operators:
          - id: layer            # unique
            kind: linear | conv2 | pool | transformer
            dims: {B: 1, ...}    # or a list in the kind's dimension order
            repeat: 24           # optional; ids become layer.0 .. layer.23, chained
        edges:                   # optional; default chains operators in list order
          - [producer, consumer] # a repeated id means its last (producer) / first (consumer) copy
    """
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: malformed workload: {exc}") from None
    if not isinstance(data, dict) or not isinstance(data.get("operators"), list) or not data["operators"]:
        raise ConfigError(f"{source}: workload needs a non-empty 'operators' list")
    key_nodes = {k.value: v for k, v in root.value}
    op_nodes = key_nodes["operators"].value
    edge_nodes = key_nodes["edges"].value if "edges" in key_nodes and data.get("edges") else []

    ops: list[OperatorSpec] = []
    groups: dict[str, list[str]] = {}
    chain_edges: list[tuple[str, str]] = []
    for entry, node in zip(data["operators"], op_nodes):
        line = _node_line(node)
        if not isinstance(entry, dict) or "id" not in entry or "kind" not in entry or "dims" not in entry:
            raise ConfigError(f"{source}:{line}: operator needs 'id', 'kind' and 'dims'")
        op_id = str(entry["id"])
        try:
            kind = OpKind(str(entry["kind"]).lower())
        except ValueError:
            raise ConfigError(f"{source}:{line}: operator {op_id!r}: unknown kind {entry['kind']!r}") from None
        names = DIM_NAMES[kind]
        raw = entry["dims"]
        if isinstance(raw, dict):
            missing = [n for n in names if n not in raw]
            if missing:
                raise ConfigError(f"{source}:{line}: operator {op_id!r}: missing dim(s) {missing}")
            dims = tuple(raw[n] for n in names)
        else:
            dims = tuple(raw)
        if len(dims) != len(names):
            raise ConfigError(f"{source}:{line}: operator {op_id!r}: {kind.value} needs dims {list(names)}")
        for n, v in zip(names, dims):
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(
                    f"{source}:{line}: operator {op_id!r}: dim {n} must be a positive integer (got {v!r})"
                )
        repeat = entry.get("repeat", 1)
        if not isinstance(repeat, int) or repeat < 1:
            raise ConfigError(f"{source}:{line}: operator {op_id!r}: repeat must be a positive integer")
        if op_id in groups:
            raise ConfigError(f"{source}:{line}: duplicate operator id {op_id!r}")
        ids = [op_id] if repeat == 1 else [f"{op_id}.{n}" for n in range(repeat)]
        groups[op_id] = ids
        for i in ids:
            ops.append(OperatorSpec(i, kind, dims, line))
        chain_edges.extend(zip(ids, ids[1:]))

    if edge_nodes:
        edges = list(chain_edges)
        for entry, node in zip(data["edges"], edge_nodes):
            line = _node_line(node)
            if not isinstance(entry, (list, tuple)) or len(entry) != 2:
                raise ConfigError(f"{source}:{line}: edge must be a [producer, consumer] pair")
            a, b = (str(e) for e in entry)
            all_ids = {op.id for op in ops}
            for end in (a, b):
                if end not in groups and end not in all_ids:
                    raise ConfigError(f"{source}:{line}: edge ({a}, {b}) references unknown operator {end!r}")
            a = groups[a][-1] if a in groups else a
            b = groups[b][0] if b in groups else b
            edges.append((a, b))
    else:
        ids = [op.id for op in ops]
        edges = list(zip(ids, ids[1:]))
    try:
        return ComputationGraph(ops, edges, name=str(data.get("name", source)))
    except CycleError as exc:
        raise ConfigError(f"{source}:{exc.op.line}: dependency cycle through operator {exc.op.id!r}") from None
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_workload(path: str | Path) -> ComputationGraph:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read workload ({exc.strerror})") from None
    return parse_workload(text, source=str(path))
