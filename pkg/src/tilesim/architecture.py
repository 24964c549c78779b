"""Two-level tiled accelerator: tile array, per-tile core grid, 2D-mesh NoC, edge DRAM.

Core-level nodes live on a flattened grid of ``(tiles_x*cores_x) x (tiles_y*cores_y)``
routers. A hop that stays inside one tile uses an intra-tile link; a hop that
crosses a tile boundary uses the (single, direction-specific) inter-tile link
between those two tiles, the same token a tile-level route would use. DRAM
channels sit one step outside the array boundary and are reached through a
port link from the boundary tile they attach to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from .engine import Resource, Simulator
from .errors import ConfigError

Coord = tuple[int, int]


@dataclass(frozen=True)
class HardwareConfig:
    tiles_x: int
    tiles_y: int
    cores_x: int = 1
    cores_y: int = 1
    compute_per_tile: float = 256e12          # FLOP/s
    sram_per_tile: float = 60e6                # bytes
    noc_bw_intra: float = 1024e9               # bytes/s
    noc_bw_inter: float = 256e9                # bytes/s
    dram_bw_per_channel: float = 256e9         # bytes/s
    dram_response_time: float = 100e-9         # s
    link_time: float = 1e-9                    # s per hop
    dram_channel_placement: tuple[Coord, ...] = ()
    bytes_per_element: int = 2
    bytes_per_master_weight: int = 4
    dram_capacity: Optional[float] = None      # bytes per stage; None = unbounded

    def __post_init__(self):
        if not self.dram_channel_placement:
            object.__setattr__(
                self, "dram_channel_placement", tuple((-1, y) for y in range(self.tiles_y))
            )
        else:
            object.__setattr__(
                self, "dram_channel_placement",
                tuple((int(c[0]), int(c[1])) for c in self.dram_channel_placement),
            )
        self.validate()

    @property
    def cores_per_tile(self) -> int:
        return self.cores_x * self.cores_y

    @property
    def compute_per_core(self) -> float:
        return self.compute_per_tile / self.cores_per_tile

    @property
    def sram_per_core(self) -> float:
        return self.sram_per_tile / self.cores_per_tile

    def validate(self, source: str = "hardware") -> None:
        for name in ("tiles_x", "tiles_y", "cores_x", "cores_y", "bytes_per_element",
                     "bytes_per_master_weight"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{source}: field '{name}' must be an integer >= 1 (got {value!r})")
        for name in ("compute_per_tile", "sram_per_tile", "noc_bw_intra", "noc_bw_inter",
                     "dram_bw_per_channel"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f"{source}: field '{name}' must be > 0 (got {value!r})")
        for name in ("dram_response_time", "link_time"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value < 0:
                raise ConfigError(f"{source}: field '{name}' must be >= 0 (got {value!r})")
        if self.dram_capacity is not None and not self.dram_capacity > 0:
            raise ConfigError(f"{source}: field 'dram_capacity' must be > 0 or null")
        for i, (x, y) in enumerate(self.dram_channel_placement):
            on_we = x in (-1, self.tiles_x) and 0 <= y < self.tiles_y
            on_ns = y in (-1, self.tiles_y) and 0 <= x < self.tiles_x
            if not (on_we or on_ns):
                raise ConfigError(
                    f"{source}: field 'dram_channel_placement[{i}]' = ({x}, {y}) must sit one step "
                    f"outside the {self.tiles_x}x{self.tiles_y} tile array, next to a boundary tile"
                )

    @classmethod
    def from_dict(cls, data: dict[str, Any], source: str = "hardware") -> "HardwareConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown field(s) {', '.join(unknown)}")
        missing = [n for n in ("tiles_x", "tiles_y") if n not in data]
        if missing:
            raise ConfigError(f"{source}: missing required field(s) {', '.join(missing)}")
        kwargs = dict(data)
        if "dram_channel_placement" in kwargs:
            placement = kwargs["dram_channel_placement"] or []
            try:
                kwargs["dram_channel_placement"] = tuple((int(c[0]), int(c[1])) for c in placement)
            except (TypeError, ValueError, IndexError):
                raise ConfigError(
                    f"{source}: field 'dram_channel_placement' must be a list of [x, y] pairs"
                ) from None
        for name in ("compute_per_tile", "sram_per_tile", "noc_bw_intra", "noc_bw_inter",
                     "dram_bw_per_channel", "dram_response_time", "link_time", "dram_capacity"):
            if isinstance(kwargs.get(name), str):
                try:
                    kwargs[name] = float(kwargs[name])
                except ValueError:
                    raise ConfigError(f"{source}: field '{name}' is not a number") from None
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            msg = str(exc)
            if msg.startswith("hardware:"):
                msg = source + msg[len("hardware"):]
            raise ConfigError(msg) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["dram_channel_placement"] = [list(c) for c in self.dram_channel_placement]
        return out


def load_hardware(path: str | Path) -> HardwareConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read hardware config ({exc.strerror})") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: malformed hardware config: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: hardware config must be a mapping")
    return HardwareConfig.from_dict(data, source=str(path))


@dataclass(frozen=True, order=True)
class NodeId:
    tile: Coord
    core: Optional[Coord] = None

    def __str__(self) -> str:
        if self.core is None:
            return f"T{self.tile[0]},{self.tile[1]}"
        return f"T{self.tile[0]},{self.tile[1]}C{self.core[0]},{self.core[1]}"


@dataclass(frozen=True)
class Link:
    link_id: str
    bandwidth: float
    klass: str  # "intra", "inter" or "dram"


@dataclass(frozen=True)
class Route:
    src: Any
    dst: Any
    links: tuple[Link, ...] = field(default=())

    @property
    def hops(self) -> int:
        return len(self.links)

    @property
    def min_bandwidth(self) -> float:
        return min(l.bandwidth for l in self.links)


class Topology:
    """Immutable view of a :class:`HardwareConfig` with cached XY routing."""

    def __init__(self, hw: HardwareConfig):
        self.hw = hw
        self.gx = hw.tiles_x * hw.cores_x
        self.gy = hw.tiles_y * hw.cores_y
        self._routes: dict[tuple, Route] = {}
        self._dram: dict[Any, tuple[int, Route]] = {}

    # -- nodes ----------------------------------------------------------
    def check_node(self, node: NodeId) -> None:
        tx, ty = node.tile
        if not (0 <= tx < self.hw.tiles_x and 0 <= ty < self.hw.tiles_y):
            raise ValueError(f"tile {node.tile} outside {self.hw.tiles_x}x{self.hw.tiles_y} array")
        if node.core is not None:
            cx, cy = node.core
            if not (0 <= cx < self.hw.cores_x and 0 <= cy < self.hw.cores_y):
                raise ValueError(f"core {node.core} outside {self.hw.cores_x}x{self.hw.cores_y} grid")

    def global_xy(self, node: NodeId) -> Coord:
        core = node.core or (0, 0)
        return (node.tile[0] * self.hw.cores_x + core[0], node.tile[1] * self.hw.cores_y + core[1])

    def node_at(self, gx: int, gy: int) -> NodeId:
        return NodeId((gx // self.hw.cores_x, gy // self.hw.cores_y),
                      (gx % self.hw.cores_x, gy % self.hw.cores_y))

    def tile_cores(self, tile: Coord) -> list[NodeId]:
        """Cores of a tile in boustrophedon (snake) order."""
        out = []
        for cy in range(self.hw.cores_y):
            xs = range(self.hw.cores_x) if cy % 2 == 0 else range(self.hw.cores_x - 1, -1, -1)
            out.extend(NodeId(tile, (cx, cy)) for cx in xs)
        return out

    def tile_id(self, tile: Coord) -> int:
        return tile[1] * self.hw.tiles_x + tile[0]

    def tile_from_id(self, tid: int) -> Coord:
        if not 0 <= tid < self.hw.tiles_x * self.hw.tiles_y:
            raise ValueError(f"tile id {tid} outside 0..{self.hw.tiles_x * self.hw.tiles_y - 1}")
        return (tid % self.hw.tiles_x, tid // self.hw.tiles_x)

    # -- links ----------------------------------------------------------
    def _tile_link(self, a: Coord, b: Coord) -> Link:
        return Link(f"t{a[0]},{a[1]}>{b[0]},{b[1]}", self.hw.noc_bw_inter, "inter")

    def _grid_link(self, a: Coord, b: Coord) -> Link:
        ta = (a[0] // self.hw.cores_x, a[1] // self.hw.cores_y)
        tb = (b[0] // self.hw.cores_x, b[1] // self.hw.cores_y)
        if ta != tb:
            return self._tile_link(ta, tb)
        return Link(f"c{a[0]},{a[1]}>{b[0]},{b[1]}", self.hw.noc_bw_intra, "intra")

    def _dram_link(self, channel: int, to_dram: bool) -> Link:
        return Link(f"d{channel}{'<' if to_dram else '>'}", self.hw.noc_bw_inter, "dram")

    @staticmethod
    def _xy_path(a: Coord, b: Coord) -> list[Coord]:
        x, y = a
        path = [a]
        step = 1 if b[0] > x else -1
        while x != b[0]:
            x += step
            path.append((x, y))
        step = 1 if b[1] > y else -1
        while y != b[1]:
            y += step
            path.append((x, y))
        return path

    def route(self, src: NodeId, dst: NodeId) -> Route:
        """Dimension-order (X then Y) route between two nodes.

        If either end is a tile-level node the route runs over the tile mesh.
        """
        key = (src, dst)
        cached = self._routes.get(key)
        if cached is not None:
            return cached
        self.check_node(src)
        self.check_node(dst)
        if src.core is None or dst.core is None:
            path = self._xy_path(src.tile, dst.tile)
            links = tuple(self._tile_link(a, b) for a, b in zip(path, path[1:]))
        else:
            path = self._xy_path(self.global_xy(src), self.global_xy(dst))
            links = tuple(self._grid_link(a, b) for a, b in zip(path, path[1:]))
        route = Route(src, dst, links)
        self._routes[key] = route
        return route

    def hops(self, a: NodeId, b: NodeId) -> int:
        return self.route(a, b).hops

    # -- DRAM -----------------------------------------------------------
    def channel_port(self, channel: int, near: NodeId) -> NodeId:
        """Boundary node through which ``channel`` is reached from ``near``."""
        x, y = self.hw.dram_channel_placement[channel]
        tile = (min(max(x, 0), self.hw.tiles_x - 1), min(max(y, 0), self.hw.tiles_y - 1))
        if near.core is None:
            return NodeId(tile)
        ngx, ngy = self.global_xy(near)
        x0, y0 = tile[0] * self.hw.cores_x, tile[1] * self.hw.cores_y
        clamp_x = min(max(ngx, x0), x0 + self.hw.cores_x - 1)
        clamp_y = min(max(ngy, y0), y0 + self.hw.cores_y - 1)
        if x == -1:
            g = (x0, clamp_y)
        elif x == self.hw.tiles_x:
            g = (x0 + self.hw.cores_x - 1, clamp_y)
        elif y == -1:
            g = (clamp_x, y0)
        else:
            g = (clamp_x, y0 + self.hw.cores_y - 1)
        return self.node_at(*g)

    def dram_route(self, node: NodeId, channel: int, to_dram: bool = True) -> Route:
        key = ("dram", node, channel, to_dram)
        cached = self._routes.get(key)
        if cached is not None:
            return cached
        port = self.channel_port(channel, node)
        if to_dram:
            links = self.route(node, port).links + (self._dram_link(channel, True),)
            route = Route(node, f"dram{channel}", links)
        else:
            links = (self._dram_link(channel, False),) + self.route(port, node).links
            route = Route(f"dram{channel}", node, links)
        self._routes[key] = route
        return route

    def nearest_dram_channel(self, node: NodeId) -> tuple[int, Route]:
        """Channel with the fewest hops from ``node``; ties go to the lowest index."""
        cached = self._dram.get(node)
        if cached is not None:
            return cached
        best: Optional[tuple[int, Route]] = None
        for ch in range(len(self.hw.dram_channel_placement)):
            r = self.dram_route(node, ch, True)
            if best is None or r.hops < best[1].hops:
                best = (ch, r)
        assert best is not None
        self._dram[node] = best
        return best

    def all_links(self) -> list[Link]:
        """Every directed link of the machine, once."""
        links: dict[str, Link] = {}
        for gx in range(self.gx):
            for gy in range(self.gy):
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nx, ny = gx + dx, gy + dy
                    if 0 <= nx < self.gx and 0 <= ny < self.gy:
                        l = self._grid_link((gx, gy), (nx, ny))
                        links[l.link_id] = l
        for ch in range(len(self.hw.dram_channel_placement)):
            for d in (True, False):
                l = self._dram_link(ch, d)
                links[l.link_id] = l
        return list(links.values())

    def link_resources(self, route: Route, sim: Simulator) -> list[Resource]:
        """One shared token per directed link on ``route``."""
        return [sim.resource(l.link_id) for l in route.links]

    def is_ring(self, nodes: Iterable[NodeId]) -> bool:
        """True when consecutive members (cyclically) are mesh neighbours."""
        nodes = list(nodes)
        if len(nodes) < 2:
            return True
        if len(nodes) == 2:
            return self.hops(nodes[0], nodes[1]) == 1
        return all(self.hops(a, b) == 1 for a, b in zip(nodes, nodes[1:] + nodes[:1]))
