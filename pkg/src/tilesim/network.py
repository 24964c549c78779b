"""Contention-aware NoC transfers, DRAM accesses, collectives and inter-group strategies.

Everything here is a callback task on the engine rather than a generator
process: a transfer is one atomic claim of every link on its route, held for
the zero-contention duration and then released. Waiting in link queues is
where contention delay comes from.
"""

from __future__ import annotations

from collections import defaultdict
from enum import Enum
from typing import Callable, Optional, Sequence

from .architecture import HardwareConfig, NodeId, Route, Topology
from .engine import EventKind, Signal, Simulator, to_ns
from .parallelism import CollectiveKind, CollectiveRequest


class NetworkMode(Enum):
    CONTENTION = "contention"     # exclusive FIFO links and channels
    ANALYTICAL = "analytical"     # pipelined transfer time, no contention
    DEGRADED = "degraded"         # hop-by-hop store-and-forward, no contention


def analytical_transfer_time(size: float, route: Route, hw: HardwareConfig) -> float:
    """Seconds for ``size`` bytes on an idle route: hop latency plus serialization."""
    if route.hops == 0:
        return 0.0
    return hw.link_time * route.hops + size / route.min_bandwidth


def degraded_transfer_time(size: float, route: Route, hw: HardwareConfig) -> float:
    """Seconds when every hop re-serializes the whole payload."""
    if route.hops == 0:
        return 0.0
    return (hw.link_time + size / route.min_bandwidth) * route.hops


def dram_access_time(size: float, hw: HardwareConfig) -> float:
    return hw.dram_response_time + size / hw.dram_bw_per_channel


def ring_all_reduce_time(p: int, size: float, bandwidth: float, link_time: float) -> float:
    """Closed form for an isolated ring of ``p`` one-hop neighbours."""
    if p < 2:
        return 0.0
    return 2 * (p - 1) * (size / p) / bandwidth + 2 * (p - 1) * link_time


class Network:
    """Issues communication tasks on a simulator for one topology."""

    def __init__(self, sim: Simulator, topo: Topology, mode: NetworkMode = NetworkMode.CONTENTION,
                 non_ring_allreduce: str = "reduce_broadcast"):
        if non_ring_allreduce not in ("ring", "reduce_broadcast"):
            raise ValueError(f"unknown non-ring all-reduce algorithm {non_ring_allreduce!r}")
        self.sim = sim
        self.topo = topo
        self.hw = topo.hw
        self.mode = mode
        self.non_ring_allreduce = non_ring_allreduce
        self.link_bytes: dict[str, float] = defaultdict(float)
        self.channel_bytes: dict[int, float] = defaultdict(float)
        self._n = 0

    # -- helpers --------------------------------------------------------
    def _owner(self, label: str) -> str:
        self._n += 1
        return f"{label}#{self._n}"

    def _done(self) -> Signal:
        return self.sim.signal().succeed(self.sim.now)

    def sequence(self, steps: Sequence[Callable[[], Signal]]) -> Signal:
        """Run signal-producing steps one after another."""
        done = self.sim.signal()
        it = iter(steps)

        def nxt(_s: Optional[Signal] = None) -> None:
            for step in it:
                step().then(nxt)
                return
            done.succeed(self.sim.now)

        nxt()
        return done

    def parallel(self, steps: Sequence[Callable[[], Signal]]) -> Signal:
        return self.sim.all_of([s() for s in steps])

    # -- point to point -------------------------------------------------
    def send_route(self, route: Route, size: float, label: str = "xfer") -> Signal:
        if size < 0:
            raise ValueError("transfer size must be >= 0")
        if route.hops == 0:
            return self._done()
        for link in route.links:
            self.link_bytes[link.link_id] += size
        if self.mode is NetworkMode.CONTENTION:
            duration = to_ns(analytical_transfer_time(size, route, self.hw))
            return self.sim.hold(self.topo.link_resources(route, self.sim), duration,
                                 self._owner(label), EventKind.TRANSFER)
        if self.mode is NetworkMode.ANALYTICAL:
            duration = to_ns(analytical_transfer_time(size, route, self.hw))
        else:
            duration = to_ns(degraded_transfer_time(size, route, self.hw))
        return self.sim.timeout(duration, EventKind.TRANSFER)

    def transfer(self, src: NodeId, dst: NodeId, size: float, label: str = "xfer") -> Signal:
        """Move ``size`` bytes from ``src`` to ``dst``; fires on delivery."""
        return self.send_route(self.topo.route(src, dst), size, label)

    def _channel(self, ch: int, size: float, label: str) -> Signal:
        self.channel_bytes[ch] += size
        duration = to_ns(dram_access_time(size, self.hw))
        if self.mode is NetworkMode.CONTENTION:
            return self.sim.hold([self.sim.resource(f"dram{ch}")], duration,
                                 self._owner(label), EventKind.DRAM_ACCESS)
        return self.sim.timeout(duration, EventKind.DRAM_ACCESS)

    def dram_access(self, node: NodeId, size: float, write: bool = False,
                    channel: Optional[int] = None, label: str = "dram") -> Signal:
        """Read or write ``size`` bytes between ``node`` and a DRAM channel.

        Writes cross the NoC first and then occupy the channel; reads occupy the
        channel first and then cross the NoC back.
        """
        if size < 0:
            raise ValueError("access size must be >= 0")
        if channel is None:
            channel, _ = self.topo.nearest_dram_channel(node)
        if write:
            route = self.topo.dram_route(node, channel, to_dram=True)
            return self.sequence([lambda: self.send_route(route, size, label),
                                  lambda: self._channel(channel, size, label)])
        route = self.topo.dram_route(node, channel, to_dram=False)
        return self.sequence([lambda: self._channel(channel, size, label),
                              lambda: self.send_route(route, size, label)])

    # -- collectives ----------------------------------------------------
    def _ring_steps(self, group: Sequence[NodeId], chunk: float, steps: int, label: str) -> Signal:
        p = len(group)

        def step() -> Signal:
            return self.parallel([
                (lambda i=i: self.transfer(group[i], group[(i + 1) % p], chunk, label)) for i in range(p)
            ])

        return self.sequence([step] * steps)

    def reduce_scatter(self, group: Sequence[NodeId], size: float, label: str = "rs") -> Signal:
        if len(group) < 2:
            return self._done()
        return self._ring_steps(group, size / len(group), len(group) - 1, label)

    def all_gather(self, group: Sequence[NodeId], size: float, label: str = "ag") -> Signal:
        if len(group) < 2:
            return self._done()
        return self._ring_steps(group, size / len(group), len(group) - 1, label)

    def all_reduce(self, group: Sequence[NodeId], size: float, label: str = "ar") -> Signal:
        """Ring reduce-scatter then all-gather; groups that cannot form a ring
        fall back to a chain reduce then broadcast unless configured otherwise."""
        group = list(group)
        if len(group) < 2:
            return self._done()
        if self.non_ring_allreduce == "reduce_broadcast" and not self.topo.is_ring(group):
            return self.sequence([lambda: self.reduce(group, size, label),
                                  lambda: self.broadcast(group, size, label)])
        return self.sequence([lambda: self.reduce_scatter(group, size, label),
                              lambda: self.all_gather(group, size, label)])

    def all_to_all(self, group: Sequence[NodeId], size: float, label: str = "a2a") -> Signal:
        p = len(group)
        if p < 2:
            return self._done()
        return self.parallel([
            (lambda a=a, b=b: self.transfer(a, b, size / p, label))
            for a in group for b in group if a != b
        ])

    def reduce(self, group: Sequence[NodeId], size: float, label: str = "reduce") -> Signal:
        """Chain accumulation from the last member toward ``group[0]``."""
        group = list(group)
        return self.sequence([
            (lambda i=i: self.transfer(group[i], group[i - 1], size, label))
            for i in range(len(group) - 1, 0, -1)
        ])

    def broadcast(self, group: Sequence[NodeId], size: float, label: str = "bcast") -> Signal:
        """Chain forwarding from ``group[0]`` outward."""
        group = list(group)
        return self.sequence([
            (lambda i=i: self.transfer(group[i], group[i + 1], size, label))
            for i in range(len(group) - 1)
        ])

    def collective(self, req: CollectiveRequest, label: str = "") -> Signal:
        fn = {
            CollectiveKind.ALL_REDUCE: self.all_reduce,
            CollectiveKind.REDUCE_SCATTER: self.reduce_scatter,
            CollectiveKind.ALL_GATHER: self.all_gather,
            CollectiveKind.ALL_TO_ALL: self.all_to_all,
            CollectiveKind.REDUCE: self.reduce,
            CollectiveKind.BROADCAST: self.broadcast,
        }[req.kind]
        return fn(req.group, req.size_bytes, label or req.kind.value)

    # -- inter-group ----------------------------------------------------
    def default_adapters(self, src: Sequence[NodeId], dst: Sequence[NodeId]) -> list[NodeId]:
        """Destination members at the minimum distance from the source group."""
        dist = {d: min(self.topo.hops(s, d) for s in src) for d in dst}
        best = min(dist.values())
        return [d for d in dst if dist[d] == best]

    def _subgroups(self, dst: Sequence[NodeId], adapters: Sequence[NodeId]) -> list[list[NodeId]]:
        """Each destination member joins its nearest adapter; chains are ordered by distance."""
        groups: list[list[NodeId]] = [[a] for a in adapters]
        for d in dst:
            if d in adapters:
                continue
            k = min(range(len(adapters)), key=lambda i: (self.topo.hops(adapters[i], d), i))
            groups[k].append(d)
        order = {d: n for n, d in enumerate(dst)}
        return [[g[0]] + sorted(g[1:], key=lambda d: (self.topo.hops(g[0], d), order[d])) for g in groups]

    def _scatter_to_dst(self, dst, adapters, size, label) -> Signal:
        subs = self._subgroups(dst, adapters)
        return self.parallel([(lambda g=g: self.broadcast(g, size, label)) for g in subs])

    def inter_group_transfer(self, src: Sequence[NodeId], dst: Sequence[NodeId], size: float,
                             strategy: str = "auto", adapters: Optional[Sequence[NodeId]] = None,
                             label: str = "pass") -> Signal:
        """Deliver a ``size``-byte tensor produced across ``src`` to every member of ``dst``.

        ``one``: all-reduce over the source group, send to each adapter, then
        broadcast inside the destination group. ``two``: reduce contiguous
        source segments onto one exit each, send exits to adapters, all-reduce
        over the adapters, then broadcast. ``auto`` picks ``one`` when the
        source group forms a ring.
        """
        src, dst = list(src), list(dst)
        if set(src) & set(dst):
            raise ValueError("source and destination groups must be disjoint")
        adapters = list(adapters) if adapters else self.default_adapters(src, dst)
        stray = [a for a in adapters if a not in dst]
        if stray:
            raise ValueError(f"adapter {stray[0]} is not a member of the destination group")
        if strategy == "auto":
            strategy = "one" if self.topo.is_ring(src) else "two"
        if strategy == "one":
            def sends() -> Signal:
                return self.parallel([
                    (lambda a=a: self.transfer(
                        min(src, key=lambda s: (self.topo.hops(s, a), src.index(s))), a, size, label))
                    for a in adapters
                ])
            return self.sequence([
                lambda: self.all_reduce(src, size, label),
                sends,
                lambda: self._scatter_to_dst(dst, adapters, size, label),
            ])
        if strategy != "two":
            raise ValueError(f"unknown inter-group strategy {strategy!r}")
        if len(adapters) > len(src):
            raise ValueError(f"strategy two needs at most {len(src)} adapters (got {len(adapters)})")
        segments = _contiguous_segments(src, len(adapters))
        chains = []
        for seg, a in zip(segments, adapters):
            head, tail = seg[0], seg[-1]
            exit_first = self.topo.hops(head, a) <= self.topo.hops(tail, a)
            chains.append(seg if exit_first else seg[::-1])

        def reduces() -> Signal:
            return self.parallel([(lambda c=c: self.reduce(c, size, label)) for c in chains])

        def sends() -> Signal:
            return self.parallel([
                (lambda c=c, a=a: self.transfer(c[0], a, size, label)) for c, a in zip(chains, adapters)
            ])

        return self.sequence([
            reduces,
            sends,
            lambda: self.all_reduce(adapters, size, label),
            lambda: self._scatter_to_dst(dst, adapters, size, label),
        ])


def _contiguous_segments(items: Sequence, parts: int) -> list[list]:
    """Split into ``parts`` contiguous runs, earlier runs one longer when uneven."""
    n = len(items)
    base, extra = divmod(n, parts)
    out, pos = [], 0
    for k in range(parts):
        size = base + (1 if k < extra else 0)
        out.append(list(items[pos:pos + size]))
        pos += size
    return out

