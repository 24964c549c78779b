"""Deterministic discrete-event simulation kernel.

Time is kept as integer nanoseconds so the clock never drifts. Processes are
Python generators that yield :class:`Signal` objects; resources are exclusive
tokens with FIFO wait queues, and a single claim may cover several resources
at once (all-or-nothing), which is how multi-link NoC paths are reserved.

Every dequeued event, grant and release is folded into a running SHA-256 so
two runs can be compared by trace hash alone.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Generator, Iterable, Optional

NS_PER_S = 1_000_000_000


def to_ns(seconds: float) -> int:
    """Round a duration in seconds to the 1 ns clock quantum."""
    if seconds < 0 or math.isnan(seconds):
        raise ValueError(f"negative or NaN duration: {seconds!r}")
    return int(round(seconds * NS_PER_S))


def to_seconds(ns: int) -> float:
    return ns / NS_PER_S


class EventKind(Enum):
    COMPUTE = "Compute"
    TRANSFER = "Transfer"
    DRAM_ACCESS = "DramAccess"
    MESSAGE = "Message"
    RESOURCE_GRANT = "ResourceGrant"


class SimulationError(RuntimeError):
    pass


class SchedulingError(SimulationError):
    """Raised when an event is scheduled in the past (a scheduler bug)."""


class DeadlockError(SimulationError):
    def __init__(self, message: str, processes: list[str]):
        super().__init__(message)
        self.processes = processes


@dataclass(frozen=True)
class TraceRecord:
    time: int
    kind: str
    resource: str
    process: str

    def to_line(self) -> str:
        return json.dumps(
            {"time": self.time, "kind": self.kind, "resource": self.resource, "process": self.process},
            separators=(",", ":"),
        )


class EventHandle:
    __slots__ = ("fire_at", "seq", "kind", "payload", "cancelled")

    def __init__(self, fire_at: int, seq: int, kind: EventKind, payload: Any):
        self.fire_at = fire_at
        self.seq = seq
        self.kind = kind
        self.payload = payload
        self.cancelled = False

    def __lt__(self, other: "EventHandle") -> bool:
        return (self.fire_at, self.seq) < (other.fire_at, other.seq)


class Signal:
    """A one-shot occurrence that processes and callbacks can wait on."""

    __slots__ = ("sim", "kind", "label", "callbacks", "triggered", "processed", "value")

    def __init__(self, sim: "Simulator", kind: EventKind = EventKind.MESSAGE, label: str = ""):
        self.sim = sim
        self.kind = kind
        self.label = label
        self.callbacks: list[Callable[["Signal"], None]] = []
        self.triggered = False
        self.processed = False
        self.value: Any = None

    def succeed(self, value: Any = None, delay: int = 0) -> "Signal":
        if self.triggered:
            raise SimulationError(f"signal {self.label!r} triggered twice")
        self.triggered = True
        self.value = value
        self.sim.schedule(self.sim.now + delay, self.kind, self)
        return self

    def then(self, fn: Callable[["Signal"], None]) -> "Signal":
        if self.processed:
            # keep callback ordering inside the event queue
            relay = Signal(self.sim, EventKind.MESSAGE, self.label)
            relay.callbacks.append(lambda _s: fn(self))
            relay.succeed(self.value)
        else:
            self.callbacks.append(fn)
        return self

    def _fire(self) -> None:
        self.processed = True
        callbacks, self.callbacks = self.callbacks, []
        for fn in callbacks:
            fn(self)


class Process(Signal):
    """Generator-driven process; the signal fires when the generator returns."""

    __slots__ = ("name", "_gen", "_waiting_on")

    def __init__(self, sim: "Simulator", gen: Generator, name: str):
        super().__init__(sim, EventKind.MESSAGE, name)
        self.name = name
        self._gen = gen
        self._waiting_on: Optional[Signal] = None

    @property
    def alive(self) -> bool:
        return not self.triggered

    def _resume(self, signal: Optional[Signal]) -> None:
        self._waiting_on = None
        self.sim._active = self
        try:
            target = self._gen.send(None if signal is None else signal.value)
        except StopIteration as stop:
            self.sim._active = None
            self.sim._live -= 1
            self.succeed(stop.value)
            return
        finally:
            self.sim._active = None
        if not isinstance(target, Signal):
            raise SimulationError(f"process {self.name!r} yielded {target!r}, expected a Signal")
        self._waiting_on = target
        target.then(self._resume)


class Resource:
    """Exclusive token: at most one holder, FIFO wait queue of claims."""

    __slots__ = ("resource_id", "holder", "queue", "busy_ns", "_since", "grants")

    def __init__(self, resource_id: str):
        self.resource_id = resource_id
        self.holder: Optional[Claim] = None
        self.queue: deque[Claim] = deque()
        self.busy_ns = 0
        self._since = 0
        self.grants = 0


class Claim(Signal):
    """Atomic request for a set of resources; fires with the grant time."""

    __slots__ = ("resources", "owner", "seq", "granted_at", "released")

    def __init__(self, sim: "Simulator", resources: tuple[Resource, ...], owner: str, seq: int):
        super().__init__(sim, EventKind.RESOURCE_GRANT, owner)
        self.resources = resources
        self.owner = owner
        self.seq = seq
        self.granted_at: Optional[int] = None
        self.released = False


class Simulator:
    """Event queue, clock, resource registry and trace."""

    def __init__(self, keep_trace: bool = False):
        self.now = 0
        self._queue: list[EventHandle] = []
        self._seq = 0
        self._claim_seq = 0
        self._active: Optional[Process] = None
        self._live = 0
        self.peak_live = 0
        self.processes: list[Process] = []
        self.resources: dict[str, Resource] = {}
        self._pending_claims: dict[str, list[Claim]] = {}
        self._hash = hashlib.sha256()
        self.keep_trace = keep_trace
        self.trace: list[TraceRecord] = []
        self.events_processed = 0

    # -- scheduling -----------------------------------------------------
    def schedule(self, fire_at: int, kind: EventKind, payload: Any) -> EventHandle:
        if fire_at < self.now:
            raise SchedulingError(f"event at t={fire_at} scheduled when clock is at t={self.now}")
        handle = EventHandle(int(fire_at), self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._queue, handle)
        return handle

    def cancel(self, handle: EventHandle) -> None:
        handle.cancelled = True

    @property
    def active_process(self) -> Optional[Process]:
        return self._active

    def signal(self, kind: EventKind = EventKind.MESSAGE, label: str = "") -> Signal:
        return Signal(self, kind, label)

    def timeout(self, delay: int, kind: EventKind = EventKind.COMPUTE, label: str = "") -> Signal:
        if delay < 0:
            raise SchedulingError(f"negative delay {delay}")
        return self._timeout_at(self.now + int(delay), kind, label)

    def _timeout_at(self, fire_at: int, kind: EventKind, label: str) -> Signal:
        sig = Signal(self, kind, label)
        sig.triggered = True
        sig.value = fire_at
        self.schedule(fire_at, kind, sig)
        return sig

    def all_of(self, signals: Iterable[Signal], label: str = "") -> Signal:
        signals = list(signals)
        done = Signal(self, EventKind.MESSAGE, label)
        if not signals:
            return done.succeed([])
        remaining = [len(signals)]

        def _one(_s: Signal) -> None:
            remaining[0] -= 1
            if remaining[0] == 0:
                done.succeed([s.value for s in signals])

        for s in signals:
            s.then(_one)
        return done

    def process(self, gen: Generator, name: str) -> Process:
        proc = Process(self, gen, name)
        self.processes.append(proc)
        self._live += 1
        self.peak_live = max(self.peak_live, self._live)
        start = Signal(self, EventKind.MESSAGE, name)
        start.callbacks.append(lambda _s: proc._resume(None))
        start.succeed()
        return proc

    # -- resources ------------------------------------------------------
    def resource(self, resource_id: str) -> Resource:
        res = self.resources.get(resource_id)
        if res is None:
            res = self.resources[resource_id] = Resource(resource_id)
        return res

    def acquire(self, resources: Iterable[Resource] | Resource, owner: Optional[str] = None) -> Claim:
        """Request all ``resources`` atomically; the claim fires at grant time."""
        if isinstance(resources, Resource):
            resources = (resources,)
        resources = tuple(resources)
        if owner is None:
            if self._active is None:
                raise SimulationError("acquire outside a process needs an explicit owner")
            owner = self._active.name
        if len({r.resource_id for r in resources}) != len(resources):
            raise SimulationError(f"{owner} claims the same resource twice")
        for res in resources:
            if res.holder is not None and res.holder.owner == owner:
                raise SimulationError(f"re-entrant acquire of {res.resource_id} by {owner}")
            if any(c.owner == owner for c in res.queue):
                raise SimulationError(f"re-entrant acquire of {res.resource_id} by {owner}")
        claim = Claim(self, resources, owner, self._claim_seq)
        self._claim_seq += 1
        for res in resources:
            res.queue.append(claim)
        self._try_grant(claim)
        return claim

    def release(self, claim: Claim) -> None:
        if claim.granted_at is None or claim.released:
            raise SimulationError(f"release of a claim not held by {claim.owner}")
        claim.released = True
        candidates: dict[int, Claim] = {}
        for res in claim.resources:
            res.holder = None
            res.busy_ns += self.now - res._since
            self._record("Release", res.resource_id, claim.owner)
            if res.queue:
                head = res.queue[0]
                candidates[head.seq] = head
        for seq in sorted(candidates):
            self._try_grant(candidates[seq])

    def _try_grant(self, claim: Claim) -> None:
        for res in claim.resources:
            if res.holder is not None or res.queue[0] is not claim:
                return
        claim.granted_at = self.now
        for res in claim.resources:
            res.queue.popleft()
            res.holder = claim
            res._since = self.now
            res.grants += 1
            self._record("ResourceGrant", res.resource_id, claim.owner)
        claim.succeed(self.now)

    def hold(self, resources: Iterable[Resource], duration: int, owner: str,
             kind: EventKind = EventKind.TRANSFER) -> Signal:
        """Claim ``resources``, keep them for ``duration`` ns, release; fires at release time."""
        done = Signal(self, kind, owner)
        claim = self.acquire(resources, owner)

        def _granted(_c: Signal) -> None:
            def _finish(_t: Signal) -> None:
                self.release(claim)
                done.succeed(self.now)
            self._timeout_at(self.now + duration, kind, owner).then(_finish)

        claim.then(_granted)
        return done

    # -- running --------------------------------------------------------
    def _record(self, kind: str, resource: str, process: str) -> None:
        rec = TraceRecord(self.now, kind, resource, process)
        self._hash.update(f"{rec.time}|{kind}|{resource}|{process}\n".encode())
        if self.keep_trace:
            self.trace.append(rec)

    def run_until_idle(self) -> int:
        """Process events in (fire_at, seq) order until the queue drains."""
        queue = self._queue
        while queue:
            handle = heapq.heappop(queue)
            if handle.cancelled:
                continue
            self.now = handle.fire_at
            self.events_processed += 1
            payload = handle.payload
            if isinstance(payload, Signal):
                if payload.label:
                    self._record(handle.kind.value, "", payload.label)
                payload._fire()
            elif callable(payload):
                payload()
        self._check_deadlock()
        return self.now

    def _check_deadlock(self) -> None:
        blocked = [p for p in self.processes if p.alive]
        waiting_claims = [c for r in self.resources.values() for c in r.queue]
        if not blocked and not waiting_claims:
            return
        # wait-for graph: owner -> holders of resources it is queued on
        edges: dict[str, list[str]] = {}
        for res in self.resources.values():
            for c in res.queue:
                if res.holder is not None:
                    edges.setdefault(c.owner, []).append(res.holder.owner)
        cycle = _find_cycle(edges)
        if cycle:
            raise DeadlockError(f"deadlock: circular wait among {' -> '.join(cycle)}", cycle)
        names = sorted({p.name for p in blocked} | {c.owner for c in waiting_claims})
        raise DeadlockError(f"deadlock: blocked with empty event queue: {', '.join(names)}", names)

    @property
    def trace_hash(self) -> str:
        return self._hash.hexdigest()

    def export_trace(self) -> str:
        """Newline-delimited JSON records (time, kind, resource, process)."""
        return "".join(r.to_line() + "\n" for r in self.trace)


def _find_cycle(edges: dict[str, list[str]]) -> list[str]:
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(node: str) -> Optional[list[str]]:
        color[node] = 1
        stack.append(node)
        for nxt in sorted(set(edges.get(node, ()))):
            if color.get(nxt) == 1:
                return stack[stack.index(nxt):]
            if color.get(nxt) is None:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        color[node] = 2
        return None

    for start in sorted(edges):
        if start not in color:
            found = visit(start)
            if found:
                return list(found)
    return []
