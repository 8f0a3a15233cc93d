"""
Deterministic discrete-event engine.

The clock and the event heap belong to a `simpy.Environment`; every
`SimEvent` is a SimPy timeout whose callback hands the record to the
actor registered under `SimEvent.target`. SimPy orders equal timestamps
by insertion, which is exactly our global `seq` order.

Timers that are likely to be cancelled (host watchdogs) are registered
with `watch()` instead of `schedule()`: they stay in a side heap and are
only materialized into the SimPy queue when the clock would otherwise
pass them, so a cancelled watchdog never drags the clock forward.
"""

import dataclasses
import hashlib
import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping

import numpy as np
import simpy

from sim.errors import ConfigError, SchedulingInPast, UnknownActor

logger = logging.getLogger(__name__)

# SimTime never wraps within a run.
MAX_TIME = 2 ** 63 - 1


@dataclass(frozen=True)
class SimConfig:
    """Simulator-wide parameters. Latencies in ns, bandwidths in bytes/ns."""

    seed: int = 0
    far_base_latency_ns: int = 250
    per_hop_latency_ns: int = 300
    hops: int = 0
    far_bandwidth_bytes_per_ns: float = 52.0
    node_dram_latency_ns: int = 80
    node_dram_bandwidth_bytes_per_ns: float = 64.0
    host_dram_latency_ns: int = 100
    host_dram_bandwidth_bytes_per_ns: float = 100.0
    host_cache_hit_ns: int = 1
    dispatch_step_budget: int = 256
    watchdog_ns: int = 1_000_000
    stream_credits: int = 8
    event_queue_bound: int = 1024
    wfq_quantum: int = 256
    dram_access_cost: int = 4
    link_access_cost: int = 4
    strict_affinity: bool = True

    def __post_init__(self):
        for name in ("far_base_latency_ns", "per_hop_latency_ns", "node_dram_latency_ns",
                     "host_dram_latency_ns"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("far_bandwidth_bytes_per_ns", "node_dram_bandwidth_bytes_per_ns",
                     "host_dram_bandwidth_bytes_per_ns"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.dispatch_step_budget < 1:
            raise ConfigError("dispatch_step_budget must be >= 1")
        if self.hops < 0:
            raise ConfigError("hops must be >= 0")
        if self.watchdog_ns <= 0:
            raise ConfigError("watchdog_ns must be > 0")
        if not 1 <= self.stream_credits <= 255:
            raise ConfigError("stream_credits must be in [1, 255]")
        if self.event_queue_bound < 1 or self.wfq_quantum < 1:
            raise ConfigError("event_queue_bound and wfq_quantum must be >= 1")
        if self.host_cache_hit_ns < 0 or self.dram_access_cost < 0 or self.link_access_cost < 0:
            raise ConfigError("costs must be >= 0")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "SimConfig":
        """Return a copy with `overrides` applied; string values are coerced
        to the field's type and unknown keys are rejected."""
        known = {f.name: f for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw, type(getattr(self, key)))
        return dataclasses.replace(self, **changes)


def _coerce(key: str, raw: Any, kind: type) -> Any:
    if not isinstance(raw, str):
        if kind is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if kind is not bool and isinstance(raw, bool):
            raise ConfigError(f"{key}: expected {kind.__name__}, got bool")
        if not isinstance(raw, kind):
            raise ConfigError(f"{key}: expected {kind.__name__}, got {type(raw).__name__}")
        return raw
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in {"1", "true", "yes", "on"}:
                return True
            if lowered in {"0", "false", "no", "off"}:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text.replace("_", ""), 0)
        if kind is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc
    return text


class EventKind(Enum):
    MESSAGE_DELIVERY = "MessageDelivery"
    DRAM_COMPLETION = "DramCompletion"
    DMA_COMPLETION = "DmaCompletion"
    DISPATCH_QUANTUM = "DispatchQuantum"
    HOST_SCRIPT_STEP = "HostScriptStep"


class RunOutcome(Enum):
    QUIESCENT = "Quiescent"
    LIMIT_REACHED = "LimitReached"
    DEADLOCK = "Deadlock"


@dataclass(eq=False)
class SimEvent:
    """One timestamped occurrence; also the handle returned by `schedule`."""

    at: int
    seq: int
    target: str
    kind: EventKind
    payload: Any = None
    cancelled: bool = False
    processed: bool = False

    def describe(self) -> str:
        return f"{self.at} {self.seq} {self.target} {self.kind.value} {self.payload!r}"


@dataclass(order=True)
class _Watch:
    at: int
    order: int
    event: SimEvent = field(compare=False)


Handler = Callable[[SimEvent], None]
DeadlockProbe = Callable[[], Iterable[str]]


class Engine:
    """Single-threaded event engine; all simulator state is confined to it."""

    def __init__(self, config: SimConfig | None = None, keep_log: bool = True):
        self.config = config or SimConfig()
        self.env = simpy.Environment()
        self.rng = np.random.default_rng(self.config.seed)
        self.keep_log = keep_log
        self.log: list[str] = []
        self.deadlock_suspects: list[str] = []
        self.processed_count = 0
        self.last_event_at = 0
        self._seq = itertools.count()
        self._watch_order = itertools.count()
        self._watches: list[_Watch] = []
        self._actors: dict[str, Handler] = {}
        self._probes: list[DeadlockProbe] = []
        self._hasher = hashlib.blake2b(digest_size=8)
        self._pending = 0

    # ── actors ───────────────────────────────────────────────────────────────

    def register(self, actor_id: str, handler: Handler) -> None:
        if actor_id in self._actors:
            raise ValueError(f"actor {actor_id!r} already registered")
        self._actors[actor_id] = handler

    def unregister(self, actor_id: str) -> None:
        self._actors.pop(actor_id, None)

    def add_deadlock_probe(self, probe: DeadlockProbe) -> None:
        """`probe()` returns identifiers of blocked instances; consulted when
        the event queue runs dry."""
        self._probes.append(probe)

    # ── clock and scheduling ─────────────────────────────────────────────────

    def now(self) -> int:
        return int(self.env.now)

    @property
    def pending(self) -> int:
        """Scheduled events neither processed nor cancelled."""
        return self._pending

    def schedule(self, at: int, target: str, kind: EventKind, payload: Any = None) -> SimEvent:
        now = self.now()
        if at < now:
            raise SchedulingInPast(f"cannot schedule {kind.value} at {at} (now={now})")
        if at > MAX_TIME:
            raise SchedulingInPast(f"time {at} beyond the simulated-time cap")
        event = SimEvent(at=int(at), seq=-1, target=target, kind=kind, payload=payload)
        self._enqueue(event)
        self._pending += 1
        return event

    def schedule_in(self, delay: int, target: str, kind: EventKind, payload: Any = None) -> SimEvent:
        return self.schedule(self.now() + delay, target, kind, payload)

    def watch(self, at: int, target: str, kind: EventKind, payload: Any = None) -> SimEvent:
        """Like `schedule`, for timers that are usually cancelled before they fire."""
        if at < self.now():
            raise SchedulingInPast(f"cannot watch {kind.value} at {at} (now={self.now()})")
        event = SimEvent(at=int(at), seq=-1, target=target, kind=kind, payload=payload)
        heapq.heappush(self._watches, _Watch(event.at, next(self._watch_order), event))
        self._pending += 1
        return event

    def cancel(self, event: SimEvent) -> bool:
        if event.cancelled or event.processed:
            return False
        event.cancelled = True
        self._pending -= 1
        return True

    def _enqueue(self, event: SimEvent) -> None:
        event.seq = next(self._seq)
        timer = self.env.timeout(event.at - self.now(), value=event)
        timer.callbacks.append(self._fire)

    def _fire(self, timer: simpy.events.Timeout) -> None:
        event: SimEvent = timer.value
        if event.cancelled:
            return
        handler = self._actors.get(event.target)
        if handler is None:
            raise UnknownActor(f"no actor registered as {event.target!r}")
        event.processed = True
        self._pending -= 1
        self.processed_count += 1
        self.last_event_at = event.at
        line = event.describe()
        self._hasher.update(line.encode())
        self._hasher.update(b"\n")
        if self.keep_log:
            self.log.append(line)
        logger.debug("%s", line)
        handler(event)

    # ── running ──────────────────────────────────────────────────────────────

    def _peek_watch(self) -> _Watch | None:
        while self._watches and self._watches[0].event.cancelled:
            heapq.heappop(self._watches)
        return self._watches[0] if self._watches else None

    def run_until(self, limit: int = MAX_TIME) -> RunOutcome:
        """Process events in (at, seq) order until the queue empties or the
        next event lies beyond `limit`."""
        while True:
            upcoming = self.env.peek()
            watch = self._peek_watch()
            if watch is not None and watch.at <= upcoming:
                if watch.at > limit:
                    return RunOutcome.LIMIT_REACHED
                heapq.heappop(self._watches)
                self._enqueue(watch.event)
                continue
            if upcoming == math.inf:
                self.deadlock_suspects = sorted(s for probe in self._probes for s in probe())
                if self.deadlock_suspects:
                    logger.warning("deadlock at t=%d: %s", self.now(), ", ".join(self.deadlock_suspects))
                    return RunOutcome.DEADLOCK
                return RunOutcome.QUIESCENT
            if upcoming > limit:
                return RunOutcome.LIMIT_REACHED
            self.env.step()

    def process(self, generator) -> simpy.Process:
        """Start a SimPy process (used for host driver scripts)."""
        return self.env.process(generator)

    def trace_hash(self) -> str:
        """64-bit digest of the processed-event log, as 16 hex digits."""
        return self._hasher.copy().hexdigest()
