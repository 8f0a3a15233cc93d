"""
Far-memory nodes: DRAM, a fixed set of physical processors, and the run
queues that multiplex an unbounded number of MCC instances onto them.

Scheduling is cooperative. A processor takes the next Ready instance,
steps it for one quantum and schedules its next `DispatchQuantum` at
`now + cost`; the instance only goes back on the queue when that quantum
ends, so it never occupies two processors at once.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Mapping

from sim.address_space import (
    Access,
    AddressSpace,
    Backing,
    BackingKind,
    PhysicalMemory,
    Requester,
    SegmentReplica,
    Translation,
)
from sim.control import FAULT_INFO_OFFSET, STATUS_OFFSET, Command, ControlArea, ControlStatus
from sim.engine import Engine, EventKind, SimEvent
from sim.errors import AffinityMismatch, ConfigError, DuplicateMcc, FaultKind, UnknownMcc
from sim.interconnect import (
    HOST_ENDPOINT,
    LINE_SIZE,
    CacheLine,
    CoherenceMessage,
    Interconnect,
    MessageKind,
    Region,
    round_half_up,
    round_trip,
)
from sim.vm import ChannelProgramVm, CpEvent, CpEventKind, DmaEndpoint, ScratchRef, StepOutcome, VmStatus

logger = logging.getLogger(__name__)


class SchedulingPolicy(Enum):
    ROUND_ROBIN = "rr"
    WFQ = "wfq"


@dataclass(frozen=True)
class NodeConfig:
    node_id: str
    dram_bytes: int = 64 * 1024 * 1024
    num_physical_processors: int = 1
    policy: SchedulingPolicy = SchedulingPolicy.ROUND_ROBIN
    dram_latency_ns: int | None = None

    def __post_init__(self):
        if not self.node_id or self.node_id.startswith(HOST_ENDPOINT):
            raise ConfigError(f"invalid node id {self.node_id!r}")
        if self.num_physical_processors < 1:
            raise ConfigError(f"{self.node_id}: needs at least one processor")
        if self.dram_bytes <= 0 or self.dram_bytes % LINE_SIZE:
            raise ConfigError(f"{self.node_id}: dram_bytes must be positive and {LINE_SIZE}-aligned")
        if self.dram_latency_ns is not None and self.dram_latency_ns <= 0:
            raise ConfigError(f"{self.node_id}: dram_latency_ns must be > 0")

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "NodeConfig":
        known = {"id", "dram_bytes", "processors", "policy", "dram_latency_ns"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown node keys: {', '.join(sorted(unknown))}")
        if "id" not in raw:
            raise ConfigError("node entry without an id")
        try:
            policy = SchedulingPolicy(raw.get("policy", "rr"))
        except ValueError as exc:
            raise ConfigError(f"{raw['id']}: unknown policy {raw.get('policy')!r}") from exc
        return cls(str(raw["id"]), int(raw.get("dram_bytes", cls.dram_bytes)),
                   int(raw.get("processors", 1)), policy, raw.get("dram_latency_ns"))


# Event payloads. Their reprs go into the trace, so they stay short.

@dataclass(frozen=True)
class Quantum:
    node_id: str
    processor: int


@dataclass(frozen=True)
class MemoryDone:
    mcc_id: int
    generation: int
    tag: int
    value: int


@dataclass(frozen=True)
class DmaDone:
    mcc_id: int
    generation: int
    tag: int
    length: int
    dst: DmaEndpoint = field(repr=False)
    src: DmaEndpoint | None = field(repr=False)


@dataclass(frozen=True)
class AccessRecord:
    """One translation granted to an MCC; consumed by isolation audits."""
    mcc_id: int
    app_id: str
    va: int
    length: int
    access: Access
    backing: Backing
    offset: int


@dataclass(eq=False)
class MccInstance:
    mcc_id: int
    app_id: str
    affinity: str
    space: AddressSpace
    weight: int = 1
    control: ControlArea | None = None
    deficit: int = 0
    generation: int = 0
    on_cpu: bool = False
    queued: bool = False
    evicted: bool = False
    subscribed: bool = False
    faults: int = 0

    def __post_init__(self):
        if self.weight < 1:
            raise ValueError("weight must be >= 1")

    @property
    def vm(self) -> ChannelProgramVm | None:
        return self.control.vm if self.control is not None else None

    @property
    def status(self) -> ControlStatus:
        return self.control.status if self.control is not None else ControlStatus.IDLE

    @property
    def actor(self) -> str:
        return f"{self.affinity}/mcc{self.mcc_id}"


class InstancePort:
    """What one VM sees of its node: translation, memory and the link."""

    def __init__(self, node: "MccNode", instance: MccInstance):
        self.node = node
        self.instance = instance
        self.requester = Requester(instance.mcc_id, node.id)
        self.charge = 0

    def take_charge(self) -> int:
        charge, self.charge = self.charge, 0
        return charge

    def translate(self, va: int, access: Access, length: int) -> Translation:
        replica = self.node.replica_for(self.instance, self)
        translation = replica.translate(va, access, self.requester, length)
        if self.node.access_hooks:
            record = AccessRecord(self.instance.mcc_id, self.instance.app_id, va, length, access,
                                  translation.backing, translation.offset)
            for hook in self.node.access_hooks:
                hook(record)
        return translation

    def read(self, translation: Translation, length: int) -> bytes:
        return self.node.memory_for(translation.backing).read(translation.offset, length)

    def write(self, translation: Translation, payload: bytes) -> None:
        self.node.memory_for(translation.backing).write(translation.offset, payload)

    def issue_memory(self, tag: int, translation: Translation, nbytes: int, at: int, value: int) -> None:
        done = self.node.memory_done_at(translation.backing, nbytes, at)
        self.node.engine.schedule(done, self.node.id, EventKind.DRAM_COMPLETION,
                                  MemoryDone(self.instance.mcc_id, self.instance.generation, tag, value))

    def issue_dma(self, tag: int, dst: DmaEndpoint, src: DmaEndpoint | None, length: int, at: int) -> None:
        done = self.node.dma_done_at(dst, src, length, at)
        self.node.engine.schedule(done, self.node.id, EventKind.DMA_COMPLETION,
                                  DmaDone(self.instance.mcc_id, self.instance.generation, tag, length, dst, src))

    def send_line(self, offset: int, line: CacheLine, source: Translation | None, at: int, stream: bool) -> None:
        ready = at if source is None else self.node.memory_done_at(source.backing, LINE_SIZE, at)
        vm = self.instance.vm
        if stream and vm is not None:
            # the pushed line answers any outstanding host read of the slot
            for event in [e for e in vm.state.events
                          if e.kind is CpEventKind.HOST_READ and e.offset == offset]:
                vm.state.events.remove(event)
        message = CoherenceMessage(MessageKind.DATA_RESP, offset, self.node.id, f"{HOST_ENDPOINT}/{self.instance.app_id}",
                                   issued_at=ready, line=line, region=Region.DATA,
                                   mcc_id=self.instance.mcc_id, offset=offset, stream=stream)
        self.node.interconnect.send(message, at=ready)

    def subscribe(self) -> None:
        self.instance.subscribed = True


class MccNode:
    def __init__(self, config: NodeConfig, engine: Engine, interconnect: Interconnect,
                 dram: PhysicalMemory, memory_for: Callable[[Backing], PhysicalMemory]):
        self.config = config
        self.id = config.node_id
        self.engine = engine
        self.sim = engine.config
        self.interconnect = interconnect
        self.dram = dram
        self.memory_for = memory_for
        self.dram_latency_ns = config.dram_latency_ns or self.sim.node_dram_latency_ns
        self.instances: dict[int, MccInstance] = {}
        self.replicas: dict[str, SegmentReplica] = {}
        self.access_hooks: list[Callable[[AccessRecord], None]] = []
        self.executed = 0
        self.trace_dispatch = False
        self.dispatch_trace: list[tuple[int, int, int, int]] = []
        self._queue: deque[MccInstance] = deque()
        self._running: list[MccInstance | None] = [None] * config.num_physical_processors
        self._idle: list[int] = list(range(config.num_physical_processors))
        engine.register(self.id, self.handle)
        engine.add_deadlock_probe(self.deadlock_suspects)

    # ── admission ────────────────────────────────────────────────────────────

    def admit(self, instance: MccInstance) -> None:
        if instance.affinity != self.id:
            raise AffinityMismatch(f"mcc {instance.mcc_id} has affinity {instance.affinity}, not {self.id}")
        if instance.mcc_id in self.instances:
            raise DuplicateMcc(f"mcc {instance.mcc_id} already admitted on {self.id}")
        port = InstancePort(self, instance)
        instance.control = ControlArea(
            lambda image: ChannelProgramVm(image, port, self.sim, port.requester))
        self.instances[instance.mcc_id] = instance
        logger.info("%s: admitted mcc %d for %s", self.id, instance.mcc_id, instance.app_id)

    def evict(self, mcc_id: int) -> MccInstance:
        instance = self.instances.pop(mcc_id, None)
        if instance is None:
            raise UnknownMcc(f"mcc {mcc_id} is not on {self.id}")
        instance.evicted = True
        if instance.queued:
            self._queue.remove(instance)
            instance.queued = False
        logger.info("%s: evicted mcc %d", self.id, mcc_id)
        return instance

    def install_replica(self, replica: SegmentReplica) -> None:
        self.replicas[replica.app_id] = replica

    def replica_for(self, instance: MccInstance, port: InstancePort) -> SegmentReplica:
        """Current segment replica for the instance's app, re-synced from the
        host (one round trip, billed to the instance) when stale."""
        replica = self.replicas.get(instance.app_id)
        if replica is None or replica.is_stale(instance.space):
            replica = instance.space.sync_segments(self.id)
            self.replicas[instance.app_id] = replica
            port.charge += round_trip(self.interconnect.link_config, 0)
            logger.debug("%s: re-synced segments of %s at epoch %d", self.id, instance.app_id, replica.epoch)
        return replica

    # ── memory timing ────────────────────────────────────────────────────────

    def dram_access(self, offset: int, access: Access, length: int) -> int:
        """Completion time of a local DRAM access issued now."""
        self.dram.check(offset, length)
        return self._local_done(self.engine.now(), length)

    def _local_done(self, at: int, length: int) -> int:
        bulk = 0
        if length > LINE_SIZE:
            bulk = round_half_up(Fraction(length) / Fraction(self.sim.node_dram_bandwidth_bytes_per_ns))
        return at + self.dram_latency_ns + bulk

    def _is_local(self, endpoint: DmaEndpoint) -> bool:
        if isinstance(endpoint, ScratchRef):
            return True
        backing = endpoint.backing
        return backing.kind is BackingKind.FAR_DIRECT and backing.node_id == self.id

    def memory_done_at(self, backing: Backing, nbytes: int, at: int) -> int:
        if backing.kind is BackingKind.FAR_DIRECT and backing.node_id == self.id:
            return self._local_done(at, nbytes)
        service = (self.sim.host_dram_latency_ns if backing.kind is BackingKind.HOST_LOCAL
                   else self.sim.node_dram_latency_ns)
        return at + round_trip(self.interconnect.link_config, service)

    def dma_done_at(self, dst: DmaEndpoint, src: DmaEndpoint | None, length: int, at: int) -> int:
        if self._is_local(dst) and (src is None or self._is_local(src)):
            transfer = round_half_up(Fraction(length) / Fraction(self.sim.node_dram_bandwidth_bytes_per_ns))
            return at + max(self.dram_latency_ns, transfer)
        if self._is_local(dst):
            link = self.interconnect.link(self._endpoint_of(src), self.id)
        else:
            link = self.interconnect.link(self.id, self._endpoint_of(dst))
        departed = link.reserve(at, length)
        return max(at + link.config.one_way_latency_ns, departed)

    def _endpoint_of(self, endpoint: DmaEndpoint) -> str:
        backing = endpoint.backing
        return backing.node_id if backing.kind is BackingKind.FAR_DIRECT else HOST_ENDPOINT

    def _dma_bytes(self, instance: MccInstance, endpoint: DmaEndpoint, length: int) -> bytes:
        if isinstance(endpoint, ScratchRef):
            return bytes(instance.vm.state.scratch[endpoint.offset:endpoint.offset + length])
        return self.memory_for(endpoint.backing).read(endpoint.offset, length)

    def _dma_store(self, instance: MccInstance, endpoint: DmaEndpoint, payload: bytes) -> None:
        if isinstance(endpoint, ScratchRef):
            instance.vm.state.scratch[endpoint.offset:endpoint.offset + len(payload)] = payload
        else:
            self.memory_for(endpoint.backing).write(endpoint.offset, payload)

    # ── events ───────────────────────────────────────────────────────────────

    def handle(self, event: SimEvent) -> None:
        if event.kind is EventKind.DISPATCH_QUANTUM:
            self._quantum(event.payload.processor)
        elif event.kind is EventKind.MESSAGE_DELIVERY:
            self._message(event.payload)
        elif event.kind is EventKind.DRAM_COMPLETION:
            done: MemoryDone = event.payload
            instance = self._current(done.mcc_id, done.generation)
            if instance is not None:
                self.deliver(instance, CpEvent(CpEventKind.DRAM, event.at, tag=done.tag, value=done.value))
        elif event.kind is EventKind.DMA_COMPLETION:
            self._dma_complete(event.payload, event.at)
        else:
            raise ValueError(f"{self.id} cannot handle {event.kind.value}")

    def _current(self, mcc_id: int, generation: int) -> MccInstance | None:
        instance = self.instances.get(mcc_id)
        if instance is None or instance.vm is None or instance.generation != generation:
            return None
        return instance

    def _dma_complete(self, done: DmaDone, at: int) -> None:
        instance = self._current(done.mcc_id, done.generation)
        if instance is None:
            return
        payload = bytes(done.length) if done.src is None else self._dma_bytes(instance, done.src, done.length)
        self._dma_store(instance, done.dst, payload)
        self.deliver(instance, CpEvent(CpEventKind.DMA, at, tag=done.tag))

    def deliver(self, instance: MccInstance, event: CpEvent) -> None:
        vm = instance.vm
        if vm is None:
            return
        before = vm.status
        vm.deliver(event)
        after = vm.status
        if after is VmStatus.READY and before is not VmStatus.READY:
            self._make_ready(instance)
        elif after is VmStatus.FAULTED and before is not VmStatus.FAULTED:
            self._finished(instance, self.engine.now())

    # ── scheduling ───────────────────────────────────────────────────────────

    def _make_ready(self, instance: MccInstance) -> None:
        if instance.on_cpu or instance.queued or instance.evicted:
            return
        self._queue.append(instance)
        instance.queued = True
        self._kick()

    def _kick(self) -> None:
        now = self.engine.now()
        for _ in range(min(len(self._idle), len(self._queue))):
            processor = self._idle.pop(0)
            self.engine.schedule(now, self.id, EventKind.DISPATCH_QUANTUM, Quantum(self.id, processor))

    def _retire(self, instance: MccInstance) -> None:
        instance.on_cpu = False
        vm = instance.vm
        if instance.evicted or vm is None or vm.status is not VmStatus.READY:
            instance.deficit = 0
            return
        self._queue.append(instance)
        instance.queued = True

    def _quantum(self, processor: int) -> None:
        previous = self._running[processor]
        self._running[processor] = None
        if previous is not None:
            self._retire(previous)
        instance = None
        while self._queue:
            candidate = self._queue.popleft()
            candidate.queued = False
            vm = candidate.vm
            if vm is not None and vm.status is VmStatus.READY:
                instance = candidate
                break
        if instance is None:
            self._idle.append(processor)
            self._idle.sort()
            return
        if self.config.policy is SchedulingPolicy.WFQ:
            instance.deficit += instance.weight * self.sim.wfq_quantum
            budget = max(instance.deficit, 1)
        else:
            budget = self.sim.dispatch_step_budget
        now = self.engine.now()
        instance.on_cpu = True
        self._running[processor] = instance
        result = instance.vm.step(budget, now)
        self.executed += result.executed
        if self.config.policy is SchedulingPolicy.WFQ:
            instance.deficit -= result.cost
        if self.trace_dispatch:
            self.dispatch_trace.append((now, processor, instance.mcc_id, result.executed))
        logger.debug("%s/p%d: mcc %d ran %d instructions (%s)", self.id, processor, instance.mcc_id,
                     result.executed, result.outcome.value)
        end = now + max(result.cost, 1)
        if result.outcome in (StepOutcome.HALTED, StepOutcome.FAULTED):
            self._finished(instance, end)
        self.engine.schedule(end, self.id, EventKind.DISPATCH_QUANTUM, Quantum(self.id, processor))

    def _finished(self, instance: MccInstance, at: int) -> None:
        """Push the final STATUS/FAULT_INFO line to the owning application."""
        instance.subscribed = False
        status = instance.status
        if status is ControlStatus.FAULTED:
            instance.faults += 1
            logger.warning("%s: mcc %d faulted (%s)", self.id, instance.mcc_id,
                           instance.vm.state.fault.kind.name)
        else:
            logger.info("%s: mcc %d halted", self.id, instance.mcc_id)
        fault_info = instance.control.read(FAULT_INFO_OFFSET)
        message = CoherenceMessage(MessageKind.DATA_RESP, 0, self.id,
                                   f"{HOST_ENDPOINT}/{instance.app_id}", issued_at=at,
                                   line=CacheLine.from_u64([int(status), fault_info]),
                                   region=Region.CONTROL, mcc_id=instance.mcc_id, offset=STATUS_OFFSET)
        self.interconnect.send(message, at=at)

    def deadlock_suspects(self) -> list[str]:
        return [instance.actor for instance in self.instances.values()
                if instance.vm is not None and instance.vm.status is VmStatus.WAITING]

    def ready_count(self) -> int:
        return len(self._queue) + sum(1 for r in self._running if r is not None
                                      and r.vm is not None and r.vm.status is VmStatus.READY)

    # ── coherence messages ───────────────────────────────────────────────────

    def _reply(self, request: CoherenceMessage, kind: MessageKind, at: int, line: CacheLine | None = None,
               value: int = 0) -> None:
        message = CoherenceMessage(kind, request.line_addr, self.id, request.src, issued_at=at, line=line,
                                   region=request.region, mcc_id=request.mcc_id, offset=request.offset,
                                   value=value, tag=request.tag)
        self.interconnect.send(message, at=at)

    def _message(self, message: CoherenceMessage) -> None:
        if message.region is Region.FAR:
            self._serve_far(message)
            return
        instance = self.instances.get(message.mcc_id)
        if instance is None:
            logger.warning("%s: message for unknown mcc %s dropped", self.id, message.mcc_id)
            if message.region is Region.CONTROL:
                self._reply(message, MessageKind.ACK, self.engine.now(), value=int(FaultKind.UNMAPPED))
            return
        if message.region is Region.CONTROL:
            self._serve_control(instance, message)
        else:
            self._serve_data(instance, message)

    def _serve_far(self, message: CoherenceMessage) -> None:
        now = self.engine.now()
        if message.kind is MessageKind.LOAD_REQ:
            done = self.dram_access(message.offset, Access.R, message.value)
            data = self.dram.read(message.offset, message.value)
            self._reply(message, MessageKind.DATA_RESP, done, line=CacheLine(data.ljust(LINE_SIZE, b"\0")))
        elif message.kind is MessageKind.STORE_REQ:
            done = self.dram_access(message.offset, Access.W, message.value)
            self.dram.write(message.offset, message.line.data[:message.value])
            self._reply(message, MessageKind.ACK, done)
        else:
            raise ValueError(f"{self.id}: unexpected far {message.kind.value} at {now}")
        self.observe_tap(message)

    def _serve_control(self, instance: MccInstance, message: CoherenceMessage) -> None:
        now = self.engine.now()
        control = instance.control
        if message.kind is MessageKind.LOAD_REQ:
            value = control.read(message.offset)
            self._reply(message, MessageKind.DATA_RESP, now, line=CacheLine.from_u64([value]))
            return
        result = control.write(message.offset, message.line.u64()[0])
        if result.code is FaultKind.NONE:
            if result.command is Command.START:
                instance.generation += 1
                instance.subscribed = False
                self.deliver(instance, CpEvent(CpEventKind.START, now))
                logger.info("%s: mcc %d started", self.id, instance.mcc_id)
            elif result.command is Command.STOP:
                self.deliver(instance, CpEvent(CpEventKind.STOP, now))
            elif result.command is Command.RESET:
                instance.generation += 1
                instance.subscribed = False
                instance.deficit = 0
                if instance.queued:
                    self._queue.remove(instance)
                    instance.queued = False
        self._reply(message, MessageKind.ACK, now, value=int(result.code))

    def _serve_data(self, instance: MccInstance, message: CoherenceMessage) -> None:
        now = self.engine.now()
        if message.kind is MessageKind.STORE_REQ:
            event = CpEvent(CpEventKind.HOST_WRITE, now, offset=message.offset, line=message.line)
        elif message.kind is MessageKind.LOAD_REQ:
            event = CpEvent(CpEventKind.HOST_READ, now, offset=message.offset)
        elif message.kind is MessageKind.ACK:
            event = CpEvent(CpEventKind.CREDIT, now, offset=message.offset)
        else:
            raise ValueError(f"{self.id}: unexpected data-area {message.kind.value}")
        self.deliver(instance, event)

    def observe_tap(self, message: CoherenceMessage) -> int:
        """Fan a host access out to subscribed instances of the same app."""
        app_id = message.src.partition("/")[2]
        value = message.line_addr | (1 if message.kind is MessageKind.STORE_REQ else 0)
        delivered = 0
        for instance in list(self.instances.values()):
            if instance.subscribed and instance.app_id == app_id:
                self.deliver(instance, CpEvent(CpEventKind.OBSERVE, self.engine.now(), value=value))
                delivered += 1
        return delivered

    # ── reporting ────────────────────────────────────────────────────────────

    def stats(self, instance: MccInstance) -> dict[str, Any]:
        vm = instance.vm
        state = vm.state if vm is not None else None
        return {
            "mcc_id": instance.mcc_id,
            "app_id": instance.app_id,
            "node_id": self.id,
            "status": instance.status.name.capitalize(),
            "instructions": state.instructions if state else 0,
            "dram_bytes": state.dram_bytes if state else 0,
            "stream_lines": state.stream_lines if state else 0,
            "reply_lines": state.reply_lines if state else 0,
            "dma_bytes": state.dma_bytes if state else 0,
            "faults": instance.faults,
        }

