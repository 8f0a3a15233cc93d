"""
The application-facing surface: kernel calls, the control-area MMIO
protocol, data-area loads and stores, and the far-memory direct path.

An application is a deterministic actor (`host/<app>`). Its driver scripts
are SimPy generators; every script operation returns a SimPy event to
yield on, and every resumption is a logged `HostScriptStep`.

    def script(app, handle, image):
        yield from app.load_program(handle, image)
        yield from app.start(handle, [42])
        line = yield app.data_read(handle.slot_va(0))
"""

import itertools
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Any, Generator, Iterable

import simpy

from sim.address_space import HOST, MCC_DATA_BYTES, Access, BackingKind, Segment, Translation
from sim.control import (
    CMD_OFFSET,
    CONTROL_BYTES,
    FAULT_INFO_OFFSET,
    PARAM_OFFSET,
    STATUS_OFFSET,
    UPLOAD_BASE,
    Command,
    ControlStatus,
    DataArea,
)
from sim.engine import EventKind, SimEvent
from sim.errors import BadImage, BadLength, FaultKind, HostProtocolError, MccSimError, ReadTimeout
from sim.interconnect import HOST_ENDPOINT, LINE_SIZE, CacheLine, CoherenceMessage, MessageKind, Region, round_half_up
from sim.node import MccInstance
from sim.vm import MASK64, MAX_PARAMS, ChannelProgramImage

if TYPE_CHECKING:
    from sim.system import MccSystem

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScriptStep:
    app_id: str
    op: str
    token: int


@dataclass(frozen=True)
class MccHandle:
    mcc_id: int
    node_id: str
    control: Segment = field(repr=False)
    data: Segment = field(repr=False)

    def register_va(self, offset: int) -> int:
        return self.control.base_va + offset

    def slot_va(self, offset: int) -> int:
        return self.data.base_va + offset


@dataclass
class ScriptRun:
    """Bookkeeping for one spawned driver script."""
    name: str
    started_at: int = 0
    finished_at: int | None = None
    result: Any = None
    error: MccSimError | None = None

    @property
    def done(self) -> bool:
        return self.finished_at is not None


@dataclass
class _Waiter:
    op: str
    event: simpy.Event
    value: Any = None
    error: Exception | None = None


@dataclass
class _BlockedRead:
    token: int
    mcc_id: int
    offset: int
    watchdog: SimEvent | None = None


@dataclass(frozen=True)
class _Chunk:
    va: int
    length: int
    node_id: str
    offset: int


class HostApplication:
    def __init__(self, app_id: str, system: "MccSystem"):
        self.app_id = app_id
        self.actor_id = f"{HOST_ENDPOINT}/{app_id}"
        self.system = system
        self.engine = system.engine
        self.config = system.engine.config
        self.space = system.address_space(app_id)
        self.handles: dict[int, MccHandle] = {}
        self.access_log: list[tuple[int, bool]] = []
        self._areas: dict[int, DataArea] = {}
        self._status: dict[int, ControlStatus] = {}
        self._fault_info: dict[int, int] = {}
        self._done_waiters: dict[int, list[int]] = {}
        self._waiters: dict[int, _Waiter] = {}
        self._tokens = itertools.count(1)
        self._blocked: _BlockedRead | None = None
        self.engine.register(self.actor_id, self.handle)

    # ── kernel calls (immediate, outside simulated time) ─────────────────────

    def map_far(self, node_id: str, length: int, perms: Access = Access.RW) -> Segment:
        return self.space.map_far(node_id, length, perms)

    def map_host(self, length: int, perms: Access = Access.RW) -> Segment:
        return self.space.map_host(length, perms)

    def mcc_create(self, node_id: str, weight: int = 1) -> MccHandle:
        node = self.system.node(node_id)
        mcc_id = self.system.next_mcc_id()
        control, data = self.space.map_mcc(mcc_id, node_id)
        node.admit(MccInstance(mcc_id, self.app_id, node_id, self.space, weight))
        node.install_replica(self.space.sync_segments(node_id))
        handle = MccHandle(mcc_id, node_id, control, data)
        self.handles[mcc_id] = handle
        self._areas[mcc_id] = DataArea(MCC_DATA_BYTES)
        self._status[mcc_id] = ControlStatus.IDLE
        logger.info("%s: created mcc %d on %s", self.app_id, mcc_id, node_id)
        return handle

    def mcc_destroy(self, handle: MccHandle) -> None:
        self.system.node(handle.node_id).evict(handle.mcc_id)
        for segment in self.space.segments_of(handle.mcc_id):
            self.space.unmap(segment)
        self.handles.pop(handle.mcc_id, None)
        self._areas.pop(handle.mcc_id, None)
        self._status.pop(handle.mcc_id, None)

    def populate(self, va: int, payload: bytes) -> None:
        """Place data before the run, at no simulated cost."""
        translation = self.space.translate(va, Access.W, HOST, max(len(payload), 1))
        self.system.memory_for(translation.backing).write(translation.offset, payload)

    def inspect(self, va: int, length: int) -> bytes:
        """Read memory at no simulated cost; for verification only."""
        translation = self.space.translate(va, Access.R, HOST, max(length, 1))
        return self.system.memory_for(translation.backing).read(translation.offset, length)

    def cached_status(self, handle: MccHandle) -> ControlStatus:
        return self._status[handle.mcc_id]

    def cached_fault_info(self, handle: MccHandle) -> int:
        return self._fault_info.get(handle.mcc_id, 0)

    # ── scripts ──────────────────────────────────────────────────────────────

    def spawn(self, script: Generator, name: str | None = None) -> ScriptRun:
        run = ScriptRun(name or f"{self.app_id}-script", started_at=self.engine.now())
        token, start = self._wait("spawn")
        self._resume(token)
        self.engine.process(self._guard(run, start, script))
        return run

    def _guard(self, run: ScriptRun, start: simpy.Event, script: Generator):
        yield start
        try:
            run.result = yield from script
        except MccSimError as exc:
            run.error = exc
            logger.warning("%s: %s failed: %s", self.app_id, run.name, exc)
        finally:
            run.finished_at = self.engine.now()

    def _wait(self, op: str) -> tuple[int, simpy.Event]:
        token = next(self._tokens)
        event = self.engine.env.event()
        self._waiters[token] = _Waiter(op, event)
        return token, event

    def _resume(self, token: int, value: Any = None, error: Exception | None = None, at: int | None = None) -> None:
        waiter = self._waiters[token]
        waiter.value, waiter.error = value, error
        when = self.engine.now() if at is None else at
        self.engine.schedule(when, self.actor_id, EventKind.HOST_SCRIPT_STEP, ScriptStep(self.app_id, waiter.op, token))

    def _after(self, op: str, delay: int, value: Any = None) -> simpy.Event:
        token, event = self._wait(op)
        self._resume(token, value, at=self.engine.now() + delay)
        return event

    def handle(self, event: SimEvent) -> None:
        if event.kind is EventKind.HOST_SCRIPT_STEP:
            self._step(event.payload)
        elif event.kind is EventKind.MESSAGE_DELIVERY:
            self._message(event.payload)
        else:
            raise ValueError(f"{self.actor_id} cannot handle {event.kind.value}")

    def _step(self, step: ScriptStep) -> None:
        if step.op == "read_timeout":
            self._read_timeout(step.token)
            return
        waiter = self._waiters.pop(step.token, None)
        if waiter is None:
            return
        if waiter.error is not None:
            waiter.event.fail(waiter.error)
        else:
            waiter.event.succeed(waiter.value)

    # ── messages from nodes ──────────────────────────────────────────────────

    def _send(self, kind: MessageKind, line_addr: int, node_id: str, **fields) -> None:
        message = CoherenceMessage(kind, line_addr - line_addr % LINE_SIZE, self.actor_id, node_id,
                                   issued_at=self.engine.now(), **fields)
        self.system.interconnect.send(message)

    def _request(self, op: str, kind: MessageKind, line_addr: int, node_id: str, **fields) -> simpy.Event:
        token, event = self._wait(op)
        self._send(kind, line_addr, node_id, tag=token, **fields)
        return event

    def _message(self, message: CoherenceMessage) -> None:
        if message.tag:
            waiter = self._waiters.get(message.tag)
            if waiter is None:
                logger.warning("%s: unexpected response tag %d", self.app_id, message.tag)
                return
            if message.kind is MessageKind.ACK:
                code = FaultKind(message.value)
                if code is FaultKind.BAD_IMAGE:
                    self._resume(message.tag, error=BadImage(f"mcc {message.mcc_id} rejected the uploaded image"))
                else:
                    self._resume(message.tag, code if message.region is Region.CONTROL else None)
            elif message.region is Region.CONTROL:
                self._resume(message.tag, message.line.u64()[0])
            else:
                self._resume(message.tag, message.line)
        elif message.region is Region.CONTROL:
            self._status_pushed(message)
        elif message.region is Region.DATA:
            self._line_arrived(message)

    def _status_pushed(self, message: CoherenceMessage) -> None:
        status_value, fault_info = message.line.u64()[:2]
        if message.mcc_id not in self._status:
            return
        status = ControlStatus(status_value)
        self._status[message.mcc_id] = status
        self._fault_info[message.mcc_id] = fault_info
        for token in self._done_waiters.pop(message.mcc_id, []):
            self._resume(token, status)

    def _line_arrived(self, message: CoherenceMessage) -> None:
        area = self._areas.get(message.mcc_id)
        if area is None:
            return
        blocked = self._blocked
        if blocked is not None and (blocked.mcc_id, blocked.offset) == (message.mcc_id, message.offset):
            self._blocked = None
            if blocked.watchdog is not None:
                self.engine.cancel(blocked.watchdog)
            if message.stream:
                self._ack(message.mcc_id, message.offset)
            self._resume(blocked.token, message.line)
            return
        if area.deliver(message.offset, message.line, message.stream):
            self._ack(message.mcc_id, message.offset)

    def _ack(self, mcc_id: int, offset: int) -> None:
        """Return a stream credit for a consumed line."""
        handle = self.handles[mcc_id]
        self._send(MessageKind.ACK, handle.slot_va(offset), handle.node_id, region=Region.DATA,
                   mcc_id=mcc_id, offset=offset, stream=True)

    def _read_timeout(self, token: int) -> None:
        blocked = self._blocked
        if blocked is None or blocked.token != token:
            return
        self._blocked = None
        waiter = self._waiters.pop(token)
        logger.warning("%s: data read of mcc %d slot %d timed out", self.app_id, blocked.mcc_id, blocked.offset)
        waiter.event.fail(ReadTimeout(f"mcc {blocked.mcc_id} slot {blocked.offset}: no line within "
                                      f"{self.config.watchdog_ns} ns"))

    # ── address checks ───────────────────────────────────────────────────────

    def _translate(self, va: int, access: Access, kind: BackingKind, length: int = 1) -> Translation:
        translation = self.space.translate(va, access, HOST, length)
        if translation.backing.kind is not kind:
            raise HostProtocolError(f"0x{va:x} is {translation.backing.kind.value}, not {kind.value}")
        return translation

    def _register(self, va: int, access: Access) -> tuple[MccHandle, int]:
        translation = self._translate(va, access, BackingKind.MCC_CONTROL, 8)
        if translation.offset % 8:
            raise BadLength(f"control register access at 0x{va:x} is not 8-byte aligned")
        return self.handles[translation.backing.mcc_id], translation.offset

    def _slot(self, va: int, access: Access) -> tuple[MccHandle, int]:
        translation = self._translate(va, access, BackingKind.MCC_DATA, LINE_SIZE)
        if translation.offset % LINE_SIZE:
            raise BadLength(f"data-area access at 0x{va:x} is not line aligned")
        return self.handles[translation.backing.mcc_id], translation.offset

    def _far_chunks(self, va: int, length: int, access: Access) -> list[_Chunk]:
        """Translate the whole range up front, then split it at line boundaries."""
        if length < 0:
            raise BadLength("negative length")
        translation = self._translate(va, access, BackingKind.FAR_DIRECT, max(length, 1))
        chunks, start, end = [], va, va + length
        while start < end:
            stop = min(start - start % LINE_SIZE + LINE_SIZE, end)
            chunks.append(_Chunk(start, stop - start, translation.backing.node_id,
                                 translation.offset + (start - va)))
            start = stop
        return chunks

    # ── script operations ────────────────────────────────────────────────────

    def compute(self, ns: int) -> simpy.Event:
        if ns < 0:
            raise ValueError("compute time must be >= 0")
        return self._after("compute", ns)

    def mmio_write(self, va: int, value: int) -> simpy.Event:
        """Non-posted control-register store; the event yields the ACK code."""
        handle, offset = self._register(va, Access.W)
        line = CacheLine.from_u64([int(value) & MASK64])
        return self._request("mmio_write", MessageKind.STORE_REQ, va, handle.node_id, line=line,
                             region=Region.CONTROL, mcc_id=handle.mcc_id, offset=offset)

    def mmio_read(self, va: int) -> simpy.Event:
        handle, offset = self._register(va, Access.R)
        return self._request("mmio_read", MessageKind.LOAD_REQ, va, handle.node_id,
                             region=Region.CONTROL, mcc_id=handle.mcc_id, offset=offset)

    def data_write(self, va: int, line: CacheLine) -> simpy.Event:
        """Posted store of one line into the data area."""
        handle, offset = self._slot(va, Access.W)
        if self._areas[handle.mcc_id].host_write(offset, line):
            self._ack(handle.mcc_id, offset)
        self._send(MessageKind.STORE_REQ, va, handle.node_id, line=line, region=Region.DATA,
                   mcc_id=handle.mcc_id, offset=offset)
        return self._after("data_write", self.config.host_cache_hit_ns)

    def data_poll(self, va: int) -> simpy.Event:
        """Non-blocking read: yields the streamed line, or None."""
        handle, offset = self._slot(va, Access.R)
        slot = self._areas[handle.mcc_id].take(offset)
        if slot is not None and slot.streamed:
            self._ack(handle.mcc_id, offset)
        return self._after("data_poll", self.config.host_cache_hit_ns, slot.line if slot else None)

    def data_read(self, va: int) -> simpy.Event:
        """Blocking read: a cached CP line is a hit; otherwise ask the CP and
        stall until it answers or the watchdog expires."""
        handle, offset = self._slot(va, Access.R)
        if self._blocked is not None:
            raise HostProtocolError(f"{self.app_id} already has a blocking read outstanding")
        slot = self._areas[handle.mcc_id].take(offset)
        if slot is not None:
            if slot.streamed:
                self._ack(handle.mcc_id, offset)
            return self._after("data_read", self.config.host_cache_hit_ns, slot.line)
        token, event = self._wait("data_read")
        self._blocked = _BlockedRead(token, handle.mcc_id, offset)
        self._send(MessageKind.LOAD_REQ, va, handle.node_id, region=Region.DATA, mcc_id=handle.mcc_id, offset=offset)
        self._blocked.watchdog = self.engine.watch(self.engine.now() + self.config.watchdog_ns, self.actor_id,
                                                   EventKind.HOST_SCRIPT_STEP,
                                                   ScriptStep(self.app_id, "read_timeout", token))
        return event

    def far_read(self, va: int, length: int) -> simpy.Process:
        chunks = self._far_chunks(va, length, Access.R)
        return self.engine.process(self._far_read(chunks))

    def _far_read(self, chunks: list[_Chunk]):
        out = bytearray()
        for chunk in chunks:
            self.access_log.append((chunk.va, False))
            line = yield self._request("far_read", MessageKind.LOAD_REQ, chunk.va, chunk.node_id,
                                       region=Region.FAR, offset=chunk.offset, value=chunk.length)
            out += line.data[:chunk.length]
        return bytes(out)

    def far_write(self, va: int, payload: bytes) -> simpy.Process:
        chunks = self._far_chunks(va, len(payload), Access.W)
        return self.engine.process(self._far_write(va, chunks, payload))

    def _far_write(self, va: int, chunks: list[_Chunk], payload: bytes):
        for chunk in chunks:
            self.access_log.append((chunk.va, True))
            start = chunk.va - va
            line = CacheLine(payload[start:start + chunk.length].ljust(LINE_SIZE, b"\0"))
            yield self._request("far_write", MessageKind.STORE_REQ, chunk.va, chunk.node_id, line=line,
                                region=Region.FAR, offset=chunk.offset, value=chunk.length)

    def _local_cost(self, length: int) -> int:
        return self.config.host_dram_latency_ns + round_half_up(
            Fraction(length) / Fraction(self.config.host_dram_bandwidth_bytes_per_ns))

    def local_read(self, va: int, length: int) -> simpy.Event:
        translation = self._translate(va, Access.R, BackingKind.HOST_LOCAL, max(length, 1))
        data = self.system.host_memory.read(translation.offset, length)
        return self._after("local_read", self._local_cost(length), data)

    def local_write(self, va: int, payload: bytes) -> simpy.Event:
        translation = self._translate(va, Access.W, BackingKind.HOST_LOCAL, max(len(payload), 1))
        self.system.host_memory.write(translation.offset, payload)
        return self._after("local_write", self._local_cost(len(payload)))

    def wait_done(self, handle: MccHandle) -> simpy.Event:
        """Yields the final status once the node reports Halted or Faulted."""
        token, event = self._wait("wait_done")
        status = self._status[handle.mcc_id]
        if status.finished:
            self._resume(token, status)
        else:
            self._done_waiters.setdefault(handle.mcc_id, []).append(token)
        return event

    # ── lifecycle helpers (generators) ───────────────────────────────────────

    def load_program(self, handle: MccHandle, image: ChannelProgramImage | bytes):
        blob = image.to_bytes() if isinstance(image, ChannelProgramImage) else bytes(image)
        blob += bytes(-len(blob) % 8)
        window = CONTROL_BYTES - UPLOAD_BASE
        code = yield self.mmio_write(handle.register_va(CMD_OFFSET), Command.LOAD_BEGIN)
        if code is not FaultKind.NONE:
            raise HostProtocolError(f"LOAD_BEGIN rejected: {code.name}")
        for i in range(0, len(blob), 8):
            word = int.from_bytes(blob[i:i + 8], "little")
            code = yield self.mmio_write(handle.register_va(UPLOAD_BASE + i % window), word)
            if code is not FaultKind.NONE:
                raise BadImage(f"upload rejected at byte {i}: {code.name}")
        code = yield self.mmio_write(handle.register_va(CMD_OFFSET), Command.LOAD_COMMIT)
        if code is not FaultKind.NONE:
            raise HostProtocolError(f"LOAD_COMMIT rejected: {code.name}")
        self._status[handle.mcc_id] = ControlStatus.LOADED

    def start(self, handle: MccHandle, params: Iterable[int] = ()):
        params = list(params)
        if len(params) > MAX_PARAMS:
            raise HostProtocolError(f"{len(params)} parameters, at most {MAX_PARAMS}")
        writes = [self.mmio_write(handle.register_va(PARAM_OFFSET + 8 * i), value)
                  for i, value in enumerate(params)]
        if writes:
            codes = yield simpy.AllOf(self.engine.env, writes)
            rejected = [code for code in codes.values() if code is not FaultKind.NONE]
            if rejected:
                raise HostProtocolError(f"PARAM write rejected: {rejected[0].name}")
        code = yield self.mmio_write(handle.register_va(CMD_OFFSET), Command.START)
        if code is not FaultKind.NONE:
            raise HostProtocolError(f"START rejected: {code.name}")
        self._status[handle.mcc_id] = ControlStatus.RUNNING

    def stop(self, handle: MccHandle):
        code = yield self.mmio_write(handle.register_va(CMD_OFFSET), Command.STOP)
        if code is not FaultKind.NONE:
            raise HostProtocolError(f"STOP rejected: {code.name}")
        return (yield self.wait_done(handle))

    def reset(self, handle: MccHandle):
        yield self.mmio_write(handle.register_va(CMD_OFFSET), Command.RESET)
        self._status[handle.mcc_id] = ControlStatus.IDLE
        self._areas[handle.mcc_id] = DataArea(MCC_DATA_BYTES)

    def read_status(self, handle: MccHandle):
        status = yield self.mmio_read(handle.register_va(STATUS_OFFSET))
        fault_info = yield self.mmio_read(handle.register_va(FAULT_INFO_OFFSET))
        return ControlStatus(status), fault_info


__all__ = ["HostApplication", "MccHandle", "ScriptRun", "ScriptStep"]
