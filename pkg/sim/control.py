"""
Control-area register file and data-area mailbox.

Control area, 4 KiB, all registers u64 little-endian:

    0x000  CMD         0 NOP, 1 LOAD_BEGIN, 2 LOAD_COMMIT, 3 START, 4 STOP, 5 RESET
    0x008  STATUS      0 Idle, 1 Loaded, 2 Running, 3 Halted, 4 Faulted, 5 Waiting
    0x010  FAULT_INFO  kind | pc << 16 | va << 32
    0x018  PARAM[8]
    0x100  program upload window; every write appends its 8 bytes

The register file lives on the node next to the MCC it configures. The
data-area mailbox lives on the host: it is the host's view of the lines the
channel program pushed into its cache.
"""

import logging
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable

from sim.errors import BadImage, FaultKind
from sim.interconnect import LINE_SIZE, CacheLine
from sim.vm import HEADER, MAX_CODE_BYTES, MAX_PARAMS, ChannelProgramImage, ChannelProgramVm, VmStatus

logger = logging.getLogger(__name__)

CMD_OFFSET = 0x000
STATUS_OFFSET = 0x008
FAULT_INFO_OFFSET = 0x010
PARAM_OFFSET = 0x018
UPLOAD_BASE = 0x100
CONTROL_BYTES = 0x1000
MAX_UPLOAD_BYTES = HEADER.size + MAX_CODE_BYTES + 8

_U64 = struct.Struct("<Q")


class Command(IntEnum):
    NOP = 0
    LOAD_BEGIN = 1
    LOAD_COMMIT = 2
    START = 3
    STOP = 4
    RESET = 5


class ControlStatus(IntEnum):
    IDLE = 0
    LOADED = 1
    RUNNING = 2
    HALTED = 3
    FAULTED = 4
    WAITING = 5

    @property
    def finished(self) -> bool:
        return self in (ControlStatus.HALTED, ControlStatus.FAULTED)


_FROM_VM = {
    VmStatus.IDLE: ControlStatus.LOADED,
    VmStatus.READY: ControlStatus.RUNNING,
    VmStatus.RUNNING: ControlStatus.RUNNING,
    VmStatus.WAITING: ControlStatus.WAITING,
    VmStatus.HALTED: ControlStatus.HALTED,
    VmStatus.FAULTED: ControlStatus.FAULTED,
}


def decode_upload(blob: bytes) -> ChannelProgramImage:
    """Parse an uploaded image; uploads are padded to whole u64 writes."""
    if len(blob) < HEADER.size:
        raise BadImage(f"truncated header: {len(blob)} of {HEADER.size} bytes")
    code_len = HEADER.unpack_from(blob)[-1]
    end = HEADER.size + code_len
    if len(blob) < end:
        raise BadImage(f"truncated code: {len(blob) - HEADER.size} of {code_len} bytes")
    if len(blob) - end >= 8 or any(blob[end:]):
        raise BadImage("trailing bytes after the code")
    return ChannelProgramImage.from_bytes(blob[:end])


@dataclass(frozen=True)
class ControlWrite:
    """Outcome of one MMIO write: the ACK code and the command it ran."""
    code: FaultKind
    command: Command | None = None


class ControlArea:
    """MMIO register file of one MCC; drives its lifecycle."""

    def __init__(self, make_vm: Callable[[ChannelProgramImage], ChannelProgramVm]):
        self._make_vm = make_vm
        self.image: ChannelProgramImage | None = None
        self.vm: ChannelProgramVm | None = None
        self.params = [0] * MAX_PARAMS
        self.fault_info = 0
        self.upload = bytearray()
        self.loading = False

    @property
    def status(self) -> ControlStatus:
        if self.vm is None:
            return ControlStatus.LOADED if self.image is not None else ControlStatus.IDLE
        return _FROM_VM[self.vm.status]

    def read(self, offset: int) -> int:
        if offset == STATUS_OFFSET:
            return int(self.status)
        if offset == FAULT_INFO_OFFSET:
            if self.vm is not None and self.vm.state.fault is not None:
                return self.vm.state.fault.to_u64()
            return self.fault_info
        if PARAM_OFFSET <= offset < PARAM_OFFSET + 8 * MAX_PARAMS:
            return self.params[(offset - PARAM_OFFSET) // 8]
        return 0

    def write(self, offset: int, value: int) -> ControlWrite:
        if offset % 8 or not 0 <= offset < CONTROL_BYTES:
            return ControlWrite(FaultKind.UNMAPPED)
        if PARAM_OFFSET <= offset < PARAM_OFFSET + 8 * MAX_PARAMS:
            self.params[(offset - PARAM_OFFSET) // 8] = value
            return ControlWrite(FaultKind.NONE)
        if offset >= UPLOAD_BASE:
            return self._append(value)
        if offset == CMD_OFFSET:
            try:
                command = Command(value)
            except ValueError:
                return ControlWrite(FaultKind.BAD_STATE)
            return ControlWrite(self._command(command), command)
        return ControlWrite(FaultKind.PERMISSION)

    def _append(self, value: int) -> ControlWrite:
        if not self.loading:
            return ControlWrite(FaultKind.BAD_STATE)
        if len(self.upload) + 8 > MAX_UPLOAD_BYTES:
            return ControlWrite(FaultKind.BAD_IMAGE)
        self.upload += _U64.pack(value)
        return ControlWrite(FaultKind.NONE)

    def _command(self, command: Command) -> FaultKind:
        status = self.status
        if command is Command.NOP:
            return FaultKind.NONE
        if command is Command.LOAD_BEGIN:
            if status not in (ControlStatus.IDLE, ControlStatus.LOADED):
                return FaultKind.BAD_STATE
            self.image = None
            self.upload.clear()
            self.loading = True
            return FaultKind.NONE
        if command is Command.LOAD_COMMIT:
            if not self.loading:
                return FaultKind.BAD_STATE
            self.loading = False
            try:
                self.image = decode_upload(bytes(self.upload))
            except BadImage as exc:
                logger.info("rejected upload: %s", exc)
                self.fault_info = int(FaultKind.BAD_IMAGE)
                return FaultKind.BAD_IMAGE
            self.fault_info = 0
            return FaultKind.NONE
        if command is Command.START:
            if self.image is None:
                self.fault_info = int(FaultKind.NOT_LOADED)
                return FaultKind.NOT_LOADED
            if status is not ControlStatus.LOADED or self.loading:
                return FaultKind.BAD_STATE
            self.vm = self._make_vm(self.image)
            self.vm.reset(self.params)
            return FaultKind.NONE
        if command is Command.STOP:
            if self.vm is None:
                return FaultKind.BAD_STATE
            return FaultKind.NONE
        # RESET
        self.image = None
        self.vm = None
        self.loading = False
        self.upload.clear()
        self.fault_info = 0
        self.params = [0] * MAX_PARAMS
        return FaultKind.NONE


class SlotState(Enum):
    EMPTY = "Empty"
    HOST_WROTE = "HostWrote"
    CP_WROTE = "CpWrote"


@dataclass
class Slot:
    state: SlotState = SlotState.EMPTY
    line: CacheLine | None = None
    streamed: bool = False


class DataArea:
    """Per-slot mailbox of one MCC data area, as seen from the host."""

    def __init__(self, size: int):
        self.size = size
        self._slots: dict[int, Slot] = {}

    def _check(self, offset: int) -> None:
        if offset % LINE_SIZE or not 0 <= offset < self.size:
            raise ValueError(f"data-area offset {offset} is not a {LINE_SIZE}-aligned slot")

    def slot(self, offset: int) -> Slot:
        self._check(offset)
        return self._slots.setdefault(offset, Slot())

    def host_write(self, offset: int, line: CacheLine) -> bool:
        """Returns True when an unconsumed streamed line was displaced."""
        slot = self.slot(offset)
        displaced = slot.state is SlotState.CP_WROTE and slot.streamed
        slot.state, slot.line, slot.streamed = SlotState.HOST_WROTE, line, False
        return displaced

    def deliver(self, offset: int, line: CacheLine, streamed: bool) -> bool:
        """Install a CP-written line; returns True when it overwrote an
        unconsumed streamed line."""
        slot = self.slot(offset)
        displaced = slot.state is SlotState.CP_WROTE and slot.streamed
        if displaced:
            logger.warning("data slot %d overwritten before the host consumed it", offset)
        slot.state, slot.line, slot.streamed = SlotState.CP_WROTE, line, streamed
        return displaced

    def take(self, offset: int) -> Slot | None:
        """Consume a CP-written line; None when the slot holds none."""
        slot = self.slot(offset)
        if slot.state is not SlotState.CP_WROTE:
            return None
        taken = Slot(slot.state, slot.line, slot.streamed)
        slot.state, slot.line, slot.streamed = SlotState.EMPTY, None, False
        return taken
