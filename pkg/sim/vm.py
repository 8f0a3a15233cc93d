"""
Channel-program images and the event-driven bytecode interpreter.

This ISA is one concrete instantiation of channel-program semantics.
Every instruction is one little-endian 8-byte word:

    byte 0     opcode
    byte 1     rD (low nibble) | rA (high nibble)
    byte 2     rB (low nibble) | flags (high nibble)
    byte 3     reserved
    bytes 4-7  imm, signed 32-bit

Images start with a 17-byte header `<4sHIBHI`: magic "MCCP", version,
entry pc (instruction index), parameter count, declared events (low byte:
event bits, high byte: requested stream credits) and code length in bytes.
"""

import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import Enum, IntEnum, IntFlag
from functools import cached_property
from typing import Callable, Protocol

from sim.address_space import MCC_DATA_BYTES, SCRATCH_BASE, SCRATCH_BYTES, Access, Requester, Translation
from sim.engine import SimConfig
from sim.errors import AccessFault, BadImage, FaultKind
from sim.interconnect import LINE_SIZE, CacheLine

logger = logging.getLogger(__name__)

MAGIC = b"MCCP"
VERSION = 1
HEADER = struct.Struct("<4sHIBHI")
WORD = struct.Struct("<BBBxi")
WORD_BYTES = WORD.size
MAX_CODE_BYTES = 65536
MAX_PARAMS = 8
NUM_REGS = 16
MASK64 = (1 << 64) - 1

RECV_RING_BASE = SCRATCH_BASE + 4096
RECV_RING_SLOTS = 64

FLAG_REG_OFFSET = 0x1
FLAG_W32 = 0x2
FLAG_REGS = 0x8


class Op(IntEnum):
    NOP = 0x00
    HALT = 0x01
    YIELD = 0x02
    MOV = 0x03
    MOVI = 0x04
    ADD = 0x10
    ADDI = 0x11
    SUB = 0x12
    AND = 0x13
    ANDI = 0x14
    OR = 0x15
    XOR = 0x16
    SHL = 0x17
    SHLI = 0x18
    SHR = 0x19
    SHRI = 0x1A
    MUL = 0x1B
    DIV = 0x1C
    CMP = 0x1D
    BR = 0x20
    BEQ = 0x21
    BNE = 0x22
    BLT = 0x23
    BGE = 0x24
    LDA = 0x30
    STA = 0x31
    WAITT = 0x32
    DMA = 0x33
    DMAZ = 0x34
    LDS = 0x35
    STS = 0x36
    SEND_LINE = 0x40
    RECV_LINE = 0x41
    REPLY_LINE = 0x42
    STAT_SUB = 0x50
    STAT_NEXT = 0x51
    PARAM = 0x60
    WAIT = 0x61


# Operand layout per mnemonic, shared by the assembler and disassembler.
#   d/a/b  register fields      i  immediate      t  branch target (imm)
#   [a]    register address     [a+i]  register + displacement
#   o      data-area offset: immediate, or register rB with FLAG_REG_OFFSET
#   e      event filter (imm), optionally followed by kind/arg registers
OPERAND_FORMS: dict[Op, str] = {
    Op.NOP: "", Op.HALT: "", Op.YIELD: "", Op.STAT_SUB: "",
    Op.MOV: "d,a", Op.MOVI: "d,i",
    Op.ADD: "d,a,b", Op.SUB: "d,a,b", Op.AND: "d,a,b", Op.OR: "d,a,b", Op.XOR: "d,a,b",
    Op.SHL: "d,a,b", Op.SHR: "d,a,b", Op.MUL: "d,a,b", Op.DIV: "d,a,b", Op.CMP: "d,a,b",
    Op.ADDI: "d,a,i", Op.ANDI: "d,a,i", Op.SHLI: "d,a,i", Op.SHRI: "d,a,i",
    Op.BR: "t", Op.BEQ: "a,b,t", Op.BNE: "a,b,t", Op.BLT: "a,b,t", Op.BGE: "a,b,t",
    Op.LDA: "i,d,[a]", Op.STA: "i,[a],b", Op.WAITT: "i",
    Op.DMA: "i,d,a,b", Op.DMAZ: "i,d,b",
    Op.LDS: "d,[a+i]", Op.STS: "[a+i],b",
    Op.SEND_LINE: "o,a", Op.REPLY_LINE: "o,a", Op.RECV_LINE: "o,d",
    Op.STAT_NEXT: "d", Op.PARAM: "i,d", Op.WAIT: "e",
}
WIDTH_OPS = frozenset({Op.LDA, Op.STA, Op.LDS, Op.STS})
BRANCH_OPS = frozenset({Op.BR, Op.BEQ, Op.BNE, Op.BLT, Op.BGE})


class CpEventKind(IntFlag):
    START = 1
    STOP = 2
    HOST_WRITE = 4
    HOST_READ = 8
    DRAM = 16
    DMA = 32
    OBSERVE = 64
    CREDIT = 128


EVENT_MASK = 0xFF
_COMPLETIONS = CpEventKind.DRAM | CpEventKind.DMA


@dataclass(frozen=True)
class Instruction:
    op: int
    rd: int = 0
    ra: int = 0
    rb: int = 0
    flags: int = 0
    imm: int = 0

    def encode(self) -> bytes:
        return WORD.pack(self.op & 0xFF, (self.rd & 0xF) | (self.ra & 0xF) << 4,
                         (self.rb & 0xF) | (self.flags & 0xF) << 4, self.imm)

    @classmethod
    def decode(cls, raw: bytes, offset: int = 0) -> "Instruction":
        op, regs, rb_flags, imm = WORD.unpack_from(raw, offset)
        return cls(op, regs & 0xF, regs >> 4, rb_flags & 0xF, rb_flags >> 4, imm)


@dataclass(frozen=True)
class ChannelProgramImage:
    code: bytes
    entry_pc: int = 0
    param_count: int = 0
    declared_events: CpEventKind = CpEventKind(0)
    stream_credits: int = 0

    def __post_init__(self):
        if len(self.code) % WORD_BYTES:
            raise BadImage(f"code length {len(self.code)} is not a multiple of {WORD_BYTES}")
        if not WORD_BYTES <= len(self.code) <= MAX_CODE_BYTES:
            raise BadImage(f"code length {len(self.code)} outside [{WORD_BYTES}, {MAX_CODE_BYTES}]")
        if not 0 <= self.entry_pc < len(self.code) // WORD_BYTES:
            raise BadImage(f"entry pc {self.entry_pc} outside the code")
        if not 0 <= self.param_count <= MAX_PARAMS:
            raise BadImage(f"param count {self.param_count} exceeds {MAX_PARAMS}")
        if int(self.declared_events) & ~EVENT_MASK:
            raise BadImage("declared events use undefined bits")
        if not 0 <= self.stream_credits <= 0xFF:
            raise BadImage(f"stream credits {self.stream_credits} out of range")

    @cached_property
    def instructions(self) -> tuple[Instruction, ...]:
        return tuple(Instruction.decode(self.code, pc) for pc in range(0, len(self.code), WORD_BYTES))

    def __len__(self) -> int:
        return len(self.code) // WORD_BYTES

    def bad_branches(self) -> list[int]:
        """Instruction indices whose branch target lies outside the code."""
        return [pc for pc, ins in enumerate(self.instructions)
                if ins.op in BRANCH_OPS and not 0 <= ins.imm < len(self)]

    def to_bytes(self) -> bytes:
        events = int(self.declared_events) | self.stream_credits << 8
        return HEADER.pack(MAGIC, VERSION, self.entry_pc, self.param_count, events, len(self.code)) + self.code

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ChannelProgramImage":
        if len(blob) < HEADER.size:
            raise BadImage(f"truncated header: {len(blob)} of {HEADER.size} bytes")
        magic, version, entry_pc, param_count, events, code_len = HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise BadImage(f"bad magic {magic!r}")
        if version != VERSION:
            raise BadImage(f"unsupported version {version}")
        if code_len != len(blob) - HEADER.size:
            raise BadImage(f"code length {code_len} does not match {len(blob) - HEADER.size} bytes of code")
        return cls(bytes(blob[HEADER.size:]), entry_pc, param_count,
                   CpEventKind(events & EVENT_MASK), events >> 8)


@dataclass(frozen=True)
class CpEvent:
    kind: CpEventKind
    at: int
    offset: int = 0
    line: CacheLine | None = None
    tag: int = 0
    value: int = 0

    @property
    def argument(self) -> int:
        """What WAIT reports alongside the kind."""
        if self.kind & _COMPLETIONS:
            return self.tag
        if self.kind is CpEventKind.OBSERVE:
            return self.value
        return self.offset


class VmStatus(Enum):
    IDLE = "Idle"
    READY = "Ready"
    RUNNING = "Running"
    WAITING = "Waiting"
    HALTED = "Halted"
    FAULTED = "Faulted"


class StepOutcome(Enum):
    YIELDED = "Yielded"
    WAITING = "Waiting"
    HALTED = "Halted"
    FAULTED = "Faulted"
    BUDGET_EXHAUSTED = "BudgetExhausted"


@dataclass(frozen=True)
class FaultInfo:
    kind: FaultKind
    pc: int = 0
    va: int = 0

    def to_u64(self) -> int:
        return int(self.kind) | (self.pc & 0xFFFF) << 16 | (self.va & 0xFFFF_FFFF) << 32


@dataclass(frozen=True)
class PendingOp:
    tag: int
    kind: CpEventKind
    rd: int | None = None


@dataclass
class VmState:
    pc: int = 0
    regs: list[int] = field(default_factory=lambda: [0] * NUM_REGS)
    status: VmStatus = VmStatus.IDLE
    wait_filter: CpEventKind = CpEventKind(0)
    wait_tag: int | None = None
    wait_offset: int | None = None
    pending: dict[int, PendingOp] = field(default_factory=dict)
    stream_credit: int = 0
    credit_limit: int = 0
    events: deque = field(default_factory=deque)
    stop_requested: bool = False
    fault: FaultInfo | None = None
    subscribed: bool = False
    params: list[int] = field(default_factory=lambda: [0] * MAX_PARAMS)
    scratch: bytearray = field(default_factory=lambda: bytearray(SCRATCH_BYTES))
    instructions: int = 0
    dram_bytes: int = 0
    dma_bytes: int = 0
    stream_lines: int = 0
    reply_lines: int = 0

    @property
    def pending_tags(self) -> frozenset[int]:
        return frozenset(self.pending)


@dataclass(frozen=True)
class ScratchRef:
    """A DMA endpoint inside the VM's own scratch."""

    offset: int


DmaEndpoint = Translation | ScratchRef


@dataclass(frozen=True)
class StepResult:
    outcome: StepOutcome
    executed: int
    cost: int


class MemoryPort(Protocol):
    """Services the hosting node provides to one VM."""

    def translate(self, va: int, access: Access, length: int) -> Translation: ...

    def read(self, translation: Translation, length: int) -> bytes: ...

    def write(self, translation: Translation, payload: bytes) -> None: ...

    def issue_memory(self, tag: int, translation: Translation, nbytes: int, at: int, value: int) -> None: ...

    def issue_dma(self, tag: int, dst: DmaEndpoint, src: DmaEndpoint | None, length: int, at: int) -> None: ...

    def send_line(self, offset: int, line: CacheLine, source: Translation | None, at: int, stream: bool) -> None: ...

    def subscribe(self) -> None: ...

    def take_charge(self) -> int: ...


class _Fault(Exception):
    def __init__(self, kind: FaultKind, va: int = 0):
        super().__init__(kind.name)
        self.kind = kind
        self.va = va


class ChannelProgramVm:
    """Interpreter for one MCC; owned by exactly one node scheduler."""

    def __init__(self, image: ChannelProgramImage, port: MemoryPort, config: SimConfig,
                 requester: Requester = Requester()):
        self.image = image
        self.port = port
        self.config = config
        self.requester = requester
        self.state = VmState()
        self._code = image.instructions
        self._handlers: dict[int, Callable[[Instruction, int], StepOutcome | None]] = {
            op: getattr(self, f"_op_{op.name.lower()}") for op in Op
        }
        self.reset()

    # ── lifecycle ────────────────────────────────────────────────────────────

    def reset(self, params=()) -> None:
        credits = self.config.stream_credits
        if self.image.stream_credits:
            credits = min(credits, self.image.stream_credits)
        self.state = VmState(pc=self.image.entry_pc, stream_credit=credits, credit_limit=credits)
        for i, value in enumerate(list(params)[:MAX_PARAMS]):
            self.state.params[i] = value & MASK64

    @property
    def status(self) -> VmStatus:
        return self.state.status

    # ── events ───────────────────────────────────────────────────────────────

    def deliver(self, event: CpEvent) -> None:
        """Queue `event`; wakes a matching wait. Overflow faults the VM."""
        st = self.state
        if st.status in (VmStatus.HALTED, VmStatus.FAULTED):
            return
        if event.kind is CpEventKind.START:
            if st.status is VmStatus.IDLE:
                st.pc = self.image.entry_pc
                st.status = VmStatus.READY
            return
        if event.kind is CpEventKind.STOP:
            st.stop_requested = True
            if st.status in (VmStatus.WAITING, VmStatus.IDLE):
                st.status = VmStatus.READY
            return
        if event.kind is CpEventKind.CREDIT:
            st.stream_credit = min(st.stream_credit + 1, st.credit_limit)
            if st.status is VmStatus.WAITING and st.wait_filter & CpEventKind.CREDIT:
                st.status = VmStatus.READY
            return
        if len(st.events) >= self.config.event_queue_bound:
            st.status = VmStatus.FAULTED
            st.fault = FaultInfo(FaultKind.EVENT_OVERFLOW, st.pc)
            logger.warning("mcc %s: event queue overflow", self.requester.mcc_id)
            return
        st.events.append(event)
        if st.status is VmStatus.WAITING and self._wakes(event):
            st.status = VmStatus.READY

    def _wakes(self, event: CpEvent) -> bool:
        st = self.state
        if not event.kind & st.wait_filter:
            return False
        if st.wait_tag is not None and event.tag != st.wait_tag:
            return False
        if st.wait_offset is not None and event.offset != st.wait_offset:
            return False
        return True

    def _take(self, kinds: CpEventKind, tag: int | None = None, offset: int | None = None) -> CpEvent | None:
        for event in self.state.events:
            if (event.kind & kinds and (tag is None or event.tag == tag)
                    and (offset is None or event.offset == offset)):
                self.state.events.remove(event)
                return event
        return None

    def _block(self, kinds: CpEventKind, tag: int | None = None, offset: int | None = None) -> StepOutcome:
        st = self.state
        st.status = VmStatus.WAITING
        st.wait_filter = kinds | CpEventKind.STOP
        st.wait_tag = tag
        st.wait_offset = offset
        return StepOutcome.WAITING

    # ── execution ────────────────────────────────────────────────────────────

    def step(self, budget: int, now: int = 0) -> StepResult:
        """Run at most `budget` instructions starting at simulated time `now`."""
        st = self.state
        if st.status not in (VmStatus.READY, VmStatus.RUNNING):
            raise ValueError(f"cannot step a VM in state {st.status.value}")
        if st.stop_requested:
            st.status = VmStatus.HALTED
            return StepResult(StepOutcome.HALTED, 0, 1)
        st.status = VmStatus.RUNNING
        st.wait_filter = CpEventKind(0)
        st.wait_tag = st.wait_offset = None
        code = self._code
        handlers = self._handlers
        executed = 0
        self._cost = 0
        outcome = None
        while executed < budget:
            pc = st.pc
            executed += 1
            self._cost += 1
            try:
                if not 0 <= pc < len(code):
                    raise _Fault(FaultKind.BAD_BRANCH, pc)
                ins = code[pc]
                handler = handlers.get(ins.op)
                if handler is None:
                    raise _Fault(FaultKind.ILLEGAL_OPCODE)
                outcome = handler(ins, now + self._cost)
            except _Fault as fault:
                outcome = self._fault(fault.kind, fault.va)
            except AccessFault as fault:
                outcome = self._fault(fault.kind, fault.va)
            self._cost += self.port.take_charge()
            if outcome is not None:
                break
        st.instructions += executed
        if outcome is None:
            st.status = VmStatus.READY
            outcome = StepOutcome.BUDGET_EXHAUSTED
        return StepResult(outcome, executed, self._cost)

    def _fault(self, kind: FaultKind, va: int = 0) -> StepOutcome:
        st = self.state
        st.status = VmStatus.FAULTED
        st.fault = FaultInfo(kind, st.pc, va)
        logger.warning("mcc %s faulted: %s at pc=%d va=0x%x", self.requester.mcc_id, kind.name, st.pc, va)
        return StepOutcome.FAULTED

    def _advance(self) -> None:
        self.state.pc += 1

    def _set(self, rd: int, value: int) -> None:
        self.state.regs[rd] = value & MASK64
        self.state.pc += 1

    def _branch(self, ins: Instruction, taken: bool) -> None:
        if not taken:
            self.state.pc += 1
            return
        if not 0 <= ins.imm < len(self._code):
            raise _Fault(FaultKind.BAD_BRANCH, ins.imm & MASK64)
        self.state.pc = ins.imm

    # control

    def _op_nop(self, ins, at):
        self._advance()

    def _op_halt(self, ins, at):
        self.state.status = VmStatus.HALTED
        return StepOutcome.HALTED

    def _op_yield(self, ins, at):
        self._advance()
        self.state.status = VmStatus.READY
        return StepOutcome.YIELDED

    # registers; arithmetic wraps

    def _op_mov(self, ins, at):
        self._set(ins.rd, self.state.regs[ins.ra])

    def _op_movi(self, ins, at):
        self._set(ins.rd, ins.imm)

    def _op_add(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] + r[ins.rb])

    def _op_addi(self, ins, at):
        self._set(ins.rd, self.state.regs[ins.ra] + ins.imm)

    def _op_sub(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] - r[ins.rb])

    def _op_and(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] & r[ins.rb])

    def _op_andi(self, ins, at):
        self._set(ins.rd, self.state.regs[ins.ra] & (ins.imm & MASK64))

    def _op_or(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] | r[ins.rb])

    def _op_xor(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] ^ r[ins.rb])

    def _op_shl(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] << (r[ins.rb] & 63))

    def _op_shli(self, ins, at):
        self._set(ins.rd, self.state.regs[ins.ra] << (ins.imm & 63))

    def _op_shr(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] >> (r[ins.rb] & 63))

    def _op_shri(self, ins, at):
        self._set(ins.rd, self.state.regs[ins.ra] >> (ins.imm & 63))

    def _op_mul(self, ins, at):
        r = self.state.regs
        self._set(ins.rd, r[ins.ra] * r[ins.rb])

    def _op_div(self, ins, at):
        r = self.state.regs
        if r[ins.rb] == 0:
            raise _Fault(FaultKind.DIVIDE_BY_ZERO)
        self._set(ins.rd, r[ins.ra] // r[ins.rb])

    def _op_cmp(self, ins, at):
        a, b = self.state.regs[ins.ra], self.state.regs[ins.rb]
        self._set(ins.rd, 0 if a == b else (1 if a > b else MASK64))

    def _op_br(self, ins, at):
        self._branch(ins, True)

    def _op_beq(self, ins, at):
        r = self.state.regs
        self._branch(ins, r[ins.ra] == r[ins.rb])

    def _op_bne(self, ins, at):
        r = self.state.regs
        self._branch(ins, r[ins.ra] != r[ins.rb])

    def _op_blt(self, ins, at):
        r = self.state.regs
        self._branch(ins, r[ins.ra] < r[ins.rb])

    def _op_bge(self, ins, at):
        r = self.state.regs
        self._branch(ins, r[ins.ra] >= r[ins.rb])

    def _op_param(self, ins, at):
        if not 0 <= ins.imm < MAX_PARAMS:
            raise _Fault(FaultKind.ILLEGAL_OPCODE)
        self._set(ins.rd, self.state.params[ins.imm])

    # scratch (synchronous, VM-private)

    def _scratch_offset(self, va: int, length: int) -> int | None:
        if SCRATCH_BASE <= va and va + length <= SCRATCH_BASE + SCRATCH_BYTES:
            return va - SCRATCH_BASE
        return None

    def _op_lds(self, ins, at):
        width = 4 if ins.flags & FLAG_W32 else 8
        va = (self.state.regs[ins.ra] + ins.imm) & MASK64
        offset = self._scratch_offset(va, width)
        if offset is None:
            raise _Fault(FaultKind.UNMAPPED, va)
        self._set(ins.rd, int.from_bytes(self.state.scratch[offset:offset + width], "little"))

    def _op_sts(self, ins, at):
        width = 4 if ins.flags & FLAG_W32 else 8
        va = (self.state.regs[ins.ra] + ins.imm) & MASK64
        offset = self._scratch_offset(va, width)
        if offset is None:
            raise _Fault(FaultKind.UNMAPPED, va)
        value = self.state.regs[ins.rb] & ((1 << (8 * width)) - 1)
        self.state.scratch[offset:offset + width] = value.to_bytes(width, "little")
        self._advance()

    # asynchronous memory

    def _claim_tag(self, tag: int) -> None:
        if tag in self.state.pending:
            raise _Fault(FaultKind.BAD_TAG)

    def _op_lda(self, ins, at):
        st = self.state
        width = 4 if ins.flags & FLAG_W32 else 8
        self._claim_tag(ins.imm)
        translation = self.port.translate(st.regs[ins.ra], Access.R, width)
        value = int.from_bytes(self.port.read(translation, width), "little")
        st.pending[ins.imm] = PendingOp(ins.imm, CpEventKind.DRAM, ins.rd)
        self.port.issue_memory(ins.imm, translation, width, at, value)
        st.dram_bytes += width
        self._cost += self.config.dram_access_cost
        self._advance()

    def _op_sta(self, ins, at):
        st = self.state
        width = 4 if ins.flags & FLAG_W32 else 8
        self._claim_tag(ins.imm)
        translation = self.port.translate(st.regs[ins.ra], Access.W, width)
        value = st.regs[ins.rb] & ((1 << (8 * width)) - 1)
        self.port.write(translation, value.to_bytes(width, "little"))
        st.pending[ins.imm] = PendingOp(ins.imm, CpEventKind.DRAM)
        self.port.issue_memory(ins.imm, translation, width, at, value)
        st.dram_bytes += width
        self._cost += self.config.dram_access_cost
        self._advance()

    def _op_waitt(self, ins, at):
        st = self.state
        event = self._take(_COMPLETIONS, tag=ins.imm)
        if event is None:
            if ins.imm not in st.pending:
                raise _Fault(FaultKind.BAD_TAG)
            return self._block(_COMPLETIONS, tag=ins.imm)
        op = st.pending.pop(ins.imm, None)
        if op is not None and op.rd is not None:
            self._set(op.rd, event.value)
        else:
            self._advance()

    def _endpoint(self, va: int, access: Access, length: int) -> DmaEndpoint:
        offset = self._scratch_offset(va, length)
        if offset is not None:
            return ScratchRef(offset)
        return self.port.translate(va, access, length)

    def _dma(self, ins, at, zero: bool):
        st = self.state
        self._claim_tag(ins.imm)
        length = st.regs[ins.rb]
        dst = self._endpoint(st.regs[ins.rd], Access.W, length)
        src = None if zero else self._endpoint(st.regs[ins.ra], Access.R, length)
        st.pending[ins.imm] = PendingOp(ins.imm, CpEventKind.DMA)
        self.port.issue_dma(ins.imm, dst, src, length, at)
        st.dma_bytes += length
        self._cost += self.config.dram_access_cost + length // 4096
        self._advance()

    def _op_dma(self, ins, at):
        self._dma(ins, at, zero=False)

    def _op_dmaz(self, ins, at):
        self._dma(ins, at, zero=True)

    # data-area interaction with the host

    def _data_offset(self, ins: Instruction) -> int:
        offset = self.state.regs[ins.rb] if ins.flags & FLAG_REG_OFFSET else ins.imm
        if not 0 <= offset < MCC_DATA_BYTES or offset % LINE_SIZE:
            raise _Fault(FaultKind.UNMAPPED, offset & MASK64)
        return offset

    def _source_line(self, va: int) -> tuple[CacheLine, Translation | None]:
        offset = self._scratch_offset(va, LINE_SIZE)
        if offset is not None:
            return CacheLine(bytes(self.state.scratch[offset:offset + LINE_SIZE])), None
        translation = self.port.translate(va, Access.R, LINE_SIZE)
        return CacheLine(self.port.read(translation, LINE_SIZE)), translation

    def _op_send_line(self, ins, at):
        st = self.state
        offset = self._data_offset(ins)
        if st.stream_credit == 0:
            return self._block(CpEventKind.CREDIT)
        line, source = self._source_line(st.regs[ins.ra])
        st.stream_credit -= 1
        self.port.send_line(offset, line, source, at, True)
        st.stream_lines += 1
        self._cost += self.config.link_access_cost
        self._advance()

    def _op_reply_line(self, ins, at):
        st = self.state
        offset = self._data_offset(ins)
        if self._take(CpEventKind.HOST_READ, offset=offset) is None:
            return self._block(CpEventKind.HOST_READ, offset=offset)
        line, source = self._source_line(st.regs[ins.ra])
        self.port.send_line(offset, line, source, at, False)
        st.reply_lines += 1
        self._cost += self.config.link_access_cost
        self._advance()

    def _op_recv_line(self, ins, at):
        st = self.state
        offset = self._data_offset(ins)
        event = self._take(CpEventKind.HOST_WRITE, offset=offset)
        if event is None:
            return self._block(CpEventKind.HOST_WRITE, offset=offset)
        slot = (offset // LINE_SIZE) % RECV_RING_SLOTS
        start = RECV_RING_BASE - SCRATCH_BASE + slot * LINE_SIZE
        st.scratch[start:start + LINE_SIZE] = event.line.data
        self._set(ins.rd, RECV_RING_BASE + slot * LINE_SIZE)

    # observation

    def _op_stat_sub(self, ins, at):
        self.state.subscribed = True
        self.port.subscribe()
        self._advance()

    def _op_stat_next(self, ins, at):
        event = self._take(CpEventKind.OBSERVE)
        if event is None:
            return self._block(CpEventKind.OBSERVE)
        self._set(ins.rd, event.value)

    def _op_wait(self, ins, at):
        st = self.state
        kinds = CpEventKind(ins.imm & EVENT_MASK)
        found = next(((event.kind, event.argument) for event in st.events if event.kind & kinds), None)
        # START and CREDIT are not queued: a running program has been started,
        # and credits are a counter.
        if found is None and kinds & CpEventKind.START:
            found = (CpEventKind.START, 0)
        if found is None and kinds & CpEventKind.CREDIT and st.stream_credit > 0:
            found = (CpEventKind.CREDIT, st.stream_credit)
        if found is None:
            return self._block(kinds)
        if ins.flags & FLAG_REGS:
            st.regs[ins.rd] = int(found[0])
            st.regs[ins.ra] = found[1] & MASK64
        self._advance()
        return None
