"""
Text assembly for channel programs.

    ; echo the host's line back, forever
    .events HOST_WRITE|HOST_READ
    loop:   RECV_LINE 0, r1
            REPLY_LINE 0, r1
            BR loop

One instruction per line, `label:` prefixes, `;` or `#` comments.
Directives: `.params N`, `.events A|B`, `.credits N`, `.entry label`,
`.equ NAME value` and `.word value` (a raw instruction word).
Registers are r0-r15; immediates may be decimal, hex, an `.equ` name, or
a `+`/`-` sum of those.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum

from sim.errors import AssemblyError, BadImage
from sim.vm import (
    BRANCH_OPS,
    FLAG_REG_OFFSET,
    FLAG_REGS,
    FLAG_W32,
    MAX_CODE_BYTES,
    MAX_PARAMS,
    NUM_REGS,
    OPERAND_FORMS,
    WIDTH_OPS,
    WORD_BYTES,
    ChannelProgramImage,
    CpEventKind,
    Instruction,
    Op,
)

logger = logging.getLogger(__name__)

IMM_MIN, IMM_MAX = -(1 << 31), (1 << 31) - 1

_LABEL = re.compile(r"^([A-Za-z_][\w.]*)\s*:\s*(.*)$")
_NAME = re.compile(r"^[A-Za-z_]\w*$")
_REGISTER = re.compile(r"^[rR](\d+)$")
_ADDRESS = re.compile(r"^\[\s*([rR]\d+)\s*(?:([+-])\s*(.+?))?\s*\]$")
_TERM = re.compile(r"([+-]?)\s*([^+\-\s]+)")

# Instructions that can only make progress if some event kind is declared.
_NEEDS = {
    Op.RECV_LINE: CpEventKind.HOST_WRITE,
    Op.REPLY_LINE: CpEventKind.HOST_READ,
    Op.STAT_NEXT: CpEventKind.OBSERVE,
    Op.SEND_LINE: CpEventKind.CREDIT,
    Op.LDA: CpEventKind.DRAM,
    Op.STA: CpEventKind.DRAM,
    Op.DMA: CpEventKind.DMA,
    Op.DMAZ: CpEventKind.DMA,
    Op.WAITT: CpEventKind.DRAM | CpEventKind.DMA,
}
_ALWAYS_DELIVERED = CpEventKind.START | CpEventKind.STOP


class DiagnosticCode(Enum):
    UNDEFINED_LABEL = "UndefinedLabel"
    DUPLICATE_LABEL = "DuplicateLabel"
    BRANCH_OUT_OF_RANGE = "BranchOutOfRange"
    UNKNOWN_MNEMONIC = "UnknownMnemonic"
    TOO_MANY_PARAMS = "TooManyParams"
    PARAM_NOT_DECLARED = "ParamNotDeclared"
    EVENT_NOT_DECLARED = "EventNotDeclared"
    BAD_OPERAND = "BadOperand"
    BAD_DIRECTIVE = "BadDirective"
    PROGRAM_TOO_LARGE = "ProgramTooLarge"
    EMPTY_PROGRAM = "EmptyProgram"


@dataclass(frozen=True)
class Diagnostic:
    line: int
    code: DiagnosticCode
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.code.value}: {self.message}"


@dataclass
class AssemblyResult:
    image: ChannelProgramImage | None
    diagnostics: list[Diagnostic] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.image is not None


class _Bad(Exception):
    def __init__(self, code: DiagnosticCode, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class _Statement:
    line: int
    mnemonic: str
    operands: list[str]


def _split_operands(text: str) -> list[str]:
    text = text.strip()
    return [part.strip() for part in text.split(",")] if text else []


def _strip_comment(text: str) -> str:
    for marker in (";", "#"):
        index = text.find(marker)
        if index >= 0:
            text = text[:index]
    return text.strip()


def parse_events(text: str) -> CpEventKind:
    """`DRAM|DMA`, `NONE`, or a number."""
    kinds = CpEventKind(0)
    for part in text.split("|"):
        name = part.strip().upper()
        if name == "NONE":
            continue
        if name in CpEventKind.__members__:
            kinds |= CpEventKind[name]
            continue
        try:
            value = int(name, 0)
        except ValueError:
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"unknown event kind {part.strip()!r}") from None
        if value & ~0xFF or value < 0:
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"event mask {value} uses undefined bits")
        kinds |= CpEventKind(value)
    return kinds


def format_events(kinds: CpEventKind) -> str:
    names = [kind.name for kind in CpEventKind if kind & kinds]
    return "|".join(names) if names else "NONE"


class _Assembler:
    def __init__(self, source: str):
        self.source = source
        self.diagnostics: list[Diagnostic] = []
        self.labels: dict[str, int] = {}
        self.constants: dict[str, int] = {}
        self.statements: list[_Statement] = []
        self.params: int | None = None
        self.events = CpEventKind(0)
        self.credits = 0
        self.entry: tuple[int, str] | None = None

    def report(self, line: int, code: DiagnosticCode, message: str) -> None:
        self.diagnostics.append(Diagnostic(line, code, message))

    # ── pass 1: labels and directives ────────────────────────────────────────

    def collect(self) -> None:
        for number, raw in enumerate(self.source.splitlines(), start=1):
            text = _strip_comment(raw)
            while True:
                match = _LABEL.match(text)
                if match is None:
                    break
                name, text = match.group(1), match.group(2).strip()
                if name in self.labels or name in self.constants:
                    self.report(number, DiagnosticCode.DUPLICATE_LABEL, f"{name!r} defined twice")
                else:
                    self.labels[name] = len(self.statements)
            if not text:
                continue
            mnemonic, *rest = text.split(None, 1)
            rest = rest[0] if rest else ""
            try:
                if mnemonic.startswith("."):
                    self.directive(number, mnemonic.lower(), rest.strip())
                else:
                    self.statements.append(_Statement(number, mnemonic, _split_operands(rest)))
            except _Bad as bad:
                self.report(number, bad.code, str(bad))

    def directive(self, line: int, name: str, rest: str) -> None:
        if name == ".params":
            count = self.number(rest)
            if not 0 <= count <= MAX_PARAMS:
                raise _Bad(DiagnosticCode.TOO_MANY_PARAMS, f".params {count} exceeds {MAX_PARAMS}")
            self.params = count
        elif name == ".events":
            self.events |= parse_events(rest)
        elif name == ".credits":
            credits = self.number(rest)
            if not 0 <= credits <= 0xFF:
                raise _Bad(DiagnosticCode.BAD_DIRECTIVE, f".credits {credits} out of range")
            self.credits = credits
        elif name == ".entry":
            self.entry = (line, rest)
        elif name == ".equ":
            parts = rest.split(None, 1)
            if len(parts) != 2 or not _NAME.match(parts[0]):
                raise _Bad(DiagnosticCode.BAD_DIRECTIVE, ".equ needs a name and a value")
            if parts[0] in self.constants or parts[0] in self.labels:
                raise _Bad(DiagnosticCode.DUPLICATE_LABEL, f"{parts[0]!r} defined twice")
            self.constants[parts[0]] = self.number(parts[1])
        elif name == ".word":
            self.statements.append(_Statement(line, ".word", [rest]))
        else:
            raise _Bad(DiagnosticCode.BAD_DIRECTIVE, f"unknown directive {name}")

    # ── operands ─────────────────────────────────────────────────────────────

    def number(self, text: str) -> int:
        text = text.strip()
        if not text:
            raise _Bad(DiagnosticCode.BAD_OPERAND, "missing value")
        total, consumed = 0, 0
        for match in _TERM.finditer(text):
            sign, term = match.groups()
            consumed += len(match.group(0).replace(" ", ""))
            if term in self.constants:
                value = self.constants[term]
            else:
                try:
                    value = int(term.replace("_", ""), 0)
                except ValueError:
                    code = (DiagnosticCode.UNDEFINED_LABEL if _NAME.match(term)
                            else DiagnosticCode.BAD_OPERAND)
                    raise _Bad(code, f"cannot evaluate {term!r}") from None
            total += -value if sign == "-" else value
        if consumed != len(text.replace(" ", "")):
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"cannot evaluate {text!r}")
        return total

    def immediate(self, text: str) -> int:
        value = self.number(text)
        if not IMM_MIN <= value <= IMM_MAX:
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"immediate {value} does not fit in signed 32 bits")
        return value

    @staticmethod
    def register(text: str) -> int:
        match = _REGISTER.match(text.strip())
        if match is None or int(match.group(1)) >= NUM_REGS:
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"expected a register r0-r{NUM_REGS - 1}, got {text!r}")
        return int(match.group(1))

    def target(self, text: str, size: int) -> int:
        text = text.strip()
        if text in self.labels:
            return self.labels[text]
        if _NAME.match(text) and text not in self.constants:
            raise _Bad(DiagnosticCode.UNDEFINED_LABEL, f"undefined label {text!r}")
        target = self.immediate(text)
        if not 0 <= target < size:
            raise _Bad(DiagnosticCode.BRANCH_OUT_OF_RANGE, f"branch target {target} outside 0..{size - 1}")
        return target

    def address(self, text: str, displacement: bool) -> tuple[int, int]:
        match = _ADDRESS.match(text.strip())
        if match is None:
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"expected [rN{'+imm' if displacement else ''}], got {text!r}")
        register, sign, rest = match.groups()
        if rest is None:
            return self.register(register), 0
        if not displacement:
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"no displacement allowed in {text!r}")
        value = self.immediate(rest)
        return self.register(register), -value if sign == "-" else value

    # ── pass 2: encoding ─────────────────────────────────────────────────────

    def encode(self, statement: _Statement, size: int) -> Instruction | bytes:
        if statement.mnemonic == ".word":
            value = self.number(statement.operands[0]) & ((1 << 64) - 1)
            return value.to_bytes(WORD_BYTES, "little")
        name = statement.mnemonic.upper()
        flags = 0
        if name.endswith(".W"):
            name = name[:-2]
            flags |= FLAG_W32
        try:
            op = Op[name]
        except KeyError:
            raise _Bad(DiagnosticCode.UNKNOWN_MNEMONIC, f"unknown mnemonic {statement.mnemonic!r}") from None
        if flags and op not in WIDTH_OPS:
            raise _Bad(DiagnosticCode.UNKNOWN_MNEMONIC, f"{name} has no .w form")
        form = OPERAND_FORMS[op]
        letters = form.split(",") if form else []
        operands = statement.operands
        if op is Op.WAIT and len(operands) == 3:
            letters = ["e", "d", "a"]
            flags |= FLAG_REGS
        if len(operands) != len(letters):
            raise _Bad(DiagnosticCode.BAD_OPERAND, f"{name} takes {len(letters)} operand(s), got {len(operands)}")
        fields = {"rd": 0, "ra": 0, "rb": 0, "imm": 0}
        for letter, text in zip(letters, operands):
            if letter in ("d", "a", "b"):
                fields["r" + letter] = self.register(text)
            elif letter == "i":
                fields["imm"] = self.immediate(text)
            elif letter == "t":
                fields["imm"] = self.target(text, size)
            elif letter == "[a]":
                fields["ra"], _ = self.address(text, displacement=False)
            elif letter == "[a+i]":
                fields["ra"], fields["imm"] = self.address(text, displacement=True)
            elif letter == "o":
                if _REGISTER.match(text):
                    fields["rb"] = self.register(text)
                    flags |= FLAG_REG_OFFSET
                else:
                    fields["imm"] = self.immediate(text)
            elif letter == "e":
                fields["imm"] = int(parse_events(text))
        return Instruction(int(op), flags=flags, **fields)

    def check_declarations(self, statement: _Statement, ins: Instruction) -> None:
        op = Op(ins.op)
        if op is Op.PARAM and self.params is not None and not 0 <= ins.imm < self.params:
            raise _Bad(DiagnosticCode.PARAM_NOT_DECLARED, f"PARAM {ins.imm} but .params {self.params}")
        if op is Op.PARAM and not 0 <= ins.imm < MAX_PARAMS:
            raise _Bad(DiagnosticCode.TOO_MANY_PARAMS, f"PARAM {ins.imm} exceeds {MAX_PARAMS}")
        if op is Op.WAIT:
            missing = CpEventKind(ins.imm) & ~(self.events | _ALWAYS_DELIVERED)
            if missing:
                raise _Bad(DiagnosticCode.EVENT_NOT_DECLARED,
                           f"WAIT on {format_events(missing)} without .events {format_events(missing)}")
        needed = _NEEDS.get(op)
        if needed is not None and not needed & self.events:
            raise _Bad(DiagnosticCode.EVENT_NOT_DECLARED, f"{op.name} needs .events {format_events(needed)}")

    def run(self) -> AssemblyResult:
        self.collect()
        size = len(self.statements)
        if size == 0:
            self.report(0, DiagnosticCode.EMPTY_PROGRAM, "no instructions")
        elif size * WORD_BYTES > MAX_CODE_BYTES:
            self.report(self.statements[-1].line, DiagnosticCode.PROGRAM_TOO_LARGE,
                        f"{size} instructions exceed {MAX_CODE_BYTES // WORD_BYTES}")
        code = bytearray()
        highest_param = -1
        for statement in self.statements:
            try:
                encoded = self.encode(statement, size)
                if isinstance(encoded, Instruction):
                    self.check_declarations(statement, encoded)
                    if encoded.op == Op.PARAM:
                        highest_param = max(highest_param, encoded.imm)
                    encoded = encoded.encode()
                code += encoded
            except _Bad as bad:
                self.report(statement.line, bad.code, str(bad))
        entry = 0
        if self.entry is not None:
            line, label = self.entry
            try:
                entry = self.target(label, max(size, 1))
            except _Bad as bad:
                self.report(line, bad.code, str(bad))
        if self.diagnostics:
            self.diagnostics.sort(key=lambda d: d.line)
            return AssemblyResult(None, self.diagnostics)
        params = self.params if self.params is not None else highest_param + 1
        try:
            image = ChannelProgramImage(bytes(code), entry, params, self.events, self.credits)
        except BadImage as exc:
            return AssemblyResult(None, [Diagnostic(0, DiagnosticCode.BAD_DIRECTIVE, str(exc))])
        return AssemblyResult(image)


def assemble(source: str) -> AssemblyResult:
    """Assemble `source`; the result holds the image or every diagnostic found."""
    result = _Assembler(source).run()
    if not result.ok:
        logger.info("assembly failed with %d diagnostic(s)", len(result.diagnostics))
    return result


def assemble_or_raise(source: str) -> ChannelProgramImage:
    result = assemble(source)
    if result.image is None:
        raise AssemblyError(result.diagnostics)
    return result.image


# ── disassembly ──────────────────────────────────────────────────────────────

def _canonical(ins: Instruction, op: Op) -> Instruction:
    """The instruction as the assembler would emit it for this op."""
    letters = OPERAND_FORMS[op].split(",") if OPERAND_FORMS[op] else []
    fields = {"rd": 0, "ra": 0, "rb": 0, "imm": 0}
    flags = ins.flags & FLAG_W32 if op in WIDTH_OPS else 0
    if op is Op.WAIT and ins.flags & FLAG_REGS:
        letters = ["e", "d", "a"]
        flags |= FLAG_REGS
    for letter in letters:
        if letter in ("d", "a", "b"):
            fields["r" + letter] = getattr(ins, "r" + letter)
        elif letter in ("i", "t"):
            fields["imm"] = ins.imm
        elif letter == "e":
            fields["imm"] = ins.imm if 0 <= ins.imm <= 0xFF else -1
        elif letter == "[a]":
            fields["ra"] = ins.ra
        elif letter == "[a+i]":
            fields["ra"], fields["imm"] = ins.ra, ins.imm
        elif letter == "o":
            if ins.flags & FLAG_REG_OFFSET:
                fields["rb"] = ins.rb
                flags |= FLAG_REG_OFFSET
            else:
                fields["imm"] = ins.imm
    return Instruction(ins.op, flags=flags, **fields)


def _format(ins: Instruction, op: Op, labels: dict[int, str]) -> str:
    letters = OPERAND_FORMS[op].split(",") if OPERAND_FORMS[op] else []
    if op is Op.WAIT and ins.flags & FLAG_REGS:
        letters = ["e", "d", "a"]
    parts = []
    for letter in letters:
        if letter in ("d", "a", "b"):
            parts.append(f"r{getattr(ins, 'r' + letter)}")
        elif letter == "i":
            parts.append(str(ins.imm))
        elif letter == "t":
            parts.append(labels[ins.imm])
        elif letter == "e":
            parts.append(format_events(CpEventKind(ins.imm)))
        elif letter == "[a]":
            parts.append(f"[r{ins.ra}]")
        elif letter == "[a+i]":
            parts.append(f"[r{ins.ra}{ins.imm:+d}]")
        elif letter == "o":
            parts.append(f"r{ins.rb}" if ins.flags & FLAG_REG_OFFSET else str(ins.imm))
    mnemonic = op.name + (".w" if op in WIDTH_OPS and ins.flags & FLAG_W32 else "")
    return f"{mnemonic} {', '.join(parts)}".rstrip()


def disassemble(image: ChannelProgramImage) -> str:
    """Source text that assembles back to the same image. Words the
    assembler could not have produced come out as `.word`."""
    instructions = image.instructions
    size = len(instructions)
    decoded: list[Op | None] = []
    for ins in instructions:
        try:
            op = Op(ins.op)
        except ValueError:
            op = None
        if op is not None and (_canonical(ins, op) != ins
                               or (op in BRANCH_OPS and not 0 <= ins.imm < size)):
            op = None
        decoded.append(op)
    targets = {ins.imm for ins, op in zip(instructions, decoded) if op in BRANCH_OPS}
    if image.entry_pc:
        targets.add(image.entry_pc)
    labels = {pc: f"L{pc}" for pc in sorted(targets)}
    lines = []
    if image.param_count:
        lines.append(f".params {image.param_count}")
    if image.declared_events:
        lines.append(f".events {format_events(image.declared_events)}")
    if image.stream_credits:
        lines.append(f".credits {image.stream_credits}")
    if image.entry_pc:
        lines.append(f".entry {labels[image.entry_pc]}")
    for pc, (ins, op) in enumerate(zip(instructions, decoded)):
        prefix = f"{labels[pc]}:" if pc in labels else ""
        if op is None:
            word = int.from_bytes(image.code[pc * WORD_BYTES:(pc + 1) * WORD_BYTES], "little")
            body = f".word 0x{word:016x}"
        else:
            body = _format(ins, op, labels)
        lines.append(f"{prefix:<8}{body}")
    return "\n".join(lines) + "\n"
