"""
Static checks over an assembled image's control-flow graph.

The checks are approximations. The node's deadlock
probe and the host watchdog catch what they miss at run time.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components

from sim.vm import BRANCH_OPS, ChannelProgramImage, CpEventKind, Op

logger = logging.getLogger(__name__)

_ISSUES = frozenset({Op.LDA, Op.STA, Op.DMA, Op.DMAZ})
_YIELDS = frozenset({Op.YIELD, Op.WAIT, Op.WAITT})
_COMPLETIONS = CpEventKind.DRAM | CpEventKind.DMA


class SafetyRule(Enum):
    UNSATISFIABLE_WAIT = "wait"
    COMPLETION_WITHOUT_REQUEST = "completion"
    SEND_LOOP_WITHOUT_YIELD = "send-loop"
    BRANCH_OUTSIDE_CODE = "branch"


class Severity(Enum):
    ERROR = "error"
    WARNING = "warning"


@dataclass(frozen=True)
class Finding:
    rule: SafetyRule
    severity: Severity
    pc: int
    message: str

    def __str__(self) -> str:
        return f"pc {self.pc}: {self.severity.value} ({self.rule.value}): {self.message}"


@dataclass
class SafetyReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    @property
    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.ERROR]

    def by_rule(self, rule: SafetyRule) -> list[Finding]:
        return [f for f in self.findings if f.rule is rule]


def _op(raw: int) -> Op | None:
    try:
        return Op(raw)
    except ValueError:
        return None


def successors(image: ChannelProgramImage) -> list[list[int]]:
    """Static successor lists; faulting or halting instructions have none."""
    size = len(image)
    result = []
    for pc, ins in enumerate(image.instructions):
        op = _op(ins.op)
        targets = []
        if op is None or op is Op.HALT:
            pass
        elif op is Op.BR:
            targets = [ins.imm]
        else:
            targets = [pc + 1]
            if op in BRANCH_OPS:
                targets.append(ins.imm)
        result.append(sorted({t for t in targets if 0 <= t < size}))
    return result


def _matrix(graph: list[list[int]]) -> csr_matrix:
    size = len(graph)
    rows = [pc for pc, nexts in enumerate(graph) for _ in nexts]
    cols = [n for nexts in graph for n in nexts]
    return csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(size, size))


def _reach(matrix: csr_matrix, starts) -> set[int]:
    seen: set[int] = set()
    for start in starts:
        if start not in seen:
            seen.update(int(pc) for pc in breadth_first_order(matrix, start, directed=True,
                                                              return_predecessors=False))
    return seen


def _cycles(graph: list[list[int]], matrix: csr_matrix) -> list[list[int]]:
    """Strongly connected components that contain a cycle."""
    _, labels = connected_components(matrix, directed=True, connection="strong")
    members: dict[int, list[int]] = {}
    for pc, label in enumerate(labels):
        members.setdefault(int(label), []).append(pc)
    return [pcs for pcs in members.values() if len(pcs) > 1 or pcs[0] in graph[pcs[0]]]


def check_safety(image: ChannelProgramImage) -> SafetyReport:
    report = SafetyReport()
    instructions = image.instructions
    graph = successors(image)
    matrix = _matrix(graph)
    reachable = _reach(matrix, [image.entry_pc])

    for pc in image.bad_branches():
        report.findings.append(Finding(SafetyRule.BRANCH_OUTSIDE_CODE, Severity.ERROR, pc,
                                       f"branch target {instructions[pc].imm} outside the code"))

    for pc in sorted(reachable):
        ins = instructions[pc]
        if _op(ins.op) is Op.WAIT and not CpEventKind(ins.imm & 0xFF) & image.declared_events:
            report.findings.append(Finding(
                SafetyRule.UNSATISFIABLE_WAIT, Severity.ERROR, pc,
                f"WAIT filter {ins.imm & 0xFF:#x} shares no kind with the declared events; it can never wake"))

    after_issue = _reach(matrix, [n for pc, ins in enumerate(instructions) if _op(ins.op) in _ISSUES
                                 for n in graph[pc]])
    for pc in sorted(reachable - after_issue):
        ins = instructions[pc]
        op = _op(ins.op)
        waits_completion = op is Op.WAITT or (
            op is Op.WAIT and ins.imm & _COMPLETIONS and not ins.imm & ~(_COMPLETIONS | CpEventKind.STOP) & 0xFF)
        if waits_completion:
            report.findings.append(Finding(
                SafetyRule.COMPLETION_WITHOUT_REQUEST, Severity.WARNING, pc,
                "waits for a DRAM/DMA completion that no path issues"))

    for component in _cycles(graph, matrix):
        ops = {_op(instructions[pc].op) for pc in component}
        if Op.SEND_LINE in ops and not ops & _YIELDS:
            first = min(pc for pc in component if instructions[pc].op == Op.SEND_LINE)
            report.findings.append(Finding(
                SafetyRule.SEND_LOOP_WITHOUT_YIELD, Severity.WARNING, first,
                "SEND_LINE loop never yields or waits"))

    for finding in report.findings:
        logger.info("%s", finding)
    return report
