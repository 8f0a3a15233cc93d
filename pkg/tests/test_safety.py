import pytest

from cp_lang.safety import SafetyRule, Severity, check_safety
from sim.vm import ChannelProgramImage, Instruction, Op
from workloads.runtime import PROGRAM_DIR, program


def rules(report):
    return [(f.rule, f.severity) for f in report.findings]


def test_wait_on_nothing_is_an_error(asm):
    report = check_safety(asm("WAIT NONE\n HALT"))
    assert rules(report) == [(SafetyRule.UNSATISFIABLE_WAIT, Severity.ERROR)]
    assert report.errors[0].pc == 0


def test_unreachable_wait_is_ignored(asm):
    assert check_safety(asm("HALT\n WAIT NONE")).ok


def test_completion_wait_without_an_issue_warns(asm):
    report = check_safety(asm(".events DRAM\n WAITT 1\n HALT"))
    assert rules(report) == [(SafetyRule.COMPLETION_WITHOUT_REQUEST, Severity.WARNING)]
    assert not report.errors

    issued = asm(".events DRAM\n LDA 1, r1, [r2]\n WAITT 1\n HALT")
    assert check_safety(issued).ok


def test_send_loop_without_a_yield_warns(asm):
    report = check_safety(asm(".events CREDIT\n loop: SEND_LINE 0, r1\n BR loop"))
    assert report.by_rule(SafetyRule.SEND_LOOP_WITHOUT_YIELD)[0].pc == 0
    assert not report.errors

    yielding = asm(".events CREDIT\n loop: SEND_LINE 0, r1\n YIELD\n BR loop")
    assert check_safety(yielding).ok


def test_branch_outside_code_is_an_error():
    image = ChannelProgramImage(Instruction(Op.NOP).encode() + Instruction(Op.BEQ, ra=1, rb=2, imm=40).encode())
    report = check_safety(image)
    assert [(f.rule, f.pc) for f in report.errors] == [(SafetyRule.BRANCH_OUTSIDE_CODE, 1)]


@pytest.mark.parametrize("name", sorted(p.stem for p in PROGRAM_DIR.glob("*.cp")))
def test_bundled_programs_are_error_free(name):
    assert not check_safety(program(name)).errors
