import pytest

from sim.address_space import FAR_DIRECT_BASE, SCRATCH_BASE
from sim.engine import SimConfig
from sim.errors import BadImage, FaultKind
from sim.interconnect import CacheLine
from sim.vm import (
    MASK64,
    RECV_RING_BASE,
    ChannelProgramImage,
    ChannelProgramVm,
    CpEvent,
    CpEventKind,
    FaultInfo,
    Instruction,
    Op,
    StepOutcome,
    VmStatus,
)


def raw_vm(port, *instructions):
    image = ChannelProgramImage(b"".join(ins.encode() for ins in instructions))
    vm = ChannelProgramVm(image, port, SimConfig(), port.requester)
    vm.deliver(CpEvent(CpEventKind.START, 0))
    return vm


def test_arithmetic_wraps_at_64_bits(make_vm):
    vm = make_vm("""
        MOVI r1, 7
        MOVI r2, 5
        ADD r3, r1, r2
        SUB r4, r2, r1
        MUL r5, r1, r2
        SHLI r6, r1, 4
        CMP r7, r2, r1
        MOVI r8, -1
        SHRI r8, r8, 60
        HALT
    """)
    result = vm.step(100)
    assert result.outcome is StepOutcome.HALTED
    assert result.executed == 10
    regs = vm.state.regs
    assert regs[3] == 12
    assert regs[4] == MASK64 - 1
    assert regs[5] == 35
    assert regs[6] == 112
    assert regs[7] == MASK64
    assert regs[8] == 15
    assert vm.status is VmStatus.HALTED


def test_divide_by_zero_faults_with_pc(make_vm):
    vm = make_vm("""
        MOVI r1, 1
        DIV r2, r1, r0
        HALT
    """)
    assert vm.step(10).outcome is StepOutcome.FAULTED
    assert vm.state.fault == FaultInfo(FaultKind.DIVIDE_BY_ZERO, 1, 0)
    assert vm.state.fault.to_u64() == 5 | 1 << 16


def test_budget_bounds_one_quantum(make_vm):
    vm = make_vm("""
    loop:   ADDI r1, r1, 1
            BR loop
    """)
    result = vm.step(10)
    assert result.outcome is StepOutcome.BUDGET_EXHAUSTED
    assert result.executed == 10
    assert result.cost == 10
    assert vm.status is VmStatus.READY
    assert vm.state.regs[1] == 5


def test_yield_ends_the_quantum(make_vm):
    vm = make_vm("""
        YIELD
        HALT
    """)
    result = vm.step(50)
    assert result.outcome is StepOutcome.YIELDED
    assert vm.state.pc == 1
    assert vm.step(50).outcome is StepOutcome.HALTED


def test_params_are_latched_at_start(make_vm):
    vm = make_vm("""
        .params 2
        PARAM 1, r1
        HALT
    """, params=[3, 9])
    vm.step(10)
    assert vm.state.regs[1] == 9


def test_undefined_opcodes_and_param_indices_fault(port):
    vm = raw_vm(port, Instruction(0xEE))
    vm.step(5)
    assert vm.state.fault.kind is FaultKind.ILLEGAL_OPCODE

    vm = raw_vm(port, Instruction(Op.PARAM, rd=1, imm=9))
    vm.step(5)
    assert vm.state.fault.kind is FaultKind.ILLEGAL_OPCODE


def test_branch_outside_the_code_faults(port):
    vm = raw_vm(port, Instruction(Op.NOP), Instruction(Op.BR, imm=5))
    assert vm.step(5).outcome is StepOutcome.FAULTED
    assert vm.state.fault.kind is FaultKind.BAD_BRANCH
    assert vm.state.fault.pc == 1


def test_load_completes_through_a_tagged_event(make_vm, port):
    port.memory.write(8, (0x1122334455667788).to_bytes(8, "little"))
    vm = make_vm(f"""
        .events DRAM
        MOVI r1, {FAR_DIRECT_BASE + 8}
        LDA 1, r2, [r1]
        WAITT 1
        HALT
    """)
    result = vm.step(100)
    assert result.outcome is StepOutcome.WAITING
    assert result.cost == 3 + SimConfig().dram_access_cost
    assert port.issued == [(1, 8, 0x1122334455667788)]
    assert vm.state.pending_tags == {1}

    vm.deliver(CpEvent(CpEventKind.DRAM, 500, tag=1, value=0x1122334455667788))
    assert vm.status is VmStatus.READY
    assert vm.step(100).outcome is StepOutcome.HALTED
    assert vm.state.regs[2] == 0x1122334455667788
    assert vm.state.dram_bytes == 8


def test_store_applies_at_issue(make_vm, port):
    vm = make_vm(f"""
        .events DRAM
        MOVI r1, {FAR_DIRECT_BASE}
        MOVI r2, 513
        STA.w 4, [r1], r2
        WAITT 4
        HALT
    """)
    vm.step(100)
    assert port.memory.read(0, 8) == (513).to_bytes(4, "little") + bytes(4)


@pytest.mark.parametrize("source", [
    ".events DRAM\n WAITT 3\n HALT",
    f".events DRAM\n MOVI r1, {FAR_DIRECT_BASE}\n LDA 1, r2, [r1]\n LDA 1, r3, [r1]\n HALT",
])
def test_tag_misuse_faults(make_vm, source):
    vm = make_vm(source)
    assert vm.step(10).outcome is StepOutcome.FAULTED
    assert vm.state.fault.kind is FaultKind.BAD_TAG


def test_untranslatable_addresses_fault(make_vm):
    vm = make_vm("""
        .events DRAM
        LDA 1, r2, [r0]
        HALT
    """)
    vm.step(10)
    assert vm.state.fault.kind is FaultKind.UNMAPPED
    assert vm.state.fault.va == 0


def test_scratch_is_private_and_bounded(make_vm):
    vm = make_vm(f"""
        MOVI r2, 42
        STS [r0+{SCRATCH_BASE + 16}], r2
        LDS r3, [r0+{SCRATCH_BASE + 16}]
        LDS r4, [r0+16]
        HALT
    """)
    vm.step(10)
    assert vm.state.regs[3] == 42
    assert vm.state.fault.kind is FaultKind.UNMAPPED
    assert vm.state.fault.va == 16


def test_dmaz_records_the_request(make_vm, port):
    vm = make_vm(f"""
        .events DMA
        MOVI r1, {FAR_DIRECT_BASE}
        MOVI r2, 128
        DMAZ 1, r1, r2
        WAITT 1
        HALT
    """)
    assert vm.step(10).outcome is StepOutcome.WAITING
    tag, dst, src, length = port.dmas[0]
    assert (tag, src, length) == (1, None, 128)
    assert dst.offset == 0
    assert vm.state.dma_bytes == 128
    vm.deliver(CpEvent(CpEventKind.DMA, 900, tag=1))
    assert vm.step(10).outcome is StepOutcome.HALTED


def test_send_line_blocks_without_credits(make_vm, port):
    vm = make_vm(f"""
        .events CREDIT
        .credits 2
        MOVI r1, {SCRATCH_BASE}
        SEND_LINE 0, r1
        SEND_LINE 64, r1
        SEND_LINE 128, r1
        HALT
    """)
    assert vm.state.credit_limit == 2
    assert vm.step(20).outcome is StepOutcome.WAITING
    assert [offset for offset, _, _ in port.sent] == [0, 64]

    for _ in range(5):
        vm.deliver(CpEvent(CpEventKind.CREDIT, 10))
    assert vm.state.stream_credit == 2
    assert vm.step(20).outcome is StepOutcome.HALTED
    assert [offset for offset, _, _ in port.sent] == [0, 64, 128]
    assert all(stream for _, _, stream in port.sent)
    assert vm.state.stream_lines == 3


def test_data_offsets_must_be_line_aligned(make_vm):
    vm = make_vm(f"""
        .events CREDIT
        MOVI r1, {SCRATCH_BASE}
        SEND_LINE 8, r1
    """)
    vm.step(10)
    assert vm.state.fault.kind is FaultKind.UNMAPPED


def test_receive_then_reply(make_vm, port):
    vm = make_vm("""
        .events HOST_WRITE|HOST_READ
        RECV_LINE 64, r1
        REPLY_LINE 64, r1
        HALT
    """)
    line = CacheLine.from_u64([99])
    vm.deliver(CpEvent(CpEventKind.HOST_WRITE, 1, offset=64, line=line))
    assert vm.step(10).outcome is StepOutcome.WAITING
    assert vm.state.regs[1] == RECV_RING_BASE + 64

    vm.deliver(CpEvent(CpEventKind.HOST_READ, 2, offset=0))
    assert vm.status is VmStatus.WAITING
    vm.deliver(CpEvent(CpEventKind.HOST_READ, 3, offset=64))
    assert vm.step(10).outcome is StepOutcome.HALTED
    assert port.sent == [(64, line, False)]
    assert vm.state.reply_lines == 1


def test_wait_reports_without_consuming(make_vm):
    vm = make_vm("""
        .events HOST_WRITE
        WAIT HOST_WRITE, r1, r2
        HALT
    """)
    assert vm.step(10).outcome is StepOutcome.WAITING
    vm.deliver(CpEvent(CpEventKind.HOST_WRITE, 5, offset=128, line=CacheLine.zeros()))
    assert vm.step(10).outcome is StepOutcome.HALTED
    assert vm.state.regs[1] == int(CpEventKind.HOST_WRITE)
    assert vm.state.regs[2] == 128
    assert len(vm.state.events) == 1


def test_wait_on_credit_completes_once_a_credit_is_back(make_vm):
    vm = make_vm(f"""
        .events CREDIT
        .credits 1
        MOVI r1, {SCRATCH_BASE}
        SEND_LINE 0, r1
        WAIT CREDIT, r2, r3
        HALT
    """)
    assert vm.step(10).outcome is StepOutcome.WAITING
    vm.deliver(CpEvent(CpEventKind.CREDIT, 4))
    assert vm.status is VmStatus.READY
    assert vm.step(10).outcome is StepOutcome.HALTED
    assert vm.state.regs[2] == int(CpEventKind.CREDIT)
    assert vm.state.regs[3] == 1


def test_wait_on_start_does_not_block(make_vm):
    vm = make_vm("""
        .events START
        WAIT START, r1, r2
        HALT
    """)
    assert vm.step(10).outcome is StepOutcome.HALTED
    assert vm.state.regs[1] == int(CpEventKind.START)


def test_observations_arrive_after_subscribing(make_vm, port):
    vm = make_vm("""
        .events OBSERVE
        STAT_SUB
        STAT_NEXT r1
        HALT
    """)
    assert vm.step(10).outcome is StepOutcome.WAITING
    assert port.subscribed
    vm.deliver(CpEvent(CpEventKind.OBSERVE, 7, value=FAR_DIRECT_BASE | 1))
    vm.step(10)
    assert vm.state.regs[1] == FAR_DIRECT_BASE | 1


def test_event_queue_overflow_faults(make_vm):
    vm = make_vm(".events HOST_WRITE\n RECV_LINE 0, r1\n HALT", config=SimConfig(event_queue_bound=2))
    for at in range(3):
        vm.deliver(CpEvent(CpEventKind.HOST_WRITE, at, offset=64, line=CacheLine.zeros()))
    assert vm.status is VmStatus.FAULTED
    assert vm.state.fault.kind is FaultKind.EVENT_OVERFLOW


def test_stop_wakes_and_halts(make_vm):
    vm = make_vm("""
        .events HOST_WRITE
        RECV_LINE 0, r1
        HALT
    """)
    vm.step(10)
    vm.deliver(CpEvent(CpEventKind.STOP, 20))
    assert vm.status is VmStatus.READY
    result = vm.step(10)
    assert result.outcome is StepOutcome.HALTED
    assert result.executed == 0


def test_lifecycle_guards(port, asm):
    vm = ChannelProgramVm(asm("HALT"), port, SimConfig(), port.requester)
    with pytest.raises(ValueError):
        vm.step(1)
    vm.deliver(CpEvent(CpEventKind.START, 0))
    vm.step(1)
    vm.deliver(CpEvent(CpEventKind.START, 5))
    assert vm.status is VmStatus.HALTED


def test_image_validation():
    code = Instruction(Op.HALT).encode()
    image = ChannelProgramImage(code, declared_events=CpEventKind.DRAM, stream_credits=4)
    assert ChannelProgramImage.from_bytes(image.to_bytes()) == image
    with pytest.raises(BadImage):
        ChannelProgramImage.from_bytes(b"XXXX" + image.to_bytes()[4:])
    with pytest.raises(BadImage):
        ChannelProgramImage(code + b"\0")
    with pytest.raises(BadImage):
        ChannelProgramImage(code, entry_pc=1)
    with pytest.raises(BadImage):
        ChannelProgramImage(code, param_count=9)
    with pytest.raises(BadImage):
        ChannelProgramImage.from_bytes(image.to_bytes()[:-1])
