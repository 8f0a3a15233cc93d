import pytest

from cp_lang.assembler import assemble_or_raise
from sim.address_space import FAR_DIRECT_BASE, Access, Backing, BackingKind, PhysicalMemory, Requester, Segment, SegmentTable
from sim.engine import Engine, SimConfig
from sim.system import MccSystem
from sim.vm import ChannelProgramVm, CpEvent, CpEventKind

FAR_BYTES = 4096

class FakePort:
    """Memory port over one far segment on n0; records everything the VM issues."""

    def __init__(self):
        self.memory = PhysicalMemory(FAR_BYTES, "n0")
        segment = Segment(FAR_DIRECT_BASE, FAR_BYTES, Access.RW, Backing(BackingKind.FAR_DIRECT, "n0", 0))
        self.table = SegmentTable([segment])
        self.requester = Requester(1, "n0")
        self.issued = []
        self.dmas = []
        self.sent = []
        self.subscribed = False
        self.charge = 0

    def translate(self, va, access, length):
        return self.table.translate(va, access, self.requester, length)

    def read(self, translation, length):
        return self.memory.read(translation.offset, length)

    def write(self, translation, payload):
        self.memory.write(translation.offset, payload)

    def issue_memory(self, tag, translation, nbytes, at, value):
        self.issued.append((tag, nbytes, value))

    def issue_dma(self, tag, dst, src, length, at):
        self.dmas.append((tag, dst, src, length))

    def send_line(self, offset, line, source, at, stream):
        self.sent.append((offset, line, stream))

    def subscribe(self):
        self.subscribed = True

    def take_charge(self):
        charge, self.charge = self.charge, 0
        return charge


@pytest.fixture
def engine():
    return Engine(SimConfig(), keep_log=True)


@pytest.fixture
def system():
    return MccSystem(SimConfig(seed=1))


@pytest.fixture
def asm():
    return assemble_or_raise


@pytest.fixture
def port():
    return FakePort()


@pytest.fixture
def make_vm(port):
    """Assemble `source` and return a started VM on the fake port."""

    def build(source, params=(), config=None):
        vm = ChannelProgramVm(assemble_or_raise(source), port, config or SimConfig(), port.requester)
        vm.reset(params)
        vm.deliver(CpEvent(CpEventKind.START, 0))
        return vm

    return build
