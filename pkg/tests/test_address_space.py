import pytest

from sim.address_space import (
    FAR_DIRECT_BASE,
    HOST,
    HOST_LOCAL_BASE,
    MCC_CONTROL_BYTES,
    MCC_DATA_BYTES,
    MCC_REGION_BASE,
    Access,
    AddressSpace,
    BackingKind,
    PhysicalMemory,
    Requester,
    _CLASS_LIMITS,
)
from sim.errors import AccessFault, BadLength, FaultKind, OutOfFarMemory, OutOfHostMemory, OutOfRange

MiB = 1 << 20


def make_space(strict_affinity=True):
    far = {"n0": PhysicalMemory(MiB, "n0"), "n1": PhysicalMemory(MiB, "n1")}
    return AddressSpace("app", far, PhysicalMemory(MiB, "host", OutOfHostMemory), strict_affinity)


def test_allocation_is_line_granular_and_bounded():
    memory = PhysicalMemory(256, "n0")
    with pytest.raises(BadLength):
        memory.allocate(10)
    assert memory.allocate(128) == 0
    assert memory.allocate(64) == 128
    with pytest.raises(OutOfFarMemory):
        memory.allocate(128)
    with pytest.raises(OutOfHostMemory):
        PhysicalMemory(64, "host", OutOfHostMemory).allocate(128)


def test_physical_accesses_are_range_checked():
    memory = PhysicalMemory(128, "n0")
    memory.write(120, b"abcdefgh")
    assert memory.read(120, 8) == b"abcdefgh"
    with pytest.raises(OutOfRange):
        memory.read(124, 8)
    memory.fill(0, 64, 0xFF)
    memory.copy(64, 0, 8)
    assert memory.read(64, 8) == b"\xff" * 8


def test_region_classes_have_fixed_bases():
    space = make_space()
    far = space.map_far("n0", 4096)
    more = space.map_far("n1", 128)
    local = space.map_host(256)
    control, data = space.map_mcc(7, "n0")

    assert far.base_va == FAR_DIRECT_BASE
    assert more.base_va == FAR_DIRECT_BASE + 4096
    assert local.base_va == HOST_LOCAL_BASE
    assert control.base_va == MCC_REGION_BASE and control.length == MCC_CONTROL_BYTES
    assert data.base_va == MCC_REGION_BASE + MCC_CONTROL_BYTES and data.length == MCC_DATA_BYTES
    assert space.epoch == 5
    assert space.segments_of(7) == [control, data]


def test_host_translation_resolves_the_backing_offset():
    space = make_space()
    space.map_far("n0", 256)
    segment = space.map_far("n0", 256)
    translation = space.translate(segment.base_va + 72, Access.R, HOST, 8)
    assert translation.backing.kind is BackingKind.FAR_DIRECT
    assert translation.offset == 256 + 72


def test_unmapped_and_straddling_accesses_fault():
    space = make_space()
    segment = space.map_far("n0", 128)
    with pytest.raises(AccessFault) as excinfo:
        space.translate(0x1234, Access.R)
    assert excinfo.value.kind is FaultKind.UNMAPPED
    with pytest.raises(AccessFault) as excinfo:
        space.translate(segment.base_va + 120, Access.R, HOST, 16)
    assert excinfo.value.kind is FaultKind.UNMAPPED


def test_permissions_are_enforced():
    space = make_space()
    read_only = space.map_far("n0", 64, Access.R)
    space.translate(read_only.base_va, Access.R)
    with pytest.raises(AccessFault) as excinfo:
        space.translate(read_only.base_va, Access.W)
    assert excinfo.value.kind is FaultKind.PERMISSION


def test_mcc_regions_are_host_only():
    space = make_space()
    control, _ = space.map_mcc(1, "n0")
    space.translate(control.base_va, Access.W)
    with pytest.raises(AccessFault) as excinfo:
        space.translate(control.base_va, Access.W, Requester(1, "n0"))
    assert excinfo.value.kind is FaultKind.PERMISSION


def test_mccs_only_reach_far_memory_on_their_own_node():
    space = make_space()
    remote = space.map_far("n1", 64)
    local = space.map_far("n0", 64)
    requester = Requester(1, "n0")
    space.translate(local.base_va, Access.RW, requester)
    with pytest.raises(AccessFault) as excinfo:
        space.translate(remote.base_va, Access.R, requester)
    assert excinfo.value.kind is FaultKind.AFFINITY_VIOLATION

    relaxed = make_space(strict_affinity=False)
    remote = relaxed.map_far("n1", 64)
    assert relaxed.translate(remote.base_va, Access.R, requester).backing.node_id == "n1"


def test_mapping_errors():
    space = make_space()
    with pytest.raises(KeyError):
        space.map_far("n9", 64)
    with pytest.raises(BadLength):
        space.map_far("n0", 100)
    segment = space.map_host(64)
    space.unmap(segment)
    with pytest.raises(KeyError):
        space.unmap(segment)
    with pytest.raises(AccessFault):
        space.translate(segment.base_va, Access.R)


def test_replicas_go_stale_when_the_master_changes():
    space = make_space()
    space.map_far("n0", 64)
    space.map_far("n1", 64)
    space.map_host(64)
    replica = space.sync_segments("n0")
    assert not replica.is_stale(space)
    assert [s.backing.kind for s in replica.relevant] == [BackingKind.HOST_LOCAL, BackingKind.FAR_DIRECT]

    space.map_far("n0", 64)
    assert replica.is_stale(space)
    assert len(space.sync_segments("n0").relevant) == 3


def test_an_exhausted_region_class_allocates_nothing():
    space = make_space()
    space._next_va[FAR_DIRECT_BASE] = _CLASS_LIMITS[FAR_DIRECT_BASE] - 64
    space._next_va[HOST_LOCAL_BASE] = _CLASS_LIMITS[HOST_LOCAL_BASE] - 64
    with pytest.raises(BadLength, match="exhausted"):
        space.map_far("n0", 128)
    with pytest.raises(BadLength, match="exhausted"):
        space.map_host(128)
    assert space.far_memory["n0"].free_bytes == MiB
    assert space.host_memory.free_bytes == MiB
    assert space.map_far("n0", 64).backing.offset == 0
