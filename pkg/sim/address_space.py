"""
Per-application virtual address spaces built from contiguous segments.

The layout makes physical location explicit: each region class has a fixed
base and is allocated bump-pointer style.

    0x0001_0000  host-local memory (reachable by MCCs through DMA)
    0x1000_0000  far memory mapped directly, one segment per mapping
    0x2000_0000  MCC control (4 KiB) + data (64 KiB) regions
    0x7F00_0000  per-MCC scratch, private to the channel program

`SegmentTable.translate` is the single protection check used by the host
MMU model and, through replicas, by every node.
"""

import bisect
import logging
from dataclasses import dataclass
from enum import Enum, Flag
from typing import Iterable

from sim.errors import AccessFault, BadLength, FaultKind, OutOfFarMemory, OutOfRange

logger = logging.getLogger(__name__)

SEGMENT_ALIGN = 64
HOST_LOCAL_BASE = 0x0001_0000
FAR_DIRECT_BASE = 0x1000_0000
MCC_REGION_BASE = 0x2000_0000
MCC_CONTROL_BYTES = 4096
MCC_DATA_BYTES = 64 * 1024
# Per-MCC scratch window; never part of an address space.
SCRATCH_BASE = 0x7F00_0000
SCRATCH_BYTES = 8192

_CLASS_LIMITS = {
    HOST_LOCAL_BASE: FAR_DIRECT_BASE,
    FAR_DIRECT_BASE: MCC_REGION_BASE,
    MCC_REGION_BASE: SCRATCH_BASE,
}


class Access(Flag):
    R = 1
    W = 2
    RW = 3


class BackingKind(Enum):
    HOST_LOCAL = "HostLocal"
    FAR_DIRECT = "FarDirect"
    MCC_CONTROL = "MccControl"
    MCC_DATA = "MccData"


@dataclass(frozen=True)
class Backing:
    kind: BackingKind
    node_id: str | None = None
    offset: int = 0
    mcc_id: int | None = None


@dataclass(frozen=True)
class Segment:
    base_va: int
    length: int
    perms: Access
    backing: Backing

    def __post_init__(self):
        if self.length <= 0 or self.length % SEGMENT_ALIGN or self.base_va % SEGMENT_ALIGN:
            raise BadLength(f"segment 0x{self.base_va:x}+{self.length} is not {SEGMENT_ALIGN}-aligned and non-empty")
        if not self.perms:
            raise ValueError("segment permissions must be non-empty")

    @property
    def end(self) -> int:
        return self.base_va + self.length

    def contains(self, va: int, length: int = 1) -> bool:
        return self.base_va <= va and va + length <= self.end


@dataclass(frozen=True)
class Requester:
    """Who is asking: the host CPU (mcc_id None) or an MCC on `affinity`."""

    mcc_id: int | None = None
    affinity: str | None = None

    @property
    def is_host(self) -> bool:
        return self.mcc_id is None


HOST = Requester()


@dataclass(frozen=True)
class Translation:
    segment: Segment
    offset: int

    @property
    def backing(self) -> Backing:
        return self.segment.backing


class PhysicalMemory:
    """Byte-addressable backing store with a bump allocator."""

    def __init__(self, size: int, name: str, exhausted=OutOfFarMemory):
        if size <= 0 or size % SEGMENT_ALIGN:
            raise BadLength(f"{name}: size must be positive and {SEGMENT_ALIGN}-aligned")
        self.name = name
        self.size = size
        self.data = bytearray(size)
        self._next = 0
        self._exhausted = exhausted

    @property
    def free_bytes(self) -> int:
        return self.size - self._next

    def allocate(self, length: int) -> int:
        if length <= 0 or length % SEGMENT_ALIGN:
            raise BadLength(f"allocation of {length} bytes is not {SEGMENT_ALIGN}-aligned")
        if length > self.free_bytes:
            raise self._exhausted(f"{self.name}: {length} bytes requested, {self.free_bytes} free")
        offset = self._next
        self._next += length
        return offset

    def check(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise OutOfRange(f"{self.name}: [{offset}, +{length}) outside {self.size} bytes")

    def read(self, offset: int, length: int) -> bytes:
        self.check(offset, length)
        return bytes(self.data[offset:offset + length])

    def write(self, offset: int, payload: bytes) -> None:
        self.check(offset, len(payload))
        self.data[offset:offset + len(payload)] = payload

    def fill(self, offset: int, length: int, value: int = 0) -> None:
        self.check(offset, length)
        self.data[offset:offset + length] = bytes([value]) * length

    def copy(self, dst: int, src: int, length: int) -> None:
        self.check(dst, length)
        self.check(src, length)
        self.data[dst:dst + length] = self.data[src:src + length]


class SegmentTable:
    """Ordered, non-overlapping segment set with the translate rule."""

    def __init__(self, segments: Iterable[Segment] = (), epoch: int = 0, strict_affinity: bool = True):
        self.segments: list[Segment] = sorted(segments, key=lambda s: s.base_va)
        self.epoch = epoch
        self.strict_affinity = strict_affinity
        self._bases = [s.base_va for s in self.segments]
        self.check_invariants()

    def check_invariants(self) -> None:
        for left, right in zip(self.segments, self.segments[1:]):
            if left.end > right.base_va:
                raise AssertionError(f"segments overlap: 0x{left.base_va:x} and 0x{right.base_va:x}")

    def lookup(self, va: int) -> Segment | None:
        index = bisect.bisect_right(self._bases, va) - 1
        if index < 0:
            return None
        segment = self.segments[index]
        return segment if segment.contains(va) else None

    def translate(self, va: int, access: Access, requester: Requester = HOST, length: int = 1) -> Translation:
        segment = self.lookup(va)
        if segment is None or not segment.contains(va, max(length, 1)):
            raise AccessFault(FaultKind.UNMAPPED, va)
        if access & ~segment.perms:
            raise AccessFault(FaultKind.PERMISSION, va, f"{access} on {segment.perms}")
        backing = segment.backing
        if not requester.is_host:
            if backing.kind in (BackingKind.MCC_CONTROL, BackingKind.MCC_DATA):
                raise AccessFault(FaultKind.PERMISSION, va, "MCC regions are host-only")
            if (backing.kind is BackingKind.FAR_DIRECT and self.strict_affinity
                    and backing.node_id != requester.affinity):
                raise AccessFault(FaultKind.AFFINITY_VIOLATION, va,
                                  f"memory on {backing.node_id}, MCC on {requester.affinity}")
        return Translation(segment, backing.offset + (va - segment.base_va))


class SegmentReplica(SegmentTable):
    """Node-side value copy of an address space, tagged with its epoch."""

    def __init__(self, app_id: str, node_id: str, segments, epoch: int, strict_affinity: bool):
        super().__init__(segments, epoch, strict_affinity)
        self.app_id = app_id
        self.node_id = node_id

    @property
    def relevant(self) -> tuple[Segment, ...]:
        """Segments an MCC on this node can actually use; the rest are kept
        only so that fault kinds match the master."""
        return tuple(
            s for s in self.segments
            if s.backing.kind is BackingKind.HOST_LOCAL
            or (s.backing.kind is BackingKind.FAR_DIRECT
                and (s.backing.node_id == self.node_id or not self.strict_affinity))
        )

    def is_stale(self, space: "AddressSpace") -> bool:
        return self.epoch != space.epoch


class AddressSpace(SegmentTable):
    """The host-side master copy for one application."""

    def __init__(self, app_id: str, far_memory: dict[str, PhysicalMemory], host_memory: PhysicalMemory,
                 strict_affinity: bool = True):
        super().__init__((), 0, strict_affinity)
        self.app_id = app_id
        self.far_memory = far_memory
        self.host_memory = host_memory
        self._next_va = {base: base for base in _CLASS_LIMITS}

    def _room(self, class_base: int, length: int) -> int:
        """Next free VA of the class; raises before anything is allocated."""
        if length <= 0 or length % SEGMENT_ALIGN:
            raise BadLength(f"length {length} must be positive and {SEGMENT_ALIGN}-aligned")
        va = self._next_va[class_base]
        if va + length > _CLASS_LIMITS[class_base]:
            raise BadLength(f"region class 0x{class_base:x} exhausted")
        return va

    def _place(self, class_base: int, length: int, perms: Access, backing: Backing) -> Segment:
        va = self._room(class_base, length)
        segment = Segment(va, length, perms, backing)
        self._next_va[class_base] = va + length
        self._insert(segment)
        return segment

    def _insert(self, segment: Segment) -> None:
        index = bisect.bisect_left(self._bases, segment.base_va)
        self.segments.insert(index, segment)
        self._bases.insert(index, segment.base_va)
        self.epoch += 1
        self.check_invariants()
        logger.debug("%s: mapped %s at 0x%x+%d (epoch %d)", self.app_id, segment.backing.kind.value,
                     segment.base_va, segment.length, self.epoch)

    def map_far(self, node_id: str, length: int, perms: Access = Access.RW) -> Segment:
        pool = self.far_memory.get(node_id)
        if pool is None:
            raise KeyError(f"unknown node {node_id!r}")
        self._room(FAR_DIRECT_BASE, length)
        offset = pool.allocate(length)
        return self._place(FAR_DIRECT_BASE, length, perms, Backing(BackingKind.FAR_DIRECT, node_id, offset))

    def map_host(self, length: int, perms: Access = Access.RW) -> Segment:
        self._room(HOST_LOCAL_BASE, length)
        offset = self.host_memory.allocate(length)
        return self._place(HOST_LOCAL_BASE, length, perms, Backing(BackingKind.HOST_LOCAL, None, offset))

    def map_mcc(self, mcc_id: int, node_id: str) -> tuple[Segment, Segment]:
        self._room(MCC_REGION_BASE, MCC_CONTROL_BYTES + MCC_DATA_BYTES)
        control = self._place(MCC_REGION_BASE, MCC_CONTROL_BYTES, Access.RW,
                              Backing(BackingKind.MCC_CONTROL, node_id, 0, mcc_id))
        data = self._place(MCC_REGION_BASE, MCC_DATA_BYTES, Access.RW,
                           Backing(BackingKind.MCC_DATA, node_id, 0, mcc_id))
        return control, data

    def unmap(self, segment: Segment) -> None:
        index = bisect.bisect_left(self._bases, segment.base_va)
        if index >= len(self.segments) or self.segments[index] != segment:
            raise KeyError(f"segment at 0x{segment.base_va:x} is not mapped")
        del self.segments[index]
        del self._bases[index]
        self.epoch += 1
        self.check_invariants()

    def sync_segments(self, node_id: str) -> SegmentReplica:
        return SegmentReplica(self.app_id, node_id, tuple(self.segments), self.epoch, self.strict_affinity)

    def segments_of(self, mcc_id: int) -> list[Segment]:
        return [s for s in self.segments if s.backing.mcc_id == mcc_id]
