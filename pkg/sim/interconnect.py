"""
Cache-coherent interconnect between the host and far-memory nodes.

Coherence is modelled as reliable request/response message passing at
cache-line granularity. Each ordered pair of physical endpoints owns one
`Link`; a transfer occupies the link for payload/bandwidth and is then
delivered after the one-way latency (base + hops x per-hop).
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

from sim.engine import Engine, EventKind, SimConfig

logger = logging.getLogger(__name__)

LINE_SIZE = 64
CONTROL_MESSAGE_BYTES = 8
HOST_ENDPOINT = "host"

_WORDS32 = struct.Struct("<16I")
_WORDS64 = struct.Struct("<8Q")


@dataclass(frozen=True)
class CacheLine:
    """Exactly 64 octets; the unit of every coherence transfer."""

    data: bytes = bytes(LINE_SIZE)

    def __post_init__(self):
        if len(self.data) != LINE_SIZE:
            raise ValueError(f"cache line must be {LINE_SIZE} bytes, got {len(self.data)}")
        if not isinstance(self.data, bytes):
            object.__setattr__(self, "data", bytes(self.data))

    @classmethod
    def zeros(cls) -> "CacheLine":
        return cls(bytes(LINE_SIZE))

    @classmethod
    def from_u32(cls, words) -> "CacheLine":
        words = list(words)
        words += [0] * (16 - len(words))
        return cls(_WORDS32.pack(*words))

    @classmethod
    def from_u64(cls, words) -> "CacheLine":
        words = list(words)
        words += [0] * (8 - len(words))
        return cls(_WORDS64.pack(*words))

    def u32(self) -> tuple[int, ...]:
        return _WORDS32.unpack(self.data)

    def u64(self) -> tuple[int, ...]:
        return _WORDS64.unpack(self.data)

    def __repr__(self) -> str:
        return f"CacheLine({hashlib.blake2b(self.data, digest_size=4).hexdigest()})"


class MessageKind(Enum):
    LOAD_REQ = "LoadReq"
    STORE_REQ = "StoreReq"
    DATA_RESP = "DataResp"
    ACK = "Ack"
    OBSERVE_NOTIFY = "ObserveNotify"


class Region(Enum):
    """Which part of the address map a message addresses."""
    FAR = "far"
    CONTROL = "control"
    DATA = "data"


_LINE_KINDS = {MessageKind.STORE_REQ, MessageKind.DATA_RESP}


@dataclass(frozen=True)
class CoherenceMessage:
    kind: MessageKind
    line_addr: int
    src: str
    dst: str
    issued_at: int = 0
    line: CacheLine | None = None
    region: Region = Region.FAR
    mcc_id: int | None = None
    offset: int = 0
    value: int = 0
    tag: int = 0
    stream: bool = False

    def __post_init__(self):
        if self.line_addr % LINE_SIZE:
            raise ValueError(f"line_addr 0x{self.line_addr:x} is not {LINE_SIZE}-aligned")
        carries_line = self.line is not None
        if (self.kind in _LINE_KINDS) != carries_line:
            raise ValueError(f"{self.kind.value} must{'' if self.kind in _LINE_KINDS else ' not'} carry a line")

    @property
    def payload_bytes(self) -> int:
        return LINE_SIZE if self.line is not None else CONTROL_MESSAGE_BYTES


@dataclass(frozen=True)
class LinkConfig:
    base_latency_ns: int
    per_hop_latency_ns: int
    hops: int
    bandwidth_bytes_per_ns: float

    def __post_init__(self):
        if self.bandwidth_bytes_per_ns <= 0:
            raise ValueError("bandwidth must be > 0")
        if self.base_latency_ns < 0 or self.per_hop_latency_ns < 0 or self.hops < 0:
            raise ValueError("latencies and hop count must be >= 0")

    @classmethod
    def from_sim_config(cls, config: SimConfig) -> "LinkConfig":
        return cls(config.far_base_latency_ns, config.per_hop_latency_ns, config.hops,
                   config.far_bandwidth_bytes_per_ns)

    @property
    def one_way_latency_ns(self) -> int:
        return self.base_latency_ns + self.hops * self.per_hop_latency_ns

    def serialization(self, nbytes: int) -> Fraction:
        return Fraction(nbytes) / Fraction(self.bandwidth_bytes_per_ns).limit_denominator(1_000_000)


def round_half_up(value: Fraction) -> int:
    return int(value + Fraction(1, 2))


def round_trip(link: LinkConfig, service_ns: int) -> int:
    """Unloaded request/response latency: two one-way trips plus remote service."""
    return 2 * link.one_way_latency_ns + service_ns


class Link:
    """One direction between two physical endpoints."""

    def __init__(self, config: LinkConfig, name: str):
        self.config = config
        self.name = name
        self.free_at = Fraction(0)
        self.bytes_sent = 0
        self.messages = 0

    def reserve(self, start_at: int, nbytes: int) -> int:
        """Occupy the link for `nbytes`; returns when the last byte leaves."""
        start = max(Fraction(start_at), self.free_at)
        self.free_at = start + self.config.serialization(nbytes)
        self.bytes_sent += nbytes
        self.messages += 1
        return round_half_up(self.free_at)


def endpoint_of(actor_id: str) -> str:
    """Physical endpoint of an actor: host-side actors share `host`."""
    return HOST_ENDPOINT if actor_id.startswith(HOST_ENDPOINT) else actor_id


class Interconnect:
    def __init__(self, engine: Engine, link_config: LinkConfig):
        self.engine = engine
        self.link_config = link_config
        self._links: dict[tuple[str, str], Link] = {}

    def link(self, src: str, dst: str) -> Link:
        key = (endpoint_of(src), endpoint_of(dst))
        link = self._links.get(key)
        if link is None:
            link = self._links[key] = Link(self.link_config, f"{key[0]}->{key[1]}")
        return link

    def links(self) -> list[Link]:
        return [self._links[key] for key in sorted(self._links)]

    def send(self, msg: CoherenceMessage, at: int | None = None) -> int:
        """Put `msg` on the wire at `at` (default now); schedules its delivery
        to `msg.dst` and returns the delivery time."""
        issue = self.engine.now() if at is None else at
        link = self.link(msg.src, msg.dst)
        departed = link.reserve(issue, msg.payload_bytes)
        delivery = departed + link.config.one_way_latency_ns
        self.engine.schedule(delivery, msg.dst, EventKind.MESSAGE_DELIVERY, msg)
        logger.debug("%s %s 0x%x -> %s at %d", link.name, msg.kind.value, msg.line_addr, msg.dst, delivery)
        return delivery
