from fractions import Fraction

import pytest

from sim.engine import EventKind, SimConfig
from sim.interconnect import (
    LINE_SIZE,
    CacheLine,
    CoherenceMessage,
    Interconnect,
    Link,
    LinkConfig,
    MessageKind,
    endpoint_of,
    round_half_up,
    round_trip,
)
from sim.system import MccSystem

DEFAULT_LINK = LinkConfig.from_sim_config(SimConfig())


def test_cache_line_is_exactly_64_bytes():
    with pytest.raises(ValueError):
        CacheLine(bytes(63))
    line = CacheLine.from_u64([1, 2])
    assert line.u64() == (1, 2, 0, 0, 0, 0, 0, 0)
    assert CacheLine.from_u32([7]).u32()[:2] == (7, 0)
    assert CacheLine.zeros().data == bytes(LINE_SIZE)


def test_messages_validate_alignment_and_payload():
    with pytest.raises(ValueError):
        CoherenceMessage(MessageKind.LOAD_REQ, 8, "host/a", "n0")
    with pytest.raises(ValueError):
        CoherenceMessage(MessageKind.STORE_REQ, 0, "host/a", "n0")
    with pytest.raises(ValueError):
        CoherenceMessage(MessageKind.ACK, 0, "n0", "host/a", line=CacheLine.zeros())
    assert CoherenceMessage(MessageKind.LOAD_REQ, 64, "host/a", "n0").payload_bytes == 8
    assert CoherenceMessage(MessageKind.DATA_RESP, 64, "n0", "host/a", line=CacheLine.zeros()).payload_bytes == 64


def test_latency_arithmetic():
    assert DEFAULT_LINK.one_way_latency_ns == 250
    assert LinkConfig(250, 300, 2, 52.0).one_way_latency_ns == 850
    assert DEFAULT_LINK.serialization(64) == Fraction(16, 13)
    assert round_half_up(Fraction(5, 2)) == 3
    assert round_half_up(Fraction(16, 13)) == 1
    assert round_trip(DEFAULT_LINK, 80) == 580


def test_link_transfers_queue_behind_each_other():
    link = Link(LinkConfig(250, 300, 0, 52.0), "host->n0")
    assert link.reserve(0, 52) == 1
    assert link.reserve(0, 52) == 2
    assert link.reserve(10, 52) == 11
    assert link.bytes_sent == 156
    assert link.messages == 3


def test_host_side_actors_share_one_endpoint(engine):
    assert endpoint_of("host/app0") == "host"
    assert endpoint_of("n1") == "n1"
    net = Interconnect(engine, DEFAULT_LINK)
    assert net.link("host/a", "n0") is net.link("host/b", "n0")
    assert net.link("n0", "host/a") is not net.link("host/a", "n0")


def test_send_schedules_delivery(engine):
    delivered = []
    engine.register("n0", lambda event: delivered.append((event.at, event.kind, event.payload)))
    net = Interconnect(engine, DEFAULT_LINK)
    message = CoherenceMessage(MessageKind.STORE_REQ, 0, "host/a", "n0", line=CacheLine.zeros())
    assert net.send(message) == 251
    engine.run_until()
    assert delivered == [(251, EventKind.MESSAGE_DELIVERY, message)]


def far_read_done_at(config):
    system = MccSystem(config)
    app = system.create_app("a")
    segment = app.map_far("n0", 4096)
    app.populate(segment.base_va, b"\x2a" * 8)

    def script():
        data = yield app.far_read(segment.base_va, 8)
        return data, app.engine.now()

    _, (data, done_at) = system.execute(app, script())
    assert data == b"\x2a" * 8
    return done_at


def test_unloaded_far_read_takes_two_trips_plus_dram():
    assert far_read_done_at(SimConfig()) == 581


def test_each_hop_adds_its_latency_in_both_directions():
    base = far_read_done_at(SimConfig())
    assert far_read_done_at(SimConfig(hops=2)) - base == 1200
