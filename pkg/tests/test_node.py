import pytest

from sim.control import ControlStatus
from sim.engine import RunOutcome, SimConfig
from sim.errors import AffinityMismatch, ConfigError, DuplicateMcc, UnknownMcc
from sim.node import MccInstance, NodeConfig, SchedulingPolicy
from sim.system import MccSystem
from sim.vm import VmStatus
from tests.helpers import BUSY_LOOP, start_programs


def busy_system(node, weights, limit_ns):
    system = MccSystem(SimConfig(seed=3), [node])
    app = system.create_app("busy")
    handles = [app.mcc_create(node.node_id, weight) for weight in weights]
    system.spawn(app, start_programs(app, handles, BUSY_LOOP))
    assert system.run(limit_ns) is RunOutcome.LIMIT_REACHED
    instances = system.node(node.node_id).instances
    return system, [instances[h.mcc_id].vm.state.instructions for h in handles]


def test_round_robin_shares_one_processor_equally():
    _, executed = busy_system(NodeConfig("n0"), [1, 1, 1, 1], 200_000)
    total = sum(executed)
    assert total > 150_000
    for count in executed:
        assert count / total == pytest.approx(0.25, abs=0.02)


def test_wfq_shares_follow_weights():
    node = NodeConfig("n0", policy=SchedulingPolicy.WFQ)
    _, executed = busy_system(node, [1, 2, 4], 300_000)
    total = sum(executed)
    for count, weight in zip(executed, [1, 2, 4]):
        assert count / total == pytest.approx(weight / 7, abs=0.05)


def test_an_instance_never_runs_on_two_processors_at_once():
    node = NodeConfig("n0", num_physical_processors=2)
    system = MccSystem(SimConfig(seed=3), [node])
    system.node("n0").trace_dispatch = True
    app = system.create_app("busy")
    handles = [app.mcc_create("n0") for _ in range(3)]
    system.spawn(app, start_programs(app, handles, BUSY_LOOP))
    system.run(50_000)

    trace = system.node("n0").dispatch_trace
    assert {processor for _, processor, _, _ in trace} == {0, 1}
    for handle in handles:
        spans = sorted((now, now + executed) for now, _, mcc_id, executed in trace if mcc_id == handle.mcc_id)
        assert spans
        for (_, end), (start, _) in zip(spans, spans[1:]):
            assert start >= end


def test_two_processors_do_twice_the_work():
    _, one = busy_system(NodeConfig("n0"), [1, 1], 100_000)
    _, two = busy_system(NodeConfig("n0", num_physical_processors=2), [1, 1], 100_000)
    assert sum(two) == pytest.approx(2 * sum(one), rel=0.05)


def test_admission_checks(system):
    node = system.node("n0")
    space = system.address_space("x")
    with pytest.raises(AffinityMismatch):
        node.admit(MccInstance(50, "x", "n1", space))
    node.admit(MccInstance(51, "x", "n0", space))
    with pytest.raises(DuplicateMcc):
        node.admit(MccInstance(51, "x", "n0", space))
    assert node.evict(51).evicted
    with pytest.raises(UnknownMcc):
        node.evict(51)
    with pytest.raises(ValueError):
        MccInstance(52, "x", "n0", space, weight=0)


def test_node_config_from_mapping():
    node = NodeConfig.from_mapping({"id": "n3", "processors": 2, "policy": "wfq", "dram_latency_ns": 90})
    assert (node.node_id, node.num_physical_processors, node.policy, node.dram_latency_ns) == (
        "n3", 2, SchedulingPolicy.WFQ, 90)
    with pytest.raises(ConfigError):
        NodeConfig.from_mapping({"id": "n3", "cores": 2})
    with pytest.raises(ConfigError):
        NodeConfig.from_mapping({"id": "n3", "policy": "lottery"})
    with pytest.raises(ConfigError):
        NodeConfig("host0")


def test_a_fault_stops_only_the_faulting_instance(system):
    app = system.create_app("a")
    good, bad = app.mcc_create("n0"), app.mcc_create("n0")
    images = {good.mcc_id: "HALT", bad.mcc_id: "MOVI r1, 1\n DIV r2, r1, r0"}

    def script():
        statuses = []
        for handle in (good, bad):
            yield from start_programs(app, [handle], images[handle.mcc_id])
            statuses.append((yield app.wait_done(handle)))
        return statuses

    _, statuses = system.execute(app, script())
    assert statuses == [ControlStatus.HALTED, ControlStatus.FAULTED]
    assert app.cached_fault_info(bad) & 0xFFFF == 5
    rows = {row["mcc_id"]: row for row in system.stats_rows()}
    assert rows[good.mcc_id]["status"] == "Halted"
    assert rows[bad.mcc_id]["status"] == "Faulted"
    assert rows[bad.mcc_id]["faults"] == 1


def test_stale_replicas_are_resynced_and_charged(system):
    app = system.create_app("a")
    handle = app.mcc_create("n0")
    node = system.node("n0")
    assert not node.replicas["a"].is_stale(app.space)
    late = app.map_far("n0", 64)
    app.populate(late.base_va, (9).to_bytes(8, "little"))
    assert node.replicas["a"].is_stale(app.space)

    source = ".params 1\n .events DRAM\n PARAM 0, r1\n LDA 1, r2, [r1]\n WAITT 1\n HALT"

    def script():
        yield from start_programs(app, [handle], source, [late.base_va])
        return (yield app.wait_done(handle))

    _, status = system.execute(app, script())
    assert status is ControlStatus.HALTED
    assert not node.replicas["a"].is_stale(app.space)
    assert node.instances[handle.mcc_id].vm.state.regs[2] == 9


def test_observations_stay_within_the_accessing_app(system):
    watch = ".events OBSERVE\n STAT_SUB\n STAT_NEXT r1\n HALT"
    owner, other = system.create_app("a"), system.create_app("b")
    watcher, outsider = owner.mcc_create("n0"), other.mcc_create("n0")
    segment = owner.map_far("n0", 64)
    system.spawn(other, start_programs(other, [outsider], watch))

    def script():
        yield from start_programs(owner, [watcher], watch)
        yield owner.compute(50_000)
        yield owner.far_write(segment.base_va, bytes(8))
        return (yield owner.wait_done(watcher))

    _, status = system.execute(owner, script())
    assert status is ControlStatus.HALTED
    instances = system.node("n0").instances
    assert instances[watcher.mcc_id].vm.state.regs[1] == segment.base_va | 1
    lone = instances[outsider.mcc_id].vm
    assert instances[outsider.mcc_id].subscribed
    assert lone.status is VmStatus.WAITING
    assert not lone.state.events
