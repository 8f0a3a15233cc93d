"""End-to-end checks of the simulator's headline behaviour."""

import numpy as np
import pytest

from cp_lang.assembler import assemble_or_raise
from cp_lang.safety import SafetyRule, check_safety
from scenario import load_scenario
from sim.engine import RunOutcome, SimConfig
from sim.node import NodeConfig
from sim.system import MccSystem
from tests.helpers import BUSY_LOOP, SCENARIOS, start_programs
from workloads.bulk import BulkKind, BulkResult, bulk_op
from workloads.fuzz import fuzz_campaign
from workloads.graph import CsrGraph, common_neighbors, common_neighbors_oracle, host_common_neighbors, place_graph
from workloads.runners import prepare, run_prepared
from workloads.select import SelectMode, selectivity_sweep

MiB = 1 << 20


def offloaded_and_host(graph, a, b, n_hops, config):
    """Elapsed ns of the MCC traversal and of the host doing the same walk."""
    elapsed = []
    for driver in (common_neighbors, host_common_neighbors):
        system = MccSystem(config, keep_log=False)
        app = system.create_app("a")
        layout = place_graph(app, graph, "n0")
        _, result = system.execute(app, driver(app, layout, a, b, n_hops))
        assert result.vertices == common_neighbors_oracle(graph, a, b, n_hops)
        elapsed.append(result.elapsed_ns)
    return elapsed


def check_random_graphs(count):
    rng = np.random.default_rng(21)
    for _ in range(count):
        graph = CsrGraph.random(100, 8, rng)
        a, b = (int(v) for v in rng.choice(graph.n_vertices, size=2, replace=False))
        n_hops = int(rng.integers(1, 4))
        system = MccSystem(SimConfig(seed=1), keep_log=False)
        app = system.create_app("a")
        layout = place_graph(app, graph, "n0")
        _, result = system.execute(app, common_neighbors(app, layout, a, b, n_hops))
        assert result.vertices == common_neighbors_oracle(graph, a, b, n_hops), (a, b, n_hops)


def test_traversal_matches_the_oracle_on_random_graphs():
    check_random_graphs(5)


@pytest.mark.slow
def test_traversal_matches_the_oracle_on_a_hundred_graphs():
    check_random_graphs(100)


def test_select_matches_the_oracle_at_every_selectivity():
    selectivities = [0.0, 0.01, 0.5, 0.9, 1.0]
    elapsed = selectivity_sweep(selectivities, 512, seed=4, progress=False)
    assert all(len(times) == len(selectivities) for times in elapsed.values())
    stream, materialize = elapsed[SelectMode.STREAM], elapsed[SelectMode.MATERIALIZE]
    assert stream[1] < materialize[1]
    assert materialize[3] < stream[3]


def test_access_counters_equal_the_driver_log():
    scenario = load_scenario(SCENARIOS / "access_stats.scenario")
    system = MccSystem(scenario.sim, scenario.nodes, keep_log=False)
    prepared = prepare(system, scenario)
    _, run = run_prepared(system, prepared)
    assert run.error is None
    assert prepared.check(run.result) == []


@pytest.mark.slow
def test_offload_beats_pointer_chasing_by_twice():
    graph = CsrGraph.random(10_000, 8, np.random.default_rng(3))
    offloaded, host = offloaded_and_host(graph, 1, 2, 2, SimConfig())
    assert host >= 2 * offloaded


@pytest.mark.slow
def test_offload_gains_grow_with_far_latency():
    graph = CsrGraph.random(10_000, 8, np.random.default_rng(3))
    ratios = []
    for latency in (150, 250, 400):
        offloaded, host = offloaded_and_host(graph, 1, 2, 2, SimConfig(far_base_latency_ns=latency))
        ratios.append(host / offloaded)
    assert ratios == sorted(ratios)


@pytest.mark.slow
def test_ten_thousand_fuzzed_programs_stay_isolated():
    report = fuzz_campaign(10_000, seed=1, progress=False)
    assert report.ok, (report.violations[:5], report.victim_failures[:5])


@pytest.mark.slow
def test_round_robin_over_a_million_instructions():
    system = MccSystem(SimConfig(seed=2), [NodeConfig("n0")], keep_log=False)
    app = system.create_app("busy")
    handles = [app.mcc_create("n0") for _ in range(8)]
    system.spawn(app, start_programs(app, handles, BUSY_LOOP))
    assert system.run(1_100_000) is RunOutcome.LIMIT_REACHED
    instances = system.node("n0").instances
    executed = [instances[h.mcc_id].vm.state.instructions for h in handles]
    assert sum(executed) >= 1_000_000
    for count in executed:
        assert count / sum(executed) == pytest.approx(1 / 8, abs=0.02)


@pytest.mark.slow
def test_a_thousand_instances_all_make_progress():
    system = MccSystem(SimConfig(seed=2), [NodeConfig("n0")], keep_log=False)
    app = system.create_app("many")
    handles = [app.mcc_create("n0") for _ in range(1000)]
    run = system.spawn(app, start_programs(app, handles, BUSY_LOOP))
    while not run.done:
        system.run(system.engine.now() + 100_000)
    quantum = system.config.dispatch_step_budget
    system.run(run.finished_at + 3 * len(handles) * quantum)
    instances = system.node("n0").instances
    executed = [instances[h.mcc_id].vm.state.instructions for h in handles]
    assert min(executed) > 0
    assert max(executed) - min(executed) <= 2 * quantum


def test_large_bulk_zero_runs_asynchronously():
    system = MccSystem(SimConfig(seed=1), keep_log=False)
    app = system.create_app("a")
    dst = app.map_far("n0", 4 * MiB)
    app.populate(dst.base_va, b"\xff" * (4 * MiB))
    handle = app.mcc_create("n0")
    _, outcome = system.execute(app, bulk_op(app, handle, BulkKind.ZERO, dst.base_va, 4 * MiB))
    assert outcome.result is BulkResult.DONE
    assert outcome.steps_while_running >= 1
    assert app.inspect(dst.base_va, 4 * MiB) == bytes(4 * MiB)


def test_waiting_on_nothing_is_caught_statically_and_at_run_time():
    report = check_safety(assemble_or_raise((SCENARIOS / "programs" / "wait_none.cp").read_text()))
    assert [f.rule for f in report.errors] == [SafetyRule.UNSATISFIABLE_WAIT]

    scenario = load_scenario(SCENARIOS / "wait_none.scenario")
    system = MccSystem(scenario.sim, scenario.nodes)
    outcome, run = run_prepared(system, prepare(system, scenario))
    assert outcome is RunOutcome.DEADLOCK
    assert not run.done
    assert system.engine.now() <= scenario.sim.watchdog_ns
    assert system.engine.deadlock_suspects


@pytest.mark.slow
@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.scenario")), ids=lambda p: p.stem)
def test_every_scenario_is_deterministic(path):
    hashes = []
    for _ in range(2):
        scenario = load_scenario(path)
        system = MccSystem(scenario.sim, scenario.nodes, keep_log=False)
        run_prepared(system, prepare(system, scenario))
        hashes.append(system.engine.trace_hash())
    assert hashes[0] == hashes[1]
