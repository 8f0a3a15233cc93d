import json

import pytest

from scenario import load_defaults, load_scenario, parse_overrides
from sim.engine import SimConfig
from sim.errors import ConfigError, ScenarioError
from sim.node import SchedulingPolicy
from tests.helpers import SCENARIOS


def write(tmp_path, body, name="case.scenario"):
    path = tmp_path / name
    path.write_text(json.dumps(body) if isinstance(body, dict) else body)
    return path


def test_bundled_defaults_match_the_built_in_ones():
    sim, nodes = load_defaults()
    assert sim == SimConfig()
    assert [node.node_id for node in nodes] == ["n0"]


def test_scenario_fields():
    scenario = load_scenario(SCENARIOS / "common_neighbors_file.scenario")
    assert scenario.name == "common_neighbors_file"
    assert scenario.seed == 5
    assert scenario.sim.hops == 1
    assert scenario.workload.kind == "common_neighbors"
    assert scenario.workload.params["graph_file"] == "data/ring_chords.edges"
    assert scenario.resolve("data/ring_chords.edges").is_file()
    assert not scenario.trace


def test_command_line_wins():
    scenario = load_scenario(SCENARIOS / "bulk_zero.scenario", seed=9, overrides={"hops": "2", "watchdog_ns": "0x100"})
    assert (scenario.seed, scenario.sim.hops, scenario.sim.watchdog_ns) == (9, 2, 256)


def test_nodes_replace_the_defaults():
    scenario = load_scenario(SCENARIOS / "wfq_two_processors.scenario")
    assert [node.node_id for node in scenario.nodes] == ["n0", "n1"]
    assert scenario.nodes[0].policy is SchedulingPolicy.WFQ
    assert scenario.nodes[0].num_physical_processors == 2


def test_seed_falls_back_to_the_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MCCSIM_SEED", "0x10")
    path = write(tmp_path, {"schema": 1, "workload": {"kind": "bulk_zero"}})
    scenario = load_scenario(path)
    assert scenario.seed == 16
    assert scenario.name == "case"


@pytest.mark.parametrize("body, error", [
    ({"schema": 1, "workload": {"kind": "bulk_zero"}, "extra": 1}, ScenarioError),
    ({"schema": 2, "workload": {"kind": "bulk_zero"}}, ScenarioError),
    ({"schema": 1}, ScenarioError),
    ({"schema": 1, "workload": {"kind": "program", "source_file": "missing.cp"}}, ScenarioError),
    ({"schema": 1, "workload": {"kind": "bulk_zero"}, "output": {"colour": True}}, ScenarioError),
    ({"schema": 1, "workload": {"kind": "bulk_zero"}, "sim": {"warp": 9}}, ConfigError),
    ({"schema": 1, "workload": {"kind": "bulk_zero"}, "nodes": []}, ScenarioError),
    ({"schema": 1, "workload": {"kind": "bulk_zero"}, "nodes": [{"id": "n0"}, {"id": "n0"}]}, ConfigError),
    ("{\n  \"schema\": 1,,\n}", ScenarioError),
])
def test_bad_scenarios(tmp_path, body, error):
    with pytest.raises(error):
        load_scenario(write(tmp_path, body))


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "nope.scenario")


def test_parse_overrides():
    assert parse_overrides(["hops=2", " seed = 0x5"]) == {"hops": "2", "seed": " 0x5"}
    with pytest.raises(ConfigError):
        parse_overrides(["hops"])
