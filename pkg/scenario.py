"""
Scenario files: JSON text merged over `mcc_config.json`.

    {
      "schema": 1,
      "name": "bulk_zero",
      "seed": 7,
      "sim": {"hops": 1},
      "nodes": [{"id": "n0", "processors": 2, "policy": "wfq"}],
      "workload": {"kind": "bulk_zero", "length": 65536},
      "output": {"trace": true}
    }

`sim` entries override the defaults key by key; `nodes` replaces the
default node list. Unknown keys anywhere are errors.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from sim.engine import SimConfig
from sim.errors import ConfigError, ScenarioError
from sim.node import NodeConfig
from sim.settings import default_seed

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_CONFIG = Path(__file__).parent / "mcc_config.json"

_CONFIG_KEYS = {"schema", "sim", "nodes"}
_SCENARIO_KEYS = {"schema", "name", "seed", "sim", "nodes", "workload", "output"}
_OUTPUT_KEYS = {"trace"}


@dataclass(frozen=True)
class Workload:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    name: str
    path: Path
    sim: SimConfig
    nodes: tuple[NodeConfig, ...]
    workload: Workload
    trace: bool = False

    @property
    def seed(self) -> int:
        return self.sim.seed

    def resolve(self, relative: str) -> Path:
        """Input paths are relative to the scenario file."""
        return (self.path.parent / relative).resolve()


def _read_json(path: Path) -> dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    return raw


def _check_keys(where: str, raw: Mapping[str, Any], known: set[str]) -> None:
    unknown = set(raw) - known
    if unknown:
        raise ScenarioError(f"{where}: unknown keys {', '.join(sorted(unknown))}")


def _check_schema(where: str, raw: Mapping[str, Any]) -> None:
    if raw.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(f"{where}: expected \"schema\": {SCHEMA_VERSION}, got {raw.get('schema')!r}")


def _nodes(where: str, entries: Any) -> tuple[NodeConfig, ...]:
    if not isinstance(entries, list) or not entries:
        raise ScenarioError(f"{where}: \"nodes\" must be a non-empty list")
    nodes = tuple(NodeConfig.from_mapping(entry) for entry in entries)
    ids = [node.node_id for node in nodes]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{where}: duplicate node ids")
    return nodes


def load_defaults(path: Path = DEFAULT_CONFIG) -> tuple[SimConfig, tuple[NodeConfig, ...]]:
    raw = _read_json(path)
    _check_keys(str(path), raw, _CONFIG_KEYS)
    _check_schema(str(path), raw)
    sim = SimConfig().with_overrides(raw.get("sim", {}))
    return sim, _nodes(str(path), raw.get("nodes", [{"id": "n0"}]))


def load_scenario(path: str | Path, seed: int | None = None, overrides: Mapping[str, str] | None = None,
                  defaults: Path = DEFAULT_CONFIG) -> Scenario:
    """Parse and validate a scenario; `seed` and `overrides` come from the command line."""
    path = Path(path)
    raw = _read_json(path)
    where = str(path)
    _check_keys(where, raw, _SCENARIO_KEYS)
    _check_schema(where, raw)

    sim, nodes = load_defaults(defaults)
    sim = sim.with_overrides(raw.get("sim", {}))
    if "nodes" in raw:
        nodes = _nodes(where, raw["nodes"])
    if overrides:
        sim = sim.with_overrides(overrides)
    if seed is None:
        seed = raw.get("seed", default_seed())
    sim = sim.with_overrides({"seed": seed})

    workload = raw.get("workload")
    if not isinstance(workload, dict) or not isinstance(workload.get("kind"), str):
        raise ScenarioError(f"{where}: \"workload\" must be an object with a \"kind\"")
    params = {k: v for k, v in workload.items() if k != "kind"}
    output = raw.get("output", {})
    _check_keys(f"{where}: output", output, _OUTPUT_KEYS)

    scenario = Scenario(str(raw.get("name", path.stem)), path, sim, nodes, Workload(workload["kind"], params),
                        bool(output.get("trace", False)))
    for key, value in params.items():
        if key.endswith("_file") and not scenario.resolve(value).is_file():
            raise ScenarioError(f"{where}: {key} {value!r} does not exist")
    logger.info("loaded scenario %s (seed %d, %d nodes)", scenario.name, scenario.seed, len(nodes))
    return scenario


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {pair!r} is not key=value")
        overrides[key.strip()] = value
    return overrides
