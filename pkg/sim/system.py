"""
Wiring of one simulated machine: the engine, the interconnect, the far
memory nodes with their MCC processors, host-local memory, and the
applications running on the host.
"""

import itertools
import logging
from typing import Any, Generator, Iterable

from sim.address_space import AddressSpace, Backing, BackingKind, PhysicalMemory
from sim.engine import MAX_TIME, Engine, RunOutcome, SimConfig
from sim.errors import ConfigError, OutOfHostMemory
from sim.host import HostApplication, ScriptRun
from sim.interconnect import Interconnect, LinkConfig
from sim.node import MccNode, NodeConfig

logger = logging.getLogger(__name__)

DEFAULT_HOST_MEMORY = 16 * 1024 * 1024

STATS_COLUMNS = ("mcc_id", "app_id", "node_id", "status", "instructions", "dram_bytes", "stream_lines",
                 "reply_lines", "dma_bytes", "faults", "makespan_ns")


class MccSystem:
    def __init__(self, config: SimConfig | None = None, nodes: Iterable[NodeConfig] = (NodeConfig("n0"),),
                 host_memory_bytes: int = DEFAULT_HOST_MEMORY, keep_log: bool = True):
        self.config = config or SimConfig()
        self.engine = Engine(self.config, keep_log)
        self.interconnect = Interconnect(self.engine, LinkConfig.from_sim_config(self.config))
        self.host_memory = PhysicalMemory(host_memory_bytes, "host", OutOfHostMemory)
        self.far_memory: dict[str, PhysicalMemory] = {}
        self.nodes: dict[str, MccNode] = {}
        for node_config in nodes:
            if node_config.node_id in self.nodes:
                raise ConfigError(f"duplicate node id {node_config.node_id!r}")
            dram = PhysicalMemory(node_config.dram_bytes, node_config.node_id)
            self.far_memory[node_config.node_id] = dram
            self.nodes[node_config.node_id] = MccNode(node_config, self.engine, self.interconnect, dram,
                                                      self.memory_for)
        if not self.nodes:
            raise ConfigError("a system needs at least one node")
        self.apps: dict[str, HostApplication] = {}
        self.runs: list[ScriptRun] = []
        self._spaces: dict[str, AddressSpace] = {}
        self._mcc_ids = itertools.count(1)

    def node(self, node_id: str) -> MccNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise ConfigError(f"unknown node {node_id!r}") from None

    def next_mcc_id(self) -> int:
        return next(self._mcc_ids)

    def address_space(self, app_id: str) -> AddressSpace:
        space = self._spaces.get(app_id)
        if space is None:
            space = AddressSpace(app_id, self.far_memory, self.host_memory, self.config.strict_affinity)
            self._spaces[app_id] = space
        return space

    def memory_for(self, backing: Backing) -> PhysicalMemory:
        if backing.kind is BackingKind.FAR_DIRECT:
            return self.far_memory[backing.node_id]
        if backing.kind is BackingKind.HOST_LOCAL:
            return self.host_memory
        raise ValueError(f"{backing.kind.value} has no byte-addressable backing")

    def create_app(self, app_id: str) -> HostApplication:
        if app_id in self.apps:
            raise ValueError(f"application {app_id!r} already exists")
        app = HostApplication(app_id, self)
        self.apps[app_id] = app
        return app

    def spawn(self, app: HostApplication, script: Generator, name: str | None = None) -> ScriptRun:
        run = app.spawn(script, name)
        self.runs.append(run)
        return run

    def run(self, limit: int = MAX_TIME) -> RunOutcome:
        outcome = self.engine.run_until(limit)
        logger.info("run ended %s at t=%d after %d events", outcome.value, self.engine.now(),
                    self.engine.processed_count)
        return outcome

    def execute(self, app: HostApplication, script: Generator, limit: int = MAX_TIME) -> tuple[RunOutcome, Any]:
        """Run one script to the end; re-raises the error it failed with."""
        run = self.spawn(app, script)
        outcome = self.run(limit)
        if run.error is not None:
            raise run.error
        return outcome, run.result

    @property
    def makespan_ns(self) -> int:
        return self.engine.last_event_at

    def stats_rows(self) -> list[dict[str, Any]]:
        rows = []
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            for mcc_id in sorted(node.instances):
                row = node.stats(node.instances[mcc_id])
                row["makespan_ns"] = self.makespan_ns
                rows.append(row)
        return rows
