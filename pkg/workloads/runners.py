"""
Scenario workloads: each `kind` prepares data on a fresh system and hands
back the driver script together with the oracle check for its result.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Generator

import numpy as np

from cp_lang.assembler import assemble
from cp_lang.safety import check_safety
from sim.control import ControlStatus
from sim.errors import AssemblyError, ScenarioError
from sim.host import HostApplication
from sim.system import MccSystem
from sim.vm import ChannelProgramImage
from workloads import graph, kvstore, select, stats
from workloads.bulk import BulkKind, BulkResult, bulk_op

if TYPE_CHECKING:
    from scenario import Scenario

logger = logging.getLogger(__name__)

APP_ID = "app0"
HOPS = range(1, graph.MAX_HOPS + 1)
COUNTS = range(1 << 24)


@dataclass
class PreparedWorkload:
    app: HostApplication
    script: Generator
    check: Callable[[Any], list[str]]
    limit_ns: int | None = None


class Params:
    """Workload parameters; anything left unread is reported as unknown."""

    def __init__(self, kind: str, raw: dict[str, Any]):
        self.kind = kind
        self.raw = dict(raw)
        self._used: set[str] = set()

    def get(self, key: str, default: Any = None, kind: type | None = None, within: range | None = None) -> Any:
        self._used.add(key)
        value = self.raw.get(key, default)
        if kind is not None and value is not None:
            try:
                value = kind(value)
            except (TypeError, ValueError) as exc:
                raise ScenarioError(f"{self.kind}: {key}={value!r} is not a valid {kind.__name__}") from exc
        if within is not None and value is not None and value not in within:
            raise ScenarioError(f"{self.kind}: {key}={value!r} must be in [{within.start}, {within.stop})")
        return value

    def finish(self) -> None:
        unknown = set(self.raw) - self._used
        if unknown:
            raise ScenarioError(f"{self.kind}: unknown parameters {', '.join(sorted(unknown))}")


Preparer = Callable[[MccSystem, "Scenario", Params, np.random.Generator], PreparedWorkload]
WORKLOADS: dict[str, Preparer] = {}


def workload(kind: str):
    def register(fn: Preparer) -> Preparer:
        WORKLOADS[kind] = fn
        return fn
    return register


def prepare(system: MccSystem, scenario: "Scenario") -> PreparedWorkload:
    preparer = WORKLOADS.get(scenario.workload.kind)
    if preparer is None:
        raise ScenarioError(f"unknown workload kind {scenario.workload.kind!r}; "
                            f"known: {', '.join(sorted(WORKLOADS))}")
    params = Params(scenario.workload.kind, scenario.workload.params)
    limit_ns = params.get("limit_ns", kind=int)
    prepared = preparer(system, scenario, params, np.random.default_rng(scenario.seed))
    params.finish()
    prepared.limit_ns = limit_ns
    return prepared


def _node(system: MccSystem, params: Params) -> str:
    node_id = params.get("node", next(iter(system.nodes)), str)
    system.node(node_id)
    return node_id


# ── bulk ─────────────────────────────────────────────────────────────────────

def _bulk(kind: BulkKind, system: MccSystem, params: Params, rng: np.random.Generator) -> PreparedWorkload:
    node_id = _node(system, params)
    length = params.get("length", 64 * 1024, int)
    app = system.create_app(APP_ID)
    dst = app.map_far(node_id, length)
    src = app.map_far(node_id, length) if kind is BulkKind.COPY else None
    expected = bytes(length)
    if src is not None:
        expected = rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()
        app.populate(src.base_va, expected)
    app.populate(dst.base_va, b"\xab" * length)
    handle = app.mcc_create(node_id)

    def check(outcome) -> list[str]:
        problems = []
        if outcome.result is not BulkResult.DONE:
            problems.append(f"bulk result {outcome.result.name}")
        if app.inspect(dst.base_va, length) != expected:
            problems.append("destination does not hold the expected bytes")
        return problems

    script = bulk_op(app, handle, kind, dst.base_va, length, src.base_va if src is not None else 0)
    return PreparedWorkload(app, script, check)


@workload("bulk_zero")
def prepare_bulk_zero(system, scenario, params, rng):
    return _bulk(BulkKind.ZERO, system, params, rng)


@workload("bulk_copy")
def prepare_bulk_copy(system, scenario, params, rng):
    return _bulk(BulkKind.COPY, system, params, rng)


# ── graph ────────────────────────────────────────────────────────────────────

def _graph(scenario: "Scenario", params: Params, rng: np.random.Generator) -> graph.CsrGraph:
    graph_file = params.get("graph_file")
    if graph_file is not None:
        return graph.CsrGraph.load(scenario.resolve(graph_file))
    return graph.CsrGraph.random(params.get("vertices", 100, int, range(1, graph.MAX_VERTICES + 1)),
                                 params.get("max_degree", 8, int, COUNTS), rng)


@workload("common_neighbors")
def prepare_common_neighbors(system, scenario, params, rng):
    node_id = _node(system, params)
    csr = _graph(scenario, params, rng)
    a = params.get("a", 0, int, range(csr.n_vertices))
    b = params.get("b", min(1, csr.n_vertices - 1), int, range(csr.n_vertices))
    n_hops = params.get("n_hops", 2, int, HOPS)
    with_attributes = bool(params.get("attributes", False))
    app = system.create_app(APP_ID)
    layout = graph.place_graph(app, csr, node_id, with_attributes, scenario.seed)
    expected = graph.common_neighbors_oracle(csr, a, b, n_hops)

    def check(result: graph.CommonNeighbors) -> list[str]:
        problems = []
        if result.vertices != expected:
            problems.append(f"common neighbours {result.vertices} != oracle {expected}")
        if with_attributes:
            records = graph.attribute_records(csr, scenario.seed)[expected]
            if result.attributes is None or not np.array_equal(result.attributes, records):
                problems.append("attribute records differ from the stored ones")
        return problems

    script = graph.common_neighbors(app, layout, a, b, n_hops, bool(params.get("prefetch", False)),
                                    with_attributes)
    return PreparedWorkload(app, script, check)


@workload("reachable")
def prepare_reachable(system, scenario, params, rng):
    node_id = _node(system, params)
    csr = _graph(scenario, params, rng)
    source = params.get("source", 0, int, range(csr.n_vertices))
    n_hops = params.get("n_hops", 2, int, HOPS)
    app = system.create_app(APP_ID)
    layout = graph.place_graph(app, csr, node_id)
    expected = graph.reachable_oracle(csr, source, n_hops)

    def check(found: set[int]) -> list[str]:
        if found == expected:
            return []
        return [f"{len(found - expected)} unexpected and {len(expected - found)} missing vertices"]

    script = graph.reachable(app, layout, source, n_hops, bool(params.get("prefetch", False)))
    return PreparedWorkload(app, script, check)


# ── select ───────────────────────────────────────────────────────────────────

@workload("select")
def prepare_select(system, scenario, params, rng):
    node_id = _node(system, params)
    table_file = params.get("table_file")
    if table_file is not None:
        table = select.load_table(scenario.resolve(table_file))
    else:
        table = select.make_table(params.get("rows", 1024, int, COUNTS), rng)
    column = params.get("column", 1, int, range(select.COLUMNS))
    constant = params.get("constant", kind=int)
    if constant is None:
        constant = select.constant_for(params.get("selectivity", 0.5, float))
    try:
        mode = select.SelectMode[params.get("mode", "stream", str).upper()]
    except KeyError as exc:
        raise ScenarioError("select: mode must be stream or materialize") from exc
    app = system.create_app(APP_ID)
    segment = select.place_table(app, table, node_id)
    handle = app.mcc_create(node_id)
    expected = select.select_oracle(table, column, constant)

    def check(selection: select.Selection) -> list[str]:
        if np.array_equal(np.sort(selection.row_ids), np.sort(expected)):
            return []
        return [f"{len(selection.row_ids)} rows selected, oracle has {len(expected)}"]

    script = select.select_operator(app, handle, segment, len(table), column, constant, mode)
    return PreparedWorkload(app, script, check)


# ── access statistics ────────────────────────────────────────────────────────

@workload("access_stats")
def prepare_access_stats(system, scenario, params, rng):
    node_id = _node(system, params)
    pages = params.get("pages", 16, int)
    k = params.get("k", stats.MAX_TOP_K, int, range(1, stats.MAX_TOP_K + 1))
    app = system.create_app(APP_ID)
    region = app.map_far(node_id, pages * stats.PAGE_BYTES)
    trace = stats.random_trace(region, params.get("accesses", 256, int, COUNTS), rng)
    handle = app.mcc_create(node_id)

    def check(result: stats.AccessStats) -> list[str]:
        truth = stats.counts_from_log(app.access_log, region)
        problems = []
        if not np.array_equal(result.counts, truth):
            problems.append("page counters differ from the driver's access log")
        if result.top != stats.top_k(truth, k):
            problems.append(f"top-{k} {result.top} != {stats.top_k(truth, k)}")
        return problems

    return PreparedWorkload(app, stats.access_stats(app, handle, region, trace, k), check)


# ── key/value ────────────────────────────────────────────────────────────────

@workload("kv")
def prepare_kv(system, scenario, params, rng):
    node_id = _node(system, params)
    count = params.get("entries", 256, int, range(1, COUNTS.stop))
    keys = rng.choice(1 << 40, size=2 * count, replace=False)
    entries = {int(key): int(value) for key, value in zip(keys[:count], rng.integers(1, 1 << 62, size=count))}
    lookups = [int(key) for key in rng.choice(keys, size=params.get("lookups", 64, int, COUNTS))]
    app = system.create_app(APP_ID)
    table = kvstore.place_kv(app, entries, node_id)
    handle = app.mcc_create(node_id)
    expected = kvstore.kv_oracle(entries, lookups)

    def check(answers: list[int | None]) -> list[str]:
        wrong = sum(1 for got, want in zip(answers, expected) if got != want)
        return [f"{wrong} of {len(expected)} lookups answered wrongly"] if wrong else []

    return PreparedWorkload(app, kvstore.kv_lookup(app, handle, table, count, lookups), check)


# ── arbitrary program ────────────────────────────────────────────────────────

def _image(scenario: "Scenario", params: Params) -> ChannelProgramImage:
    source_file, image_file = params.get("source_file"), params.get("image_file")
    if (source_file is None) == (image_file is None):
        raise ScenarioError("program: give exactly one of source_file or image_file")
    if image_file is not None:
        return ChannelProgramImage.from_bytes(scenario.resolve(image_file).read_bytes())
    result = assemble(scenario.resolve(source_file).read_text())
    if not result.ok:
        raise AssemblyError(result.diagnostics)
    return result.image


@workload("program")
def prepare_program(system, scenario, params, rng):
    """Load, start and wait for one channel program.

    Safety errors refuse the run unless `"unchecked": true`; a program that
    never finishes then surfaces as a deadlock."""
    node_id = _node(system, params)
    image = _image(scenario, params)
    report = check_safety(image)
    for finding in report.findings:
        logger.warning("%s", finding)
    if report.errors and not params.get("unchecked", False):
        raise ScenarioError(f"program rejected by the safety check: {report.errors[0]}")
    app = system.create_app(APP_ID)
    values = [int(v) for v in params.get("params", [])]
    far_bytes = params.get("far_bytes", 0, int)
    if far_bytes:
        values.insert(0, app.map_far(node_id, far_bytes).base_va)
    handle = app.mcc_create(node_id)

    def script():
        yield from app.load_program(handle, image)
        yield from app.start(handle, values)
        return (yield app.wait_done(handle))

    def check(status: ControlStatus) -> list[str]:
        if status is ControlStatus.HALTED:
            return []
        return [f"program ended {status.name} (fault info {app.cached_fault_info(handle):#x})"]

    return PreparedWorkload(app, script(), check)


def run_prepared(system: MccSystem, prepared: PreparedWorkload):
    """Spawn the driver and run the engine; returns (outcome, script run)."""
    run = system.spawn(prepared.app, prepared.script, "workload")
    outcome = system.run(prepared.limit_ns) if prepared.limit_ns is not None else system.run()
    return outcome, run