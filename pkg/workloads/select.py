"""
Selection `column < constant` over a table of 64-byte rows in far memory.

Rows are 16 little-endian u32 columns; column 0 holds the row id. A
table file is just those rows back to back.

Stream mode pushes every matching row through the data area; Materialize
mode DMAs them into a host-local buffer laid out as a count line followed
by the rows.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
from tqdm import tqdm

from sim.address_space import Segment
from sim.engine import SimConfig
from sim.errors import ConfigError, OracleMismatch
from sim.host import HostApplication, MccHandle
from sim.interconnect import LINE_SIZE
from sim.settings import progress_enabled
from sim.system import MccSystem
from workloads.runtime import SENTINEL, line_ids, program, read_ring

logger = logging.getLogger(__name__)

COLUMNS = 16
ROW_BYTES = COLUMNS * 4
VALUE_RANGE = 1000


class SelectMode(IntEnum):
    STREAM = 0
    MATERIALIZE = 1


@dataclass
class Selection:
    row_ids: np.ndarray
    elapsed_ns: int


def make_table(n_rows: int, rng: np.random.Generator, value_range: int = VALUE_RANGE) -> np.ndarray:
    table = rng.integers(0, value_range, size=(n_rows, COLUMNS), dtype=np.uint32)
    table[:, 0] = np.arange(n_rows, dtype=np.uint32)
    return table


def load_table(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % ROW_BYTES:
        raise ConfigError(f"{path}: {len(raw)} bytes is not a whole number of {ROW_BYTES}-byte rows")
    return np.frombuffer(raw, dtype="<u4").reshape(-1, COLUMNS).copy()


def constant_for(selectivity: float, value_range: int = VALUE_RANGE) -> int:
    return int(round(selectivity * value_range))


def select_oracle(table: np.ndarray, column: int, constant: int) -> np.ndarray:
    return table[table[:, column] < constant, 0].astype(np.int64)


def place_table(app: HostApplication, table: np.ndarray, node_id: str) -> Segment:
    segment = app.map_far(node_id, max(len(table), 1) * ROW_BYTES)
    app.populate(segment.base_va, table.astype("<u4").tobytes())
    return segment


def select_operator(app: HostApplication, handle: MccHandle, table: Segment, n_rows: int, column: int,
                    constant: int, mode: SelectMode, out: Segment | None = None):
    """Run one selection; program upload is not part of `elapsed_ns`."""
    if not 0 <= column < COLUMNS:
        raise ValueError(f"column must be in [0, {COLUMNS})")
    if mode is SelectMode.MATERIALIZE and out is None:
        out = app.map_host(LINE_SIZE + max(n_rows, 1) * ROW_BYTES)
    yield from app.load_program(handle, program("select"))
    started = app.engine.now()
    yield from app.start(handle, [table.base_va, n_rows, column, constant, int(mode),
                                  out.base_va if out is not None else 0])
    if mode is SelectMode.STREAM:
        lines = yield from read_ring(app, handle, lambda line: line_ids(line)[0] == SENTINEL)
        ids = np.array([line_ids(line)[0] for line in lines[:-1]], dtype=np.int64)
        yield app.wait_done(handle)
    else:
        yield app.wait_done(handle)
        header = yield app.local_read(out.base_va, LINE_SIZE)
        count = int(np.frombuffer(header, dtype="<u8")[0])
        ids = np.zeros(0, dtype=np.int64)
        if count:
            rows = yield app.local_read(out.base_va + LINE_SIZE, count * ROW_BYTES)
            ids = np.frombuffer(rows, dtype="<u4").reshape(count, COLUMNS)[:, 0].astype(np.int64)
    elapsed = app.engine.now() - started
    logger.info("select %s: %d rows in %d ns", mode.name.lower(), len(ids), elapsed)
    return Selection(ids, elapsed)


def selectivity_sweep(selectivities: list[float], n_rows: int, seed: int = 0, column: int = 1,
                      config: SimConfig | None = None, progress: bool | None = None) -> dict[SelectMode, list[int]]:
    """Elapsed ns of both modes for each selectivity, each run on a fresh machine."""
    table = make_table(n_rows, np.random.default_rng(seed))
    elapsed: dict[SelectMode, list[int]] = {mode: [] for mode in SelectMode}
    enabled = progress_enabled() if progress is None else progress
    for selectivity in tqdm(selectivities, desc="Selectivity", disable=not enabled):
        constant = constant_for(selectivity)
        expected = select_oracle(table, column, constant)
        for mode in SelectMode:
            system = MccSystem(config or SimConfig(seed=seed), keep_log=False)
            node_id = next(iter(system.nodes))
            app = system.create_app("sweep")
            segment = place_table(app, table, node_id)
            handle = app.mcc_create(node_id)
            _, result = system.execute(app, select_operator(app, handle, segment, n_rows, column, constant, mode))
            if not np.array_equal(np.sort(result.row_ids), expected):
                raise OracleMismatch(f"{mode.name.lower()} at selectivity {selectivity}: wrong rows")
            elapsed[mode].append(result.elapsed_ns)
    return elapsed
