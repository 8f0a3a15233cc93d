"""
Helpers shared by the workload drivers: bundled channel programs, stream
ring consumption, and running several driver generators side by side.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Callable, Generator

import numpy as np
import simpy

from cp_lang.assembler import assemble_or_raise
from sim.host import HostApplication, MccHandle
from sim.interconnect import LINE_SIZE, CacheLine
from sim.vm import ChannelProgramImage

logger = logging.getLogger(__name__)

PROGRAM_DIR = Path(__file__).parent / "programs"
RING_SLOTS = 8
SENTINEL = 0xFFFF_FFFF


def program_source(name: str) -> str:
    return (PROGRAM_DIR / f"{name}.cp").read_text()


@lru_cache(maxsize=None)
def program(name: str) -> ChannelProgramImage:
    """Assembled image of a bundled program, e.g. `program("traverse")`."""
    return assemble_or_raise(program_source(name))


def line_ids(line: CacheLine) -> np.ndarray:
    return np.frombuffer(line.data, dtype="<u4")


def read_ring(app: HostApplication, handle: MccHandle, last: Callable[[CacheLine], bool],
              slots: int = RING_SLOTS) -> Generator:
    """Consume streamed lines slot by slot until `last(line)`; returns them all."""
    lines = []
    index = 0
    while True:
        line = yield app.data_read(handle.slot_va((index % slots) * LINE_SIZE))
        lines.append(line)
        index += 1
        if last(line):
            return lines


def read_id_stream(app: HostApplication, handle: MccHandle) -> Generator:
    """Ids of a sentinel-terminated stream, 16 per line."""
    lines = yield from read_ring(app, handle, lambda line: SENTINEL in line_ids(line))
    ids = np.concatenate([line_ids(line) for line in lines])
    end = int(np.flatnonzero(ids == SENTINEL)[0])
    return ids[:end].astype(np.int64)


def together(app: HostApplication, *scripts: Generator) -> Generator:
    """Run driver generators concurrently; returns their results in order."""
    processes = [app.engine.process(script) for script in scripts]
    yield simpy.AllOf(app.engine.env, processes)
    return [process.value for process in processes]
