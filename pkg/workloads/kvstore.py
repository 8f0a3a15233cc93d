"""
A logical key/value view: the host writes a key into a data-area slot and
reads the same slot back as (found, value), answered by a binary search
the MCC runs over a sorted array in far memory.
"""

import logging
from typing import Mapping

import numpy as np

from sim.address_space import Segment
from sim.host import HostApplication, MccHandle
from sim.interconnect import LINE_SIZE, CacheLine
from workloads.runtime import program

logger = logging.getLogger(__name__)

ENTRY_BYTES = 16
SLOTS = 64


def encode_table(entries: Mapping[int, int]) -> bytes:
    keys = sorted(entries)
    table = np.zeros((len(keys), 2), dtype="<u8")
    table[:, 0] = keys
    table[:, 1] = [entries[k] for k in keys]
    return table.tobytes()


def place_kv(app: HostApplication, entries: Mapping[int, int], node_id: str) -> Segment:
    raw = encode_table(entries)
    segment = app.map_far(node_id, max(LINE_SIZE, -(-len(raw) // LINE_SIZE) * LINE_SIZE))
    app.populate(segment.base_va, raw)
    return segment


def kv_oracle(entries: Mapping[int, int], keys: list[int]) -> list[int | None]:
    return [entries.get(key) for key in keys]


def kv_lookup(app: HostApplication, handle: MccHandle, table: Segment, count: int, keys: list[int]):
    """Look each key up through the data area; None for missing keys."""
    yield from app.load_program(handle, program("kv"))
    yield from app.start(handle, [table.base_va, count])
    answers = []
    for index, key in enumerate(keys):
        slot = handle.slot_va((index % SLOTS) * LINE_SIZE)
        yield app.data_write(slot, CacheLine.from_u64([key]))
        line = yield app.data_read(slot)
        found, value = line.u64()[:2]
        answers.append(value if found else None)
    yield from app.stop(handle)
    return answers
