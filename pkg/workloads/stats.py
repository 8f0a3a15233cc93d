"""
Fine-grained access statistics: an MCC observes the host's far-memory
accesses to a region and keeps per-page counters, queried through the
data area.
"""

import logging
from dataclasses import dataclass

import numpy as np

from sim.address_space import Segment
from sim.errors import BadLength
from sim.host import HostApplication, MccHandle
from sim.interconnect import LINE_SIZE
from workloads.runtime import SENTINEL, line_ids, program

logger = logging.getLogger(__name__)

PAGE_BYTES = 4096
MAX_PAGES = 1024
MAX_TOP_K = 8


@dataclass
class AccessStats:
    counts: np.ndarray
    top: list[tuple[int, int]]


def random_trace(region: Segment, accesses: int, rng: np.random.Generator,
                 hot_pages: int = 4, hot_share: float = 0.5) -> list[tuple[int, bool]]:
    """(va, is_store) pairs, line aligned, skewed towards a few hot pages."""
    pages = region.length // PAGE_BYTES
    hot = rng.choice(pages, size=min(hot_pages, pages), replace=False)
    trace = []
    for _ in range(accesses):
        page = int(rng.choice(hot)) if rng.random() < hot_share else int(rng.integers(pages))
        line = int(rng.integers(PAGE_BYTES // LINE_SIZE))
        trace.append((region.base_va + page * PAGE_BYTES + line * LINE_SIZE, bool(rng.random() < 0.3)))
    return trace


def page_trace(region: Segment, pages: list[int]) -> list[tuple[int, bool]]:
    return [(region.base_va + page * PAGE_BYTES, False) for page in pages]


def counts_from_log(access_log: list[tuple[int, bool]], region: Segment) -> np.ndarray:
    """Ground truth from the driver's own record of what it touched."""
    pages = region.length // PAGE_BYTES
    hits = [(va - region.base_va) // PAGE_BYTES for va, _ in access_log if region.contains(va)]
    return np.bincount(np.asarray(hits, dtype=np.int64), minlength=pages)[:pages]


def top_k(counts: np.ndarray, k: int) -> list[tuple[int, int]]:
    """Hottest pages first, ties to the lower page; untouched pages never appear."""
    order = sorted((page for page in range(len(counts)) if counts[page]), key=lambda p: (-counts[p], p))
    return [(page, int(counts[page])) for page in order[:k]]


def access_stats(app: HostApplication, handle: MccHandle, region: Segment, trace: list[tuple[int, bool]],
                 k: int = MAX_TOP_K):
    pages = region.length // PAGE_BYTES
    if not 1 <= pages <= MAX_PAGES or region.length % PAGE_BYTES:
        raise BadLength(f"region must be 1..{MAX_PAGES} whole pages")
    if not 1 <= k <= MAX_TOP_K:
        raise ValueError(f"k must be in [1, {MAX_TOP_K}]")
    yield from app.load_program(handle, program("stats"))
    yield from app.start(handle, [region.base_va, pages, k])
    # answered only once the program has subscribed
    yield app.data_read(handle.slot_va(0))

    for va, is_store in trace:
        if is_store:
            yield app.far_write(va, bytes(8))
        else:
            yield app.far_read(va, 8)

    line = yield app.data_read(handle.slot_va(0))
    words = line_ids(line)
    top = [(int(page), int(count)) for page, count in zip(words[0::2], words[1::2]) if page != SENTINEL][:k]
    counters = []
    for index in range(-(-pages // 16)):
        line = yield app.data_read(handle.slot_va(LINE_SIZE * (index + 1)))
        counters.append(line_ids(line))
    yield from app.stop(handle)
    counts = np.concatenate(counters)[:pages].astype(np.int64)
    return AccessStats(counts, top)
