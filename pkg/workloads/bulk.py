"""
Asynchronous bulk clear and copy of far memory, run by an MCC while the
driver keeps going.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum

from sim.errors import BadLength
from sim.host import HostApplication, MccHandle
from workloads.runtime import program

logger = logging.getLogger(__name__)

POLL_INTERVAL_NS = 1000


class BulkKind(IntEnum):
    ZERO = 0
    COPY = 1


class BulkResult(IntEnum):
    DONE = 1
    OVERLAP = 2


@dataclass
class BulkOutcome:
    result: BulkResult
    started_at: int
    finished_at: int
    steps_while_running: int

    @property
    def elapsed_ns(self) -> int:
        return self.finished_at - self.started_at


def bulk_op(app: HostApplication, handle: MccHandle, kind: BulkKind, dst: int, length: int, src: int = 0,
            poll_interval_ns: int = POLL_INTERVAL_NS):
    """Start the operation, then poll data slot 0 for its result line while
    doing unrelated work; counts the script steps taken meanwhile."""
    if length <= 0:
        raise BadLength("bulk length must be positive")
    yield from app.load_program(handle, program("bulk"))
    started = app.engine.now()
    yield from app.start(handle, [int(kind), dst, src, length])
    steps = 0
    while True:
        line = yield app.data_poll(handle.slot_va(0))
        if line is not None:
            break
        steps += 1
        yield app.compute(poll_interval_ns)
    result = BulkResult(line.u64()[0])
    yield app.wait_done(handle)
    logger.info("bulk %s of %d bytes: %s after %d driver steps", kind.name.lower(), length, result.name, steps)
    return BulkOutcome(result, started, app.engine.now(), steps)
