"""
Isolation fuzzing: random channel programs run next to a victim
application, while an audit hook re-checks every translation an MCC is
granted against its owner's authoritative address space.

A violation is any grant the master table would not have made, or made
to a different backing. The victim runs a bulk copy and must end with an
exact copy of its source.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from sim.address_space import SCRATCH_BASE, Requester
from sim.control import CONTROL_BYTES
from sim.engine import RunOutcome, SimConfig
from sim.errors import MccSimError
from sim.host import HostApplication
from sim.interconnect import LINE_SIZE
from sim.node import AccessRecord, NodeConfig
from sim.settings import progress_enabled
from sim.system import MccSystem
from sim.vm import BRANCH_OPS, MAX_PARAMS, ChannelProgramImage, CpEventKind, Instruction, Op
from workloads.bulk import BulkKind, bulk_op

logger = logging.getLogger(__name__)

VICTIM_BYTES = 16 * 1024
SEGMENT_BYTES = 4096
FUZZ_APPS = 3
RUN_LIMIT_NS = 2_000_000
SLICE_NS = 20_000
NODE_ID = "n0"

_OPS = list(Op)
_SMALL = (0, 1, 2, 4, 7, 8, 16, 63, 64, 4095, 4096, -1, -8)


@dataclass
class FuzzReport:
    runs: int = 0
    programs: int = 0
    violations: list[str] = field(default_factory=list)
    victim_failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.victim_failures


def random_image(rng: np.random.Generator, addresses: list[int]) -> ChannelProgramImage:
    """A syntactically valid image with arbitrary, mostly meaningful, contents."""
    length = int(rng.integers(4, 65))
    words = []
    for _ in range(length):
        op = int(rng.integers(0, 256)) if rng.random() < 0.05 else int(rng.choice(_OPS))
        roll = rng.random()
        if op in BRANCH_OPS:
            imm = int(rng.integers(0, length))
        elif roll < 0.4:
            imm = int(rng.choice(addresses)) + int(rng.choice((0, 8, 64, SEGMENT_BYTES - 8, SEGMENT_BYTES)))
        elif roll < 0.6:
            imm = LINE_SIZE * int(rng.integers(0, 1024))
        else:
            imm = int(rng.choice(_SMALL))
        imm = (imm + 2 ** 31) % 2 ** 32 - 2 ** 31
        words.append(Instruction(op, *(int(r) for r in rng.integers(0, 16, size=3)),
                                 flags=int(rng.integers(0, 16)), imm=imm).encode())
    return ChannelProgramImage(b"".join(words), entry_pc=int(rng.integers(0, length)),
                               param_count=int(rng.integers(0, MAX_PARAMS + 1)),
                               declared_events=CpEventKind(int(rng.integers(0, 256))),
                               stream_credits=int(rng.integers(0, 9)))


class IsolationAudit:
    """Access hook comparing each node-side grant with the master table."""

    def __init__(self, system: MccSystem):
        self.system = system
        self.checked = 0
        self.violations: list[str] = []

    def __call__(self, record: AccessRecord) -> None:
        self.checked += 1
        space = self.system.address_space(record.app_id)
        node_id = self.system.apps[record.app_id].handles[record.mcc_id].node_id
        try:
            truth = space.translate(record.va, record.access, Requester(record.mcc_id, node_id), record.length)
        except MccSimError as exc:
            self.violations.append(f"mcc {record.mcc_id} ({record.app_id}) granted {record.va:#x}: "
                                   f"master says {exc}")
            return
        if truth.backing != record.backing or truth.offset != record.offset:
            self.violations.append(f"mcc {record.mcc_id} ({record.app_id}) {record.va:#x} resolved to "
                                   f"{record.backing}+{record.offset:#x}, master {truth.backing}+{truth.offset:#x}")


def _fuzz_script(app: HostApplication, image: ChannelProgramImage, params: list[int]):
    handle = app.handles[next(iter(app.handles))]
    try:
        yield from app.load_program(handle, image)
        yield from app.start(handle, params)
    except MccSimError as exc:
        logger.debug("%s: fuzz program not started: %s", app.app_id, exc)


def fuzz_run(rng: np.random.Generator, fuzz_apps: int = FUZZ_APPS, limit_ns: int = RUN_LIMIT_NS,
             config: SimConfig | None = None) -> tuple[list[str], list[str]]:
    """One machine, one victim, `fuzz_apps` random programs; returns (violations, victim failures)."""
    system = MccSystem(config or SimConfig(seed=int(rng.integers(0, 2 ** 31))), [NodeConfig(NODE_ID)],
                       keep_log=False)
    audit = IsolationAudit(system)
    system.node(NODE_ID).access_hooks.append(audit)

    victim = system.create_app("victim")
    src = victim.map_far(NODE_ID, VICTIM_BYTES)
    dst = victim.map_far(NODE_ID, VICTIM_BYTES)
    payload = rng.integers(0, 256, size=VICTIM_BYTES, dtype=np.uint8).tobytes()
    victim.populate(src.base_va, payload)
    victim_handle = victim.mcc_create(NODE_ID)

    addresses = [src.base_va, dst.base_va, victim_handle.control.base_va, victim_handle.data.base_va,
                 SCRATCH_BASE, 0]
    apps = []
    for index in range(fuzz_apps):
        app = system.create_app(f"fuzz{index}")
        far = app.map_far(NODE_ID, SEGMENT_BYTES)
        local = app.map_host(SEGMENT_BYTES)
        handle = app.mcc_create(NODE_ID)
        addresses += [far.base_va, local.base_va, handle.control.base_va, handle.data.base_va,
                      handle.control.base_va + CONTROL_BYTES]
        apps.append((app, [far.base_va, local.base_va, handle.data.base_va, SCRATCH_BASE]))

    run = system.spawn(victim, bulk_op(victim, victim_handle, BulkKind.COPY, dst.base_va, VICTIM_BYTES,
                                       src.base_va), "victim")
    for app, params in apps:
        params = params + [int(v) for v in rng.choice(addresses, size=MAX_PARAMS - len(params))]
        system.spawn(app, _fuzz_script(app, random_image(rng, addresses), params), f"{app.app_id}-fuzz")

    # the fuzz programs may spin forever; stop once the victim is through
    outcome = RunOutcome.LIMIT_REACHED
    horizon = 0
    while not run.done and outcome is RunOutcome.LIMIT_REACHED and horizon < limit_ns:
        horizon = min(horizon + SLICE_NS, limit_ns)
        outcome = system.run(horizon)
    failures = []
    if run.error is not None:
        failures.append(f"victim failed: {run.error}")
    elif not run.done:
        failures.append(f"victim unfinished ({outcome.value})")
    elif victim.inspect(dst.base_va, VICTIM_BYTES) != payload:
        failures.append("victim copy corrupted")
    return audit.violations, failures


def fuzz_campaign(programs: int, seed: int = 0, fuzz_apps: int = FUZZ_APPS, limit_ns: int = RUN_LIMIT_NS,
                  progress: bool | None = None) -> FuzzReport:
    rng = np.random.default_rng(seed)
    report = FuzzReport()
    enabled = progress_enabled() if progress is None else progress
    with tqdm(total=programs, desc="Fuzzing", disable=not enabled) as bar:
        while report.programs < programs:
            apps = min(fuzz_apps, programs - report.programs)
            violations, failures = fuzz_run(rng, apps, limit_ns)
            report.runs += 1
            report.programs += apps
            report.violations += violations
            report.victim_failures += failures
            bar.update(apps)
    logger.info("fuzzed %d programs in %d runs: %d violations, %d victim failures", report.programs,
                report.runs, len(report.violations), len(report.victim_failures))
    return report
