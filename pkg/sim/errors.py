from enum import IntEnum


class FaultKind(IntEnum):
    """Fault vocabulary shared by translation, the VM and the control area.

    The numeric value is what the control area reports in the low 16 bits
    of FAULT_INFO.
    """
    NONE = 0
    UNMAPPED = 1
    PERMISSION = 2
    AFFINITY_VIOLATION = 3
    ILLEGAL_OPCODE = 4
    DIVIDE_BY_ZERO = 5
    EVENT_OVERFLOW = 6
    BAD_TAG = 7
    BAD_BRANCH = 8
    NOT_LOADED = 9
    BAD_IMAGE = 10
    BAD_STATE = 11


class MccSimError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(MccSimError):
    pass


class SchedulingInPast(MccSimError):
    pass


class UnknownActor(MccSimError):
    pass


class BadLength(MccSimError):
    pass


class OutOfFarMemory(MccSimError):
    pass


class OutOfHostMemory(MccSimError):
    pass


class OutOfRange(MccSimError):
    pass


class AffinityMismatch(MccSimError):
    pass


class DuplicateMcc(MccSimError):
    pass


class UnknownMcc(MccSimError):
    pass


class BadImage(MccSimError):
    pass


class ReadTimeout(MccSimError):
    pass


class HostProtocolError(MccSimError):
    pass


class ScenarioError(MccSimError):
    pass


class OracleMismatch(MccSimError):
    pass


class AccessFault(MccSimError):
    """A translation refused an access; `kind` says why."""

    def __init__(self, kind: FaultKind, va: int, detail: str = ""):
        self.kind = kind
        self.va = va
        self.detail = detail
        message = f"{kind.name} at va=0x{va:x}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class AssemblyError(MccSimError):
    """Raised by `assemble_or_raise`; carries the full diagnostic list."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "\n".join(str(d) for d in self.diagnostics)
        super().__init__(f"{len(self.diagnostics)} diagnostic(s)\n{lines}")
