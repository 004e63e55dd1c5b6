"""Exception hierarchy shared by every module.

Each error carries a ``kind`` used by the CLI to pick an exit code:
``"input"`` for bad files/specs/configs, ``"simulation"`` for failures
raised while scheduling.
"""

from __future__ import annotations


class SchedError(Exception):
    kind = "simulation"

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "kind": self.kind, "message": str(self)}


class InputError(SchedError):
    kind = "input"


class MalformedTrace(InputError):
    def __init__(self, message: str, record: int | None = None):
        self.record = record
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)


class InvariantViolation(InputError):
    pass


class InvalidSpec(InputError):
    pass


class InvalidConfig(InputError):
    pass


class InsufficientData(InputError):
    pass


class NoPeriodicity(InputError):
    pass


class IncompleteLog(InputError):
    pass


class PhaseExceedsCycle(InputError):
    pass


class RangeTooLong(SchedError):
    pass


class OverCommit(SchedError):
    pass


class NoFeasibleShift(SchedError):
    pass


class NoCapacity(SchedError):
    pass


class PreconditionError(SchedError):
    pass


class IllegalTransition(SchedError):
    pass


class UnknownJob(SchedError):
    pass


class JobCompleted(SchedError):
    pass


class TierFull(SchedError):
    pass


class ConfigInfeasible(SchedError):
    pass


class IoFailure(SchedError):
    pass
