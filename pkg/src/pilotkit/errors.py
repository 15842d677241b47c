"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) so it can travel over
the control API and be re-raised client side.
"""

from __future__ import annotations


class PilotkitError(Exception):
    @property
    def code(self) -> str:
        return type(self).__name__


# workload validation
class ValidationError(PilotkitError):
    pass


class DuplicateTaskId(ValidationError):
    pass


class DanglingDependency(ValidationError):
    pass


class CyclicDependency(ValidationError):
    pass


class ConfigError(ValidationError):
    """A JSON document failed to parse or a field is invalid."""

    def __init__(self, message: str, *, path: str | None = None, field: str | None = None):
        self.path = path
        self.field = field
        self.message = message
        where = ": ".join(p for p in (path, f"field '{field}'" if field else None) if p)
        super().__init__(f"{where}: {message}" if where else message)


class IllegalTransition(PilotkitError):
    def __init__(self, state, event):
        self.state = state
        self.event = event
        super().__init__(f"illegal transition: {getattr(state, 'value', state)} --{getattr(event, 'value', event)}-->")


# DCR backends
class OversizedJob(PilotkitError):
    pass


class WalltimeExceedsLimit(PilotkitError):
    pass


class QueueFull(PilotkitError):
    pass


class UnknownJob(PilotkitError):
    pass


class AlreadyTerminal(PilotkitError):
    pass


class SpawnFailure(PilotkitError):
    pass


class UnknownHandle(PilotkitError):
    pass


# pilots
class DuplicatePilot(PilotkitError):
    pass


class UnknownPilot(PilotkitError):
    pass


class PilotNotActive(PilotkitError):
    pass


class TaskTooLargeForPilotShape(PilotkitError):
    pass


# workloads / tasks
class DuplicateWorkloadId(PilotkitError):
    pass


class UnknownTask(PilotkitError):
    pass


class UnknownWorkload(PilotkitError):
    pass


class TaskNotBindable(PilotkitError):
    pass


class TaskTooLarge(PilotkitError):
    pass


class DuplicateResult(PilotkitError):
    pass


# protocol
class DecodeError(PilotkitError):
    pass


class MalformedJson(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class MissingField(DecodeError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"missing field: {name}")


class InvalidField(DecodeError):
    pass


class VersionMismatch(DecodeError):
    pass


class ChecksumMismatch(DecodeError):
    pass


class ConnectFailure(PilotkitError):
    pass


class AssignOverCapacity(PilotkitError):
    pass


# metrics
class WorkloadNotFinished(PilotkitError):
    pass


class PilotNeverActive(PilotkitError):
    pass


# operator surface
class UnknownEntity(PilotkitError):
    pass


class BindError(PilotkitError):
    pass


def error_by_code(code: str) -> type[PilotkitError]:
    """Map a wire error code back to its class (falls back to the base)."""
    found = globals().get(code)
    if isinstance(found, type) and issubclass(found, PilotkitError):
        return found
    return PilotkitError
