"""Pilot-job system: pilots as resource placeholders on batch-scheduled resources."""

from .errors import PilotkitError
from .events import EventLog, EventRecord
from .model import DcrDescriptor, PilotSpec, TaskSpec, WorkloadSpec, validate_workload

__all__ = [
    "DcrDescriptor",
    "EventLog",
    "EventRecord",
    "PilotSpec",
    "PilotkitError",
    "TaskSpec",
    "WorkloadSpec",
    "validate_workload",
]
