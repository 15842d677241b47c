"""Pilot provisioning: submission, lifecycle tracking, implicit sizing, overlay."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Mapping, Protocol

from .errors import (
    AlreadyTerminal,
    ConfigError,
    DuplicatePilot,
    OversizedJob,
    PilotkitError,
    TaskTooLargeForPilotShape,
    UnknownPilot,
    WalltimeExceedsLimit,
)
from .events import EventLog
from .model import (
    DcrDescriptor,
    JobRecord,
    JobStatus,
    PilotCapacity,
    PilotEvent,
    PilotSpec,
    PilotState,
    PilotStatus,
    ResourceOverlay,
    transition_pilot,
)
from .protocol import Message, make

log = logging.getLogger(__name__)


class DcrBackend(Protocol):
    descriptor: DcrDescriptor

    def submit_job(self, payload: Any, at: float | None = None) -> str: ...

    def cancel_job(self, job_id: str) -> None: ...

    def query_job(self, job_id: str) -> JobRecord: ...


class ProvisioningMode(str, Enum):
    EXPLICIT = "Explicit"
    IMPLICIT = "Implicit"


@dataclass(frozen=True)
class PilotShape:
    nodes: int
    cores_per_node: int
    walltime: float

    @property
    def cores(self) -> int:
        return self.nodes * self.cores_per_node


@dataclass(frozen=True)
class ProvisioningPolicy:
    mode: ProvisioningMode = ProvisioningMode.EXPLICIT
    overallocation: float = 1.0
    default_pilot_shape: PilotShape | None = None
    # hard ceiling on pilots created by implicit provisioning over a run
    max_pilots: int = 100

    def __post_init__(self):
        object.__setattr__(self, "mode", ProvisioningMode(self.mode))
        if not self.overallocation >= 1.0:
            raise ConfigError(f"overallocation must be >= 1.0, got {self.overallocation}", field="overallocation")
        if self.mode is ProvisioningMode.IMPLICIT and self.default_pilot_shape is None:
            raise ConfigError("implicit provisioning needs a default_pilot_shape", field="default_pilot_shape")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path: str | None = None) -> ProvisioningPolicy:
        unknown = sorted(set(doc) - {"mode", "overallocation", "default_pilot_shape", "max_pilots"})
        if unknown:
            raise ConfigError("unknown field in policy", path=path, field=unknown[0])
        shape = doc.get("default_pilot_shape")
        try:
            return cls(
                mode=doc.get("mode", "Explicit"),
                overallocation=float(doc.get("overallocation", 1.0)),
                default_pilot_shape=PilotShape(**shape) if shape is not None else None,
                max_pilots=int(doc.get("max_pilots", 100)),
            )
        except ConfigError as exc:
            raise ConfigError(exc.message, path=path, field=exc.field) from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), path=path) from None


@dataclass(frozen=True)
class DemandStats:
    total_core_seconds: float
    max_task_cores: int
    task_count: int


@dataclass(frozen=True)
class ProvisionPlan:
    pilots: tuple[PilotSpec, ...]
    requested: int
    capped: bool

    def __len__(self) -> int:
        return len(self.pilots)

    def __iter__(self):
        return iter(self.pilots)


def pilots_needed(total_core_seconds: float, overallocation: float, shape: PilotShape) -> int:
    """Smallest n with n * cores * walltime >= overallocation * demand, in exact arithmetic."""
    inflated = Fraction(str(total_core_seconds)) * Fraction(str(overallocation))
    capacity = shape.cores * Fraction(str(shape.walltime))
    return -(-inflated // capacity)


def auto_provision(
    pending: DemandStats,
    dcr: DcrDescriptor,
    policy: ProvisioningPolicy,
    *,
    submitted: int = 0,
    next_id: Callable[[], str] | None = None,
) -> ProvisionPlan:
    if policy.mode is not ProvisioningMode.IMPLICIT:
        raise PilotkitError("auto_provision requires an Implicit policy")
    shape = policy.default_pilot_shape
    if shape.nodes > dcr.nodes or shape.cores_per_node > dcr.cores_per_node:
        raise OversizedJob(f"pilot shape {shape} does not fit DCR {dcr.dcr_id}")
    if shape.walltime > dcr.max_job_walltime:
        raise WalltimeExceedsLimit(f"pilot walltime {shape.walltime}s exceeds {dcr.max_job_walltime}s")
    if pending.max_task_cores > shape.cores:
        raise TaskTooLargeForPilotShape(
            f"largest task needs {pending.max_task_cores} cores; pilot shape holds {shape.cores}"
        )

    wanted = pilots_needed(pending.total_core_seconds, policy.overallocation, shape) if pending.task_count else 0
    room = max(0, dcr.max_concurrent_jobs - submitted)
    n = min(wanted, room)
    if next_id is None:
        counter = iter(range(1, n + 1))
        next_id = lambda: f"{dcr.dcr_id}.pilot{next(counter):04d}"  # noqa: E731
    specs = tuple(
        PilotSpec(
            pilot_id=next_id(),
            target_dcr=dcr.dcr_id,
            nodes=shape.nodes,
            cores_per_node=shape.cores_per_node,
            walltime=shape.walltime,
        )
        for _ in range(n)
    )
    return ProvisionPlan(pilots=specs, requested=wanted, capped=wanted > n)


@dataclass
class PilotRecord:
    spec: PilotSpec
    state: PilotState = field(default_factory=PilotState)
    job_id: str | None = None
    reason: str | None = None
    cores: int = 0
    busy_cores: int = 0
    job_started_at: float | None = None
    last_heartbeat: float | None = None
    draining: bool = False
    send: Callable[[Message], None] | None = None

    @property
    def pilot_id(self) -> str:
        return self.spec.pilot_id

    @property
    def status(self) -> PilotStatus:
        return self.state.status

    @property
    def free_cores(self) -> int:
        return self.cores - self.busy_cores

    def snapshot(self) -> dict[str, Any]:
        return {
            "pilot_id": self.pilot_id,
            "state": self.status.value,
            "dcr_id": self.spec.target_dcr,
            "job_id": self.job_id,
            "reason": self.reason,
            "cores": self.spec.total_cores,
            "busy_cores": self.busy_cores,
            "timestamps": {s.value: t for s, t in self.state.entered.items()},
        }


PilotListener = Callable[[PilotRecord, float], None]


class PilotManager:
    """Tracks every pilot from submission to a terminal state.

    Times are passed in explicitly so the same code runs on the simulation
    clock and on a monotonic wall clock.
    """

    def __init__(
        self,
        backends: Mapping[str, DcrBackend],
        events: EventLog,
        *,
        policy: ProvisioningPolicy | None = None,
        bootstrap_timeout: float = 60.0,
        heartbeat_interval: float | None = None,
        heartbeat_misses: int = 3,
    ):
        self.backends = dict(backends)
        self.events = events
        self.policy = policy or ProvisioningPolicy()
        self.bootstrap_timeout = bootstrap_timeout
        self.heartbeat_interval = heartbeat_interval
        self.heartbeat_misses = heartbeat_misses
        self.pilots: dict[str, PilotRecord] = {}
        self.by_job: dict[str, str] = {}
        self.listeners: list[PilotListener] = []
        self.implicit_created = 0
        self._counter = 0

    # -- lookup -----------------------------------------------------------

    def get(self, pilot_id: str) -> PilotRecord:
        try:
            return self.pilots[pilot_id]
        except KeyError:
            raise UnknownPilot(pilot_id) from None

    def descriptor(self, dcr_id: str) -> DcrDescriptor:
        try:
            return self.backends[dcr_id].descriptor
        except KeyError:
            raise ConfigError(f"no DCR named {dcr_id!r}", field="target_dcr") from None

    def _set(self, rec: PilotRecord, event: PilotEvent, now: float, reason: str | None = None, **attrs) -> None:
        rec.state = transition_pilot(rec.state, event, now)
        if reason is not None:
            rec.reason = reason
            attrs["reason"] = reason
        self.events.append(now, "Pilot", rec.pilot_id, rec.status.value, **attrs)
        for listener in self.listeners:
            listener(rec, now)

    # -- submission -------------------------------------------------------

    def submit_pilot(self, spec: PilotSpec, now: float) -> str:
        if spec.pilot_id in self.pilots:
            raise DuplicatePilot(spec.pilot_id)
        backend = self.backends.get(spec.target_dcr)
        if backend is None:
            raise ConfigError(f"no DCR named {spec.target_dcr!r}", field="target_dcr")
        spec.check_fits(backend.descriptor)
        job_id = backend.submit_job(spec, at=now)
        rec = PilotRecord(spec=spec, job_id=job_id)
        self.pilots[spec.pilot_id] = rec
        self.by_job[job_id] = spec.pilot_id
        self._set(
            rec, PilotEvent.SUBMIT, now,
            dcr_id=spec.target_dcr, job_id=job_id, cores=spec.total_cores, walltime=spec.walltime,
        )
        return spec.pilot_id

    def new_pilot_id(self) -> str:
        while True:
            self._counter += 1
            pilot_id = f"pilot.{self._counter:04d}"
            if pilot_id not in self.pilots:
                return pilot_id

    def provision(self, demand: DemandStats, dcr_id: str, now: float) -> ProvisionPlan:
        """Implicit provisioning: top the DCR up to the pilot count ``demand`` needs.

        Live pilots on the DCR count both towards the target and against the
        DCR's concurrent-job cap.
        """
        dcr = self.descriptor(dcr_id)
        live = sum(
            1 for p in self.pilots.values()
            if p.spec.target_dcr == dcr_id and not p.status.terminal and not p.draining
        )
        plan = auto_provision(demand, dcr, self.policy, submitted=live)
        budget = max(0, self.policy.max_pilots - self.implicit_created)
        count = min(len(plan.pilots), max(0, plan.requested - live), budget)
        submitted = []
        for spec in plan.pilots[:count]:
            spec = replace(spec, pilot_id=self.new_pilot_id())
            self.submit_pilot(spec, now)
            self.implicit_created += 1
            submitted.append(spec)
        capped = plan.capped or count < max(0, plan.requested - live)
        if capped:
            log.info("implicit provisioning capped: wanted %d more, submitted %d", plan.requested - live, count)
        return ProvisionPlan(pilots=tuple(submitted), requested=plan.requested, capped=capped)

    # -- agent side -------------------------------------------------------

    def register(self, pilot_id: str, cores: int, now: float, send: Callable[[Message], None] | None = None) -> bool:
        """Agent said hello.  Returns False when the pilot can no longer become Active."""
        rec = self.get(pilot_id)
        if rec.status is not PilotStatus.SUBMITTED:
            return False
        rec.cores = min(cores, rec.spec.total_cores)
        rec.send = send
        rec.last_heartbeat = now
        if rec.job_started_at is None:
            rec.job_started_at = now
        self._set(rec, PilotEvent.ACTIVATE, now, cores=rec.cores)
        return True

    def heartbeat(self, pilot_id: str, now: float, state: str = "Running") -> None:
        rec = self.get(pilot_id)
        rec.last_heartbeat = now
        if state == "Draining":
            rec.draining = True

    def adjust_busy(self, pilot_id: str, delta: int) -> None:
        rec = self.get(pilot_id)
        rec.busy_cores += delta
        assert 0 <= rec.busy_cores <= max(rec.cores, rec.spec.total_cores), (pilot_id, rec.busy_cores)

    # -- backend side -----------------------------------------------------

    def on_job_started(self, job_id: str, now: float) -> str | None:
        pilot_id = self.by_job.get(job_id)
        if pilot_id is not None:
            self.pilots[pilot_id].job_started_at = now
        return pilot_id

    def on_job_ended(self, job_id: str, status: JobStatus, now: float) -> str | None:
        pilot_id = self.by_job.get(job_id)
        if pilot_id is None:
            return None
        rec = self.pilots[pilot_id]
        if rec.status.terminal:
            return pilot_id
        if status is JobStatus.KILLED:
            self._set(rec, PilotEvent.FAIL, now, reason="WalltimeExpired")
        elif status is JobStatus.CANCELED:
            self._set(rec, PilotEvent.FAIL, now, reason="JobCanceled")
        elif rec.status is PilotStatus.ACTIVE and status is JobStatus.COMPLETED:
            self._set(rec, PilotEvent.COMPLETE, now)
        else:
            self._set(rec, PilotEvent.FAIL, now, reason="AgentExited")
        rec.send = None
        return pilot_id

    # -- operator side ----------------------------------------------------

    def cancel_pilot(self, pilot_id: str, now: float) -> None:
        rec = self.get(pilot_id)
        if rec.status.terminal:
            raise AlreadyTerminal(f"pilot {pilot_id} is {rec.status.value}")
        was_active = rec.status is PilotStatus.ACTIVE
        send = rec.send
        self._set(rec, PilotEvent.CANCEL, now)
        if was_active and send is not None:
            send(make("Shutdown", reason="Canceled"))
        else:
            self._cancel_job(rec)
        rec.send = None

    def release_pilot(self, pilot_id: str, now: float) -> None:
        """Graceful end: ask the agent to drain; the pilot turns Done when its job ends."""
        rec = self.get(pilot_id)
        if rec.status.terminal:
            raise AlreadyTerminal(f"pilot {pilot_id} is {rec.status.value}")
        if rec.status is PilotStatus.ACTIVE and rec.send is not None:
            rec.draining = True
            rec.send(make("Shutdown", reason="Released"))
        else:
            self.cancel_pilot(pilot_id, now)

    def _cancel_job(self, rec: PilotRecord) -> None:
        backend = self.backends[rec.spec.target_dcr]
        try:
            backend.cancel_job(rec.job_id)
        except AlreadyTerminal:
            pass

    def _fail(self, rec: PilotRecord, now: float, reason: str) -> None:
        self._set(rec, PilotEvent.FAIL, now, reason=reason)
        rec.send = None
        self._cancel_job(rec)

    def check_timeouts(self, now: float) -> list[str]:
        failed = []
        for rec in sorted(self.pilots.values(), key=lambda r: r.pilot_id):
            deadline = self._deadline(rec)
            if deadline is not None and now >= deadline:
                reason = "BootstrapTimeout" if rec.status is PilotStatus.SUBMITTED else "HeartbeatLost"
                self._fail(rec, now, reason)
                failed.append(rec.pilot_id)
        return failed

    def _deadline(self, rec: PilotRecord) -> float | None:
        if rec.status is PilotStatus.SUBMITTED and rec.job_started_at is not None:
            return rec.job_started_at + self.bootstrap_timeout
        if rec.status is PilotStatus.ACTIVE and self.heartbeat_interval and rec.last_heartbeat is not None:
            return rec.last_heartbeat + self.heartbeat_interval * self.heartbeat_misses
        return None

    def next_deadline(self) -> float | None:
        deadlines = [d for d in map(self._deadline, self.pilots.values()) if d is not None]
        return min(deadlines) if deadlines else None

    # -- views ------------------------------------------------------------

    def active(self) -> list[PilotRecord]:
        return [p for p in self.pilots.values() if p.status is PilotStatus.ACTIVE]

    def overlay(self) -> ResourceOverlay:
        return ResourceOverlay(
            tuple(
                PilotCapacity(p.pilot_id, p.free_cores, p.cores)
                for p in sorted(self.active(), key=lambda p: p.pilot_id)
            )
        )
