"""Pilot Manager and Workload Manager co-located behind one message handler.

Both the simulator and the TCP server feed agent messages and backend job
events through :class:`Manager`; it never reads a clock itself.
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Mapping

from .dcrsim import SimEventKind
from .errors import (
    AlreadyTerminal,
    DuplicateResult,
    PilotkitError,
    PilotNotActive,
    TaskTooLargeForPilotShape,
    UnknownEntity,
    UnknownPilot,
)
from .events import EventLog
from .model import JobStatus, PilotSpec, PilotStatus, ValidatedWorkload, WorkloadSpec, validate_workload
from .pilots import DcrBackend, PilotManager, PilotRecord, ProvisioningMode, ProvisioningPolicy
from .protocol import Message, assign, make
from .workload import SchedulingPolicy, WorkloadManager

log = logging.getLogger(__name__)

_JOB_END = {
    SimEventKind.JOB_ENDED: JobStatus.COMPLETED,
    SimEventKind.JOB_KILLED_WALLTIME: JobStatus.KILLED,
    SimEventKind.JOB_CANCELED: JobStatus.CANCELED,
}


class Manager:
    def __init__(
        self,
        backends: Mapping[str, DcrBackend],
        events: EventLog,
        *,
        provisioning: ProvisioningPolicy | None = None,
        scheduling: SchedulingPolicy | None = None,
        implicit_dcr: str | None = None,
        max_attempts: int = 1,
        rebind_on_pilot_loss: bool = False,
        bootstrap_timeout: float = 60.0,
        heartbeat_interval: float | None = None,
    ):
        self.events = events
        self.pilots = PilotManager(
            backends, events,
            policy=provisioning,
            bootstrap_timeout=bootstrap_timeout,
            heartbeat_interval=heartbeat_interval,
        )
        self.workloads = WorkloadManager(
            self.pilots, events,
            policy=scheduling,
            max_attempts=max_attempts,
            rebind_on_pilot_loss=rebind_on_pilot_loss,
        )
        self.implicit_dcr = implicit_dcr or (sorted(backends)[0] if backends else None)
        self.pilots.listeners.append(self._on_pilot_change)

    @property
    def implicit(self) -> bool:
        return self.pilots.policy.mode is ProvisioningMode.IMPLICIT

    # -- operator API -----------------------------------------------------

    def submit_workload(self, workload: WorkloadSpec | ValidatedWorkload, now: float) -> str:
        w = workload if isinstance(workload, ValidatedWorkload) else validate_workload(workload)
        if self.implicit:
            shape = self.pilots.policy.default_pilot_shape
            biggest = max((t.cores for t in w.spec.tasks), default=0)
            if biggest > shape.cores:
                raise TaskTooLargeForPilotShape(f"largest task needs {biggest} cores; pilot shape holds {shape.cores}")
        wid = self.workloads.submit_workload(w, now)
        if self.implicit:
            self._provision(now)
        return wid

    def submit_pilot(self, spec: PilotSpec, now: float) -> str:
        return self.pilots.submit_pilot(spec, now)

    def cancel(self, entity_id: str, now: float) -> str:
        if entity_id in self.pilots.pilots:
            self.pilots.cancel_pilot(entity_id, now)
            return "pilot"
        if entity_id in self.workloads.tasks:
            self.workloads.cancel_task(entity_id, now)
            return "task"
        if entity_id in self.workloads.workloads:
            w = self.workloads.workloads[entity_id].workload
            for tid in w.order:
                try:
                    self.workloads.cancel_task(tid, now)
                except AlreadyTerminal:
                    pass
            return "workload"
        raise UnknownEntity(entity_id)

    def status(self, entity_id: str) -> dict[str, Any]:
        if entity_id in self.pilots.pilots:
            return {"kind": "pilot", **self.pilots.pilots[entity_id].snapshot()}
        if entity_id in self.workloads.tasks:
            return {"kind": "task", **self.workloads.tasks[entity_id].snapshot()}
        if entity_id in self.workloads.workloads:
            return {"kind": "workload", **self.workloads.workloads[entity_id].snapshot(self.workloads.tasks)}
        raise UnknownEntity(entity_id)

    def release_idle_pilots(self, now: float) -> list[str]:
        """Gracefully end every live pilot once all workloads are finished."""
        released = []
        if not self.workloads.all_complete():
            return released
        for rec in sorted(self.pilots.pilots.values(), key=lambda r: r.pilot_id):
            if not rec.status.terminal and not rec.draining:
                self.pilots.release_pilot(rec.pilot_id, now)
                released.append(rec.pilot_id)
        return released

    # -- implicit provisioning --------------------------------------------

    def _provision(self, now: float) -> None:
        outstanding = self.workloads.outstanding()
        if outstanding and self.implicit_dcr is not None:
            self.pilots.provision(self.workloads.demand(outstanding), self.implicit_dcr, now)

    def _on_pilot_change(self, rec: PilotRecord, now: float) -> None:
        if rec.status.terminal and self.implicit:
            try:
                self._provision(now)
            except PilotkitError as exc:
                log.warning("replacement provisioning failed: %s", exc)

    # -- backend events ---------------------------------------------------

    def on_job_event(self, kind: SimEventKind, job_id: str, now: float) -> None:
        if kind is SimEventKind.JOB_STARTED:
            self.pilots.on_job_started(job_id, now)
        elif kind in _JOB_END:
            self.pilots.on_job_ended(job_id, _JOB_END[kind], now)

    def on_job_status(self, job_id: str, status: JobStatus, now: float) -> None:
        """Same as :meth:`on_job_event` for backends that report plain job states."""
        if status is JobStatus.RUNNING:
            self.pilots.on_job_started(job_id, now)
        elif status.terminal:
            self.pilots.on_job_ended(job_id, status, now)

    def tick(self, now: float) -> list[str]:
        return self.pilots.check_timeouts(now)

    # -- agent messages ---------------------------------------------------

    def handle(
        self,
        msg: Message,
        now: float,
        *,
        session_pilot: str | None = None,
        send: Callable[[Message], None] | None = None,
    ) -> list[Message]:
        body = msg.body
        pilot_id = body.get("pilot_id", session_pilot)
        try:
            if msg.type == "Register":
                if not self.pilots.register(pilot_id, body["cores"], now, send):
                    return [make("Shutdown", reason="NotSubmitted")]
                return [make("Ack", pilot_id=pilot_id, heartbeat_interval=self.pilots.heartbeat_interval)]
            if msg.type == "Heartbeat":
                self.pilots.heartbeat(pilot_id, now, body["state"])
                return []
            if msg.type == "TaskRequest":
                try:
                    spec = self.workloads.match_request(pilot_id, body["free_cores"], now)
                except PilotNotActive:
                    return [make("Shutdown", reason="PilotNotActive")]
                if spec is None:
                    return [make("NoWork")]
                return [assign(spec, self.workloads.tasks[spec.task_id].state.attempt)]
            if msg.type == "Reject":
                self.workloads.reject(body["task_id"], pilot_id, body["reason"], now)
                return []
            if msg.type == "Result":
                try:
                    self.workloads.record_result(
                        body["task_id"], body["exit_code"], body["start"], body["end"], now,
                        reason=body.get("reason"), pilot_id=pilot_id,
                    )
                except DuplicateResult as exc:
                    log.warning("%s", exc)
                return []
        except UnknownPilot:
            return [make("Shutdown", reason="UnknownPilot")]
        log.warning("manager ignores %s from %s", msg.type, pilot_id)
        return []

    # -- invariants -------------------------------------------------------

    def check_overlay(self) -> None:
        """Overlay counters must equal the workload manager's per-pilot ledger."""
        for rec in self.pilots.pilots.values():
            held = self.workloads.held_by(rec.pilot_id)
            assert rec.busy_cores == held, (rec.pilot_id, rec.busy_cores, held)
        overlay = self.pilots.overlay()
        active = [p for p in self.pilots.pilots.values() if p.status is PilotStatus.ACTIVE]
        assert overlay.total_cores == sum(p.cores for p in active)
        assert overlay.free_cores == sum(p.cores - p.busy_cores for p in active)
