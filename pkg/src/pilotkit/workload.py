"""Task dispatching: workload queueing, dependencies, early binding, matchmaking.

There is a single dispatch path.  Agents pull work with a task request and
the matchmaker scans the ready queue in policy order.  Early binding is a pin:
a bound task is only ever offered to its pilot, and only once that pilot is
Active (a request from an inactive pilot is refused outright).
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import (
    AlreadyTerminal,
    ConfigError,
    DuplicateResult,
    DuplicateTaskId,
    DuplicateWorkloadId,
    PilotNotActive,
    TaskNotBindable,
    TaskTooLarge,
    UnknownTask,
    UnknownWorkload,
)
from .events import EventLog
from .model import (
    PilotStatus,
    TaskEvent,
    TaskSpec,
    TaskState,
    TaskStatus,
    ValidatedWorkload,
    classify_workload,
    transition_task,
)
from .pilots import DemandStats, PilotManager, PilotRecord

log = logging.getLogger(__name__)


class BindingKind(str, Enum):
    EARLY = "Early"
    LATE = "Late"


@dataclass(frozen=True)
class Binding:
    task_id: str
    pilot_id: str
    bound_at: float
    kind: BindingKind


class SchedulingOrder(str, Enum):
    FIFO = "Fifo"
    LARGEST_CORES_FIRST = "LargestCoresFirst"


@dataclass(frozen=True)
class SchedulingPolicy:
    order: SchedulingOrder = SchedulingOrder.FIFO
    # a fitting-but-skipped task is passed over at most this many times
    # before the matchmaker stops handing out smaller work; 0 disables
    starvation_guard: int = 0

    def __post_init__(self):
        object.__setattr__(self, "order", SchedulingOrder(self.order))
        if self.starvation_guard < 0:
            raise ConfigError("starvation_guard must be >= 0", field="starvation_guard")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> SchedulingPolicy:
        return cls(order=doc.get("order", "Fifo"), starvation_guard=int(doc.get("starvation_guard", 0)))


_ACTIVE_WORK = (TaskStatus.DISPATCHED, TaskStatus.RUNNING)


@dataclass
class TaskEntry:
    spec: TaskSpec
    workload_id: str
    state: TaskState = field(default_factory=TaskState)
    binding: Binding | None = None
    # pilot this task is pinned to by bind(); survives rejects and retries
    pin: str | None = None
    pilot_id: str | None = None
    held: int = 0
    waiting_on: set[str] = field(default_factory=set)
    ready_at: float = 0.0
    skip_count: int = 0
    rejected_by: set[str] = field(default_factory=set)
    results: list[tuple] = field(default_factory=list)
    reason: str | None = None
    # pilots whose loss already failed an attempt of this task
    lost_on: set[str] = field(default_factory=set)

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    @property
    def status(self) -> TaskStatus:
        return self.state.status

    @property
    def dispatchable(self) -> bool:
        return self.status is TaskStatus.READY or (self.status is TaskStatus.BOUND and not self.waiting_on)

    def snapshot(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "workload_id": self.workload_id,
            "state": self.status.value,
            "attempt": self.state.attempt,
            "pilot_id": self.pilot_id or (self.binding.pilot_id if self.binding else None),
            "reason": self.reason,
            "timestamps": {s.value: t for s, t in self.state.entered.items()},
        }


@dataclass
class WorkloadEntry:
    workload: ValidatedWorkload
    submitted_at: float
    status: str = "Running"
    completed_at: float | None = None

    def snapshot(self, tasks: Mapping[str, TaskEntry]) -> dict[str, Any]:
        counts = Counter(tasks[t].status.value for t in self.workload.order)
        return {
            "workload_id": self.workload.workload_id,
            "state": self.status,
            "class": classify_workload(self.workload).value,
            "submitted_at": self.submitted_at,
            "completed_at": self.completed_at,
            "tasks": dict(sorted(counts.items())),
        }


class WorkloadManager:
    def __init__(
        self,
        pilots: PilotManager,
        events: EventLog,
        *,
        policy: SchedulingPolicy | None = None,
        max_attempts: int = 1,
        rebind_on_pilot_loss: bool = False,
    ):
        if max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1", field="max_attempts")
        self.pilots = pilots
        self.events = events
        self.policy = policy or SchedulingPolicy()
        self.max_attempts = max_attempts
        self.rebind_on_pilot_loss = rebind_on_pilot_loss
        self.tasks: dict[str, TaskEntry] = {}
        self.workloads: dict[str, WorkloadEntry] = {}
        # bumped whenever new work may have become dispatchable
        self.version = 0
        pilots.listeners.append(self._on_pilot_change)

    # -- helpers ----------------------------------------------------------

    def task(self, task_id: str) -> TaskEntry:
        try:
            return self.tasks[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def workload(self, workload_id: str) -> WorkloadEntry:
        try:
            return self.workloads[workload_id]
        except KeyError:
            raise UnknownWorkload(workload_id) from None

    def _set(self, e: TaskEntry, event: TaskEvent, now: float, **attrs: Any) -> None:
        e.state = transition_task(e.state, event, now)
        self.events.append(now, "Task", e.task_id, e.status.value, attempt=e.state.attempt, **attrs)

    def _release(self, e: TaskEntry) -> None:
        if e.held:
            self.pilots.adjust_busy(e.pilot_id, -e.held)
            e.held = 0

    def _make_ready(self, e: TaskEntry, now: float) -> None:
        e.ready_at = now
        e.skip_count = 0
        self.version += 1

    # -- submission -------------------------------------------------------

    def submit_workload(self, w: ValidatedWorkload, now: float) -> str:
        wid = w.workload_id
        if wid in self.workloads:
            raise DuplicateWorkloadId(wid)
        specs = w.tasks
        clash = sorted(set(specs) & set(self.tasks))
        if clash:
            raise DuplicateTaskId(f"task_id {clash[0]!r} already submitted in another workload")
        for spec in specs.values():
            if spec.pinned_pilot is not None:
                self._check_bindable(spec, spec.pinned_pilot)

        self.workloads[wid] = WorkloadEntry(workload=w, submitted_at=now)
        self.events.append(
            now, "Workload", wid, "Submitted",
            workload_class=classify_workload(w).value,
            tasks=list(w.order),
            dependencies=[list(e) for e in w.spec.dependencies],
        )
        for tid in w.order:
            spec = specs[tid]
            e = TaskEntry(spec=spec, workload_id=wid, waiting_on=set(w.predecessors[tid]))
            e.state = TaskState(entered={TaskStatus.PENDING: now})
            self.tasks[tid] = e
            self.events.append(now, "Task", tid, "Pending", attempt=1, workload_id=wid, cores=spec.cores)
        for tid in w.order:
            e = self.tasks[tid]
            if not e.waiting_on:
                self._set(e, TaskEvent.DEPS_MET, now)
                self._make_ready(e, now)
            if e.spec.pinned_pilot is not None:
                self.bind(tid, e.spec.pinned_pilot, now)
        self._check_complete(wid, now)
        return wid

    # -- binding ----------------------------------------------------------

    def _check_bindable(self, spec: TaskSpec, pilot_id: str) -> PilotRecord:
        rec = self.pilots.get(pilot_id)
        if rec.status.terminal:
            raise TaskNotBindable(f"pilot {pilot_id} is {rec.status.value}")
        if spec.cores > rec.spec.total_cores:
            raise TaskTooLarge(f"task {spec.task_id} needs {spec.cores} cores; pilot {pilot_id} has {rec.spec.total_cores}")
        return rec

    def bind(self, task_id: str, pilot_id: str, now: float) -> Binding:
        """Pin a task to a pilot; Early when the pilot is still inactive."""
        e = self.task(task_id)
        rec = self._check_bindable(e.spec, pilot_id)
        if e.status not in (TaskStatus.PENDING, TaskStatus.READY):
            raise TaskNotBindable(f"task {task_id} is {e.status.value}")
        kind = BindingKind.EARLY if rec.status.inactive else BindingKind.LATE
        e.binding = Binding(task_id, pilot_id, now, kind)
        e.pin = pilot_id
        self._set(e, TaskEvent.EARLY_BOUND, now, pilot_id=pilot_id, kind=kind.value)
        if not e.waiting_on:
            self.version += 1
        return e.binding

    # -- matchmaking ------------------------------------------------------

    def _rank(self, e: TaskEntry) -> tuple:
        if self.policy.order is SchedulingOrder.LARGEST_CORES_FIRST:
            return (-e.spec.cores, e.task_id)
        return (e.ready_at, e.task_id)

    def candidates(self, pilot_id: str) -> list[TaskEntry]:
        """Dispatchable tasks this pilot may take, in policy order."""
        found = []
        for e in self.tasks.values():
            if not e.dispatchable or pilot_id in e.rejected_by:
                continue
            if e.binding is not None and e.binding.pilot_id != pilot_id:
                continue
            found.append(e)
        found.sort(key=self._rank)
        return found

    def match_request(self, pilot_id: str, free_cores: int, now: float) -> TaskSpec | None:
        rec = self.pilots.get(pilot_id)
        if rec.status is not PilotStatus.ACTIVE:
            raise PilotNotActive(f"pilot {pilot_id} is {rec.status.value}")
        if rec.draining:
            return None
        budget = min(free_cores, rec.free_cores)
        guard = self.policy.starvation_guard
        for e in self.candidates(pilot_id):
            if e.spec.cores <= budget:
                self._dispatch(e, rec, now)
                return e.spec
            if guard and e.spec.cores <= rec.cores:
                e.skip_count += 1
                if e.skip_count > guard:
                    break
        return None

    def _dispatch(self, e: TaskEntry, rec: PilotRecord, now: float) -> None:
        if e.binding is None:
            e.binding = Binding(e.task_id, rec.pilot_id, now, BindingKind.LATE)
        e.pilot_id = rec.pilot_id
        e.held = e.spec.cores
        e.skip_count = 0
        self.pilots.adjust_busy(rec.pilot_id, e.held)
        self._set(
            e, TaskEvent.DISPATCH, now,
            pilot_id=rec.pilot_id, cores=e.spec.cores, binding=e.binding.kind.value, requested_at=now,
        )

    def reject(self, task_id: str, pilot_id: str, reason: str, now: float) -> None:
        """The agent refused an assignment; put the task back in the queue."""
        e = self.task(task_id)
        if e.status is not TaskStatus.DISPATCHED or e.pilot_id != pilot_id:
            log.warning("ignoring reject of %s by %s in state %s", task_id, pilot_id, e.status.value)
            return
        self._release(e)
        e.rejected_by.add(pilot_id)
        e.pilot_id = None
        e.binding = None
        self._set(e, TaskEvent.REJECT, now, pilot_id=pilot_id, reason=reason)
        self._make_ready(e, now)
        if e.pin is not None:
            self.bind(task_id, e.pin, now)

    # -- direct submission (no pilot) --------------------------------------

    def dispatch_direct(self, task_id: str, job_id: str, now: float) -> None:
        e = self.task(task_id)
        self._set(e, TaskEvent.DISPATCH, now, job_id=job_id, cores=e.spec.cores, binding="Direct", requested_at=now)

    def mark_running(self, task_id: str, now: float) -> None:
        e = self.task(task_id)
        self._set(e, TaskEvent.START, now, start=now)

    # -- results ----------------------------------------------------------

    def record_result(
        self,
        task_id: str,
        exit_code: int,
        start: float,
        end: float,
        now: float,
        *,
        reason: str | None = None,
        pilot_id: str | None = None,
    ) -> bool:
        """Returns False when the result was an ignored duplicate."""
        e = self.task(task_id)
        result = (exit_code, start, end, reason)
        if e.status not in _ACTIVE_WORK or (pilot_id is not None and pilot_id in e.lost_on):
            if result in e.results or pilot_id in e.lost_on:
                return False
            if e.status is TaskStatus.CANCELED and e.held:
                self._release(e)
                return False
            raise DuplicateResult(f"unexpected result for {task_id} in state {e.status.value}")
        if pilot_id is not None and e.pilot_id is not None and pilot_id != e.pilot_id:
            raise DuplicateResult(f"result for {task_id} from {pilot_id}, but it runs on {e.pilot_id}")

        e.results.append(result)
        where = {"pilot_id": e.pilot_id} if e.pilot_id else {}
        if e.status is TaskStatus.DISPATCHED:
            self._set(e, TaskEvent.START, now, start=start, **where)
        self._release(e)
        info = dict(where, cores=e.spec.cores, exit_code=exit_code, start=start, end=end)
        if exit_code == 0:
            self._set(e, TaskEvent.SUCCEED, now, **info)
            self._release_successors(e, now)
        else:
            e.reason = reason or "NonZeroExit"
            self._set(e, TaskEvent.FAIL, now, reason=e.reason, **info)
            self._maybe_retry(e, now)
        self._check_complete(e.workload_id, now)
        return True

    def _maybe_retry(self, e: TaskEntry, now: float) -> None:
        if e.state.attempt >= self.max_attempts:
            return
        pinned = e.pin
        if pinned is not None and self.pilots.get(pinned).status.terminal:
            return
        e.binding = None
        e.pilot_id = None
        e.reason = None
        self._set(e, TaskEvent.RETRY, now)
        self._make_ready(e, now)
        if pinned is not None:
            self.bind(e.task_id, pinned, now)

    def _release_successors(self, e: TaskEntry, now: float) -> None:
        w = self.workloads[e.workload_id].workload
        for succ in w.successors[e.task_id]:
            s = self.tasks[succ]
            s.waiting_on.discard(e.task_id)
            if s.waiting_on:
                continue
            if s.status is TaskStatus.PENDING:
                self._set(s, TaskEvent.DEPS_MET, now)
                self._make_ready(s, now)
            elif s.status is TaskStatus.BOUND:
                self._make_ready(s, now)

    def _blocked(self, w: ValidatedWorkload) -> set[str]:
        """Tasks that can never run because a predecessor did not finish Done."""
        dead: set[str] = set()
        for tid in w.order:
            for p in w.predecessors[tid]:
                ps = self.tasks[p].status
                if p in dead or (ps.terminal and ps is not TaskStatus.DONE):
                    dead.add(tid)
                    break
        return dead

    def _check_complete(self, workload_id: str, now: float) -> None:
        entry = self.workloads[workload_id]
        if entry.completed_at is not None:
            return
        w = entry.workload
        blocked = self._blocked(w)
        states = [self.tasks[t].status for t in w.order]
        if not all(s.terminal or t in blocked for t, s in zip(w.order, states)):
            return
        entry.status = "Completed" if all(s is TaskStatus.DONE for s in states) else "PartiallyFailed"
        entry.completed_at = now
        self.events.append(now, "Workload", workload_id, "Completed", status=entry.status)

    # -- pilot loss and cancellation --------------------------------------

    def _on_pilot_change(self, rec: PilotRecord, now: float) -> None:
        if rec.status is PilotStatus.ACTIVE:
            self.version += 1
            return
        if not rec.status.terminal:
            return
        touched = set()
        for e in sorted(self.tasks.values(), key=lambda e: e.task_id):
            if e.status is TaskStatus.CANCELED and e.pilot_id == rec.pilot_id:
                self._release(e)
            elif e.status in _ACTIVE_WORK and e.pilot_id == rec.pilot_id:
                self._release(e)
                e.reason = "PilotLost"
                e.lost_on.add(rec.pilot_id)
                self._set(e, TaskEvent.FAIL, now, reason="PilotLost", pilot_id=rec.pilot_id, cores=e.spec.cores)
                self._maybe_retry(e, now)
                touched.add(e.workload_id)
            elif e.status is TaskStatus.BOUND and e.binding and e.binding.pilot_id == rec.pilot_id:
                e.binding = None
                if self.rebind_on_pilot_loss:
                    e.pin = None
                    self._set(e, TaskEvent.UNBIND, now, pilot_id=rec.pilot_id)
                    if not e.waiting_on:
                        self._set(e, TaskEvent.DEPS_MET, now)
                        self._make_ready(e, now)
                else:
                    e.reason = "BindingLost"
                    self._set(e, TaskEvent.FAIL, now, reason="BindingLost", pilot_id=rec.pilot_id)
                    self._maybe_retry(e, now)
                touched.add(e.workload_id)
        for wid in sorted(touched):
            self._check_complete(wid, now)

    def cancel_task(self, task_id: str, now: float) -> None:
        e = self.task(task_id)
        if e.status.terminal:
            raise AlreadyTerminal(f"task {task_id} is {e.status.value}")
        # cores stay held until the agent reports the (ignored) result
        self._set(e, TaskEvent.CANCEL, now, **({"pilot_id": e.pilot_id} if e.pilot_id else {}))
        self._check_complete(e.workload_id, now)

    # -- views ------------------------------------------------------------

    def outstanding(self, workload_id: str | None = None) -> list[TaskEntry]:
        """Tasks not yet handed to any pilot that can still run."""
        blocked: set[str] = set()
        for entry in self.workloads.values():
            if entry.completed_at is None:
                blocked |= self._blocked(entry.workload)
        return [
            e for e in self.tasks.values()
            if e.status in (TaskStatus.PENDING, TaskStatus.READY, TaskStatus.BOUND)
            and e.task_id not in blocked
            and (workload_id is None or e.workload_id == workload_id)
        ]

    def demand(self, tasks: Iterable[TaskEntry] | None = None) -> DemandStats:
        tasks = list(self.outstanding() if tasks is None else tasks)
        return DemandStats(
            total_core_seconds=sum(e.spec.cores * e.spec.estimated_duration for e in tasks),
            max_task_cores=max((e.spec.cores for e in tasks), default=0),
            task_count=len(tasks),
        )

    def held_by(self, pilot_id: str) -> int:
        return sum(e.held for e in self.tasks.values() if e.pilot_id == pilot_id)

    def all_complete(self) -> bool:
        return all(w.completed_at is not None for w in self.workloads.values())
