"""Domain types and state machines shared by every other module.

All types here are plain values.  Mutation of runtime records happens only in
the module that owns them (the DCR simulator owns ``JobRecord``, the managers
own task and pilot state).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import (
    ConfigError,
    CyclicDependency,
    DanglingDependency,
    DuplicateTaskId,
    IllegalTransition,
    OversizedJob,
    WalltimeExceedsLimit,
)


class TaskStatus(str, Enum):
    PENDING = "Pending"
    READY = "Ready"
    BOUND = "Bound"
    DISPATCHED = "Dispatched"
    RUNNING = "Running"
    DONE = "Done"
    FAILED = "Failed"
    CANCELED = "Canceled"

    @property
    def terminal(self) -> bool:
        return self in _TASK_TERMINAL


_TASK_TERMINAL = frozenset({TaskStatus.DONE, TaskStatus.FAILED, TaskStatus.CANCELED})


class TaskEvent(str, Enum):
    DEPS_MET = "DepsMet"
    EARLY_BOUND = "EarlyBound"
    DISPATCH = "Dispatch"
    START = "Start"
    SUCCEED = "Succeed"
    FAIL = "Fail"
    CANCEL = "Cancel"
    RETRY = "Retry"
    # agent refused the assignment; task goes back to the ready queue
    REJECT = "Reject"
    # pilot lost with rebind_on_pilot_loss; task re-enters dependency tracking
    UNBIND = "Unbind"


class PilotStatus(str, Enum):
    DEFINED = "Defined"
    SUBMITTED = "Submitted"
    ACTIVE = "Active"
    DONE = "Done"
    FAILED = "Failed"
    CANCELED = "Canceled"

    @property
    def terminal(self) -> bool:
        return self in (PilotStatus.DONE, PilotStatus.FAILED, PilotStatus.CANCELED)

    @property
    def inactive(self) -> bool:
        return self in (PilotStatus.DEFINED, PilotStatus.SUBMITTED)


class PilotEvent(str, Enum):
    SUBMIT = "Submit"
    ACTIVATE = "Activate"
    COMPLETE = "Complete"
    FAIL = "Fail"
    CANCEL = "Cancel"


class WorkloadClass(str, Enum):
    BAG_OF_TASKS = "BagOfTasks"
    ENSEMBLE = "Ensemble"
    COUPLED_ENSEMBLE = "CoupledEnsemble"
    WORKFLOW = "Workflow"


class ResourceKind(str, Enum):
    CORES = "Cores"
    MEMORY_MB = "MemoryMB"
    STORAGE_MB = "StorageMB"
    WALLTIME_S = "WalltimeS"


class Middleware(str, Enum):
    BATCH_SIM = "BatchSim"
    LOCAL_EXEC = "LocalExec"


class BootstrapMode(str, Enum):
    BUNDLED = "Bundled"
    STAGED = "Staged"


class JobStatus(str, Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    COMPLETED = "Completed"
    KILLED = "Killed"
    CANCELED = "Canceled"
    # the payload exited on its own with an error (real backends only)
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self not in (JobStatus.QUEUED, JobStatus.RUNNING)


# ---------------------------------------------------------------------------
# JSON field helpers


def _require(doc: Mapping[str, Any], name: str, path: str | None) -> Any:
    if name not in doc:
        raise ConfigError("required field is missing", path=path, field=name)
    return doc[name]


def _check_keys(doc: Any, allowed: Iterable[str], path: str | None, what: str) -> None:
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{what} must be a JSON object", path=path)
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown field in {what}", path=path, field=unknown[0])


def _int(value: Any, name: str, path: str | None, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", path=path, field=name)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", path=path, field=name)
    return value


def _num(value: Any, name: str, path: str | None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"expected a number, got {value!r}", path=path, field=name)
    return value


def _positive(value: Any, name: str, path: str | None) -> float:
    value = _num(value, name, path)
    if value <= 0:
        raise ConfigError(f"must be > 0, got {value}", path=path, field=name)
    return value


def _str(value: Any, name: str, path: str | None) -> str:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"expected a non-empty string, got {value!r}", path=path, field=name)
    return value


def _enum(cls: type[Enum], value: Any, name: str, path: str | None):
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"expected one of {choices}, got {value!r}", path=path, field=name) from None


def _str_list(value: Any, name: str, path: str | None) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError("expected a list of strings", path=path, field=name)
    return tuple(value)


def load_json(path: str | Path) -> Any:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc.strerror}", path=str(path)) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", path=str(path)) from None


# ---------------------------------------------------------------------------
# Tasks and workloads


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    executable: str
    arguments: tuple[str, ...] = ()
    environment: Mapping[str, str] = field(default_factory=dict)
    cores: int = 1
    estimated_duration: float = 1.0
    input_refs: tuple[str, ...] = ()
    output_refs: tuple[str, ...] = ()
    pinned_pilot: str | None = None
    # reserved for application-level priorities; carried but not scheduled on
    priority: int | None = None

    def __post_init__(self):
        if isinstance(self.cores, bool) or not isinstance(self.cores, int) or self.cores < 1:
            raise ConfigError(f"cores must be a positive integer, got {self.cores!r}", field="cores")
        if not self.estimated_duration > 0:
            raise ConfigError(
                f"estimated_duration must be > 0, got {self.estimated_duration!r}", field="estimated_duration"
            )
        object.__setattr__(self, "arguments", tuple(self.arguments))
        object.__setattr__(self, "input_refs", tuple(self.input_refs))
        object.__setattr__(self, "output_refs", tuple(self.output_refs))
        object.__setattr__(self, "environment", dict(self.environment))

    _FIELDS = (
        "task_id", "executable", "arguments", "environment", "cores", "estimated_duration",
        "input_refs", "output_refs", "pinned_pilot", "priority",
    )

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path: str | None = None) -> TaskSpec:
        _check_keys(doc, cls._FIELDS, path, "task")
        env = doc.get("environment", {})
        if not isinstance(env, Mapping) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in env.items()
        ):
            raise ConfigError("expected a map of string to string", path=path, field="environment")
        pinned = doc.get("pinned_pilot")
        priority = doc.get("priority")
        return cls(
            task_id=_str(_require(doc, "task_id", path), "task_id", path),
            executable=_str(_require(doc, "executable", path), "executable", path),
            arguments=_str_list(doc.get("arguments", []), "arguments", path),
            environment=dict(env),
            cores=_int(_require(doc, "cores", path), "cores", path, minimum=1),
            estimated_duration=_positive(_require(doc, "estimated_duration", path), "estimated_duration", path),
            input_refs=_str_list(doc.get("input_refs", []), "input_refs", path),
            output_refs=_str_list(doc.get("output_refs", []), "output_refs", path),
            pinned_pilot=None if pinned is None else _str(pinned, "pinned_pilot", path),
            priority=None if priority is None else _int(priority, "priority", path),
        )

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "task_id": self.task_id,
            "executable": self.executable,
            "arguments": list(self.arguments),
            "environment": dict(self.environment),
            "cores": self.cores,
            "estimated_duration": self.estimated_duration,
            "input_refs": list(self.input_refs),
            "output_refs": list(self.output_refs),
        }
        if self.pinned_pilot is not None:
            doc["pinned_pilot"] = self.pinned_pilot
        if self.priority is not None:
            doc["priority"] = self.priority
        return doc

    def similarity_key(self) -> tuple:
        """Fields compared when deciding whether tasks are indistinguishable."""
        return (self.executable, self.arguments, self.cores, self.estimated_duration)


@dataclass(frozen=True)
class TaskState:
    status: TaskStatus = TaskStatus.PENDING
    attempt: int = 1
    entered: Mapping[TaskStatus, float] = field(default_factory=dict)

    def entered_at(self, status: TaskStatus) -> float | None:
        return self.entered.get(status)


_TASK_TABLE: dict[tuple[TaskStatus, TaskEvent], TaskStatus] = {
    (TaskStatus.PENDING, TaskEvent.DEPS_MET): TaskStatus.READY,
    (TaskStatus.PENDING, TaskEvent.EARLY_BOUND): TaskStatus.BOUND,
    (TaskStatus.READY, TaskEvent.EARLY_BOUND): TaskStatus.BOUND,
    (TaskStatus.READY, TaskEvent.DISPATCH): TaskStatus.DISPATCHED,
    (TaskStatus.BOUND, TaskEvent.DISPATCH): TaskStatus.DISPATCHED,
    (TaskStatus.DISPATCHED, TaskEvent.START): TaskStatus.RUNNING,
    (TaskStatus.RUNNING, TaskEvent.SUCCEED): TaskStatus.DONE,
    (TaskStatus.RUNNING, TaskEvent.FAIL): TaskStatus.FAILED,
    (TaskStatus.FAILED, TaskEvent.RETRY): TaskStatus.READY,
    # losing a pilot can fail a task that never started
    (TaskStatus.BOUND, TaskEvent.FAIL): TaskStatus.FAILED,
    (TaskStatus.DISPATCHED, TaskEvent.FAIL): TaskStatus.FAILED,
    (TaskStatus.DISPATCHED, TaskEvent.REJECT): TaskStatus.READY,
    (TaskStatus.BOUND, TaskEvent.UNBIND): TaskStatus.PENDING,
}
for _s in (TaskStatus.PENDING, TaskStatus.READY, TaskStatus.BOUND, TaskStatus.DISPATCHED, TaskStatus.RUNNING):
    _TASK_TABLE[(_s, TaskEvent.CANCEL)] = TaskStatus.CANCELED


def transition_task(state: TaskState, event: TaskEvent, at: float = 0.0) -> TaskState:
    """Apply one lifecycle event; raises ``IllegalTransition`` for pairs outside the table."""
    event = TaskEvent(event)
    target = _TASK_TABLE.get((state.status, event))
    if target is None:
        raise IllegalTransition(state.status, event)
    attempt = state.attempt + 1 if event is TaskEvent.RETRY else state.attempt
    entered = dict(state.entered)
    entered[target] = at
    return TaskState(status=target, attempt=attempt, entered=entered)


@dataclass(frozen=True)
class PilotState:
    status: PilotStatus = PilotStatus.DEFINED
    entered: Mapping[PilotStatus, float] = field(default_factory=dict)

    @property
    def inactive(self) -> bool:
        return self.status.inactive

    def entered_at(self, status: PilotStatus) -> float | None:
        return self.entered.get(status)


_PILOT_TABLE: dict[tuple[PilotStatus, PilotEvent], PilotStatus] = {
    (PilotStatus.DEFINED, PilotEvent.SUBMIT): PilotStatus.SUBMITTED,
    (PilotStatus.SUBMITTED, PilotEvent.ACTIVATE): PilotStatus.ACTIVE,
    (PilotStatus.ACTIVE, PilotEvent.COMPLETE): PilotStatus.DONE,
    (PilotStatus.SUBMITTED, PilotEvent.FAIL): PilotStatus.FAILED,
    (PilotStatus.ACTIVE, PilotEvent.FAIL): PilotStatus.FAILED,
    (PilotStatus.DEFINED, PilotEvent.CANCEL): PilotStatus.CANCELED,
    (PilotStatus.SUBMITTED, PilotEvent.CANCEL): PilotStatus.CANCELED,
    (PilotStatus.ACTIVE, PilotEvent.CANCEL): PilotStatus.CANCELED,
}


def transition_pilot(state: PilotState, event: PilotEvent, at: float = 0.0) -> PilotState:
    event = PilotEvent(event)
    target = _PILOT_TABLE.get((state.status, event))
    if target is None:
        raise IllegalTransition(state.status, event)
    entered = dict(state.entered)
    entered[target] = at
    return PilotState(status=target, entered=entered)


@dataclass(frozen=True)
class WorkloadSpec:
    workload_id: str
    tasks: tuple[TaskSpec, ...]
    dependencies: tuple[tuple[str, str], ...] = ()
    coupling_flag: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "dependencies", tuple(tuple(e) for e in self.dependencies))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path: str | None = None) -> WorkloadSpec:
        _check_keys(doc, ("workload_id", "tasks", "dependencies", "coupling_flag"), path, "workload")
        tasks = _require(doc, "tasks", path)
        if not isinstance(tasks, list):
            raise ConfigError("expected a list of tasks", path=path, field="tasks")
        deps = doc.get("dependencies", [])
        if not isinstance(deps, list) or not all(
            isinstance(e, list) and len(e) == 2 and all(isinstance(x, str) for x in e) for e in deps
        ):
            raise ConfigError("expected a list of [predecessor, successor] pairs", path=path, field="dependencies")
        coupling = doc.get("coupling_flag", False)
        if not isinstance(coupling, bool):
            raise ConfigError("expected a boolean", path=path, field="coupling_flag")
        parsed = []
        for i, t in enumerate(tasks):
            try:
                parsed.append(TaskSpec.from_dict(t, path=path))
            except ConfigError as exc:
                field_name = f"tasks[{i}].{exc.field}" if exc.field else f"tasks[{i}]"
                raise ConfigError(exc.message, path=path, field=field_name) from None
        return cls(
            workload_id=_str(_require(doc, "workload_id", path), "workload_id", path),
            tasks=tuple(parsed),
            dependencies=tuple((a, b) for a, b in deps),
            coupling_flag=coupling,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "workload_id": self.workload_id,
            "tasks": [t.to_dict() for t in self.tasks],
            "dependencies": [list(e) for e in self.dependencies],
            "coupling_flag": self.coupling_flag,
        }


@dataclass(frozen=True)
class ValidatedWorkload:
    spec: WorkloadSpec
    order: tuple[str, ...]
    predecessors: Mapping[str, tuple[str, ...]]
    successors: Mapping[str, tuple[str, ...]]

    @property
    def workload_id(self) -> str:
        return self.spec.workload_id

    @property
    def tasks(self) -> dict[str, TaskSpec]:
        return {t.task_id: t for t in self.spec.tasks}

    def initial_states(self) -> dict[str, TaskState]:
        return {tid: TaskState() for tid in self.order}


def validate_workload(spec: WorkloadSpec) -> ValidatedWorkload:
    """Check ids and the dependency DAG; cache a deterministic topological order.

    Ties in the order are broken by position in ``spec.tasks``.
    """
    position: dict[str, int] = {}
    for i, task in enumerate(spec.tasks):
        if task.task_id in position:
            raise DuplicateTaskId(f"duplicate task_id {task.task_id!r} in workload {spec.workload_id!r}")
        position[task.task_id] = i

    preds: dict[str, list[str]] = {tid: [] for tid in position}
    succs: dict[str, list[str]] = {tid: [] for tid in position}
    for a, b in spec.dependencies:
        for end in (a, b):
            if end not in position:
                raise DanglingDependency(f"dependency ({a!r}, {b!r}) names unknown task {end!r}")
        if a not in preds[b]:
            preds[b].append(a)
            succs[a].append(b)

    sorter = TopologicalSorter({tid: preds[tid] for tid in position})
    try:
        sorter.prepare()
    except CycleError as exc:
        cycle = exc.args[1] if len(exc.args) > 1 else []
        raise CyclicDependency(f"dependency cycle: {' -> '.join(map(str, cycle))}") from None
    order: list[str] = []
    while sorter.is_active():
        ready = sorted(sorter.get_ready(), key=position.__getitem__)
        order.extend(ready)
        sorter.done(*ready)

    return ValidatedWorkload(
        spec=spec,
        order=tuple(order),
        predecessors={k: tuple(v) for k, v in preds.items()},
        successors={k: tuple(v) for k, v in succs.items()},
    )


def classify_workload(w: ValidatedWorkload) -> WorkloadClass:
    spec = w.spec
    if spec.dependencies:
        return WorkloadClass.WORKFLOW
    if spec.coupling_flag:
        return WorkloadClass.COUPLED_ENSEMBLE
    if len({t.similarity_key() for t in spec.tasks}) <= 1:
        return WorkloadClass.BAG_OF_TASKS
    return WorkloadClass.ENSEMBLE


# ---------------------------------------------------------------------------
# Resources, DCRs, pilots, jobs


@dataclass(frozen=True)
class ResourceQuantity:
    kind: ResourceKind
    amount: float

    def __post_init__(self):
        object.__setattr__(self, "kind", ResourceKind(self.kind))
        if not self.amount >= 0:
            raise ConfigError(f"resource amount must be >= 0, got {self.amount!r}", field="amount")


@dataclass(frozen=True)
class DcrDescriptor:
    dcr_id: str
    middleware: Middleware
    nodes: int
    cores_per_node: int
    max_concurrent_jobs: int
    max_job_walltime: float
    scheduler_cycle: float | None = None
    admin_domain: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "middleware", Middleware(self.middleware))
        for name in ("nodes", "cores_per_node", "max_concurrent_jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"must be >= 1, got {getattr(self, name)}", field=name)
        if not self.max_job_walltime > 0:
            raise ConfigError("must be > 0", field="max_job_walltime")
        if self.middleware is Middleware.BATCH_SIM and not (self.scheduler_cycle or 0) > 0:
            raise ConfigError("BatchSim requires scheduler_cycle > 0", field="scheduler_cycle")

    @property
    def total_cores(self) -> int:
        return self.nodes * self.cores_per_node

    @property
    def resources(self) -> tuple[ResourceQuantity, ...]:
        return (
            ResourceQuantity(ResourceKind.CORES, self.total_cores),
            ResourceQuantity(ResourceKind.WALLTIME_S, self.max_job_walltime),
        )

    _FIELDS = (
        "dcr_id", "middleware", "nodes", "cores_per_node", "max_concurrent_jobs",
        "max_job_walltime", "scheduler_cycle", "admin_domain",
    )

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path: str | None = None) -> DcrDescriptor:
        _check_keys(doc, cls._FIELDS, path, "DCR descriptor")
        middleware = _enum(Middleware, _require(doc, "middleware", path), "middleware", path)
        cycle = doc.get("scheduler_cycle")
        if cycle is not None:
            cycle = _num(cycle, "scheduler_cycle", path)
        if middleware is Middleware.BATCH_SIM and not (cycle or 0) > 0:
            raise ConfigError("BatchSim requires scheduler_cycle > 0", path=path, field="scheduler_cycle")
        walltime = _positive(_require(doc, "max_job_walltime", path), "max_job_walltime", path)
        return cls(
            dcr_id=_str(_require(doc, "dcr_id", path), "dcr_id", path),
            middleware=middleware,
            nodes=_int(_require(doc, "nodes", path), "nodes", path, minimum=1),
            cores_per_node=_int(_require(doc, "cores_per_node", path), "cores_per_node", path, minimum=1),
            max_concurrent_jobs=_int(_require(doc, "max_concurrent_jobs", path), "max_concurrent_jobs", path, minimum=1),
            max_job_walltime=walltime,
            scheduler_cycle=cycle,
            admin_domain=_str(doc.get("admin_domain", "default"), "admin_domain", path),
        )

    def to_dict(self) -> dict[str, Any]:
        doc = {
            "dcr_id": self.dcr_id,
            "middleware": self.middleware.value,
            "nodes": self.nodes,
            "cores_per_node": self.cores_per_node,
            "max_concurrent_jobs": self.max_concurrent_jobs,
            "max_job_walltime": self.max_job_walltime,
            "admin_domain": self.admin_domain,
        }
        if self.scheduler_cycle is not None:
            doc["scheduler_cycle"] = self.scheduler_cycle
        return doc


@dataclass(frozen=True)
class PilotSpec:
    pilot_id: str
    target_dcr: str
    nodes: int
    cores_per_node: int
    walltime: float
    bootstrap_mode: BootstrapMode = BootstrapMode.BUNDLED

    def __post_init__(self):
        object.__setattr__(self, "bootstrap_mode", BootstrapMode(self.bootstrap_mode))
        if self.nodes < 1 or self.cores_per_node < 1:
            raise ConfigError("nodes and cores_per_node must be >= 1", field="nodes")
        if not self.walltime > 0:
            raise ConfigError("walltime must be > 0", field="walltime")

    @property
    def total_cores(self) -> int:
        return self.nodes * self.cores_per_node

    def check_fits(self, dcr: DcrDescriptor) -> None:
        if self.target_dcr != dcr.dcr_id:
            raise ConfigError(f"pilot targets {self.target_dcr!r}, not {dcr.dcr_id!r}", field="target_dcr")
        if self.nodes > dcr.nodes or self.cores_per_node > dcr.cores_per_node:
            raise OversizedJob(
                f"pilot {self.pilot_id} asks {self.nodes}x{self.cores_per_node}, "
                f"DCR {dcr.dcr_id} has {dcr.nodes}x{dcr.cores_per_node}"
            )
        if self.walltime > dcr.max_job_walltime:
            raise WalltimeExceedsLimit(
                f"pilot {self.pilot_id} walltime {self.walltime}s > limit {dcr.max_job_walltime}s"
            )

    _FIELDS = ("pilot_id", "target_dcr", "nodes", "cores_per_node", "walltime", "bootstrap_mode")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path: str | None = None) -> PilotSpec:
        _check_keys(doc, cls._FIELDS, path, "pilot")
        walltime = _positive(_require(doc, "walltime", path), "walltime", path)
        return cls(
            pilot_id=_str(_require(doc, "pilot_id", path), "pilot_id", path),
            target_dcr=_str(_require(doc, "target_dcr", path), "target_dcr", path),
            nodes=_int(_require(doc, "nodes", path), "nodes", path, minimum=1),
            cores_per_node=_int(_require(doc, "cores_per_node", path), "cores_per_node", path, minimum=1),
            walltime=walltime,
            bootstrap_mode=_enum(BootstrapMode, doc.get("bootstrap_mode", "Bundled"), "bootstrap_mode", path),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "pilot_id": self.pilot_id,
            "target_dcr": self.target_dcr,
            "nodes": self.nodes,
            "cores_per_node": self.cores_per_node,
            "walltime": self.walltime,
            "bootstrap_mode": self.bootstrap_mode.value,
        }


@dataclass
class JobRecord:
    job_id: str
    dcr_id: str
    payload: PilotSpec | TaskSpec | None
    requested_nodes: int
    requested_cores: int
    walltime: float
    submit_time: float | None = None
    start_time: float | None = None
    end_time: float | None = None
    status: JobStatus = JobStatus.QUEUED

    @property
    def payload_id(self) -> str | None:
        if isinstance(self.payload, PilotSpec):
            return self.payload.pilot_id
        if isinstance(self.payload, TaskSpec):
            return self.payload.task_id
        return None

    @property
    def payload_kind(self) -> str:
        if isinstance(self.payload, PilotSpec):
            return "pilot"
        if isinstance(self.payload, TaskSpec):
            return "task"
        return "background"

    def copy(self) -> JobRecord:
        return replace(self)


@dataclass(frozen=True)
class PilotCapacity:
    pilot_id: str
    free_cores: int
    total_cores: int


@dataclass(frozen=True)
class ResourceOverlay:
    pilots: tuple[PilotCapacity, ...] = ()

    @property
    def total_cores(self) -> int:
        return sum(p.total_cores for p in self.pilots)

    @property
    def free_cores(self) -> int:
        return sum(p.free_cores for p in self.pilots)

    def to_dict(self) -> dict[str, Any]:
        return {
            "pilots": [
                {"pilot_id": p.pilot_id, "free_cores": p.free_cores, "total_cores": p.total_cores}
                for p in self.pilots
            ],
            "total_cores": self.total_cores,
            "free_cores": self.free_cores,
        }
