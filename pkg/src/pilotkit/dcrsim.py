"""Deterministic discrete-event model of a batch-scheduled DCR.

The scheduler only acts at fixed cycle boundaries (t = k * scheduler_cycle,
k >= 1).  A job is eligible at a cycle strictly after its submission, and the
queue is served first-come-first-served without backfill unless configured.

Allocation is node-granular with per-node core accounting: a job asks for
``requested_nodes`` distinct nodes with ``requested_cores`` free cores on
each.  A job asking for every core of a node therefore holds the whole node;
single-core jobs may share one.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping

from .errors import (
    AlreadyTerminal,
    ConfigError,
    OversizedJob,
    PilotkitError,
    QueueFull,
    UnknownJob,
    WalltimeExceedsLimit,
)
from .model import DcrDescriptor, JobRecord, JobStatus, Middleware, PilotSpec, TaskSpec


class SimEventKind(str, Enum):
    JOB_QUEUED = "JobQueued"
    JOB_STARTED = "JobStarted"
    JOB_ENDED = "JobEnded"
    JOB_KILLED_WALLTIME = "JobKilledWalltime"
    JOB_CANCELED = "JobCanceled"
    SCHEDULER_CYCLE = "SchedulerCycle"


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: SimEventKind
    job_id: str

    def to_json(self) -> str:
        return json.dumps({"time": self.time, "kind": self.kind.value, "job_id": self.job_id}, separators=(",", ":"))


@dataclass(frozen=True)
class BackgroundJob:
    arrival_time: float
    nodes: int
    duration: float


@dataclass(frozen=True)
class SimConfig:
    descriptor: DcrDescriptor
    seed: int = 0
    background_jobs: tuple[BackgroundJob, ...] = ()
    job_dispatch_overhead: float = 0.0
    backfill: bool = False

    def __post_init__(self):
        if self.descriptor.middleware is not Middleware.BATCH_SIM:
            raise ConfigError("simulator needs a BatchSim descriptor", field="descriptor.middleware")
        jobs = tuple(b if isinstance(b, BackgroundJob) else BackgroundJob(*b) for b in self.background_jobs)
        for b in jobs:
            if not 1 <= b.nodes <= self.descriptor.nodes:
                raise ConfigError(
                    f"background job of {b.nodes} nodes does not fit {self.descriptor.nodes}-node DCR",
                    field="background_jobs",
                )
            if b.duration <= 0 or b.arrival_time < 0:
                raise ConfigError("background jobs need arrival >= 0 and duration > 0", field="background_jobs")
        object.__setattr__(self, "background_jobs", jobs)
        if self.job_dispatch_overhead < 0:
            raise ConfigError("must be >= 0", field="job_dispatch_overhead")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path: str | None = None) -> SimConfig:
        allowed = {"descriptor", "seed", "background_jobs", "background_random", "job_dispatch_overhead", "backfill"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ConfigError("unknown field in simulator config", path=path, field=unknown[0])
        if "descriptor" not in doc:
            raise ConfigError("required field is missing", path=path, field="descriptor")
        descriptor = DcrDescriptor.from_dict(doc["descriptor"], path=path)
        seed = doc.get("seed", 0)
        background = [tuple(b) for b in doc.get("background_jobs", [])]
        if "background_random" in doc:
            background.extend(synthesize_background(seed, nodes=descriptor.nodes, **doc["background_random"]))
        try:
            return cls(
                descriptor=descriptor,
                seed=seed,
                background_jobs=tuple(background),
                job_dispatch_overhead=doc.get("job_dispatch_overhead", 0.0),
                backfill=doc.get("backfill", False),
            )
        except (TypeError, ConfigError) as exc:
            raise ConfigError(getattr(exc, "message", str(exc)), path=path, field=getattr(exc, "field", None)) from None


def synthesize_background(
    seed: int, *, count: int, horizon: float, max_nodes: int, max_duration: float, nodes: int | None = None
) -> list[BackgroundJob]:
    """Seeded multi-tenant load: ``count`` jobs arriving uniformly over ``horizon``."""
    rng = random.Random(seed)
    cap = min(max_nodes, nodes) if nodes else max_nodes
    jobs = [
        BackgroundJob(
            arrival_time=round(rng.uniform(0, horizon), 3),
            nodes=rng.randint(1, cap),
            duration=round(rng.uniform(1.0, max_duration), 3),
        )
        for _ in range(count)
    ]
    return sorted(jobs, key=lambda b: b.arrival_time)


@dataclass
class _Run:
    end_time: float
    killed: bool
    allocation: list[tuple[int, int]] = field(default_factory=list)


class BatchSim:
    def __init__(self, config: SimConfig):
        self.config = config
        self.descriptor = config.descriptor
        self.cycle = float(self.descriptor.scheduler_cycle)
        self.now = 0.0
        self.jobs: dict[str, JobRecord] = {}
        self.events: list[SimEvent] = []
        self.listeners: list[Callable[[SimEvent], None]] = []
        self._free = [self.descriptor.cores_per_node] * self.descriptor.nodes
        self._queue: list[str] = []
        self._arrivals: list[tuple[float, int, str]] = []
        self._ends: list[tuple[float, int, str]] = []
        self._running: dict[str, _Run] = {}
        self._duration: dict[str, float | None] = {}
        self._background: set[str] = set()
        self._seq = 0
        self._cycles_done = 0
        self._counter = 0
        for i, b in enumerate(config.background_jobs):
            job_id = f"{self.descriptor.dcr_id}.bg{i:04d}"
            self.jobs[job_id] = JobRecord(
                job_id=job_id,
                dcr_id=self.descriptor.dcr_id,
                payload=None,
                requested_nodes=b.nodes,
                requested_cores=self.descriptor.cores_per_node,
                walltime=b.duration,
            )
            self._duration[job_id] = b.duration
            self._background.add(job_id)
            self._push(self._arrivals, b.arrival_time, job_id)

    # -- plumbing ---------------------------------------------------------

    def _push(self, heap: list, time: float, job_id: str) -> None:
        self._seq += 1
        heapq.heappush(heap, (time, self._seq, job_id))

    def _emit(self, time: float, kind: SimEventKind, job_id: str) -> SimEvent:
        event = SimEvent(time, kind, job_id)
        self.events.append(event)
        for listener in self.listeners:
            listener(event)
        return event

    def _pending_user_jobs(self) -> int:
        queued = sum(1 for j in self._queue if j not in self._background)
        arriving = sum(1 for _, _, j in self._arrivals if j not in self._background)
        return queued + arriving

    # -- commands ---------------------------------------------------------

    def submit_job(
        self,
        payload: PilotSpec | TaskSpec,
        at: float | None = None,
        *,
        walltime: float | None = None,
        duration: float | None = None,
    ) -> str:
        """Queue a job wrapping ``payload``.

        Pilot jobs run open-ended (until :meth:`complete_job` or walltime);
        task jobs run for the task's estimated duration plus the configured
        dispatch overhead.
        """
        at = self.now if at is None else float(at)
        if at < self.now:
            raise ValueError(f"cannot submit in the past ({at} < {self.now})")
        d = self.descriptor
        if isinstance(payload, PilotSpec):
            nodes, cores = payload.nodes, payload.cores_per_node
            walltime = payload.walltime if walltime is None else walltime
        elif isinstance(payload, TaskSpec):
            nodes, cores = 1, payload.cores
            walltime = d.max_job_walltime if walltime is None else walltime
            if duration is None:
                duration = payload.estimated_duration + self.config.job_dispatch_overhead
        else:
            raise TypeError(f"unsupported payload {type(payload).__name__}")
        if nodes > d.nodes or cores > d.cores_per_node:
            raise OversizedJob(f"job asks {nodes} node(s) x {cores} core(s); DCR has {d.nodes} x {d.cores_per_node}")
        if walltime > d.max_job_walltime:
            raise WalltimeExceedsLimit(f"walltime {walltime}s exceeds DCR limit {d.max_job_walltime}s")
        if self._pending_user_jobs() >= d.max_concurrent_jobs:
            raise QueueFull(f"{d.dcr_id} already holds {d.max_concurrent_jobs} queued jobs")

        self._counter += 1
        job_id = f"{d.dcr_id}.job{self._counter:05d}"
        self.jobs[job_id] = JobRecord(
            job_id=job_id,
            dcr_id=d.dcr_id,
            payload=payload,
            requested_nodes=nodes,
            requested_cores=cores,
            walltime=float(walltime),
        )
        self._duration[job_id] = duration
        if at == self.now:
            self._enqueue(job_id, at)
        else:
            self._push(self._arrivals, at, job_id)
        return job_id

    def query_job(self, job_id: str) -> JobRecord:
        try:
            return self.jobs[job_id].copy()
        except KeyError:
            raise UnknownJob(job_id) from None

    def cancel_job(self, job_id: str) -> None:
        job = self._job(job_id)
        if job.status.terminal:
            raise AlreadyTerminal(f"{job_id} is {job.status.value}")
        if job.status is JobStatus.QUEUED:
            if job_id in self._queue:
                self._queue.remove(job_id)
            else:
                self._arrivals = [a for a in self._arrivals if a[2] != job_id]
                heapq.heapify(self._arrivals)
            if job.submit_time is None:
                job.submit_time = self.now
        else:
            self._release(job_id)
            job.end_time = self.now
        job.status = JobStatus.CANCELED
        self._emit(self.now, SimEventKind.JOB_CANCELED, job_id)

    def complete_job(self, job_id: str) -> None:
        """The payload exited on its own at the current time."""
        job = self._job(job_id)
        if job.status.terminal:
            raise AlreadyTerminal(f"{job_id} is {job.status.value}")
        if job.status is not JobStatus.RUNNING:
            raise PilotkitError(f"{job_id} has not started")
        self._release(job_id)
        job.end_time = self.now
        job.status = JobStatus.COMPLETED
        self._emit(self.now, SimEventKind.JOB_ENDED, job_id)

    def _job(self, job_id: str) -> JobRecord:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(job_id) from None

    # -- time -------------------------------------------------------------

    def step(self, until: float) -> list[SimEvent]:
        if until < self.now:
            raise ValueError(f"cannot step backwards ({until} < {self.now})")
        mark = len(self.events)
        while True:
            t = self.next_event_time()
            if t is None or t > until:
                break
            self.now = t
            self._process_ends(t)
            self._process_arrivals(t)
            k = self._cycle_index(t)
            if k is not None and self._queue:
                self._run_cycle(t, k)
        self.now = float(until)
        return self.events[mark:]

    def next_event_time(self) -> float | None:
        candidates = []
        if self._ends:
            candidates.append(self._ends[0][0])
        if self._arrivals:
            candidates.append(self._arrivals[0][0])
        cycle = self._next_cycle_time()
        if cycle is not None:
            candidates.append(cycle)
        return min(candidates) if candidates else None

    def _cycle_index(self, t: float) -> int | None:
        k = round(t / self.cycle)
        if k >= 1 and k > self._cycles_done and k * self.cycle == t:
            return k
        return None

    def _next_cycle_time(self) -> float | None:
        if not self._queue:
            return None
        earliest_submit = min(self.jobs[j].submit_time for j in self._queue)
        k = max(self._cycles_done + 1, math.ceil(self.now / self.cycle), math.floor(earliest_submit / self.cycle) + 1, 1)
        if not self._startable():
            # nothing can start until resources free up; skip idle cycles
            if not self._ends:
                return None
            change = self._ends[0][0]
            k = max(k, math.ceil(change / self.cycle))
        return k * self.cycle

    def _startable(self) -> bool:
        for job_id in self._queue:
            job = self.jobs[job_id]
            if self._fit(job) is not None:
                return True
            if not self.config.backfill:
                return False
        return False

    def _fit(self, job: JobRecord) -> list[int] | None:
        picked = [i for i, free in enumerate(self._free) if free >= job.requested_cores]
        if len(picked) < job.requested_nodes:
            return None
        return picked[: job.requested_nodes]

    def _enqueue(self, job_id: str, t: float) -> None:
        job = self.jobs[job_id]
        job.submit_time = t
        self._queue.append(job_id)
        self._emit(t, SimEventKind.JOB_QUEUED, job_id)

    def _process_arrivals(self, t: float) -> None:
        while self._arrivals and self._arrivals[0][0] <= t:
            _, _, job_id = heapq.heappop(self._arrivals)
            self._enqueue(job_id, t)

    def _process_ends(self, t: float) -> None:
        while self._ends and self._ends[0][0] <= t:
            _, _, job_id = heapq.heappop(self._ends)
            run = self._running[job_id]
            job = self.jobs[job_id]
            self._release(job_id)
            job.end_time = t
            if run.killed:
                job.status = JobStatus.KILLED
                self._emit(t, SimEventKind.JOB_KILLED_WALLTIME, job_id)
            else:
                job.status = JobStatus.COMPLETED
                self._emit(t, SimEventKind.JOB_ENDED, job_id)

    def _run_cycle(self, t: float, k: int) -> None:
        self._cycles_done = k
        self._emit(t, SimEventKind.SCHEDULER_CYCLE, self.descriptor.dcr_id)
        for job_id in list(self._queue):
            job = self.jobs[job_id]
            if job.submit_time >= t:
                break
            nodes = self._fit(job)
            if nodes is None:
                if self.config.backfill:
                    continue
                break
            self._start(job_id, t, nodes)

    def _start(self, job_id: str, t: float, nodes: list[int]) -> None:
        job = self.jobs[job_id]
        self._queue.remove(job_id)
        for n in nodes:
            self._free[n] -= job.requested_cores
        duration = self._duration[job_id]
        if duration is not None and duration <= job.walltime:
            run = _Run(end_time=t + duration, killed=False)
        else:
            run = _Run(end_time=t + job.walltime, killed=True)
        run.allocation = [(n, job.requested_cores) for n in nodes]
        self._running[job_id] = run
        self._push(self._ends, run.end_time, job_id)
        job.start_time = t
        job.status = JobStatus.RUNNING
        self._emit(t, SimEventKind.JOB_STARTED, job_id)

    def _release(self, job_id: str) -> None:
        run = self._running.pop(job_id)
        for n, cores in run.allocation:
            self._free[n] += cores
        self._ends = [e for e in self._ends if e[2] != job_id]
        heapq.heapify(self._ends)

    # -- inspection -------------------------------------------------------

    def busy_nodes(self) -> int:
        return sum(1 for free in self._free if free < self.descriptor.cores_per_node)

    def running_jobs(self) -> list[JobRecord]:
        return [self.jobs[j] for j in self._running]

    def queued_jobs(self) -> list[JobRecord]:
        return [self.jobs[j] for j in self._queue]

    def dumps_events(self, events: Iterable[SimEvent] | None = None) -> str:
        return "".join(e.to_json() + "\n" for e in (self.events if events is None else events))
