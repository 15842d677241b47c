"""Run pilots as agent subprocesses on the local host."""

from __future__ import annotations

import logging
import os
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import DuplicatePilot, QueueFull, SpawnFailure, UnknownHandle, UnknownJob
from .model import DcrDescriptor, JobRecord, JobStatus, Middleware, PilotSpec

log = logging.getLogger(__name__)

DEFAULT_GRACE = 5.0


@dataclass(frozen=True)
class ProcessStatus:
    state: str  # "Running" or "Exited"
    exit_code: int | None = None

    @property
    def running(self) -> bool:
        return self.state == "Running"


RUNNING = ProcessStatus("Running")


@dataclass
class ProcessHandle:
    pilot_id: str
    os_pid: int
    launch_time: float
    configured_cores: int
    process: subprocess.Popen = field(repr=False, compare=False, default=None)
    kill_at: float | None = field(default=None, compare=False)


def default_agent_command() -> list[str]:
    return [sys.executable, "-m", "pilotkit.agent"]


class ProcessTable:
    """One agent subprocess per pilot id, safe to poll from any thread."""

    def __init__(self, agent_command: Sequence[str] | None = None, workdir: str | Path | None = None):
        self.agent_command = list(agent_command or default_agent_command())
        self.workdir = Path(workdir) if workdir else Path.cwd() / "pilotkit-run"
        self._handles: dict[str, ProcessHandle] = {}
        self._lock = threading.Lock()

    def launch_pilot_process(self, spec: PilotSpec, connect_addr: str) -> ProcessHandle:
        with self._lock:
            if spec.pilot_id in self._handles:
                raise DuplicatePilot(spec.pilot_id)
            pilot_dir = self.workdir / spec.pilot_id
            pilot_dir.mkdir(parents=True, exist_ok=True)
            env = dict(os.environ)
            env.update(
                PILOTKIT_PILOT_ID=spec.pilot_id,
                PILOTKIT_CORES=str(spec.total_cores),
                PILOTKIT_WALLTIME_S=str(spec.walltime),
                PILOTKIT_MANAGER_ADDR=connect_addr,
                PILOTKIT_WORKDIR=str(pilot_dir / "tasks"),
            )
            try:
                with (pilot_dir / "agent.log").open("ab") as out:
                    proc = subprocess.Popen(
                        self.agent_command, env=env, cwd=pilot_dir,
                        stdin=subprocess.DEVNULL, stdout=out, stderr=subprocess.STDOUT,
                        start_new_session=True,
                    )
            except OSError as exc:
                raise SpawnFailure(f"cannot start agent for {spec.pilot_id}: {exc}") from None
            handle = ProcessHandle(spec.pilot_id, proc.pid, time.monotonic(), spec.total_cores, proc)
            self._handles[spec.pilot_id] = handle
            return handle

    def _get(self, handle: ProcessHandle | str) -> ProcessHandle:
        pilot_id = handle if isinstance(handle, str) else handle.pilot_id
        try:
            return self._handles[pilot_id]
        except KeyError:
            raise UnknownHandle(pilot_id) from None

    def poll(self, handle: ProcessHandle | str) -> ProcessStatus:
        """Non-blocking status; also escalates a pending terminate past its grace period."""
        with self._lock:
            h = self._get(handle)
            code = h.process.poll()
            if code is None and h.kill_at is not None and time.monotonic() >= h.kill_at:
                log.warning("agent %s ignored SIGTERM, killing", h.pilot_id)
                self._kill(h)
                code = h.process.wait()
        return RUNNING if code is None else ProcessStatus("Exited", code)

    def terminate(self, handle: ProcessHandle | str, grace: float = DEFAULT_GRACE, wait: bool = True) -> bool:
        """SIGTERM, then SIGKILL after ``grace`` seconds.

        With ``wait=False`` the escalation happens on a later :meth:`poll`.
        Terminating an exited process is a no-op; always returns True.
        """
        with self._lock:
            h = self._get(handle)
            if h.process.poll() is not None:
                return True
            if h.kill_at is None:
                h.kill_at = time.monotonic() + grace
                try:
                    h.process.send_signal(signal.SIGTERM)
                except ProcessLookupError:
                    return True
        if wait:
            try:
                h.process.wait(timeout=max(0.0, h.kill_at - time.monotonic()))
            except subprocess.TimeoutExpired:
                with self._lock:
                    self._kill(h)
                h.process.wait()
        return True

    def _kill(self, h: ProcessHandle) -> None:
        try:
            os.killpg(h.process.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass

    def handles(self) -> list[ProcessHandle]:
        with self._lock:
            return list(self._handles.values())

    def terminate_all(self, grace: float = DEFAULT_GRACE) -> None:
        for h in self.handles():
            self.terminate(h, grace=grace, wait=False)
        deadline = time.monotonic() + grace + 1.0
        for h in self.handles():
            while self.poll(h).running and time.monotonic() < deadline:
                time.sleep(0.05)


class LocalExecBackend:
    """DCR backend whose jobs are local agent processes.

    Jobs start immediately; there is no queue.  The backend also enforces the
    walltime as a backstop in case an agent fails to drain on its own.
    """

    def __init__(
        self,
        descriptor: DcrDescriptor,
        manager_addr: str,
        *,
        processes: ProcessTable | None = None,
        clock: Callable[[], float] = time.monotonic,
        grace: float = DEFAULT_GRACE,
    ):
        if descriptor.middleware is not Middleware.LOCAL_EXEC:
            raise ValueError(f"{descriptor.dcr_id} is not a LocalExec DCR")
        self.descriptor = descriptor
        self.manager_addr = manager_addr
        self.processes = processes or ProcessTable()
        self.clock = clock
        self.grace = grace
        self.jobs: dict[str, JobRecord] = {}
        self._pending: list[tuple[str, JobStatus]] = []
        self._counter = 0

    def submit_job(self, payload: PilotSpec, at: float | None = None) -> str:
        if not isinstance(payload, PilotSpec):
            raise TypeError("local execution only runs pilot jobs")
        live = sum(1 for j in self.jobs.values() if not j.status.terminal)
        if live >= self.descriptor.max_concurrent_jobs:
            raise QueueFull(f"{self.descriptor.dcr_id} already runs {live} agents")
        handle = self.processes.launch_pilot_process(payload, self.manager_addr)
        self._counter += 1
        job_id = f"{self.descriptor.dcr_id}.proc{self._counter:05d}"
        now = self.clock()
        self.jobs[job_id] = JobRecord(
            job_id=job_id,
            dcr_id=self.descriptor.dcr_id,
            payload=payload,
            requested_nodes=payload.nodes,
            requested_cores=payload.cores_per_node,
            walltime=payload.walltime,
            submit_time=now,
            start_time=now,
            status=JobStatus.RUNNING,
        )
        log.info("launched agent for %s as pid %d", payload.pilot_id, handle.os_pid)
        self._pending.append((job_id, JobStatus.RUNNING))
        return job_id

    def _job(self, job_id: str) -> JobRecord:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(job_id) from None

    def query_job(self, job_id: str) -> JobRecord:
        return self._job(job_id).copy()

    def cancel_job(self, job_id: str) -> None:
        job = self._job(job_id)
        if job.status.terminal:
            return
        self.processes.terminate(job.payload.pilot_id, grace=self.grace, wait=False)
        job.status = JobStatus.CANCELED

    def poll_events(self) -> list[tuple[str, JobStatus]]:
        """Job status changes since the previous call."""
        events, self._pending = self._pending, []
        now = self.clock()
        for job_id, job in self.jobs.items():
            if job.end_time is not None:
                continue
            status = self.processes.poll(job.payload.pilot_id)
            if status.running:
                if job.status is JobStatus.RUNNING and now > job.start_time + job.walltime + self.grace:
                    log.warning("agent %s overran its walltime", job.payload.pilot_id)
                    self.processes.terminate(job.payload.pilot_id, grace=self.grace, wait=False)
                    job.status = JobStatus.KILLED
                continue
            job.end_time = now
            if job.status is JobStatus.RUNNING:
                job.status = JobStatus.COMPLETED if status.exit_code == 0 else JobStatus.FAILED
            events.append((job_id, job.status))
        return events

    def live_jobs(self) -> list[JobRecord]:
        return [j for j in self.jobs.values() if j.end_time is None]
