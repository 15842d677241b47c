"""Deterministic end-to-end runtime on the simulation clock.

One or more :class:`BatchSim` DCRs, the co-located managers and one
:class:`SimAgent` per started pilot job.  Agents talk to the manager over an
:class:`InMemoryChannel`, so every message goes through the wire codec.

At each instant work is processed in a fixed order: DCR events, agent task
completions, drain deadlines, manager timeouts, then task requests from
agents sorted by pilot id.  Idle agents park after a ``NoWork`` reply and are
woken only when the workload manager reports new dispatchable work.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

from .agent import KILLED_EXIT, SlotTable
from .dcrsim import BatchSim, SimConfig, SimEvent, SimEventKind
from .errors import AssignOverCapacity
from .events import EventLog
from .manager import Manager
from .model import PilotSpec, TaskSpec, TaskStatus, ValidatedWorkload, WorkloadSpec, validate_workload
from .pilots import ProvisioningPolicy
from .protocol import InMemoryChannel, Message, make
from .workload import SchedulingPolicy

log = logging.getLogger(__name__)

_JOB_TRANSITIONS = {
    SimEventKind.JOB_QUEUED: "Queued",
    SimEventKind.JOB_STARTED: "Started",
    SimEventKind.JOB_ENDED: "Completed",
    SimEventKind.JOB_KILLED_WALLTIME: "Killed",
    SimEventKind.JOB_CANCELED: "Canceled",
}


@dataclass(frozen=True)
class SimSettings:
    # agents stop pulling and kill stragglers this long before walltime
    drain_margin: float = 1.0
    # seconds between a task's assignment and its process start
    dispatch_overhead: float = 0.0
    # seconds from job start to agent registration; None means never registers
    bootstrap_delay: float | None = 0.0
    bootstrap_delays: Mapping[str, float | None] = field(default_factory=dict)
    bootstrap_timeout: float | None = None
    # task_id -> number of leading attempts that exit non-zero
    task_failures: Mapping[str, int] = field(default_factory=dict)
    release_when_idle: bool = True
    horizon: float = 1e9


class SimAgent:
    """A pilot's Task Manager on the simulation clock."""

    def __init__(
        self,
        pilot_id: str,
        cores: int,
        walltime: float,
        started_at: float,
        channel: InMemoryChannel,
        settings: SimSettings,
        register_at: float | None,
    ):
        self.pilot_id = pilot_id
        self.slots = SlotTable(cores)
        self.walltime_end = started_at + walltime
        self.channel = channel
        self.settings = settings
        self.register_at = register_at
        self.state = "Bootstrapping"
        self.drain_deadline: float | None = None
        self.running: dict[str, tuple[float, float]] = {}  # task_id -> (start, end)
        self.attempts: dict[str, int] = {}
        self.parked_at: int | None = None
        self.trace: list[tuple[float, str]] = []

    @property
    def drain_at(self) -> float:
        return self.walltime_end - self.settings.drain_margin

    def send(self, msg: Message, now: float) -> None:
        self.trace.append((now, msg.type))
        self.channel.agent_send(msg)

    def next_time(self) -> float | None:
        times = [end for _, end in self.running.values()]
        if self.state == "Bootstrapping" and self.register_at is not None:
            times.append(self.register_at)
        if self.state == "Running":
            times.append(self.drain_at)
        if self.state == "Draining" and self.running and self.drain_deadline is not None:
            times.append(self.drain_deadline)
        return min(times) if times else None

    def begin_drain(self, now: float, deadline: float) -> None:
        if self.state in ("Draining", "Exited"):
            self.drain_deadline = min(self.drain_deadline, deadline)
            return
        self.state = "Draining"
        self.drain_deadline = deadline
        self.trace.append((now, "Draining"))

    def receive(self, msg: Message, now: float) -> None:
        """Handle an unsolicited message pushed by the manager."""
        if msg.type == "Shutdown":
            reason = msg.body.get("reason")
            self.begin_drain(now, now if reason == "Canceled" else self.drain_at)

    def finish_tasks(self, now: float) -> bool:
        """Report every task that ended by ``now``; kills stragglers past the drain deadline."""
        done = sorted((end, tid) for tid, (_, end) in self.running.items() if end <= now)
        killed = []
        if self.state == "Draining" and self.drain_deadline is not None and self.drain_deadline <= now:
            killed = sorted(tid for tid, (_, end) in self.running.items() if end > now)
        for end, tid in done:
            start, _ = self.running.pop(tid)
            self.slots.release(tid)
            failing = self.settings.task_failures.get(tid, 0) >= self.attempts[tid]
            code = 1 if failing else 0
            self.send(make("Result", task_id=tid, exit_code=code, start=start, end=end,
                           pilot_id=self.pilot_id, reason="NonZeroExit" if failing else None), now)
        for tid in killed:
            start, _ = self.running.pop(tid)
            self.slots.release(tid)
            self.send(make("Result", task_id=tid, exit_code=KILLED_EXIT, start=min(start, now), end=now,
                           pilot_id=self.pilot_id, reason="WalltimeKill"), now)
        return bool(done or killed)

    def accept(self, msg: Message, now: float) -> None:
        task: TaskSpec = msg.task
        try:
            self.slots.reserve(task.task_id, task.cores)
        except AssignOverCapacity:
            self.send(make("Reject", task_id=task.task_id, reason="AssignOverCapacity", pilot_id=self.pilot_id), now)
            return
        start = now + self.settings.dispatch_overhead
        if start + task.estimated_duration > self.drain_at:
            self.slots.release(task.task_id)
            self.send(make("Reject", task_id=task.task_id, reason="InsufficientWalltime", pilot_id=self.pilot_id), now)
            return
        self.attempts[task.task_id] = int(msg.body.get("attempt", 1))
        self.running[task.task_id] = (start, start + task.estimated_duration)


class SimRuntime:
    def __init__(
        self,
        configs: SimConfig | Iterable[SimConfig],
        *,
        provisioning: ProvisioningPolicy | None = None,
        scheduling: SchedulingPolicy | None = None,
        max_attempts: int = 1,
        rebind_on_pilot_loss: bool = False,
        settings: SimSettings | None = None,
        log_path: str | None = None,
    ):
        configs = [configs] if isinstance(configs, SimConfig) else list(configs)
        self.settings = settings or SimSettings()
        self.events = EventLog(log_path)
        self.dcrs: dict[str, BatchSim] = {}
        for cfg in configs:
            sim = BatchSim(cfg)
            sim.listeners.append(self._on_sim_event)
            self.dcrs[cfg.descriptor.dcr_id] = sim
        timeout = self.settings.bootstrap_timeout
        if timeout is None:
            timeout = 2 * max(s.cycle for s in self.dcrs.values())
        self.manager = Manager(
            self.dcrs, self.events,
            provisioning=provisioning,
            scheduling=scheduling,
            max_attempts=max_attempts,
            rebind_on_pilot_loss=rebind_on_pilot_loss,
            bootstrap_timeout=timeout,
        )
        self.now = 0.0
        self.agents: dict[str, SimAgent] = {}
        self.channels: dict[str, InMemoryChannel] = {}
        self.direct: dict[str, str] = {}  # task_id -> dcr_id for direct workloads
        self.direct_jobs: dict[str, str] = {}  # job_id -> task_id
        self._actions: list[tuple[float, int, Callable[[float], None]]] = []
        self._seq = 0

    @property
    def workloads(self):
        return self.manager.workloads

    @property
    def pilots(self):
        return self.manager.pilots

    # -- commands ---------------------------------------------------------

    def at(self, time: float, action: Callable[[float], None]) -> None:
        """Schedule ``action(now)`` at simulation time ``time``."""
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        self._seq += 1
        heapq.heappush(self._actions, (time, self._seq, action))

    def submit_pilot(self, spec: PilotSpec) -> str:
        return self.manager.submit_pilot(spec, self.now)

    def submit_workload(self, workload: WorkloadSpec | ValidatedWorkload) -> str:
        return self.manager.submit_workload(workload, self.now)

    def submit_direct(self, workload: WorkloadSpec | ValidatedWorkload, dcr_id: str | None = None) -> str:
        """Run every task as its own DCR job, no pilots involved."""
        w = workload if isinstance(workload, ValidatedWorkload) else validate_workload(workload)
        dcr_id = dcr_id or sorted(self.dcrs)[0]
        for tid in w.order:
            self.direct[tid] = dcr_id
        return self.workloads.submit_workload(w, self.now)

    def cancel(self, entity_id: str) -> str:
        return self.manager.cancel(entity_id, self.now)

    # -- DCR events -------------------------------------------------------

    def _on_sim_event(self, ev: SimEvent) -> None:
        transition = _JOB_TRANSITIONS.get(ev.kind)
        if transition is None:
            return
        job = self.dcrs[ev.job_id.rsplit(".", 1)[0]].jobs[ev.job_id]
        attrs = {"dcr_id": job.dcr_id}
        if ev.kind is SimEventKind.JOB_QUEUED:
            attrs.update(payload_kind=job.payload_kind, payload_id=job.payload_id,
                         nodes=job.requested_nodes, cores=job.requested_cores, walltime=job.walltime)
        self.events.append(ev.time, "Job", ev.job_id, transition, **attrs)

        if ev.job_id in self.direct_jobs:
            self._on_direct_job(ev)
            return
        pilot_id = self.pilots.by_job.get(ev.job_id)
        if pilot_id is None:
            return
        self.manager.on_job_event(ev.kind, ev.job_id, ev.time)
        if ev.kind is SimEventKind.JOB_STARTED:
            self._start_agent(pilot_id, ev.time)
        elif ev.kind in (SimEventKind.JOB_KILLED_WALLTIME, SimEventKind.JOB_CANCELED, SimEventKind.JOB_ENDED):
            agent = self.agents.get(pilot_id)
            if agent is not None:
                agent.state = "Exited"

    def _start_agent(self, pilot_id: str, now: float) -> None:
        rec = self.pilots.get(pilot_id)
        delay = self.settings.bootstrap_delays.get(pilot_id, self.settings.bootstrap_delay)
        channel = InMemoryChannel()
        self.channels[pilot_id] = channel
        self.agents[pilot_id] = SimAgent(
            pilot_id, rec.spec.total_cores, rec.spec.walltime, now, channel, self.settings,
            None if delay is None else now + delay,
        )

    def _on_direct_job(self, ev: SimEvent) -> None:
        tid = self.direct_jobs[ev.job_id]
        e = self.workloads.tasks[tid]
        if ev.kind is SimEventKind.JOB_STARTED:
            if e.status is TaskStatus.DISPATCHED:
                self.workloads.mark_running(tid, ev.time)
        elif ev.kind in (SimEventKind.JOB_ENDED, SimEventKind.JOB_KILLED_WALLTIME):
            if e.status.terminal:
                return
            job = self.dcrs[self.direct[tid]].jobs[ev.job_id]
            if ev.kind is SimEventKind.JOB_ENDED:
                failing = self.settings.task_failures.get(tid, 0) >= e.state.attempt
                code, reason = (1, "NonZeroExit") if failing else (0, None)
            else:
                code, reason = KILLED_EXIT, "WalltimeKill"
            self.workloads.record_result(tid, code, job.start_time, ev.time, ev.time, reason=reason)

    def _submit_direct_jobs(self) -> bool:
        ready = [
            e for e in self.workloads.tasks.values()
            if e.task_id in self.direct and e.status is TaskStatus.READY
        ]
        ready.sort(key=lambda e: (e.ready_at, e.task_id))
        for e in ready:
            sim = self.dcrs[self.direct[e.task_id]]
            job_id = sim.submit_job(e.spec, at=self.now)
            self.direct_jobs[job_id] = e.task_id
            self.workloads.dispatch_direct(e.task_id, job_id, self.now)
        return bool(ready)

    # -- agent <-> manager ------------------------------------------------

    def _pump(self, pilot_id: str) -> None:
        """Deliver agent frames to the manager and manager replies back to the agent."""
        channel = self.channels[pilot_id]
        agent = self.agents[pilot_id]
        while (msg := channel.manager_recv()) is not None:
            for reply in self.manager.handle(msg, self.now, send=channel.manager_send):
                channel.manager_send(reply)
        while (msg := channel.agent_recv()) is not None:
            if msg.type == "Ack":
                if agent.state == "Bootstrapping":
                    agent.state = "Running"
            elif msg.type == "Assign":
                agent.accept(msg, self.now)
                self._pump(pilot_id)
            elif msg.type == "NoWork":
                agent.parked_at = self.workloads.version
            elif msg.type == "Shutdown":
                if agent.state == "Bootstrapping":
                    agent.state = "Exited"
                    self._exit(agent)
                else:
                    agent.receive(msg, self.now)

    def _exit(self, agent: SimAgent) -> None:
        rec = self.pilots.get(agent.pilot_id)
        job = self.dcrs[rec.spec.target_dcr].jobs[rec.job_id]
        if not job.status.terminal:
            self.dcrs[rec.spec.target_dcr].complete_job(rec.job_id)

    def _agent_step(self, agent: SimAgent) -> bool:
        """Everything one agent does at the current instant except pulling."""
        now = self.now
        acted = False
        if agent.state == "Exited":
            return False
        if agent.state == "Bootstrapping" and agent.register_at is not None and agent.register_at <= now:
            agent.register_at = None
            remaining = agent.walltime_end - now
            agent.send(make("Register", pilot_id=agent.pilot_id, cores=agent.slots.total_cores,
                            walltime_remaining=remaining), now)
            self._pump(agent.pilot_id)
            acted = True
        if agent.state == "Exited":
            return True
        if agent.finish_tasks(now):
            acted = True
        if agent.state == "Running" and agent.drain_at <= now:
            agent.begin_drain(now, agent.drain_at)
            acted = True
        if agent.state == "Draining":
            if agent.finish_tasks(now):
                acted = True
            if not agent.running:
                agent.send(make("Heartbeat", pilot_id=agent.pilot_id, state="Draining",
                                free_cores=agent.slots.free), now)
                self._pump(agent.pilot_id)
                agent.state = "Exited"
                self._exit(agent)
                return True
        self._pump(agent.pilot_id)
        return acted

    def _pull(self, agent: SimAgent) -> bool:
        if agent.state != "Running" or agent.slots.free == 0:
            return False
        if agent.parked_at is not None and agent.parked_at == self.workloads.version:
            return False
        agent.parked_at = None
        acted = False
        while agent.state == "Running" and agent.slots.free > 0 and agent.parked_at is None:
            before = len(agent.running)
            agent.send(make("TaskRequest", pilot_id=agent.pilot_id, free_cores=agent.slots.free), self.now)
            self._pump(agent.pilot_id)
            acted = True
            if len(agent.running) == before and agent.parked_at is None and agent.state == "Running":
                # rejected assignment; the manager will not re-offer it here
                continue
        return acted

    def _maybe_release(self) -> None:
        if not self.settings.release_when_idle or self._actions:
            return
        if self.workloads.workloads and self.workloads.all_complete():
            self.manager.release_idle_pilots(self.now)

    def _settle(self) -> None:
        while True:
            acted = False
            for pilot_id in sorted(self.agents):
                acted |= self._agent_step(self.agents[pilot_id])
            self.manager.tick(self.now)
            acted |= self._submit_direct_jobs()
            for pilot_id in sorted(self.agents):
                acted |= self._pull(self.agents[pilot_id])
            self._maybe_release()
            for pilot_id in sorted(self.agents):
                self._pump(pilot_id)
            if not acted:
                break

    # -- clock ------------------------------------------------------------

    def next_time(self) -> float | None:
        times = [t for t in (s.next_event_time() for s in self.dcrs.values()) if t is not None]
        times += [t for t in (a.next_time() for a in self.agents.values() if a.state != "Exited") if t is not None]
        deadline = self.pilots.next_deadline()
        if deadline is not None:
            times.append(deadline)
        if self._actions:
            times.append(self._actions[0][0])
        return min(times) if times else None

    def advance(self, t: float) -> None:
        if t < self.now:
            raise ValueError(f"time went backwards: {t} < {self.now}")
        self.now = t
        for dcr_id in sorted(self.dcrs):
            self.dcrs[dcr_id].step(t)
        while self._actions and self._actions[0][0] <= t:
            _, _, action = heapq.heappop(self._actions)
            action(t)

    def run(self, until: float | None = None) -> float:
        """Run until nothing is left to happen; returns the final clock."""
        horizon = self.settings.horizon if until is None else until
        self._settle()
        while True:
            t = self.next_time()
            if t is None or t > horizon:
                break
            self.advance(max(t, self.now))
            self._settle()
        return self.now

    def check_invariants(self) -> None:
        self.manager.check_overlay()
        for pilot_id, agent in self.agents.items():
            if agent.state == "Exited" or self.pilots.get(pilot_id).status.terminal:
                continue
            assert agent.slots.held == self.workloads.held_by(pilot_id), pilot_id
