"""Task Manager that runs inside a pilot.

Run as ``python -m pilotkit.agent``; configuration comes from the
environment (``PILOTKIT_PILOT_ID``, ``PILOTKIT_CORES``, ``PILOTKIT_WALLTIME_S``,
``PILOTKIT_MANAGER_ADDR``).  Exit codes: 0 after a clean drain, 1 when the
manager is unreachable or the connection drops, 2 on a usage error.

Timestamps reported in results are host ``CLOCK_MONOTONIC`` seconds; the
manager maps them onto its own clock.
"""

from __future__ import annotations

import asyncio
import logging
import os
import shlex
import signal
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import AssignOverCapacity, ConnectFailure
from .model import TaskSpec
from .protocol import Message, make, read_message, write_message

log = logging.getLogger("pilotkit.agent")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SPAWN_FAILURE_EXIT = 127
KILLED_EXIT = -9


class UsageError(Exception):
    pass


class SlotTable:
    """Core bookkeeping for one pilot; cores are logical slots, not pinned CPUs."""

    def __init__(self, total_cores: int):
        if total_cores < 1:
            raise ValueError("total_cores must be >= 1")
        self.total_cores = total_cores
        self.entries: dict[str, int] = {}

    @property
    def held(self) -> int:
        return sum(self.entries.values())

    @property
    def free(self) -> int:
        return self.total_cores - self.held

    def reserve(self, task_id: str, cores: int) -> None:
        if task_id in self.entries:
            raise AssignOverCapacity(f"{task_id} already holds a slot")
        if cores > self.free:
            raise AssignOverCapacity(f"{task_id} needs {cores} cores, {self.free} free")
        self.entries[task_id] = cores
        assert self.held <= self.total_cores

    def release(self, task_id: str) -> int:
        cores = self.entries.pop(task_id)
        assert 0 <= self.held <= self.total_cores
        return cores


@dataclass(frozen=True)
class ExecutionEnvironment:
    working_dir: Path
    environment: Mapping[str, str]
    stdout_path: Path
    stderr_path: Path

    @classmethod
    def for_task(cls, base_dir: Path, base_env: Mapping[str, str], task: TaskSpec) -> ExecutionEnvironment:
        workdir = Path(base_dir) / task.task_id
        env = dict(base_env)
        env.update(task.environment)
        return cls(workdir, env, workdir / "stdout", workdir / "stderr")


def build_command(task: TaskSpec) -> tuple[list[str], bool]:
    """A single-token executable is exec'd directly; anything else goes through the shell."""
    parts = shlex.split(task.executable)
    if len(parts) == 1 and parts[0] == task.executable:
        return [task.executable, *task.arguments], False
    return [" ".join([task.executable, *map(shlex.quote, task.arguments)])], True


@dataclass
class AgentConfig:
    pilot_id: str
    cores: int
    walltime: float
    host: str
    port: int
    workdir: Path = field(default_factory=lambda: Path.cwd() / "pilotkit-agent")
    poll_interval: float = 1.0
    heartbeat_interval: float = 5.0
    drain_margin: float = 2.0
    connect_retries: int = 3
    handshake_timeout: float = 10.0

    @classmethod
    def from_env(cls, env: Mapping[str, str] | None = None) -> AgentConfig:
        env = os.environ if env is None else env

        def need(name: str) -> str:
            value = env.get(name)
            if not value:
                raise UsageError(f"{name} is not set")
            return value

        pilot_id = need("PILOTKIT_PILOT_ID")
        try:
            cores = int(need("PILOTKIT_CORES"))
            walltime = float(need("PILOTKIT_WALLTIME_S"))
            host, _, port = need("PILOTKIT_MANAGER_ADDR").rpartition(":")
            port = int(port)
        except ValueError as exc:
            raise UsageError(f"bad agent configuration: {exc}") from None
        if cores < 1 or walltime <= 0 or not host:
            raise UsageError("PILOTKIT_CORES must be >= 1, PILOTKIT_WALLTIME_S > 0, PILOTKIT_MANAGER_ADDR host:port")
        workdir = Path(env.get("PILOTKIT_WORKDIR") or Path.cwd() / f"pilotkit-{pilot_id}")
        return cls(
            pilot_id=pilot_id,
            cores=cores,
            walltime=walltime,
            host=host,
            port=port,
            workdir=workdir,
            poll_interval=float(env.get("PILOTKIT_POLL_INTERVAL_S", 1.0)),
            heartbeat_interval=float(env.get("PILOTKIT_HEARTBEAT_S", 5.0)),
            drain_margin=float(env.get("PILOTKIT_DRAIN_MARGIN_S", 2.0)),
        )


async def execute(task: TaskSpec, env: ExecutionEnvironment, running: dict[str, asyncio.subprocess.Process]) -> tuple[int, float, float, str | None]:
    """Run one task to completion; returns (exit_code, start, end, reason)."""
    env.working_dir.mkdir(parents=True, exist_ok=True)
    argv, shell = build_command(task)
    start = time.monotonic()
    with env.stdout_path.open("wb") as out, env.stderr_path.open("wb") as err:
        try:
            if shell:
                proc = await asyncio.create_subprocess_shell(
                    argv[0], cwd=env.working_dir, env=dict(env.environment),
                    stdout=out, stderr=err, start_new_session=True,
                )
            else:
                proc = await asyncio.create_subprocess_exec(
                    *argv, cwd=env.working_dir, env=dict(env.environment),
                    stdout=out, stderr=err, start_new_session=True,
                )
        except OSError as exc:
            err.write(f"spawn failed: {exc}\n".encode())
            return SPAWN_FAILURE_EXIT, start, time.monotonic(), "SpawnFailure"
        running[task.task_id] = proc
        try:
            code = await proc.wait()
        finally:
            running.pop(task.task_id, None)
    reason = None if code == 0 else ("WalltimeKill" if code == KILLED_EXIT else "NonZeroExit")
    return code, start, time.monotonic(), reason


class Agent:
    def __init__(self, config: AgentConfig):
        self.config = config
        self.slots = SlotTable(config.cores)
        self.started = time.monotonic()
        self.walltime_end = self.started + config.walltime
        self.base_env = dict(os.environ)
        self.procs: dict[str, asyncio.subprocess.Process] = {}
        self.workers: dict[str, asyncio.Task] = {}
        self.killed: set[str] = set()
        self.draining = asyncio.Event()
        self.drain_deadline = self.walltime_end - config.drain_margin
        self.slot_freed = asyncio.Event()
        self.replies: asyncio.Queue[Message] = asyncio.Queue()
        self.lost = False
        self._writer: asyncio.StreamWriter | None = None
        self._write_lock = asyncio.Lock()
        self.trace: list[tuple[float, str]] = []

    # -- io ---------------------------------------------------------------

    async def send(self, msg: Message) -> None:
        self.trace.append((time.monotonic(), msg.type))
        async with self._write_lock:
            await write_message(self._writer, msg)

    async def connect(self) -> tuple[asyncio.StreamReader, asyncio.StreamWriter]:
        cfg = self.config
        for attempt in range(cfg.connect_retries + 1):
            try:
                return await asyncio.open_connection(cfg.host, cfg.port, limit=1 << 20)
            except OSError as exc:
                log.warning("connect to %s:%d failed (%s), attempt %d", cfg.host, cfg.port, exc, attempt + 1)
                if attempt == cfg.connect_retries:
                    raise ConnectFailure(f"cannot reach manager at {cfg.host}:{cfg.port}") from None
                await asyncio.sleep(0.2 * 2**attempt)
        raise AssertionError("unreachable")

    async def _reader(self, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                msg = await read_message(reader)
                if msg is None:
                    break
                if msg.type == "Shutdown":
                    self.begin_drain(immediate=msg.body.get("reason") == "Canceled")
                else:
                    await self.replies.put(msg)
        except (ConnectionError, asyncio.IncompleteReadError, OSError) as exc:
            log.warning("connection error: %s", exc)
        if not self.draining.is_set():
            log.error("lost connection to manager")
            self.lost = True
            self.begin_drain(immediate=True)
        await self.replies.put(make("Shutdown", reason="ConnectionLost"))

    # -- lifecycle --------------------------------------------------------

    def begin_drain(self, immediate: bool = False) -> None:
        if immediate:
            self.drain_deadline = min(self.drain_deadline, time.monotonic())
        if not self.draining.is_set():
            self.trace.append((time.monotonic(), "Draining"))
            self.draining.set()

    async def run(self) -> int:
        try:
            reader, self._writer = await self.connect()
        except ConnectFailure as exc:
            log.error("%s", exc)
            return EXIT_FAILURE
        remaining = self.walltime_end - time.monotonic()
        await self.send(make("Register", pilot_id=self.config.pilot_id, cores=self.config.cores,
                             walltime_remaining=round(remaining, 3)))
        try:
            ack = await asyncio.wait_for(read_message(reader), self.config.handshake_timeout)
        except (asyncio.TimeoutError, ConnectionError, OSError):
            log.error("no Ack from manager")
            return EXIT_FAILURE
        if ack is None or ack.type != "Ack":
            log.error("registration refused: %s", ack.body if ack else "connection closed")
            return EXIT_FAILURE
        if ack.body.get("heartbeat_interval"):
            self.config.heartbeat_interval = float(ack.body["heartbeat_interval"])

        loop = asyncio.get_running_loop()
        try:
            loop.add_signal_handler(signal.SIGTERM, self.begin_drain, True)
        except (NotImplementedError, RuntimeError):
            pass
        reader_task = asyncio.create_task(self._reader(reader))
        beat_task = asyncio.create_task(self._heartbeats())
        walltime_task = loop.call_at(loop.time() + max(0.0, self.drain_deadline - time.monotonic()), self.begin_drain)
        try:
            await self._pull_loop()
            await self._drain()
        finally:
            walltime_task.cancel()
            beat_task.cancel()
            reader_task.cancel()
            if self._writer is not None:
                self._writer.close()
        return EXIT_FAILURE if self.lost else EXIT_OK

    async def _heartbeats(self) -> None:
        while not self.draining.is_set():
            await asyncio.sleep(self.config.heartbeat_interval)
            if self.draining.is_set():
                break
            try:
                await self.send(make("Heartbeat", pilot_id=self.config.pilot_id, state="Running",
                                     free_cores=self.slots.free))
            except (ConnectionError, OSError):
                break

    async def _wait_any(self, *aws, timeout: float | None = None) -> None:
        tasks = [asyncio.ensure_future(a) for a in aws]
        try:
            await asyncio.wait(tasks, timeout=timeout, return_when=asyncio.FIRST_COMPLETED)
        finally:
            for t in tasks:
                t.cancel()

    async def _pull_loop(self) -> None:
        cfg = self.config
        while not self.draining.is_set():
            if self.slots.free == 0:
                self.slot_freed.clear()
                await self._wait_any(self.slot_freed.wait(), self.draining.wait())
                continue
            await self.send(make("TaskRequest", pilot_id=cfg.pilot_id, free_cores=self.slots.free))
            reply = await self.replies.get()
            if reply.type == "Shutdown":
                break
            if reply.type == "NoWork":
                self.slot_freed.clear()
                await self._wait_any(self.draining.wait(), timeout=cfg.poll_interval)
                continue
            if reply.type != "Assign":
                log.warning("unexpected %s while pulling", reply.type)
                continue
            task = reply.task
            try:
                self.slots.reserve(task.task_id, task.cores)
            except AssignOverCapacity as exc:
                await self.send(make("Reject", task_id=task.task_id, reason="AssignOverCapacity", pilot_id=cfg.pilot_id))
                log.error("%s", exc)
                continue
            remaining = self.walltime_end - time.monotonic() - cfg.drain_margin
            if task.estimated_duration > remaining:
                self.slots.release(task.task_id)
                await self.send(make("Reject", task_id=task.task_id, reason="InsufficientWalltime", pilot_id=cfg.pilot_id))
                continue
            self.workers[task.task_id] = asyncio.create_task(self._work(task))

    async def _work(self, task: TaskSpec) -> None:
        env = ExecutionEnvironment.for_task(self.config.workdir, self.base_env, task)
        try:
            code, start, end, reason = await execute(task, env, self.procs)
            if task.task_id in self.killed:
                reason = "WalltimeKill"
            await self.send(make("Result", task_id=task.task_id, exit_code=code, start=start, end=end,
                                 pilot_id=self.config.pilot_id, reason=reason))
        except (ConnectionError, OSError) as exc:
            log.error("could not report %s: %s", task.task_id, exc)
        finally:
            self.slots.release(task.task_id)
            self.workers.pop(task.task_id, None)
            self.slot_freed.set()

    async def _drain(self) -> None:
        pending = list(self.workers.values())
        if pending:
            timeout = max(0.0, self.drain_deadline - time.monotonic())
            await asyncio.wait(pending, timeout=timeout)
        for task_id, proc in list(self.procs.items()):
            self.killed.add(task_id)
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
        if self.workers:
            await asyncio.wait(list(self.workers.values()), timeout=5.0)
        if not self.lost:
            try:
                await self.send(make("Heartbeat", pilot_id=self.config.pilot_id, state="Draining",
                                     free_cores=self.slots.free))
            except (ConnectionError, OSError):
                pass


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("PILOTKIT_LOG_LEVEL", "INFO"),
                        format="%(asctime)s agent %(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = AgentConfig.from_env()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return asyncio.run(Agent(config).run())


if __name__ == "__main__":
    sys.exit(main())
