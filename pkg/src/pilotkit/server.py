"""TCP endpoint for agents and operators.

Both speak newline-delimited JSON on one port.  A connection whose first line
carries an ``op`` key is a control session (one request, one response per
line); anything else is an agent speaking the wire protocol.
"""

from __future__ import annotations

import asyncio
import json
import logging
import socket
import time
from typing import Any, Callable, Mapping

from .errors import BindError, ConnectFailure, DecodeError, PilotkitError, error_by_code
from .events import EventLog
from .localexec import LocalExecBackend, ProcessTable
from .manager import Manager
from .model import DcrDescriptor, Middleware, PilotSpec, WorkloadSpec
from .pilots import ProvisioningPolicy
from .protocol import Message, decode, encode, make
from .workload import SchedulingPolicy

log = logging.getLogger(__name__)

_TIMED_FIELDS = ("start", "end")


class ManagerServer:
    def __init__(
        self,
        descriptors: list[DcrDescriptor],
        events: EventLog,
        *,
        host: str = "127.0.0.1",
        port: int = 0,
        provisioning: ProvisioningPolicy | None = None,
        scheduling: SchedulingPolicy | None = None,
        max_attempts: int = 1,
        rebind_on_pilot_loss: bool = False,
        bootstrap_timeout: float = 60.0,
        heartbeat_interval: float | None = 5.0,
        release_when_idle: bool = False,
        tick_interval: float = 0.1,
        processes: ProcessTable | None = None,
    ):
        for d in descriptors:
            if d.middleware is not Middleware.LOCAL_EXEC:
                raise PilotkitError(f"DCR {d.dcr_id}: the manager server only drives LocalExec DCRs")
        self.descriptors = descriptors
        self.events = events
        self.host = host
        self.port = port
        self.options = dict(
            provisioning=provisioning,
            scheduling=scheduling,
            max_attempts=max_attempts,
            rebind_on_pilot_loss=rebind_on_pilot_loss,
            bootstrap_timeout=bootstrap_timeout,
            heartbeat_interval=heartbeat_interval,
        )
        self.release_when_idle = release_when_idle
        self.tick_interval = tick_interval
        self.processes = processes or ProcessTable()
        self.backends: dict[str, LocalExecBackend] = {}
        self.manager: Manager | None = None
        self._t0 = time.monotonic()
        self._last = 0.0
        self._server: asyncio.base_events.Server | None = None
        self._stopped = asyncio.Event()
        self._ticker: asyncio.Task | None = None

    # -- clock ------------------------------------------------------------

    def now(self) -> float:
        self._last = max(self._last, round(time.monotonic() - self._t0, 6))
        return self._last

    def _to_manager_clock(self, msg: Message) -> Message:
        """Agents stamp results with host monotonic time; shift them onto the manager clock."""
        if msg.type != "Result":
            return msg
        body = dict(msg.body)
        for name in _TIMED_FIELDS:
            body[name] = round(body[name] - self._t0, 6)
        return make("Result", **body)

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    # -- lifecycle --------------------------------------------------------

    async def start(self) -> None:
        try:
            self._server = await asyncio.start_server(self._session, self.host, self.port, limit=1 << 22)
        except OSError as exc:
            raise BindError(f"cannot listen on {self.host}:{self.port}: {exc.strerror or exc}") from None
        self.port = self._server.sockets[0].getsockname()[1]
        connect = self.address
        self.backends = {
            d.dcr_id: LocalExecBackend(d, connect, processes=self.processes, clock=self.now)
            for d in self.descriptors
        }
        self.manager = Manager(self.backends, self.events, **self.options)
        self._ticker = asyncio.create_task(self._tick_loop())

    async def serve_until_stopped(self) -> None:
        await self._stopped.wait()
        await self.close()

    def stop(self) -> None:
        self._stopped.set()

    async def close(self) -> None:
        if self._ticker is not None:
            self._ticker.cancel()
        if self.manager is not None:
            now = self.now()
            for rec in list(self.manager.pilots.pilots.values()):
                if not rec.status.terminal:
                    try:
                        self.manager.pilots.cancel_pilot(rec.pilot_id, now)
                    except PilotkitError as exc:
                        log.warning("cancel %s on shutdown: %s", rec.pilot_id, exc)
        await asyncio.to_thread(self.processes.terminate_all)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        self._poll_backends()
        self.events.close()

    def _poll_backends(self) -> None:
        for backend in self.backends.values():
            for job_id, status in backend.poll_events():
                self.manager.on_job_status(job_id, status, self.now())

    async def _tick_loop(self) -> None:
        while True:
            try:
                self._poll_backends()
                self.manager.tick(self.now())
                self._release_if_idle()
            except Exception:  # keep serving; the failure is in the log
                log.exception("manager tick failed")
            await asyncio.sleep(self.tick_interval)

    def _release_if_idle(self) -> None:
        wm = self.manager.workloads
        if self.release_when_idle and wm.workloads and wm.all_complete():
            self.manager.release_idle_pilots(self.now())

    # -- sessions ---------------------------------------------------------

    async def _session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            first = await reader.readline()
            if not first:
                return
            try:
                doc = json.loads(first)
            except ValueError:
                doc = None
            if isinstance(doc, dict) and "op" in doc:
                await self._control_session(doc, reader, writer)
            else:
                await self._agent_session(first, reader, writer)
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            log.info("session closed: %s", exc)
        finally:
            writer.close()

    async def _agent_session(self, first: bytes, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        pilot_id: str | None = None

        def push(msg: Message) -> None:
            if not writer.is_closing():
                writer.write(encode(msg))

        line = first
        while line:
            try:
                msg = decode(line)
            except DecodeError as exc:
                log.warning("dropping agent session %s: %s %s", pilot_id, exc.code, exc)
                return
            pilot_id = msg.body.get("pilot_id", pilot_id)
            for reply in self.manager.handle(self._to_manager_clock(msg), self.now(), session_pilot=pilot_id, send=push):
                push(reply)
            self._release_if_idle()
            await writer.drain()
            line = await reader.readline()
        log.info("agent %s disconnected", pilot_id)

    async def _control_session(self, doc: dict, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        while doc is not None:
            reply = self.control(doc)
            writer.write(json.dumps(reply).encode() + b"\n")
            await writer.drain()
            line = await reader.readline()
            doc = json.loads(line) if line.strip() else None

    def control(self, doc: Mapping[str, Any]) -> dict[str, Any]:
        op = doc.get("op")
        now = self.now()
        m = self.manager
        try:
            if op == "submit_workload":
                result: Any = m.submit_workload(WorkloadSpec.from_dict(doc["workload"]), now)
            elif op == "submit_pilot":
                result = m.submit_pilot(PilotSpec.from_dict(doc["pilot"]), now)
            elif op == "status":
                result = m.status(doc["entity_id"])
            elif op == "cancel":
                result = m.cancel(doc["entity_id"], now)
            elif op == "overlay":
                result = m.pilots.overlay().to_dict()
            elif op == "shutdown":
                self.stop()
                result = "stopping"
            else:
                return {"ok": False, "error": "UnknownOperation", "message": f"unknown op {op!r}"}
        except PilotkitError as exc:
            return {"ok": False, "error": exc.code, "message": str(exc)}
        except KeyError as exc:
            return {"ok": False, "error": "MissingField", "message": f"request lacks {exc}"}
        return {"ok": True, "result": result}


class ControlClient:
    """Blocking client for the control operations."""

    def __init__(self, address: str, timeout: float = 10.0):
        host, _, port = address.rpartition(":")
        if not host or not port.isdigit():
            raise ConnectFailure(f"bad manager address {address!r}; expected host:port")
        self.host, self.port, self.timeout = host, int(port), timeout

    def request(self, op: str, **fields: Any) -> Any:
        payload = json.dumps({"op": op, **fields}).encode() + b"\n"
        try:
            with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
                sock.sendall(payload)
                with sock.makefile("rb") as stream:
                    line = stream.readline()
        except OSError as exc:
            raise ConnectFailure(f"cannot reach manager at {self.host}:{self.port}: {exc}") from None
        if not line:
            raise ConnectFailure("manager closed the connection")
        reply = json.loads(line)
        if not reply.get("ok"):
            raise remote_error(reply.get("error", ""), reply.get("message", "request failed"))
        return reply["result"]


def remote_error(code: str, message: str) -> PilotkitError:
    """Rebuild a server-side error as the matching exception class."""
    cls = error_by_code(code)
    exc = cls.__new__(cls)
    Exception.__init__(exc, message)
    exc.message = message
    return exc


async def run_server(server: ManagerServer, ready: Callable[[ManagerServer], None] | None = None) -> None:
    await server.start()
    if ready is not None:
        ready(server)
    await server.serve_until_stopped()
