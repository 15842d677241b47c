"""Manager <-> agent wire protocol.

A frame is one UTF-8 JSON object per line::

    {"v":1,"type":"NoWork","body":{},"crc":"7e9f1a2b"}\\n

The first three keys are the message proper, serialized compactly with body
fields in schema order.  ``crc`` is the CRC-32 (lower-case hex) of that
message object exactly as written, i.e. of the frame with the ``crc`` member
removed.  The decoder only accepts canonical frames, so a successful decode
always satisfies ``encode(decode(frame)) == frame``.
"""

from __future__ import annotations

import asyncio
import json
import math
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Any

from .errors import (
    ChecksumMismatch,
    ConfigError,
    InvalidField,
    MalformedJson,
    MissingField,
    UnknownType,
    VersionMismatch,
)
from .model import TaskSpec

PROTOCOL_VERSION = 1
MAX_FRAME_BYTES = 1 << 20

_STR, _INT, _NUM, _OBJ = "str", "int", "num", "obj"

# type -> (required fields, optional fields); order here is wire order
SCHEMAS: dict[str, tuple[tuple[tuple[str, str], ...], tuple[tuple[str, str], ...]]] = {
    "Register": ((("pilot_id", _STR), ("cores", _INT), ("walltime_remaining", _NUM)), ()),
    "Ack": ((("pilot_id", _STR),), (("heartbeat_interval", _NUM),)),
    "Heartbeat": ((("pilot_id", _STR), ("state", _STR), ("free_cores", _INT)), ()),
    "TaskRequest": ((("pilot_id", _STR), ("free_cores", _INT)), ()),
    "Assign": ((("task", _OBJ),), (("attempt", _INT),)),
    "NoWork": ((), ()),
    "Reject": ((("task_id", _STR), ("reason", _STR)), (("pilot_id", _STR),)),
    "Result": (
        (("task_id", _STR), ("exit_code", _INT), ("start", _NUM), ("end", _NUM)),
        (("pilot_id", _STR), ("reason", _STR)),
    ),
    "Shutdown": ((), (("reason", _STR),)),
}
MESSAGE_TYPES = tuple(SCHEMAS)


def _type_ok(kind: str, value: Any) -> bool:
    if kind == _STR:
        return isinstance(value, str)
    if kind == _INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == _NUM:
        return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    return isinstance(value, dict)


def _check_body(mtype: str, body: Any) -> dict[str, Any]:
    if not isinstance(body, dict):
        raise InvalidField(f"{mtype}: body must be an object")
    required, optional = SCHEMAS[mtype]
    known = {name for name, _ in required + optional}
    for name, kind in required:
        if name not in body:
            raise MissingField(name)
    extra = sorted(set(body) - known)
    if extra:
        raise InvalidField(f"{mtype}: unexpected field {extra[0]!r}")
    ordered = {}
    for name, kind in required + optional:
        if name in body:
            if not _type_ok(kind, body[name]):
                raise InvalidField(f"{mtype}.{name}: bad value {body[name]!r}")
            ordered[name] = body[name]
    if mtype == "Assign":
        try:
            TaskSpec.from_dict(ordered["task"])
        except ConfigError as exc:
            raise InvalidField(f"Assign.task: {exc}") from None
    return ordered


@dataclass(frozen=True)
class Message:
    type: str
    body: dict[str, Any] = field(default_factory=dict)
    v: int = PROTOCOL_VERSION

    def __post_init__(self):
        if self.type not in SCHEMAS:
            raise UnknownType(f"unknown message type {self.type!r}")
        object.__setattr__(self, "body", _check_body(self.type, self.body))

    @property
    def task(self) -> TaskSpec:
        return TaskSpec.from_dict(self.body["task"])


def make(mtype: str, **body: Any) -> Message:
    return Message(mtype, {k: v for k, v in body.items() if v is not None})


def assign(task: TaskSpec, attempt: int | None = None) -> Message:
    return make("Assign", task=task.to_dict(), attempt=attempt)


def _core(msg: Message) -> str:
    return json.dumps(
        {"v": msg.v, "type": msg.type, "body": msg.body},
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    )


def _crc(text: str) -> str:
    return format(zlib.crc32(text.encode("utf-8")), "08x")


def encode(msg: Message) -> bytes:
    core = _core(msg)
    return (core[:-1] + ',"crc":"' + _crc(core) + '"}\n').encode("utf-8")


def _reject_constant(name: str):
    raise MalformedJson(f"non-standard JSON constant {name}")


def decode(frame: bytes | str) -> Message:
    raw = frame.encode("utf-8") if isinstance(frame, str) else bytes(frame)
    if len(raw) > MAX_FRAME_BYTES:
        raise MalformedJson("frame too large")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedJson(f"invalid UTF-8: {exc.reason}") from None
    if not text.endswith("\n"):
        raise MalformedJson("truncated frame: no line terminator")
    line = text[:-1]
    if "\n" in line:
        raise MalformedJson("frame spans more than one line")
    try:
        doc = json.loads(line, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"{exc.msg} at column {exc.colno}") from None
    except RecursionError:
        raise MalformedJson("nesting too deep") from None
    if not isinstance(doc, dict):
        raise MalformedJson("frame is not a JSON object")

    if "v" not in doc:
        raise MissingField("v")
    v = doc["v"]
    if v != PROTOCOL_VERSION or isinstance(v, bool) or not isinstance(v, int):
        raise VersionMismatch(f"protocol version {v!r}, expected {PROTOCOL_VERSION}")
    if "type" not in doc:
        raise MissingField("type")
    mtype = doc["type"]
    if not isinstance(mtype, str) or mtype not in SCHEMAS:
        raise UnknownType(f"unknown message type {mtype!r}")
    if "body" not in doc:
        raise MissingField("body")
    if "crc" not in doc:
        raise MissingField("crc")
    extra = sorted(set(doc) - {"v", "type", "body", "crc"})
    if extra:
        raise MalformedJson(f"unexpected top-level key {extra[0]!r}")

    msg = Message(mtype, doc["body"], v)
    canonical = encode(msg)
    if doc["crc"] != _crc(_core(msg)):
        raise ChecksumMismatch(f"crc {doc['crc']!r} does not match message content")
    if raw != canonical:
        raise MalformedJson("frame is not in canonical encoding")
    return msg


# ---------------------------------------------------------------------------
# transports


async def read_message(reader: asyncio.StreamReader) -> Message | None:
    """Read one frame; ``None`` on clean EOF."""
    line = await reader.readline()
    if not line:
        return None
    if not line.endswith(b"\n"):
        raise MalformedJson("truncated frame at end of stream")
    return decode(line)


async def write_message(writer: asyncio.StreamWriter, msg: Message) -> None:
    writer.write(encode(msg))
    await writer.drain()


class InMemoryChannel:
    """Bidirectional frame queue used by the simulator.

    Frames cross the channel as encoded bytes so both sides exercise the same
    codec as a TCP session.
    """

    def __init__(self):
        self._to_manager: deque[bytes] = deque()
        self._to_agent: deque[bytes] = deque()

    def agent_send(self, msg: Message) -> None:
        self._to_manager.append(encode(msg))

    def manager_send(self, msg: Message) -> None:
        self._to_agent.append(encode(msg))

    def manager_recv(self) -> Message | None:
        return decode(self._to_manager.popleft()) if self._to_manager else None

    def agent_recv(self) -> Message | None:
        return decode(self._to_agent.popleft()) if self._to_agent else None
