"""Append-only lifecycle event log, persisted as JSON lines."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Iterable, Iterator

ENTITIES = ("Task", "Pilot", "Job", "Workload")


@dataclass(frozen=True)
class EventRecord:
    time: float
    entity: str
    entity_id: str
    transition: str
    attrs: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "time": self.time,
            "entity": self.entity,
            "entity_id": self.entity_id,
            "transition": self.transition,
            "attrs": self.attrs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> EventRecord:
        return cls(
            time=float(doc["time"]),
            entity=doc["entity"],
            entity_id=doc["entity_id"],
            transition=doc["transition"],
            attrs=dict(doc.get("attrs") or {}),
        )


class EventLog:
    """Serialized appender.

    Times must be non-decreasing; the log optionally mirrors every record to a
    JSON-lines file as it is appended.
    """

    def __init__(self, path: str | Path | None = None):
        self.records: list[EventRecord] = []
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._fh: IO[str] | None = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w", encoding="utf-8")

    def append(self, time: float, entity: str, entity_id: str, transition: str, **attrs: Any) -> EventRecord:
        if entity not in ENTITIES:
            raise ValueError(f"unknown entity kind {entity!r}")
        record = EventRecord(float(time), entity, entity_id, transition, attrs)
        with self._lock:
            if self.records and record.time < self.records[-1].time:
                raise ValueError(
                    f"event time went backwards: {record.time} < {self.records[-1].time} ({entity} {entity_id})"
                )
            self.records.append(record)
            if self._fh is not None:
                self._fh.write(record.to_json() + "\n")
                self._fh.flush()
        return record

    def snapshot(self) -> list[EventRecord]:
        with self._lock:
            return list(self.records)

    def __iter__(self) -> Iterator[EventRecord]:
        return iter(self.snapshot())

    def __len__(self) -> int:
        return len(self.records)

    def dumps(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.snapshot())

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_log(path: str | Path) -> list[EventRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [EventRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def select(records: Iterable[EventRecord], entity: str | None = None, transition: str | None = None) -> list[EventRecord]:
    return [
        r for r in records
        if (entity is None or r.entity == entity) and (transition is None or r.transition == transition)
    ]
