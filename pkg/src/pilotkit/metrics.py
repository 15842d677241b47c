"""Metrics computed purely from an event log.

Every function here takes a sequence of :class:`EventRecord` and nothing
else, so a persisted log always reproduces the live numbers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import PilotNeverActive, UnknownWorkload, WorkloadNotFinished
from .events import EventRecord

TASK_TERMINAL = ("Done", "Failed", "Canceled")
PILOT_TERMINAL = ("Done", "Failed", "Canceled")


def _workload_records(records: Sequence[EventRecord], workload_id: str | None) -> list[EventRecord]:
    subs = [r for r in records if r.entity == "Workload" and r.transition == "Submitted"]
    if workload_id is not None:
        subs = [r for r in subs if r.entity_id == workload_id]
        if not subs:
            raise UnknownWorkload(workload_id)
    return subs


def makespan(records: Sequence[EventRecord], workload_id: str | None = None) -> float:
    """Last task terminal time minus workload submit time.

    Without ``workload_id`` the span covers every workload in the log.
    """
    subs = _workload_records(records, workload_id)
    if not subs:
        raise WorkloadNotFinished("log holds no workload")
    completed = {r.entity_id for r in records if r.entity == "Workload" and r.transition == "Completed"}
    for r in subs:
        if r.entity_id not in completed:
            raise WorkloadNotFinished(r.entity_id)
    tasks = {t for r in subs for t in r.attrs["tasks"]}
    ends = [r.time for r in records if r.entity == "Task" and r.entity_id in tasks and r.transition in TASK_TERMINAL]
    start = min(r.time for r in subs)
    return (max(ends) if ends else start) - start


def throughput(records: Sequence[EventRecord], workload_id: str | None = None) -> float:
    """Tasks finished Done per second of makespan."""
    span = makespan(records, workload_id)
    tasks = {t for r in _workload_records(records, workload_id) for t in r.attrs["tasks"]}
    done = sum(1 for r in records if r.entity == "Task" and r.entity_id in tasks and r.transition == "Done")
    return done / span if span > 0 else 0.0


def _active_window(records: Sequence[EventRecord], pilot_id: str) -> tuple[float, float, int]:
    active = end = None
    cores = 0
    for r in records:
        if r.entity != "Pilot" or r.entity_id != pilot_id:
            continue
        if r.transition == "Active":
            active, cores = r.time, r.attrs.get("cores", 0)
        elif r.transition in PILOT_TERMINAL and active is not None:
            end = r.time
    if active is None:
        raise PilotNeverActive(pilot_id)
    if end is None:
        end = records[-1].time
    return active, end, cores


def _executed(records: Sequence[EventRecord], pilot_id: str, lo: float, hi: float) -> float:
    total = 0.0
    for r in records:
        if r.entity == "Task" and r.transition in ("Done", "Failed") and r.attrs.get("pilot_id") == pilot_id:
            start, end = r.attrs.get("start"), r.attrs.get("end")
            if start is None or end is None:
                continue
            total += r.attrs["cores"] * max(0.0, min(end, hi) - max(start, lo))
    return total


def utilization(records: Sequence[EventRecord], pilot_id: str | None = None) -> float:
    """Core-seconds executed over core-seconds held while Active.

    Without ``pilot_id`` the ratio is pooled over every pilot that became Active.
    """
    if pilot_id is not None:
        pilots = [pilot_id]
    else:
        pilots = sorted({r.entity_id for r in records if r.entity == "Pilot" and r.transition == "Active"})
        if not pilots:
            raise PilotNeverActive("no pilot became Active")
    used = held = 0.0
    for p in pilots:
        lo, hi, cores = _active_window(records, p)
        used += _executed(records, p, lo, hi)
        held += cores * (hi - lo)
    return used / held if held > 0 else 0.0


def dispatch_overhead(records: Sequence[EventRecord]) -> float:
    """Mean of (task Dispatched time - the pilot's TaskRequest time)."""
    gaps = [
        r.time - r.attrs["requested_at"]
        for r in records
        if r.entity == "Task" and r.transition == "Dispatched" and "requested_at" in r.attrs
    ]
    return sum(gaps) / len(gaps) if gaps else 0.0


def mean_task_wait(records: Sequence[EventRecord]) -> float:
    """Mean time from a task becoming runnable to its execution start.

    A task is runnable once it is Ready (or Bound with its predecessors Done);
    each executed attempt counts once.
    """
    preds: dict[str, list[str]] = {}
    for r in records:
        if r.entity == "Workload" and r.transition == "Submitted":
            for a, b in r.attrs.get("dependencies", []):
                preds.setdefault(b, []).append(a)
    done_at: dict[str, float] = {}
    eligible: dict[str, float] = {}
    waits = []
    for r in records:
        if r.entity != "Task":
            continue
        tid = r.entity_id
        if r.transition in ("Ready", "Bound"):
            eligible[tid] = r.time
        elif r.transition == "Done":
            done_at[tid] = r.time
        if r.transition in ("Done", "Failed") and r.attrs.get("start") is not None and tid in eligible:
            since = max([eligible[tid]] + [done_at.get(p, 0.0) for p in preds.get(tid, [])])
            waits.append(max(0.0, r.attrs["start"] - since))
    return sum(waits) / len(waits) if waits else 0.0


def queued_jobs(records: Iterable[EventRecord], payload_kind: str | None = None) -> int:
    return sum(
        1 for r in records
        if r.entity == "Job" and r.transition == "Queued"
        and (payload_kind is None or r.attrs.get("payload_kind") == payload_kind)
    )


@dataclass(frozen=True)
class ExperimentReport:
    scenario: str
    mode: str
    makespan: float
    mean_task_wait: float
    pilot_utilization: float | None
    dispatch_overhead: float
    event_log: str | None

    @classmethod
    def from_log(cls, scenario: str, mode: str, records: Sequence[EventRecord], event_log: str | None = None) -> ExperimentReport:
        try:
            util = utilization(records)
        except PilotNeverActive:
            util = None
        return cls(
            scenario=scenario,
            mode=mode,
            makespan=makespan(records),
            mean_task_wait=mean_task_wait(records),
            pilot_utilization=util,
            dispatch_overhead=dispatch_overhead(records),
            event_log=event_log,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def format_table(reports: Sequence[ExperimentReport]) -> str:
    """Aligned plain-text table of reports."""
    head = ("scenario", "mode", "makespan_s", "mean_wait_s", "utilization", "dispatch_overhead_s")
    rows = [head] + [
        (
            r.scenario, r.mode, f"{r.makespan:.1f}", f"{r.mean_task_wait:.2f}",
            "-" if r.pilot_utilization is None else f"{r.pilot_utilization:.3f}",
            f"{r.dispatch_overhead:.3f}",
        )
        for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def write_reports(reports: Sequence[ExperimentReport], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    (out / "report.txt").write_text(format_table(reports))
    return path
