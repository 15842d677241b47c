"""Brute-force replay validator for event logs.

Deliberately independent of the managers: it rebuilds every fact it needs
from the records and checks the scheduling guarantees one at a time.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

from .events import EventRecord

TERMINAL = ("Done", "Failed", "Canceled")


def validate_log(records: Sequence[EventRecord]) -> list[str]:
    """Return a list of human-readable violations; empty means the log is sound."""
    problems: list[str] = []
    problems += _check_time(records)
    problems += _check_stages(records)
    problems += _check_exactly_once(records)
    problems += _check_capacity(records)
    problems += _check_pins(records)
    problems += _check_dependencies(records)
    return problems


def assert_valid(records: Sequence[EventRecord]) -> None:
    problems = validate_log(records)
    assert not problems, "event log violations:\n  " + "\n  ".join(problems[:20])


def _check_time(records):
    out = []
    for prev, cur in zip(records, records[1:]):
        if cur.time < prev.time:
            out.append(f"time goes backwards at {cur.entity} {cur.entity_id}: {cur.time} < {prev.time}")
    return out


def _pilot_times(records):
    queued, submitted_job, active, ended = {}, {}, {}, {}
    for r in records:
        if r.entity == "Job" and r.transition == "Queued" and r.attrs.get("payload_kind") == "pilot":
            queued.setdefault(r.attrs["payload_id"], r.time)
        elif r.entity == "Pilot":
            if r.transition == "Submitted":
                submitted_job[r.entity_id] = r.attrs.get("job_id")
            elif r.transition == "Active":
                active[r.entity_id] = r.time
            elif r.transition in TERMINAL:
                ended.setdefault(r.entity_id, r.time)
    return queued, submitted_job, active, ended


def _check_stages(records):
    """Pilot job queued < pilot Active <= every task Dispatched to it, and no dispatch after its end."""
    out = []
    queued, submitted, active, ended = _pilot_times(records)
    for pid, t in active.items():
        if pid not in submitted:
            out.append(f"pilot {pid} Active without Submitted")
        elif pid in queued and not queued[pid] < t:
            out.append(f"pilot {pid} Active at {t} but its job was queued at {queued[pid]}")
    for r in records:
        if r.entity != "Task" or r.transition != "Dispatched" or r.attrs.get("binding") == "Direct":
            continue
        pid = r.attrs.get("pilot_id")
        if pid not in active:
            out.append(f"task {r.entity_id} dispatched to never-Active pilot {pid}")
        elif r.time < active[pid]:
            out.append(f"task {r.entity_id} dispatched at {r.time} before pilot {pid} Active at {active[pid]}")
        elif pid in ended and r.time > ended[pid]:
            out.append(f"task {r.entity_id} dispatched at {r.time} after pilot {pid} ended at {ended[pid]}")
    return out


def _check_exactly_once(records):
    out = []
    seen = set()
    for r in records:
        if r.entity == "Task" and r.transition == "Dispatched":
            key = (r.entity_id, r.attrs.get("attempt"))
            # a Reject puts the same attempt back in the queue; count dispatches per hold
            if key in seen:
                out.append(f"task {r.entity_id} attempt {key[1]} dispatched twice while held")
            seen.add(key)
        elif r.entity == "Task" and r.transition in ("Ready", "Failed", "Done", "Canceled"):
            seen.discard((r.entity_id, r.attrs.get("attempt")))
    done = defaultdict(int)
    for r in records:
        if r.entity == "Task" and r.transition == "Done":
            done[r.entity_id] += 1
            if done[r.entity_id] > 1:
                out.append(f"task {r.entity_id} reached Done twice")
    return out


def _check_capacity(records):
    """Replay per-pilot core holdings; they may never exceed the registered core count."""
    out = []
    capacity: dict[str, int] = {}
    holding: dict[str, tuple[str, int]] = {}  # task -> (pilot, cores)
    used: dict[str, int] = defaultdict(int)
    for r in records:
        if r.entity == "Pilot":
            if r.transition == "Active":
                capacity[r.entity_id] = r.attrs["cores"]
            elif r.transition in TERMINAL:
                for tid, (pid, cores) in list(holding.items()):
                    if pid == r.entity_id:
                        del holding[tid]
                        used[pid] -= cores
            continue
        if r.entity != "Task":
            continue
        tid = r.entity_id
        if r.transition == "Dispatched" and r.attrs.get("binding") != "Direct":
            pid, cores = r.attrs["pilot_id"], r.attrs["cores"]
            if tid in holding:
                out.append(f"task {tid} dispatched while still holding cores")
            holding[tid] = (pid, cores)
            used[pid] += cores
            if used[pid] > capacity.get(pid, 0):
                out.append(f"pilot {pid} over capacity at {r.time}: {used[pid]} > {capacity.get(pid, 0)}")
        elif r.transition in ("Done", "Failed", "Ready", "Canceled") and tid in holding:
            pid, cores = holding.pop(tid)
            used[pid] -= cores
    return out


def _check_pins(records):
    """While a task is pinned to a pilot it may only be dispatched there, after that pilot is Active.

    A pin lasts across rejects and retries; only an Unbind (Bound -> Pending) or the end of the task lifts it.
    """
    out = []
    _, _, active, _ = _pilot_times(records)
    pin: dict[str, str] = {}
    for r in records:
        if r.entity != "Task":
            continue
        tid = r.entity_id
        if r.transition == "Bound":
            pin[tid] = r.attrs["pilot_id"]
        elif r.transition == "Dispatched" and tid in pin:
            pid = r.attrs.get("pilot_id")
            if pid != pin[tid]:
                out.append(f"task {tid} pinned to {pin[tid]} but dispatched to {pid}")
            elif pid not in active or active[pid] > r.time:
                out.append(f"task {tid} dispatched to {pid} before it was Active")
        elif r.transition in ("Pending", "Done", "Canceled"):
            pin.pop(tid, None)
    return out


def _check_dependencies(records):
    """A successor is never dispatched before every predecessor is Done."""
    out = []
    preds: dict[str, list[str]] = defaultdict(list)
    done: set[str] = set()
    for r in records:
        if r.entity == "Workload" and r.transition == "Submitted":
            for a, b in r.attrs.get("dependencies", []):
                preds[b].append(a)
        elif r.entity == "Task" and r.transition == "Done":
            done.add(r.entity_id)
        elif r.entity == "Task" and r.transition == "Dispatched":
            missing = [p for p in preds.get(r.entity_id, []) if p not in done]
            if missing:
                out.append(f"task {r.entity_id} dispatched at {r.time} before predecessors {missing} were Done")
    return out
