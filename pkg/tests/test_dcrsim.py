import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import dcr
from pilotkit.dcrsim import BackgroundJob, BatchSim, SimConfig, SimEventKind, synthesize_background
from pilotkit.errors import AlreadyTerminal, ConfigError, OversizedJob, QueueFull, UnknownJob, WalltimeExceedsLimit
from pilotkit.model import JobStatus, PilotSpec, TaskSpec


def pilot(pid="p", nodes=1, cores=4, walltime=300, target="dcr"):
    return PilotSpec(pid, target, nodes, cores, walltime)


def job_task(tid="t", cores=1, duration=10.0):
    return TaskSpec(tid, "/bin/true", cores=cores, estimated_duration=duration)


def sim(**kw):
    cfg = kw.pop("config", {})
    return BatchSim(SimConfig(dcr(**kw), **cfg))


def times(events, kind):
    return [e.time for e in events if e.kind is kind]


def test_one_job_starts_at_first_cycle():
    s = sim(nodes=1, cores=1)
    s.submit_job(job_task(), at=0)
    events = s.step(1000)
    assert times(events, SimEventKind.JOB_STARTED) == [60.0]
    assert times(events, SimEventKind.JOB_ENDED) == [70.0]


def test_two_whole_node_jobs_run_one_cycle_apart():
    s = sim(nodes=1, cores=1)
    a = s.submit_job(job_task("a"), at=0)
    b = s.submit_job(job_task("b"), at=0)
    s.step(1000)
    assert (s.query_job(a).start_time, s.query_job(b).start_time) == (60.0, 120.0)
    assert (s.query_job(a).end_time, s.query_job(b).end_time) == (70.0, 130.0)


def test_canonical_direct_trace():
    s = sim(nodes=1, cores=4)
    for i in range(40):
        s.submit_job(job_task(f"t{i}"), at=0)
    events = s.step(10_000)
    starts = times(events, SimEventKind.JOB_STARTED)
    # four one-core jobs per cycle, ten cycles
    assert starts == [60.0 * k for k in range(1, 11) for _ in range(4)]
    assert max(times(events, SimEventKind.JOB_ENDED)) == 610.0
    assert len(times(s.events, SimEventKind.JOB_QUEUED)) == 40


def test_submit_errors():
    s = sim(nodes=4, cores=8, walltime=300, max_jobs=2)
    s.submit_job(pilot(nodes=2, cores=8))
    with pytest.raises(OversizedJob):
        s.submit_job(pilot(nodes=5))
    with pytest.raises(WalltimeExceedsLimit):
        s.submit_job(pilot(walltime=400))
    s.submit_job(pilot(nodes=1))
    with pytest.raises(QueueFull):
        s.submit_job(pilot(nodes=1))


def test_walltime_kill():
    s = sim(nodes=1, cores=1)
    j = s.submit_job(job_task(duration=500), at=0, walltime=300)
    events = s.step(1000)
    assert times(events, SimEventKind.JOB_KILLED_WALLTIME) == [360.0]
    rec = s.query_job(j)
    assert rec.status is JobStatus.KILLED and rec.end_time - rec.start_time == 300


def test_open_ended_pilot_job_is_killed_at_walltime():
    s = sim(nodes=1, cores=4)
    j = s.submit_job(pilot(walltime=300))
    s.step(1000)
    assert s.query_job(j).end_time == 360.0


def test_query_and_cancel():
    s = sim(nodes=1, cores=1)
    a = s.submit_job(job_task("a", duration=100), at=0)
    b = s.submit_job(job_task("b"), at=0)
    s.step(60)
    assert s.query_job(a).status is JobStatus.RUNNING and s.query_job(a).start_time == 60
    s.cancel_job(b)
    assert s.query_job(b).status is JobStatus.CANCELED
    s.step(80)
    s.cancel_job(a)
    rec = s.query_job(a)
    assert rec.status is JobStatus.CANCELED and rec.end_time == 80
    with pytest.raises(AlreadyTerminal):
        s.cancel_job(a)
    with pytest.raises(UnknownJob):
        s.query_job("nope")
    s.step(1000)
    assert s.query_job(b).start_time is None


def test_completed_job_cannot_be_canceled():
    s = sim(nodes=1, cores=1)
    j = s.submit_job(job_task(), at=0)
    s.step(100)
    assert s.query_job(j).end_time == 70
    with pytest.raises(AlreadyTerminal):
        s.cancel_job(j)


def test_job_is_eligible_only_after_a_cycle_boundary_past_its_submission():
    s = sim(nodes=1, cores=1)
    j = s.submit_job(job_task(), at=60)
    s.step(1000)
    assert s.query_job(j).start_time == 120


def test_fcfs_blocks_without_backfill_and_backfill_lets_small_jobs_pass():
    def run(backfill):
        s = sim(nodes=2, cores=1, config={"backfill": backfill})
        s.submit_job(pilot("big0", nodes=1, cores=1, walltime=200), at=0)
        big = s.submit_job(pilot("big", nodes=2, cores=1, walltime=100), at=0)
        small = s.submit_job(pilot("small", nodes=1, cores=1, walltime=100), at=0)
        s.step(1000)
        return s.query_job(big).start_time, s.query_job(small).start_time

    big, small = run(False)
    assert small >= big
    big, small = run(True)
    assert small == 60 and big > small


def test_background_jobs_occupy_nodes():
    s = sim(nodes=1, cores=2, config={"background_jobs": [(0, 1, 100)]})
    j = s.submit_job(pilot(cores=2), at=10)
    s.step(2000)
    # the background job holds the node 60..160; the pilot gets the next cycle
    assert s.query_job(j).start_time == 180


def test_background_must_fit():
    with pytest.raises(ConfigError):
        SimConfig(dcr(nodes=1), background_jobs=[(0, 2, 10)])


def test_seeded_background_is_reproducible():
    a = synthesize_background(7, count=5, horizon=100, max_nodes=3, max_duration=50, nodes=2)
    assert a == synthesize_background(7, count=5, horizon=100, max_nodes=3, max_duration=50, nodes=2)
    assert all(isinstance(b, BackgroundJob) and 1 <= b.nodes <= 2 for b in a)


def test_simconfig_from_json_and_event_lines():
    cfg = SimConfig.from_dict({
        "descriptor": dcr(nodes=2, cores=2).to_dict(),
        "seed": 3,
        "background_random": {"count": 3, "horizon": 100, "max_nodes": 2, "max_duration": 30},
    })
    assert len(cfg.background_jobs) == 3
    s = BatchSim(cfg)
    s.step(500)
    lines = s.dumps_events().splitlines()
    assert lines and all(set(json.loads(x)) == {"time", "kind", "job_id"} for x in lines)
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"descriptor": dcr().to_dict(), "bogus": 1})


jobs_strategy = st.lists(
    st.tuples(st.integers(0, 300), st.integers(1, 3), st.integers(1, 4), st.integers(1, 200), st.integers(30, 150)),
    min_size=1, max_size=15,
)


def _run_random(jobs, backfill, cycle):
    s = sim(nodes=3, cores=4, cycle=cycle, max_jobs=100, config={"backfill": backfill})
    duration = {}
    for i, (at, nodes, cores, dur, walltime) in enumerate(sorted(jobs)):
        j = s.submit_job(PilotSpec(f"p{i}", "dcr", nodes, cores, walltime), at=at)
        duration[j] = dur
    # pilot payloads run open-ended; end each one by hand after its duration
    ends = {}
    while True:
        candidates = [x for x in (s.next_event_time(), min(ends.values(), default=None)) if x is not None]
        if not candidates:
            break
        now = min(candidates)
        for ev in s.step(now):
            if ev.kind is SimEventKind.JOB_STARTED:
                ends[ev.job_id] = ev.time + duration[ev.job_id]
            elif ev.kind is SimEventKind.JOB_KILLED_WALLTIME:
                ends.pop(ev.job_id)
        for j in sorted(j for j, e in ends.items() if e <= now):
            del ends[j]
            s.complete_job(j)
        _check_capacity(s)
    return s


def _check_capacity(s):
    assert all(0 <= f <= s.descriptor.cores_per_node for f in s._free)
    used = [0] * s.descriptor.nodes
    for run in s._running.values():
        for n, c in run.allocation:
            used[n] += c
    assert all(u <= s.descriptor.cores_per_node for u in used)


@settings(max_examples=80, deadline=None)
@given(jobs_strategy, st.booleans(), st.sampled_from([10, 60]))
def test_random_job_streams_respect_simulator_invariants(jobs, backfill, cycle):
    s = _run_random(jobs, backfill, cycle)
    events = s.events
    assert [e.time for e in events] == sorted(e.time for e in events)
    for rec in s.jobs.values():
        if rec.start_time is not None:
            assert rec.start_time % cycle == 0 and rec.start_time > rec.submit_time
        if rec.end_time is not None and rec.start_time is not None:
            assert rec.end_time - rec.start_time <= rec.walltime
    if not backfill:
        # FCFS: among same-shape jobs, starts follow submission order
        by_shape = {}
        for j in sorted(s.jobs.values(), key=lambda r: (r.submit_time, r.job_id)):
            if j.start_time is not None:
                by_shape.setdefault((j.requested_nodes, j.requested_cores), []).append(j.start_time)
        assert all(v == sorted(v) for v in by_shape.values())


@settings(max_examples=30, deadline=None)
@given(jobs_strategy)
def test_same_config_gives_identical_event_stream(jobs):
    a = _run_random(jobs, False, 60).dumps_events()
    b = _run_random(jobs, False, 60).dumps_events()
    assert a == b
