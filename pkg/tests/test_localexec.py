import sys
import time

import pytest

from pilotkit.errors import DuplicatePilot, QueueFull, SpawnFailure, UnknownHandle, UnknownJob
from pilotkit.localexec import LocalExecBackend, ProcessTable
from pilotkit.model import DcrDescriptor, JobStatus, PilotSpec

SLEEPER = [sys.executable, "-c", "import time; time.sleep(30)"]
STUBBORN = [
    sys.executable, "-c",
    "import signal, sys, time; signal.signal(signal.SIGTERM, signal.SIG_IGN); print('ready', flush=True); time.sleep(60)",
]
ENV_DUMP = [
    sys.executable, "-c",
    "import os; print(os.environ['PILOTKIT_PILOT_ID'], os.environ['PILOTKIT_CORES'], "
    "os.environ['PILOTKIT_WALLTIME_S'], os.environ['PILOTKIT_MANAGER_ADDR'])",
]


def spec(pid="p", cores=2, walltime=60):
    return PilotSpec(pid, "local", 1, cores, walltime)


def wait_exit(table, handle, timeout=10):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        status = table.poll(handle)
        if not status.running:
            return status
        time.sleep(0.02)
    raise AssertionError("process did not exit")


def wait_for_text(path, text, timeout=10):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if path.exists() and text in path.read_text():
            return
        time.sleep(0.02)
    raise AssertionError(f"{text!r} never appeared in {path}")


def test_agent_gets_its_configuration_from_the_environment(tmp_path):
    table = ProcessTable(ENV_DUMP, workdir=tmp_path)
    h = table.launch_pilot_process(spec(), "127.0.0.1:7000")
    assert h.configured_cores == 2 and h.os_pid > 0
    assert wait_exit(table, h).exit_code == 0
    assert (tmp_path / "p" / "agent.log").read_text().split() == ["p", "2", "60", "127.0.0.1:7000"]


def test_poll_reports_running_then_exit_code(tmp_path):
    table = ProcessTable([sys.executable, "-c", "import time, sys; time.sleep(0.3); sys.exit(4)"], workdir=tmp_path)
    h = table.launch_pilot_process(spec(), "127.0.0.1:1")
    assert table.poll(h).running
    assert wait_exit(table, h).exit_code == 4


def test_graceful_terminate(tmp_path):
    table = ProcessTable(SLEEPER, workdir=tmp_path)
    h = table.launch_pilot_process(spec(), "127.0.0.1:1")
    start = time.monotonic()
    assert table.terminate(h) is True
    assert time.monotonic() - start < 2
    assert not table.poll(h).running


def test_hung_agent_is_killed_after_grace(tmp_path):
    table = ProcessTable(STUBBORN, workdir=tmp_path)
    h = table.launch_pilot_process(spec(), "127.0.0.1:1")
    wait_for_text(tmp_path / "p" / "agent.log", "ready")
    start = time.monotonic()
    table.terminate(h, grace=5.0)
    elapsed = time.monotonic() - start
    assert 4.5 <= elapsed < 8
    assert table.poll(h).exit_code == -9


def test_terminate_is_idempotent(tmp_path):
    table = ProcessTable([sys.executable, "-c", "pass"], workdir=tmp_path)
    h = table.launch_pilot_process(spec(), "127.0.0.1:1")
    wait_exit(table, h)
    assert table.terminate(h) is True
    assert table.terminate(h) is True


def test_duplicate_pilot(tmp_path):
    table = ProcessTable(SLEEPER, workdir=tmp_path)
    table.launch_pilot_process(spec(), "127.0.0.1:1")
    with pytest.raises(DuplicatePilot):
        table.launch_pilot_process(spec(), "127.0.0.1:1")
    table.terminate_all(grace=1)


def test_spawn_failure(tmp_path):
    table = ProcessTable(["/no/such/agent"], workdir=tmp_path)
    with pytest.raises(SpawnFailure):
        table.launch_pilot_process(spec(), "127.0.0.1:1")


def test_unknown_handle(tmp_path):
    table = ProcessTable(SLEEPER, workdir=tmp_path)
    with pytest.raises(UnknownHandle):
        table.poll("ghost")
    with pytest.raises(UnknownHandle):
        table.terminate("ghost")


def local_dcr(max_jobs=2):
    return DcrDescriptor("local", "LocalExec", 1, 4, max_jobs, 600)


def test_backend_reports_job_lifecycle(tmp_path):
    table = ProcessTable([sys.executable, "-c", "import sys; sys.exit(int(__import__('os').environ['PILOTKIT_CORES']) - 2)"], workdir=tmp_path)
    backend = LocalExecBackend(local_dcr(), "127.0.0.1:1", processes=table)
    ok = backend.submit_job(spec("a", cores=2))
    bad = backend.submit_job(spec("b", cores=3))
    assert ok == "local.proc00001"
    events = backend.poll_events()
    assert (ok, JobStatus.RUNNING) in events and (bad, JobStatus.RUNNING) in events
    deadline = time.monotonic() + 10
    seen = {}
    while len(seen) < 2 and time.monotonic() < deadline:
        seen.update(backend.poll_events())
        time.sleep(0.02)
    assert seen == {ok: JobStatus.COMPLETED, bad: JobStatus.FAILED}


def test_backend_queue_limit_and_cancel(tmp_path):
    table = ProcessTable(SLEEPER, workdir=tmp_path)
    backend = LocalExecBackend(local_dcr(max_jobs=1), "127.0.0.1:1", processes=table, grace=1)
    job = backend.submit_job(spec("a"))
    with pytest.raises(QueueFull):
        backend.submit_job(spec("b"))
    backend.cancel_job(job)
    assert backend.query_job(job).status is JobStatus.CANCELED
    deadline = time.monotonic() + 5
    ended = []
    while not ended and time.monotonic() < deadline:
        ended = [e for e in backend.poll_events() if e[1] is JobStatus.CANCELED]
        time.sleep(0.02)
    assert ended == [(job, JobStatus.CANCELED)]
    with pytest.raises(UnknownJob):
        backend.query_job("local.proc99999")


def test_backend_only_runs_pilots(tmp_path):
    backend = LocalExecBackend(local_dcr(), "127.0.0.1:1", processes=ProcessTable(SLEEPER, workdir=tmp_path))
    with pytest.raises(TypeError):
        backend.submit_job("not a pilot")
