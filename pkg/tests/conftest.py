import sys
from pathlib import Path

import pytest

from pilotkit import events
from pilotkit.checks import validate_log

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = pytest.StashKey[list]()

_created: list = []
_original_init = events.EventLog.__init__


def _tracking_init(self, *args, **kwargs):
    _original_init(self, *args, **kwargs)
    _created.append(self)


events.EventLog.__init__ = _tracking_init


def pytest_configure(config):
    config.addinivalue_line("markers", "unchecked_log: skip the automatic event-log validation")
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; a test that dies before recording is reported as FAIL."""
    lines = request.config.stash[ACCEPTANCE]
    recorded = []

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append((number, line))
        recorded.append(number)
        print(line)
        return ok

    yield record
    # tests are named test_criterion_NN_...; an exception before record() still gets a line
    parts = request.node.name.split("_")
    if not recorded and len(parts) > 2 and parts[1] == "criterion":
        number = int(parts[2])
        lines.append((number, f"criterion {number:>2} FAIL  {request.node.name}: did not complete"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def validate_event_logs(request):
    """Every event log produced by a test must pass the replay validator."""
    _created.clear()
    yield
    logs, _created[:] = list(_created), []
    if request.node.get_closest_marker("unchecked_log"):
        return
    for log in logs:
        problems = validate_log(log.snapshot())
        assert not problems, "\n".join(problems[:20])
