import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pilotkit.errors import (
    ConfigError,
    CyclicDependency,
    DanglingDependency,
    DuplicateTaskId,
    IllegalTransition,
    OversizedJob,
    WalltimeExceedsLimit,
)
from pilotkit.model import (
    DcrDescriptor,
    PilotEvent,
    PilotSpec,
    PilotState,
    PilotStatus,
    ResourceQuantity,
    TaskEvent,
    TaskSpec,
    TaskState,
    TaskStatus,
    WorkloadClass,
    WorkloadSpec,
    classify_workload,
    load_json,
    transition_pilot,
    transition_task,
    validate_workload,
)


def task(tid, **kw):
    kw.setdefault("executable", "/bin/true")
    return TaskSpec(tid, **kw)


def workload(ids, edges=(), **kw):
    return WorkloadSpec("w", tuple(task(i) for i in ids), tuple(edges), **kw)


# -- specs ------------------------------------------------------------------


def test_task_spec_round_trips_through_json():
    spec = TaskSpec(
        "t1", "python", ("-c", "print(1)"), {"A": "1"}, cores=2, estimated_duration=3.5,
        input_refs=("in.txt",), output_refs=("out.txt",), pinned_pilot="p1",
    )
    again = TaskSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


@pytest.mark.parametrize("field, value", [("cores", 0), ("cores", 1.5), ("estimated_duration", 0), ("estimated_duration", -1)])
def test_task_spec_rejects_bad_numbers(field, value):
    doc = {"task_id": "t", "executable": "x", "cores": 1, "estimated_duration": 1, field: value}
    with pytest.raises(ConfigError) as err:
        TaskSpec.from_dict(doc)
    assert err.value.field == field


def test_unknown_task_field_is_rejected_with_its_name():
    with pytest.raises(ConfigError) as err:
        TaskSpec.from_dict({"task_id": "t", "executable": "x", "cores": 1, "estimated_duration": 1, "cpus": 2})
    assert err.value.field == "cpus"


def test_workload_errors_name_the_task_index(tmp_path):
    doc = {"workload_id": "w", "tasks": [
        {"task_id": "a", "executable": "x", "cores": 1, "estimated_duration": 1},
        {"task_id": "b", "executable": "x", "cores": -2, "estimated_duration": 1},
    ]}
    with pytest.raises(ConfigError) as err:
        WorkloadSpec.from_dict(doc, path="w.json")
    assert err.value.field == "tasks[1].cores"
    assert "w.json" in str(err.value)


def test_load_json_reports_line_and_column(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "a": 1,\n  oops\n}\n')
    with pytest.raises(ConfigError) as err:
        load_json(bad)
    assert "line 3" in str(err.value) and str(bad) in str(err.value)


def test_dcr_descriptor_requires_cycle_for_batch_sim():
    with pytest.raises(ConfigError) as err:
        DcrDescriptor.from_dict({
            "dcr_id": "d", "middleware": "BatchSim", "nodes": 1, "cores_per_node": 1,
            "max_concurrent_jobs": 1, "max_job_walltime": 10,
        })
    assert err.value.field == "scheduler_cycle"
    local = DcrDescriptor.from_dict({
        "dcr_id": "d", "middleware": "LocalExec", "nodes": 1, "cores_per_node": 2,
        "max_concurrent_jobs": 1, "max_job_walltime": 10,
    })
    assert local.total_cores == 2
    assert DcrDescriptor.from_dict(local.to_dict()) == local


def test_pilot_spec_must_fit_its_dcr():
    d = DcrDescriptor("d", "BatchSim", 4, 8, 10, 300, scheduler_cycle=60)
    PilotSpec("p", "d", 4, 8, 300).check_fits(d)
    with pytest.raises(OversizedJob):
        PilotSpec("p", "d", 5, 8, 300).check_fits(d)
    with pytest.raises(OversizedJob):
        PilotSpec("p", "d", 1, 9, 300).check_fits(d)
    with pytest.raises(WalltimeExceedsLimit):
        PilotSpec("p", "d", 1, 1, 301).check_fits(d)


def test_resource_quantity_is_non_negative():
    with pytest.raises((ConfigError, ValueError)):
        ResourceQuantity("Cores", -1)
    assert ResourceQuantity("Cores", 0).amount == 0


# -- validation -------------------------------------------------------------


def test_chain_is_valid_in_topological_order():
    w = validate_workload(workload("abc", [("a", "b"), ("b", "c")]))
    assert w.order == ("a", "b", "c")
    assert all(s.status is TaskStatus.PENDING for s in w.initial_states().values())


def test_two_cycle_is_rejected():
    with pytest.raises(CyclicDependency):
        validate_workload(workload("ab", [("a", "b"), ("b", "a")]))


def test_dangling_edge_is_rejected():
    with pytest.raises(DanglingDependency):
        validate_workload(workload("a", [("a", "x")]))


def test_duplicate_ids_are_rejected():
    with pytest.raises(DuplicateTaskId):
        validate_workload(workload("aa"))


def _has_topological_order(n, edges):
    """Oracle: try every permutation."""
    for perm in itertools.permutations(range(n)):
        pos = {v: i for i, v in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in edges):
            return True
    return False


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 7).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=12))
))
def test_validation_agrees_with_permutation_oracle(case):
    n, edges = case
    ids = [f"n{i}" for i in range(n)]
    spec = workload(ids, [(ids[a], ids[b]) for a, b in edges])
    expected = _has_topological_order(n, edges)
    if expected:
        w = validate_workload(spec)
        pos = {t: i for i, t in enumerate(w.order)}
        assert sorted(w.order) == sorted(ids)
        assert all(pos[ids[a]] < pos[ids[b]] for a, b in edges)
    else:
        with pytest.raises(CyclicDependency):
            validate_workload(spec)


def test_eight_node_graphs_against_oracle():
    import random
    rng = random.Random(8)
    for _ in range(40):
        edges = [(a, b) for a in range(8) for b in range(8) if rng.random() < 0.12]
        ids = [f"n{i}" for i in range(8)]
        spec = workload(ids, [(ids[a], ids[b]) for a, b in edges])
        if _has_topological_order(8, edges):
            validate_workload(spec)
        else:
            with pytest.raises(CyclicDependency):
                validate_workload(spec)


# -- classification ---------------------------------------------------------


def test_identical_independent_tasks_are_a_bag_of_tasks():
    assert classify_workload(validate_workload(workload("abcde"))) is WorkloadClass.BAG_OF_TASKS


def test_dependencies_make_a_workflow():
    assert classify_workload(validate_workload(workload("ab", [("a", "b")]))) is WorkloadClass.WORKFLOW


def test_singleton_is_a_bag_of_tasks():
    assert classify_workload(validate_workload(workload("a"))) is WorkloadClass.BAG_OF_TASKS


def test_coupling_and_heterogeneity():
    coupled = WorkloadSpec("w", (task("a"), task("b")), coupling_flag=True)
    assert classify_workload(validate_workload(coupled)) is WorkloadClass.COUPLED_ENSEMBLE
    mixed = WorkloadSpec("w", (task("a"), task("b", cores=2)))
    assert classify_workload(validate_workload(mixed)) is WorkloadClass.ENSEMBLE
    env_only = WorkloadSpec("w", (task("a"), task("b", environment={"X": "1"})))
    assert classify_workload(validate_workload(env_only)) is WorkloadClass.BAG_OF_TASKS


@given(st.lists(st.tuples(st.sampled_from(["x", "y"]), st.integers(1, 2)), min_size=1, max_size=6), st.randoms())
def test_classification_ignores_task_order(kinds, rnd):
    tasks = [task(f"t{i}", executable=e, cores=c) for i, (e, c) in enumerate(kinds)]
    shuffled = list(tasks)
    rnd.shuffle(shuffled)
    a = classify_workload(validate_workload(WorkloadSpec("w", tuple(tasks))))
    b = classify_workload(validate_workload(WorkloadSpec("w", tuple(shuffled))))
    assert a is b


# -- state machines ---------------------------------------------------------


def test_task_transition_examples():
    assert transition_task(TaskState(TaskStatus.READY), TaskEvent.DISPATCH).status is TaskStatus.DISPATCHED
    with pytest.raises(IllegalTransition):
        transition_task(TaskState(TaskStatus.DONE), TaskEvent.DISPATCH)
    retried = transition_task(TaskState(TaskStatus.FAILED, attempt=1), TaskEvent.RETRY, at=5.0)
    assert retried.status is TaskStatus.READY and retried.attempt == 2
    assert retried.entered_at(TaskStatus.READY) == 5.0


def test_pilot_transition_examples():
    assert transition_pilot(PilotState(PilotStatus.SUBMITTED), PilotEvent.ACTIVATE).status is PilotStatus.ACTIVE
    with pytest.raises(IllegalTransition):
        transition_pilot(PilotState(PilotStatus.DEFINED), PilotEvent.ACTIVATE)
    assert transition_pilot(PilotState(PilotStatus.ACTIVE), PilotEvent.COMPLETE).status is PilotStatus.DONE


# Independent restatement of the task lifecycle, including the extensions for
# pilot loss, agent rejects and unbinding.
TASK_RULES = {
    ("Pending", "DepsMet"): "Ready",
    ("Pending", "EarlyBound"): "Bound",
    ("Ready", "EarlyBound"): "Bound",
    ("Ready", "Dispatch"): "Dispatched",
    ("Bound", "Dispatch"): "Dispatched",
    ("Dispatched", "Start"): "Running",
    ("Running", "Succeed"): "Done",
    ("Running", "Fail"): "Failed",
    ("Failed", "Retry"): "Ready",
    ("Bound", "Fail"): "Failed",
    ("Dispatched", "Fail"): "Failed",
    ("Dispatched", "Reject"): "Ready",
    ("Bound", "Unbind"): "Pending",
}
for s in ("Pending", "Ready", "Bound", "Dispatched", "Running"):
    TASK_RULES[(s, "Cancel")] = "Canceled"

PILOT_RULES = {
    ("Defined", "Submit"): "Submitted",
    ("Submitted", "Activate"): "Active",
    ("Active", "Complete"): "Done",
    ("Submitted", "Fail"): "Failed",
    ("Active", "Fail"): "Failed",
    ("Defined", "Cancel"): "Canceled",
    ("Submitted", "Cancel"): "Canceled",
    ("Active", "Cancel"): "Canceled",
}


@settings(max_examples=300)
@given(st.lists(st.sampled_from(list(TaskEvent)), max_size=30))
def test_random_task_event_sequences_follow_the_table(events):
    state = TaskState()
    attempts = 1
    for ev in events:
        expected = TASK_RULES.get((state.status.value, ev.value))
        if expected is None:
            with pytest.raises(IllegalTransition):
                transition_task(state, ev)
            continue
        state = transition_task(state, ev)
        attempts += ev is TaskEvent.RETRY
        assert state.status.value == expected
        assert state.attempt == attempts


@settings(max_examples=300)
@given(st.lists(st.sampled_from(list(PilotEvent)), max_size=20))
def test_random_pilot_event_sequences_follow_the_table(events):
    state = PilotState()
    activations = 0
    for ev in events:
        expected = PILOT_RULES.get((state.status.value, ev.value))
        if expected is None:
            with pytest.raises(IllegalTransition):
                transition_pilot(state, ev)
            continue
        state = transition_pilot(state, ev)
        activations += state.status is PilotStatus.ACTIVE
        assert state.status.value == expected
    assert activations <= 1
