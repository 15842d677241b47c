"""Direct-versus-pilot comparison experiments on the batch simulator."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .dcrsim import SimConfig
from .errors import ConfigError
from .metrics import ExperimentReport, write_reports
from .model import PilotSpec, WorkloadSpec, load_json
from .pilots import DemandStats, PilotShape, ProvisioningMode, ProvisioningPolicy, auto_provision
from .sim import SimRuntime, SimSettings


@dataclass(frozen=True)
class Scenario:
    name: str
    sim: SimConfig
    workload: WorkloadSpec
    pilot_shape: PilotShape
    overallocation: float = 1.0
    dispatch_overhead: float = 0.0
    drain_margin: float = 1.0

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], path: str | None = None) -> Scenario:
        allowed = {"name", "sim", "workload", "pilot_shape", "overallocation", "dispatch_overhead", "drain_margin"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ConfigError("unknown field in scenario", path=path, field=unknown[0])
        for name in ("sim", "workload", "pilot_shape"):
            if name not in doc:
                raise ConfigError("required field is missing", path=path, field=name)
        shape = doc["pilot_shape"]
        try:
            pilot_shape = PilotShape(int(shape["nodes"]), int(shape["cores_per_node"]), float(shape["walltime"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad pilot shape: {exc}", path=path, field="pilot_shape") from None
        return cls(
            name=str(doc.get("name", "scenario")),
            sim=SimConfig.from_dict(doc["sim"], path=path),
            workload=WorkloadSpec.from_dict(doc["workload"], path=path),
            pilot_shape=pilot_shape,
            overallocation=float(doc.get("overallocation", 1.0)),
            dispatch_overhead=float(doc.get("dispatch_overhead", 0.0)),
            drain_margin=float(doc.get("drain_margin", 1.0)),
        )

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        return cls.from_dict(load_json(path), path=str(path))

    @property
    def policy(self) -> ProvisioningPolicy:
        return ProvisioningPolicy(
            mode=ProvisioningMode.IMPLICIT,
            overallocation=self.overallocation,
            default_pilot_shape=self.pilot_shape,
        )

    def settings(self) -> SimSettings:
        return SimSettings(dispatch_overhead=self.dispatch_overhead, drain_margin=self.drain_margin)


def canonical_scenario() -> Scenario:
    """One 4-core node, 60 s scheduler cycle, 40 one-core 10 s tasks, one 4-core 300 s pilot."""
    return Scenario.from_dict({
        "name": "canonical",
        "sim": {
            "descriptor": {
                "dcr_id": "dcr",
                "middleware": "BatchSim",
                "nodes": 1,
                "cores_per_node": 4,
                "max_concurrent_jobs": 100,
                "max_job_walltime": 3600,
                "scheduler_cycle": 60,
            },
        },
        "workload": {
            "workload_id": "bot40",
            "tasks": [
                {"task_id": f"t{i:02d}", "executable": "/bin/true", "cores": 1, "estimated_duration": 10}
                for i in range(40)
            ],
        },
        "pilot_shape": {"nodes": 1, "cores_per_node": 4, "walltime": 300},
    })


def _finish(scenario: Scenario, mode: str, rt: SimRuntime, log_dir: Path | None) -> ExperimentReport:
    path = None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        path = str(rt.events.write(log_dir / f"{scenario.name}-{mode}.jsonl"))
    return ExperimentReport.from_log(scenario.name, mode, rt.events.snapshot(), path)


def run_direct(scenario: Scenario, log_dir: str | Path | None = None) -> tuple[ExperimentReport, SimRuntime]:
    """Every task is its own DCR job."""
    rt = SimRuntime(scenario.sim, settings=scenario.settings())
    rt.submit_direct(scenario.workload)
    rt.run()
    return _finish(scenario, "Direct", rt, Path(log_dir) if log_dir else None), rt


def run_pilot_late(scenario: Scenario, log_dir: str | Path | None = None) -> tuple[ExperimentReport, SimRuntime]:
    """Pilots sized by implicit provisioning; tasks are matched when agents pull."""
    rt = SimRuntime(scenario.sim, provisioning=scenario.policy, settings=scenario.settings())
    rt.submit_workload(scenario.workload)
    rt.run()
    return _finish(scenario, "PilotLate", rt, Path(log_dir) if log_dir else None), rt


def run_pilot_early(scenario: Scenario, log_dir: str | Path | None = None) -> tuple[ExperimentReport, SimRuntime]:
    """Same pilot count as PilotLate, but tasks are pinned round-robin before any pilot is Active."""
    rt = SimRuntime(scenario.sim, settings=scenario.settings())
    descriptor = scenario.sim.descriptor
    tasks = scenario.workload.tasks
    demand = DemandStats(
        total_core_seconds=sum(t.cores * t.estimated_duration for t in tasks),
        max_task_cores=max((t.cores for t in tasks), default=0),
        task_count=len(tasks),
    )
    plan = auto_provision(demand, descriptor, scenario.policy, next_id=rt.pilots.new_pilot_id)
    pilots: list[PilotSpec] = list(plan.pilots)
    for spec in pilots:
        rt.submit_pilot(spec)
    pinned = tuple(
        replace(t, pinned_pilot=pilots[i % len(pilots)].pilot_id) if pilots else t
        for i, t in enumerate(tasks)
    )
    rt.submit_workload(replace(scenario.workload, tasks=pinned))
    rt.run()
    return _finish(scenario, "PilotEarly", rt, Path(log_dir) if log_dir else None), rt


def run_comparison(scenario: Scenario, out_dir: str | Path | None = None) -> tuple[ExperimentReport, ExperimentReport]:
    """Run the workload Direct and PilotLate on identical simulator configs."""
    direct, _ = run_direct(scenario, out_dir)
    pilot, _ = run_pilot_late(scenario, out_dir)
    if out_dir is not None:
        write_reports([direct, pilot], out_dir)
    return direct, pilot


def speedup_line(direct: ExperimentReport, pilot: ExperimentReport) -> str:
    speedup = direct.makespan / pilot.makespan if pilot.makespan > 0 else float("inf")
    return f"direct={direct.makespan:.1f}s pilot={pilot.makespan:.1f}s speedup={speedup:.2f}"


def dump_scenario(scenario: Scenario) -> str:
    """JSON text that loads back into an equal scenario."""
    sim = scenario.sim
    doc = {
        "name": scenario.name,
        "sim": {
            "descriptor": sim.descriptor.to_dict(),
            "seed": sim.seed,
            "background_jobs": [[b.arrival_time, b.nodes, b.duration] for b in sim.background_jobs],
            "job_dispatch_overhead": sim.job_dispatch_overhead,
            "backfill": sim.backfill,
        },
        "workload": scenario.workload.to_dict(),
        "pilot_shape": {
            "nodes": scenario.pilot_shape.nodes,
            "cores_per_node": scenario.pilot_shape.cores_per_node,
            "walltime": scenario.pilot_shape.walltime,
        },
        "overallocation": scenario.overallocation,
        "dispatch_overhead": scenario.dispatch_overhead,
        "drain_margin": scenario.drain_margin,
    }
    return json.dumps(doc, indent=2) + "\n"
