"""Random scenario generation shared by the property tests."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from pilotkit.dcrsim import SimConfig
from pilotkit.errors import PilotkitError
from pilotkit.model import DcrDescriptor, PilotSpec, TaskSpec, WorkloadSpec
from pilotkit.pilots import PilotShape, ProvisioningPolicy
from pilotkit.sim import SimRuntime, SimSettings
from pilotkit.workload import SchedulingPolicy


def bot(n: int, cores: int = 1, duration: float = 10.0, prefix: str = "t", workload_id: str = "w") -> WorkloadSpec:
    return WorkloadSpec(
        workload_id,
        tuple(TaskSpec(f"{prefix}{i:02d}", "/bin/true", cores=cores, estimated_duration=duration) for i in range(n)),
    )


def dcr(dcr_id="dcr", nodes=1, cores=4, cycle=60, max_jobs=100, walltime=3600) -> DcrDescriptor:
    return DcrDescriptor(dcr_id, "BatchSim", nodes, cores, max_jobs, walltime, scheduler_cycle=cycle)


def random_dag(rng: random.Random, n: int, density: float) -> list[tuple[int, int]]:
    order = list(range(n))
    rng.shuffle(order)
    return [(order[i], order[j]) for i in range(n) for j in range(i + 1, n) if rng.random() < density]


@dataclass
class RandomCase:
    seed: int
    configs: list[SimConfig]
    pilots: list[PilotSpec]
    workloads: list[tuple[float, WorkloadSpec]]
    settings: SimSettings
    provisioning: ProvisioningPolicy | None = None
    scheduling: SchedulingPolicy | None = None
    max_attempts: int = 1
    rebind: bool = False
    cancels: list[tuple[float, str]] = field(default_factory=list)

    def build(self, log_path=None) -> SimRuntime:
        rt = SimRuntime(
            self.configs,
            provisioning=self.provisioning,
            scheduling=self.scheduling,
            max_attempts=self.max_attempts,
            rebind_on_pilot_loss=self.rebind,
            settings=self.settings,
            log_path=log_path,
        )
        for spec in self.pilots:
            rt.submit_pilot(spec)
        for at, w in self.workloads:
            if at == 0:
                rt.submit_workload(w)
            else:
                rt.at(at, lambda now, w=w: _submit(rt, w))
        for at, entity in self.cancels:
            rt.at(at, lambda now, e=entity: _cancel(rt, e))
        return rt

    def run(self, log_path=None) -> SimRuntime:
        rt = self.build(log_path)
        rt.run()
        return rt


def _submit(rt: SimRuntime, w: WorkloadSpec) -> None:
    try:
        rt.submit_workload(w)
    except PilotkitError:  # e.g. pinned to a pilot that has already ended
        pass


def _cancel(rt: SimRuntime, entity_id: str) -> None:
    try:
        rt.cancel(entity_id)
    except PilotkitError:  # already terminal is fine for a random poke
        pass


def random_case(seed: int, *, max_tasks: int = 20, max_pilots: int = 3, pinned: float = 0.0,
                dag: float = 0.0, chaos: bool = True) -> RandomCase:
    rng = random.Random(seed)
    configs = []
    for d in range(rng.randint(1, 2)):
        nodes = rng.randint(1, 3)
        descriptor = dcr(
            f"dcr{d}", nodes=nodes, cores=rng.choice([1, 2, 4, 8]), cycle=rng.choice([10, 30, 60]),
            max_jobs=rng.randint(max_pilots, 40), walltime=2000,
        )
        background = [
            (round(rng.uniform(0, 200), 1), rng.randint(1, nodes), round(rng.uniform(5, 150), 1))
            for _ in range(rng.randint(0, 3) if chaos else 0)
        ]
        configs.append(SimConfig(descriptor, seed=seed, background_jobs=tuple(background)))

    implicit = chaos and rng.random() < 0.25
    pilots = []
    if not implicit:
        for i in range(rng.randint(1, max_pilots)):
            d = rng.choice(configs).descriptor
            pilots.append(PilotSpec(
                f"p{i}", d.dcr_id, rng.randint(1, d.nodes), rng.randint(1, d.cores_per_node),
                walltime=rng.choice([120.0, 400.0, 1500.0]),
            ))
    provisioning = None
    biggest = max((p.total_cores for p in pilots), default=1)
    if implicit:
        d = configs[0].descriptor
        shape = PilotShape(rng.randint(1, d.nodes), rng.randint(1, d.cores_per_node), rng.choice([200.0, 600.0]))
        provisioning = ProvisioningPolicy("Implicit", overallocation=rng.choice([1.0, 1.5]),
                                          default_pilot_shape=shape, max_pilots=max_pilots)
        biggest = shape.cores

    n = rng.randint(0, max_tasks)
    tasks = []
    for i in range(n):
        cores = rng.randint(1, biggest)
        pin = None
        if pilots and rng.random() < pinned:
            fits = [p for p in pilots if p.total_cores >= cores]
            pin = rng.choice(fits).pilot_id if fits else None
        tasks.append(TaskSpec(
            f"t{i:02d}", "/bin/true", cores=cores,
            estimated_duration=round(rng.uniform(1, 60), 1), pinned_pilot=pin,
        ))
    edges = random_dag(rng, n, dag) if dag else []
    deps = tuple((tasks[a].task_id, tasks[b].task_id) for a, b in edges)
    workloads = []
    if chaos and n > 2 and rng.random() < 0.3:
        cut = rng.randint(1, n - 1)
        first = {t.task_id for t in tasks[:cut]}
        keep = lambda part: tuple(e for e in deps if (e[0] in first) == part and (e[1] in first) == part)  # noqa: E731
        workloads.append((0.0, WorkloadSpec("w0", tuple(tasks[:cut]), keep(True))))
        workloads.append((float(rng.choice([30, 90, 250])), WorkloadSpec("w1", tuple(tasks[cut:]), keep(False))))
    else:
        workloads.append((0.0, WorkloadSpec("w0", tuple(tasks), deps)))

    failures = {t.task_id: rng.randint(1, 2) for t in tasks if chaos and rng.random() < 0.15}
    delays = {p.pilot_id: rng.choice([0.0, 5.0, None]) for p in pilots if chaos and rng.random() < 0.3}
    settings = SimSettings(
        dispatch_overhead=rng.choice([0.0, 0.0, 0.5]) if chaos else 0.0,
        bootstrap_delays=delays,
        task_failures=failures,
    )
    cancels = []
    if chaos and pilots and rng.random() < 0.2:
        cancels.append((float(rng.choice([45, 130, 300])), rng.choice(pilots).pilot_id))
    if chaos and tasks and rng.random() < 0.1:
        cancels.append((float(rng.choice([20, 70])), rng.choice(tasks).task_id))
    return RandomCase(
        seed=seed,
        configs=configs,
        pilots=pilots,
        workloads=workloads,
        settings=settings,
        provisioning=provisioning,
        scheduling=SchedulingPolicy(rng.choice(["Fifo", "LargestCoresFirst"]), rng.choice([0, 0, 2])),
        max_attempts=rng.choice([1, 2]) if chaos else 1,
        rebind=chaos and rng.random() < 0.5,
        cancels=cancels,
    )
