"""Workload specifications and the named benchmark scenarios.

A workload is a list of app instances, each with a priority, a queue count,
an arrival offset, and a task program.  Programs are small dictionaries
interpreted by the runner; everything is deterministic given the workload
seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

KIB = 1024
MIB = 1024 * 1024

SCENARIOS = (
    "launch_overhead",
    "transfer_sweep",
    "sharing_2x",
    "sharing_4x",
    "elastic_priority",
    "migration_stress",
    "hetero_elastic",
)


@dataclass
class InstanceSpec:
    name: str
    program: dict
    priority: str = "low"
    queues: int = 1
    arrival_ms: float = 0.0

    def to_dict(self):
        return {
            "name": self.name,
            "priority": self.priority,
            "queues": self.queues,
            "arrival_ms": self.arrival_ms,
            "program": self.program,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            program=d["program"],
            priority=d.get("priority", "low"),
            queues=int(d.get("queues", 1)),
            arrival_ms=float(d.get("arrival_ms", 0.0)),
        )


@dataclass
class WorkloadSpec:
    name: str
    instances: list = field(default_factory=list)
    seed: int = 0

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "instances": [i.to_dict() for i in self.instances],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d.get("name", "workload"),
            seed=int(d.get("seed", 0)),
            instances=[InstanceSpec.from_dict(i) for i in d.get("instances", [])],
        )

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


# --------------------------------------------------------------- programs

def relax_loop(n=64, passes=2, iterations=100, sync_every=0):
    return {
        "kind": "kernel_loop",
        "kernel": "grid_relax",
        "n": n,
        "passes": passes,
        "iterations": iterations,
        "sync_every": sync_every,
    }


def gaussian_loop(n=256, iterations=100):
    return {"kind": "kernel_loop", "kernel": "gaussian_step", "n": n, "iterations": iterations}


def path_loop(width=4096, rows=64, iterations=50):
    # transfers the grid every iteration: low compute-to-communication ratio
    return {
        "kind": "kernel_loop",
        "kernel": "path_dp",
        "width": width,
        "rows": rows,
        "iterations": iterations,
    }


def noop_burst(count=10000, duration_ms=0.0):
    return {"kind": "noop_burst", "count": count, "duration_ms": duration_ms}


def increment_chain(count=100, init=1):
    return {"kind": "increment_chain", "count": count, "init": init}


def transfer_burst(nbytes, count=4, window=2):
    return {"kind": "transfer_burst", "bytes": nbytes, "count": count, "window": window}


def random_tasks(count=60, kernels=("grid_relax", "vec_increment", "path_dp"), max_n=48):
    return {"kind": "random_tasks", "count": count, "kernels": list(kernels), "max_n": max_n}


# --------------------------------------------------------------- scenarios

def scenario(name: str, **overrides) -> WorkloadSpec:
    """Deterministic spec for one of the named experiments."""
    if name == "launch_overhead":
        count = overrides.get("count", 10000)
        return WorkloadSpec(
            name,
            [InstanceSpec("empty-kernel", noop_burst(count=count))],
        )

    if name == "transfer_sweep":
        sizes = overrides.get("sizes", [4 * KIB, 64 * KIB, 1 * MIB, 16 * MIB, 64 * MIB])
        count = overrides.get("count", 4)
        return WorkloadSpec(
            name,
            [InstanceSpec("xfer", {"kind": "transfer_sweep", "sizes": list(sizes), "count": count})],
        )

    if name in ("sharing_2x", "sharing_4x"):
        n_inst = 2 if name == "sharing_2x" else 4
        kernel = overrides.get("kernel", "grid_relax")
        iters = overrides.get("iterations", 60)
        if kernel == "gaussian_step":
            prog = gaussian_loop(n=overrides.get("n", 384), iterations=iters)
        else:
            prog = relax_loop(n=overrides.get("n", 96), passes=4, iterations=iters)
        return WorkloadSpec(
            name, [InstanceSpec(f"app{i}", dict(prog)) for i in range(n_inst)]
        )

    if name == "elastic_priority":
        iters = overrides.get("iterations", 150)
        n = overrides.get("n", 384)
        arrival = overrides.get("high_arrival_ms", 500.0)
        return WorkloadSpec(
            name,
            [
                InstanceSpec(
                    "low", gaussian_loop(n=n, iterations=iters), priority="low", queues=2
                ),
                InstanceSpec(
                    "high",
                    gaussian_loop(n=n, iterations=iters),
                    priority="high",
                    queues=1,
                    arrival_ms=arrival,
                ),
            ],
        )

    if name == "migration_stress":
        n_inst = overrides.get("instances", 3)
        count = overrides.get("count", 60)
        return WorkloadSpec(
            name,
            [
                InstanceSpec(f"app{i}", random_tasks(count=count), queues=2)
                for i in range(n_inst)
            ],
            seed=overrides.get("seed", 7),
        )

    if name == "hetero_elastic":
        return WorkloadSpec(
            name,
            [
                InstanceSpec("relax", relax_loop(n=96, passes=4, iterations=80), queues=2),
                InstanceSpec("gauss", gaussian_loop(n=256, iterations=80), queues=2),
                InstanceSpec("paths", path_loop(width=2048, rows=32, iterations=40)),
            ],
        )

    raise ValueError(f"unknown scenario {name!r} (known: {', '.join(SCENARIOS)})")
