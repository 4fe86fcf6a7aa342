"""arax-bench: run workloads and emit CSV metrics.

    arax-bench run <workload.json> --server-config <devices.json> \
        --mode {shared|timeslice} --clock {real|virtual} --seed N --out m.csv
    arax-bench scenario <name> -o workload.json
    arax-bench list
"""

from __future__ import annotations

import argparse
import json
import sys

from .report import report
from .runner import run_workload
from .workload import SCENARIOS, WorkloadSpec, scenario


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="arax-bench")
    sub = p.add_subparsers(dest="cmd", required=True)

    runp = sub.add_parser("run", help="run a workload file")
    runp.add_argument("workload")
    runp.add_argument("--server-config", required=True)
    runp.add_argument("--mode", choices=["shared", "timeslice"], default="shared")
    runp.add_argument("--clock", choices=["real", "virtual"], default="virtual")
    runp.add_argument("--seed", type=int, default=None)
    runp.add_argument("--out", default=None)
    runp.add_argument("--policy", choices=["roundrobin", "elastic"], default=None)
    runp.add_argument("--arena-mb", type=int, default=256)

    scen = sub.add_parser("scenario", help="write a named scenario to a file")
    scen.add_argument("name", choices=SCENARIOS)
    scen.add_argument("-o", "--out", default="-")

    sub.add_parser("list", help="list scenario names")

    args = p.parse_args(argv)

    if args.cmd == "list":
        for s in SCENARIOS:
            print(s)
        return 0

    if args.cmd == "scenario":
        spec = scenario(args.name)
        if args.out == "-":
            json.dump(spec.to_dict(), sys.stdout, indent=2, sort_keys=True)
            print()
        else:
            spec.save(args.out)
            print(f"wrote {args.out}")
        return 0

    spec = WorkloadSpec.from_file(args.workload)
    if args.seed is not None:
        spec.seed = args.seed
    with open(args.server_config) as f:
        cfg = json.load(f)
    metrics = run_workload(
        spec,
        cfg,
        mode=args.mode,
        clock=args.clock,
        policy=args.policy,
        arena_bytes=args.arena_mb << 20,
    )
    if args.out:
        report(metrics, args.out)
        print(f"wrote {args.out}")
    print(
        f"workload={metrics.workload} makespan={metrics.makespan_ms:.2f}ms "
        f"migrations={metrics.migrations} "
        f"turnarounds={[round(i.turnaround_ms, 2) for i in metrics.instances]}"
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
