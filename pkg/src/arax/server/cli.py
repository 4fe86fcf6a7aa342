"""arax-server: serve a shared-memory segment until interrupted.

    arax-server --shm-name work --devices devices.json \
        --policy roundrobin --metrics out.csv [--size-mb 256]

The device config file lists one object per device:

    {"devices": [{"name": "gpu0", "type": "SIM_GPU", "speed_factor": 0.0,
                  "streams": 4, "mem_capacity_mb": 256,
                  "kernel_set": ["*"], "reload_penalty_ms": 0}]}
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import signal

from ..backends.device import DeviceDescriptor
from ..server.core import Server
from ..shm.arena import SharedArena


def load_devices(path):
    with open(path) as f:
        cfg = json.load(f)
    return [DeviceDescriptor.from_dict(d, i) for i, d in enumerate(cfg["devices"])], cfg


def write_metrics(server, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "value"])
        w.writerow(["tasks_completed", server.tasks_completed])
        w.writerow(["bytes_transferred", server.bytes_transferred])
        w.writerow(["migrations", server.migration_count])
        w.writerow(["migration_bytes", server.migration_bytes])
        w.writerow(["migration_rollbacks", server.migration_rollbacks])
        for d in server.devices:
            w.writerow([f"busy_ms.{d.desc.name}", f"{d.busy_ms:.3f}"])


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="arax-server")
    p.add_argument("--shm-name", required=True)
    p.add_argument("--devices", required=True, help="device config JSON")
    p.add_argument("--policy", choices=["roundrobin", "elastic"], default="roundrobin")
    p.add_argument("--metrics", default=None, help="CSV path written on shutdown")
    p.add_argument("--size-mb", type=int, default=256, help="arena size when creating")
    p.add_argument("--timeslice", action="store_true", help="time-slice baseline mode")
    p.add_argument("--accel-threads", type=int, default=2)
    p.add_argument("--log-level", default="info")
    args = p.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="[%(asctime)s] %(levelname)s %(name)s: %(message)s",
    )

    descs, _cfg = load_devices(args.devices)
    arena = SharedArena.create(args.shm_name, args.size_mb << 20)
    server = Server(
        arena,
        descs,
        policy=args.policy,
        timeslice=args.timeslice,
        accel_threads_per_device=args.accel_threads,
    )
    server.register_builtin_kernels()
    server.start()

    stop = {"flag": False}

    def _stop(signum, frame):
        stop["flag"] = True

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    print(f"arax-server ready on segment {args.shm_name!r}", flush=True)
    try:
        while not stop["flag"]:
            signal.pause()
    except KeyboardInterrupt:
        pass
    server.shutdown()
    if args.metrics:
        write_metrics(server, args.metrics)
    arena.close()
    arena.unlink()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
