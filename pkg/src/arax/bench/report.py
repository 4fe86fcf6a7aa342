"""CSV reporting for bench metrics: one row per instance plus a summary row.

Writing the same metrics twice produces byte-identical files, and
parse_metrics() reads a report back into a Metrics object.
"""

from __future__ import annotations

import csv

from .runner import InstanceMetrics, Metrics

COLUMNS = [
    "row_type",
    "workload",
    "seed",
    "mode",
    "clock",
    "index",
    "name",
    "priority",
    "queues",
    "arrival_ms",
    "start_ms",
    "end_ms",
    "turnaround_ms",
    "tasks",
    "bytes_synced",
    "digest",
    "makespan_ms",
    "migrations",
    "migration_bytes",
    "issue_p50_us",
    "issue_p99_us",
    "device_busy_ms",
    "extras",
]


def _encode_kv(d) -> str:
    return "|".join(f"{k}={d[k]}" for k in sorted(d))


def _decode_kv(s: str) -> dict:
    out = {}
    if not s:
        return out
    for part in s.split("|"):
        k, _, v = part.partition("=")
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def report(m: Metrics, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(COLUMNS)
        for im in m.instances:
            w.writerow(
                [
                    "instance",
                    m.workload,
                    m.seed,
                    m.mode,
                    m.clock,
                    im.index,
                    im.name,
                    im.priority,
                    im.queues,
                    f"{im.arrival_ms:.6f}",
                    f"{im.start_ms:.6f}",
                    f"{im.end_ms:.6f}",
                    f"{im.turnaround_ms:.6f}",
                    im.tasks,
                    im.bytes_synced,
                    im.digest,
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    _encode_kv(im.extras),
                ]
            )
        w.writerow(
            [
                "summary",
                m.workload,
                m.seed,
                m.mode,
                m.clock,
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                "",
                sum(im.tasks for im in m.instances),
                sum(im.bytes_synced for im in m.instances),
                "",
                f"{m.makespan_ms:.6f}",
                m.migrations,
                m.migration_bytes,
                f"{m.issue_p50_us:.3f}",
                f"{m.issue_p99_us:.3f}",
                _encode_kv(m.device_busy_ms),
                _encode_kv(m.extras),
            ]
        )


def parse_metrics(path) -> Metrics:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"empty metrics file {path}")
    m = None
    for row in rows:
        if m is None:
            m = Metrics(row["workload"], int(row["seed"]), row["mode"], row["clock"])
        if row["row_type"] == "instance":
            im = InstanceMetrics(
                int(row["index"]),
                row["name"],
                row["priority"],
                int(row["queues"]),
                float(row["arrival_ms"]),
            )
            im.start_ms = float(row["start_ms"])
            im.end_ms = float(row["end_ms"])
            im.turnaround_ms = float(row["turnaround_ms"])
            im.tasks = int(row["tasks"])
            im.bytes_synced = int(row["bytes_synced"])
            im.digest = row["digest"]
            im.extras = _decode_kv(row["extras"])
            m.instances.append(im)
        else:
            m.makespan_ms = float(row["makespan_ms"])
            m.migrations = int(row["migrations"])
            m.migration_bytes = int(row["migration_bytes"])
            m.issue_p50_us = float(row["issue_p50_us"])
            m.issue_p99_us = float(row["issue_p99_us"])
            m.device_busy_ms = _decode_kv(row["device_busy_ms"])
            m.extras = _decode_kv(row["extras"])
    return m
