"""Workload driver: runs a WorkloadSpec against an in-process server.

One thread per app instance (the cross-process path is exercised separately
by the transport tests; the driver itself keeps everything in one process
so it can run under either clock).  Under a virtual clock the whole run is
deterministic: identical seed and config give identical metrics, excluding
wall-clock fields.
"""

from __future__ import annotations

import hashlib
import math
import random
import struct
import time

from ..backends.device import DeviceDescriptor
from ..client import Session, TaskDescriptor, TaskStatus
from ..clock import RealClock, VirtualClock
from ..errors import AraxError
from ..server.core import Server
from ..shm.arena import SharedArena
from .workload import WorkloadSpec

MIB = 1024 * 1024


class InstanceMetrics:
    FIELDS = (
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
    )

    def __init__(self, index, name, priority, queues, arrival_ms):
        self.index = index
        self.name = name
        self.priority = priority
        self.queues = queues
        self.arrival_ms = arrival_ms
        self.start_ms = 0.0
        self.end_ms = 0.0
        self.turnaround_ms = 0.0
        self.tasks = 0
        self.bytes_synced = 0
        self.digest = ""
        self.extras = {}
        self.issue_samples = []
        self.error = None


class Metrics:
    def __init__(self, workload, seed, mode, clock_kind):
        self.workload = workload
        self.seed = seed
        self.mode = mode
        self.clock = clock_kind
        self.instances = []
        self.makespan_ms = 0.0
        self.device_busy_ms = {}
        self.migrations = 0
        self.migration_bytes = 0
        self.issue_p50_us = 0.0
        self.issue_p99_us = 0.0
        self.extras = {}

    def instance(self, name):
        for m in self.instances:
            if m.name == name:
                return m
        raise KeyError(name)

    def digests(self):
        return {m.name: m.digest for m in self.instances}


class BenchHarness:
    """Arena + server + clock bundle for driving workloads in-process."""

    def __init__(
        self,
        devices,
        *,
        clock="virtual",
        policy="roundrobin",
        timeslice=False,
        arena_bytes=256 * MIB,
        queue_capacity=1024,
        accel_threads_per_device=2,
        migrate_every=0,
        keep_event_log=False,
        kernels=None,
    ):
        self.clock_kind = clock
        self.clock = VirtualClock() if clock == "virtual" else RealClock()
        self._attached = self.clock.attach("bench-driver")
        self.arena = SharedArena.create(None, arena_bytes, same_process=True)
        descs = [
            d if isinstance(d, DeviceDescriptor) else DeviceDescriptor.from_dict(d, i)
            for i, d in enumerate(devices)
        ]
        self.server = Server(
            self.arena,
            descs,
            clock=self.clock,
            policy=policy,
            timeslice=timeslice,
            accel_threads_per_device=accel_threads_per_device,
            migrate_every=migrate_every,
            keep_event_log=keep_event_log,
        )
        self.server.register_builtin_kernels(kernels)
        self.queue_capacity = queue_capacity
        self.mode = "timeslice" if timeslice else "shared"
        self._closed = False
        self.server.start()

    def run(self, spec: WorkloadSpec) -> Metrics:
        metrics = Metrics(spec.name, spec.seed, self.mode, self.clock_kind)
        results = []
        for idx, inst in enumerate(spec.instances):
            im = InstanceMetrics(idx, inst.name, inst.priority, inst.queues, inst.arrival_ms)
            metrics.instances.append(im)
            results.append((inst, im))

        threads = [
            self.clock.spawn(
                self._make_instance_body(inst, im, spec.seed, idx),
                name=f"inst-{inst.name}",
            )
            for idx, (inst, im) in enumerate(results)
        ]
        for t in threads:
            self.clock.join(t)
        self.server.quiesce(timeout=600.0)

        failed = [im for im in metrics.instances if im.error is not None]
        if failed:
            raise AraxError(f"instance {failed[0].name!r} failed: {failed[0].error}")

        starts = [im.start_ms for im in metrics.instances]
        ends = [im.end_ms for im in metrics.instances]
        metrics.makespan_ms = (max(ends) - min(starts)) if ends else 0.0
        metrics.device_busy_ms = {
            d.desc.name: round(d.busy_ms, 6) for d in self.server.devices
        }
        metrics.migrations = self.server.migration_count
        metrics.migration_bytes = self.server.migration_bytes
        samples = sorted(s for im in metrics.instances for s in im.issue_samples)
        if samples:
            metrics.issue_p50_us = samples[len(samples) // 2] * 1e6
            metrics.issue_p99_us = samples[min(len(samples) - 1, len(samples) * 99 // 100)] * 1e6
        for im in metrics.instances:
            metrics.extras.update(
                {f"{im.name}.{k}": v for k, v in im.extras.items()}
            )
        return metrics

    def _make_instance_body(self, inst, im, seed, idx):
        def body():
            try:
                if inst.arrival_ms > 0:
                    self.clock.sleep(inst.arrival_ms / 1e3)
                im.start_ms = self.clock.now() * 1e3
                session = Session(
                    self.arena,
                    clock=self.clock,
                    priority=inst.priority,
                    default_queue_capacity=self.queue_capacity,
                )
                queues = [session.a_acquire() for _ in range(inst.queues)]
                rng = random.Random((seed << 16) ^ (idx * 0x9E3779B1))
                _run_program(self, session, queues, rng, inst.program, im)
                im.end_ms = self.clock.now() * 1e3
                im.turnaround_ms = im.end_ms - im.start_ms
                session.release()
            except Exception as exc:  # surfaced after join
                im.error = exc
                im.end_ms = self.clock.now() * 1e3
                im.turnaround_ms = im.end_ms - im.start_ms

        return body

    def close(self):
        if self._closed:
            return
        self._closed = True
        self.server.shutdown()
        self.clock.detach()
        self.arena.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def run_workload(spec, server_config, *, mode="shared", clock="virtual", out=None, **kw) -> Metrics:
    """Execute a workload against a fresh server built from a config dict."""
    devices = server_config["devices"] if isinstance(server_config, dict) else server_config
    policy = kw.pop("policy", None)
    if policy is None:
        policy = server_config.get("policy", "roundrobin") if isinstance(server_config, dict) else "roundrobin"
    with BenchHarness(
        devices, clock=clock, policy=policy, timeslice=(mode == "timeslice"), **kw
    ) as h:
        metrics = h.run(spec)
    if out:
        from .report import report

        report(metrics, out)
    return metrics


# ----------------------------------------------------------------- programs

def _wait_all(session, handles, im):
    for h in handles:
        st = session.a_wait(h)
        if st != TaskStatus.SUCCESS:
            raise AraxError(f"task failed with {st.name}")
    im.tasks += len(handles)
    handles.clear()


def _issue(session, q, desc, im, sample=False):
    if sample:
        t0 = time.perf_counter()
        h = session.a_issue(q, desc)
        im.issue_samples.append(time.perf_counter() - t0)
    else:
        h = session.a_issue(q, desc)
    return h


def _run_program(harness, session, queues, rng, program, im):
    kind = program["kind"]
    digest = hashlib.sha256()

    if kind == "noop_burst":
        count = int(program["count"])
        dur = float(program.get("duration_ms", 0.0))
        scalars = struct.pack("<d", dur) if dur > 0 else b""
        desc = TaskDescriptor.compute("noop", scalars=scalars)
        sample = len(im.issue_samples) < 20000
        handles = []
        for i in range(count):
            q = queues[i % len(queues)]
            handles.append(_issue(session, q, desc, im, sample=sample))
            if len(handles) >= 512:
                _wait_all(session, handles, im)
        _wait_all(session, handles, im)
        im.digest = digest.hexdigest()
        return

    if kind == "increment_chain":
        count = int(program["count"])
        init = int(program.get("init", 1))
        finals = []
        for q in queues:
            buf = session.a_allocate(8)
            session.a_wait(session.a_sync_to(q, buf, struct.pack("<q", init)))
            im.bytes_synced += 8
            handles = [
                session.a_issue(q, TaskDescriptor.compute("vec_increment", [(buf, "inout")]))
                for _ in range(count)
            ]
            out = bytearray(8)
            h = session.a_sync_from(q, buf, out)
            _wait_all(session, handles, im)
            session.a_wait(h)
            im.tasks += 2
            finals.append(struct.unpack("<q", bytes(out))[0])
            digest.update(out)
            session.a_free(buf)
        im.extras["final_value"] = finals[0]
        im.digest = digest.hexdigest()
        return

    if kind == "kernel_loop":
        _kernel_loop(session, queues, rng, program, im, digest)
        return

    if kind == "transfer_burst":
        _transfer_burst(harness, session, queues, program, im, digest)
        return

    if kind == "transfer_sweep":
        count = int(program.get("count", 4))
        for nbytes in program["sizes"]:
            sub = {"bytes": nbytes, "count": count, "window": program.get("window", 2)}
            subim = InstanceMetrics(im.index, im.name, im.priority, im.queues, 0.0)
            harness.server.quiesce(timeout=120.0)
            _transfer_burst(harness, session, queues, sub, subim, hashlib.sha256())
            im.tasks += subim.tasks
            im.bytes_synced += subim.bytes_synced
            for k, v in subim.extras.items():
                im.extras[f"{k}.{nbytes}"] = v
        im.digest = digest.hexdigest()
        return

    if kind == "random_tasks":
        _random_tasks(session, queues, rng, program, im, digest)
        return

    raise AraxError(f"unknown program kind {program['kind']!r}")


def _kernel_setup(session, q, kernel, program, rng, im):
    """Allocate and initialize the buffers one queue's loop works on."""
    if kernel == "grid_relax":
        n = int(program.get("n", 64))
        buf = session.a_allocate(n * n * 4)
        init = bytearray(n * n * 4)
        struct.pack_into(f"<{n}f", init, 0, *([100.0] * n))  # hot first row
        session.a_wait(session.a_sync_to(q, buf, init))
        im.bytes_synced += len(init)
        scal = struct.pack("<II", n, int(program.get("passes", 1)))
        return [buf], lambda i: ([(buf, "inout")], scal)
    if kernel == "gaussian_step":
        n = int(program.get("n", 256))
        mat = session.a_allocate(n * n * 8)
        vec = session.a_allocate(n * 8)
        seed_row = struct.pack(f"<{n}d", *[1.0 + ((i * 7) % 13) for i in range(n)])
        session.a_wait(session.a_sync_to(q, mat, seed_row))  # rest stays zero
        session.a_wait(session.a_sync_to(q, vec, struct.pack(f"<{n}d", *([1.0] * n))))
        im.bytes_synced += len(seed_row) + n * 8
        span = max(n // 2, 1)
        return [mat, vec], lambda i: (
            [(mat, "inout"), (vec, "inout")],
            struct.pack("<II", n, i % span),
        )
    if kernel == "path_dp":
        w = int(program.get("width", 2048))
        rows = int(program.get("rows", 32))
        grid = session.a_allocate(w * rows * 4)
        row = session.a_allocate(w * 4)
        payload = struct.pack(f"<{w * rows}i", *[(i * 2654435761) % 97 for i in range(w * rows)])
        scal = struct.pack("<II", w, rows)

        def per_iter(i):
            # re-upload the grid each iteration: low compute-to-communication
            h = session.a_sync_to(q, grid, payload)
            session.a_wait(h)
            im.tasks += 1
            im.bytes_synced += len(payload)
            return [(grid, "in"), (row, "inout")], scal

        return [grid, row], per_iter
    if kernel == "vec_increment":
        nb = int(program.get("bytes", 4096))
        buf = session.a_allocate(nb)
        session.a_wait(session.a_sync_to(q, buf, bytes(nb)))
        im.bytes_synced += nb
        return [buf], lambda i: ([(buf, "inout")], b"")
    if kernel == "memcopy":
        nb = int(program.get("bytes", 65536))
        src = session.a_allocate(nb)
        dst = session.a_allocate(nb)
        session.a_wait(session.a_sync_to(q, src, rng.randbytes(nb)))
        im.bytes_synced += nb
        return [dst, src], lambda i: ([(dst, "out"), (src, "in")], b"")
    if kernel == "noop":
        dur = float(program.get("duration_ms", 0.0))
        scal = struct.pack("<d", dur) if dur > 0 else b""
        return [], lambda i: ([], scal)
    raise AraxError(f"kernel_loop does not know kernel {program['kernel']!r}")


def _kernel_loop(session, queues, rng, program, im, digest):
    kernel = program["kernel"]
    iters = int(program.get("iterations", 100))
    sync_every = int(program.get("sync_every", 0))
    per_queue = [(q, *_kernel_setup(session, q, kernel, program, rng, im)) for q in queues]
    window = 8 * len(queues)  # stay ahead so queues never starve
    handles = []
    for i in range(iters):
        for q, bufs, make in per_queue:
            args, scal = make(i)
            handles.append(session.a_issue(q, TaskDescriptor.compute(kernel, args, scal)))
        if sync_every and (i + 1) % sync_every == 0:
            _wait_all(session, handles, im)
        else:
            while len(handles) > window:
                st = session.a_wait(handles.pop(0))
                if st != TaskStatus.SUCCESS:
                    raise AraxError(f"task failed with {st.name}")
                im.tasks += 1
    _wait_all(session, handles, im)
    for q, bufs, _make in per_queue:
        for buf in bufs:
            out = bytearray(buf.declared_size)
            session.a_wait(session.a_sync_from(q, buf, out))
            im.tasks += 1
            im.bytes_synced += len(out)
            digest.update(out)
            session.a_free(buf)
    im.digest = digest.hexdigest()


def _transfer_burst(harness, session, queues, program, im, digest):
    nbytes = int(program["bytes"])
    count = int(program.get("count", 4))
    window = max(int(program.get("window", 2)), 1)
    q = queues[0]
    buf = session.a_allocate(nbytes)
    payload = bytes(bytearray(range(256)) * (nbytes // 256 + 1))[:nbytes]

    # one untimed round first: realizes the device buffer and touches the
    # staging block, so the timed window sees steady-state behaviour
    session.a_wait(session.a_sync_to(q, buf, payload))
    im.tasks += 1

    t0 = time.perf_counter()
    handles = []
    for i in range(count):
        handles.append(session.a_sync_to(q, buf, payload))
        if len(handles) > window:
            session.a_wait(handles.pop(0))
            im.tasks += 1
    while handles:
        session.a_wait(handles.pop(0))
        im.tasks += 1
    staged_s = time.perf_counter() - t0
    im.bytes_synced += nbytes * count

    # direct single-copy baseline over the same payload, measured with the
    # server quiet so the two paths do not contend for the interpreter
    harness.server.quiesce(timeout=120.0)
    sink = bytearray(nbytes)
    sink[:] = payload  # warm the sink pages, mirroring the staged warm-up
    t0 = time.perf_counter()
    for _ in range(count):
        sink[:] = payload
    direct_s = time.perf_counter() - t0

    out = bytearray(nbytes)
    session.a_wait(session.a_sync_from(q, buf, out))
    im.tasks += 1
    if bytes(out) != payload:
        raise AraxError("transfer round-trip corrupted payload")
    digest.update(hashlib.sha256(out).digest())
    session.a_free(buf)
    im.extras["staged_ms"] = staged_s * 1e3
    im.extras["direct_ms"] = direct_s * 1e3
    im.extras["staged_over_direct"] = staged_s / direct_s if direct_s > 0 else 0.0
    im.digest = digest.hexdigest()


def _random_tasks(session, queues, rng, program, im, digest):
    count = int(program["count"])
    kernels = program.get("kernels", ["grid_relax", "vec_increment"])
    max_n = int(program.get("max_n", 48))
    state = []
    for q in queues:
        n = rng.randrange(16, max_n + 1)
        buf = session.a_allocate(n * n * 4)
        session.a_wait(session.a_sync_to(q, buf, rng.randbytes(n * n * 4)))
        im.bytes_synced += n * n * 4
        row = session.a_allocate(n * 4)
        state.append((q, n, buf, row))
    handles = []
    for i in range(count):
        q, n, buf, row = state[rng.randrange(len(state))]
        kernel = kernels[rng.randrange(len(kernels))]
        if kernel == "grid_relax":
            desc = TaskDescriptor.compute(
                "grid_relax", [(buf, "inout")], struct.pack("<II", n, rng.randrange(1, 4))
            )
        elif kernel == "path_dp":
            desc = TaskDescriptor.compute(
                "path_dp", [(buf, "in"), (row, "inout")], struct.pack("<II", n, n)
            )
        else:
            desc = TaskDescriptor.compute("vec_increment", [(buf, "inout")])
        handles.append(session.a_issue(q, desc))
        if len(handles) >= 16:
            _wait_all(session, handles, im)
        if rng.random() < 0.1:
            session.a_wait(session.a_sync_to(q, buf, rng.randbytes(n * 4)))
            im.tasks += 1
            im.bytes_synced += n * 4
    _wait_all(session, handles, im)
    for q, n, buf, row in state:
        for b in (buf, row):
            out = bytearray(b.declared_size)
            session.a_wait(session.a_sync_from(q, b, out))
            im.tasks += 1
            digest.update(out)
            session.a_free(b)
    im.digest = digest.hexdigest()
