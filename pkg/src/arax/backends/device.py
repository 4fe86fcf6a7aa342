"""Virtual accelerator devices.

A device implements the six-function backend contract (alloc/free, sync
to/from, memset, devcpy) over private byte storage, plus stream-based
asynchronous launch.  Timing comes from each kernel's cost model scaled by
the device speed factor:

    duration = cost_ms(args) * (1 + speed_factor)

SIM_FPGA devices add a reload penalty whenever the launched kernel differs
from the one currently loaded, modeling single-kernel bitstream
reconfiguration.

Launches on one stream complete in launch order; launches on different
streams may overlap as long as the sum of running occupancies stays <= 1.
Admission is FIFO per device.  Under a virtual clock the whole schedule is
computed analytically at launch time; under a real clock per-stream worker
threads execute the kernel and sleep the modeled surcharge.
"""

from __future__ import annotations

import logging
import queue as _queue
import threading
from dataclasses import dataclass, field

from ..errors import DeviceOOM, KernelUnsupported
from .kernels import KernelImpl

log = logging.getLogger("arax.device")

TYPE_CPU = "CPU"
TYPE_SIM_GPU = "SIM_GPU"
TYPE_SIM_FPGA = "SIM_FPGA"
DEVICE_TYPES = (TYPE_CPU, TYPE_SIM_GPU, TYPE_SIM_FPGA)

_EPS = 1e-9


@dataclass
class DeviceDescriptor:
    name: str
    type_tag: str = TYPE_SIM_GPU
    speed_factor: float = 0.0
    streams: int = 2
    mem_capacity: int = 256 << 20
    kernel_set: frozenset = field(default_factory=lambda: frozenset({"*"}))
    reload_penalty_ms: float = 0.0
    bandwidth_bytes_per_ms: float = 8e6  # modeled host<->device link, ~8 GB/s

    def __post_init__(self):
        if self.streams < 1:
            raise ValueError(f"streams must be >= 1, got {self.streams}")
        if self.mem_capacity <= 0:
            raise ValueError(f"mem_capacity must be > 0, got {self.mem_capacity}")
        if self.speed_factor < 0:
            raise ValueError(f"speed_factor must be >= 0, got {self.speed_factor}")
        if self.type_tag not in DEVICE_TYPES:
            raise ValueError(f"unknown device type {self.type_tag!r}")
        if not isinstance(self.kernel_set, frozenset):
            self.kernel_set = frozenset(self.kernel_set)

    @classmethod
    def from_dict(cls, d: dict, index: int = 0) -> "DeviceDescriptor":
        cap = d.get("mem_capacity")
        if cap is None:
            cap = int(d.get("mem_capacity_mb", 256)) << 20
        return cls(
            name=d.get("name", f"dev{index}"),
            type_tag=d.get("type", TYPE_SIM_GPU),
            speed_factor=float(d.get("speed_factor", 0.0)),
            streams=int(d.get("streams", 2)),
            mem_capacity=int(cap),
            kernel_set=frozenset(d.get("kernel_set", ["*"])),
            reload_penalty_ms=float(d.get("reload_penalty_ms", 0.0)),
            bandwidth_bytes_per_ms=float(d.get("bandwidth_gbps", 8.0)) * 1e6,
        )


class CompletionToken:
    """Fires when a launch (or modeled transfer) finishes."""

    __slots__ = ("finish_time", "event", "error", "duration")

    def __init__(self, finish_time=None, event=None, duration=0.0):
        self.finish_time = finish_time
        self.event = event
        self.error = None
        self.duration = duration

    def done(self, now: float) -> bool:
        if self.event is not None:
            return self.event.is_set()
        return now + _EPS >= self.finish_time

    @classmethod
    def completed(cls, duration=0.0):
        ev = threading.Event()
        ev.set()
        return cls(event=ev, duration=duration)


class _LaunchJob:
    __slots__ = ("ticket", "kernel", "views", "scalars", "duration", "token")

    def __init__(self, ticket, kernel, views, scalars, duration, token):
        self.ticket = ticket
        self.kernel = kernel
        self.views = views
        self.scalars = scalars
        self.duration = duration
        self.token = token


class Device:
    """One virtual accelerator: memory, data movement, and launches."""

    def __init__(self, desc: DeviceDescriptor, dev_id: int, clock):
        self.desc = desc
        self.dev_id = dev_id
        self.clock = clock
        self._mem_lock = threading.Lock()
        self.used = 0
        self._buffers = {}  # buf_id -> bytearray
        self.loaded_kernel = None
        self.busy_ms = 0.0  # occupancy-weighted compute time, for metrics

        # virtual-clock schedule state
        self._admitted = []  # (start, end, occupancy)
        self._stream_tail = [0.0] * desc.streams
        self._admit_tail = 0.0

        # real-clock execution state
        self._run_lock = threading.Lock()
        self._run_cond = threading.Condition(self._run_lock)
        self._running_occ = 0.0
        self._next_ticket = 0
        self._next_admit = 0
        self._workers = []
        self._work_queues = []
        self._stopping = False

    # ------------------------------------------------------------- memory

    def supports(self, kernel_name: str) -> bool:
        ks = self.desc.kernel_set
        return "*" in ks or kernel_name in ks

    def alloc(self, buf_id: int, size: int) -> None:
        with self._mem_lock:
            if buf_id in self._buffers:
                raise DeviceOOM(f"buffer {buf_id} already realized on {self.desc.name}")
            if self.used + size > self.desc.mem_capacity:
                raise DeviceOOM(
                    f"{self.desc.name}: need {size}, free "
                    f"{self.desc.mem_capacity - self.used}"
                )
            self._buffers[buf_id] = bytearray(size)
            self.used += size

    def free(self, buf_id: int) -> None:
        with self._mem_lock:
            ba = self._buffers.pop(buf_id, None)
            if ba is None:
                raise DeviceOOM(f"double free of buffer {buf_id} on {self.desc.name}")
            self.used -= len(ba)

    def holds(self, buf_id: int) -> bool:
        return buf_id in self._buffers

    def view(self, buf_id: int) -> memoryview:
        return memoryview(self._buffers[buf_id])

    def buffer_ids(self):
        with self._mem_lock:
            return list(self._buffers)

    # ------------------------------------------------------- data movement

    def _check_range(self, buf_id, off, n):
        ba = self._buffers.get(buf_id)
        if ba is None:
            raise DeviceOOM(f"buffer {buf_id} not resident on {self.desc.name}")
        if off < 0 or n < 0 or off + n > len(ba):
            raise ValueError(f"range [{off}, {off + n}) out of bounds for {len(ba)}-byte buffer")
        return ba

    def xfer_duration_s(self, nbytes: int) -> float:
        return (nbytes / self.desc.bandwidth_bytes_per_ms) / 1e3

    def sync_to(self, buf_id: int, off: int, src) -> None:
        ba = self._check_range(buf_id, off, len(src))
        ba[off : off + len(src)] = src

    def sync_from(self, buf_id: int, off: int, dst) -> None:
        ba = self._check_range(buf_id, off, len(dst))
        dst[: len(dst)] = ba[off : off + len(dst)]

    def memset(self, buf_id: int, off: int, value: int, n: int) -> None:
        ba = self._check_range(buf_id, off, n)
        ba[off : off + n] = bytes([value & 0xFF]) * n

    def devcpy(self, dst_id: int, dst_off: int, src_id: int, src_off: int, n: int) -> None:
        src = self._check_range(src_id, src_off, n)
        dst = self._check_range(dst_id, dst_off, n)
        dst[dst_off : dst_off + n] = bytes(src[src_off : src_off + n])

    # ------------------------------------------------------------ launches

    def duration_s(self, kernel: KernelImpl, sizes, scalars) -> float:
        base_ms = kernel.cost_ms(sizes, scalars)
        return (base_ms * (1.0 + self.desc.speed_factor)) / 1e3

    def _reload_ms(self, kernel_name: str) -> float:
        if self.desc.type_tag != TYPE_SIM_FPGA or self.desc.reload_penalty_ms <= 0:
            return 0.0
        if self.loaded_kernel == kernel_name:
            return 0.0
        self.loaded_kernel = kernel_name
        return self.desc.reload_penalty_ms

    def launch(self, stream: int, kernel: KernelImpl, views, scalars: bytes) -> CompletionToken:
        if not self.supports(kernel.name):
            raise KernelUnsupported(f"{kernel.name!r} not in kernel set of {self.desc.name}")
        if not (0 <= stream < self.desc.streams):
            raise ValueError(f"stream {stream} out of range (streams={self.desc.streams})")
        sizes = [len(v) for v in views]
        dur = self.duration_s(kernel, sizes, scalars)
        if self.clock.virtual:
            return self._launch_virtual(stream, kernel, views, scalars, dur)
        return self._launch_real(stream, kernel, views, scalars, dur)

    def _launch_virtual(self, stream, kernel, views, scalars, dur):
        now = self.clock.now()
        dur += self._reload_ms(kernel.name) / 1e3
        t0 = max(now, self._stream_tail[stream], self._admit_tail)
        # prune finished launches; they cannot constrain anything after t0
        self._admitted = [a for a in self._admitted if a[1] > t0 + _EPS]
        start = t0
        while True:
            used = sum(o for (s, e, o) in self._admitted if s <= start + _EPS and e > start + _EPS)
            if used + kernel.occupancy <= 1.0 + _EPS:
                break
            nxt = min((e for (s, e, o) in self._admitted if e > start + _EPS), default=None)
            if nxt is None:
                break
            start = nxt
        end = start + dur
        self._admitted.append((start, end, kernel.occupancy))
        self._stream_tail[stream] = end
        self._admit_tail = start
        self.busy_ms += dur * 1e3 * kernel.occupancy
        token = CompletionToken(finish_time=end, duration=dur)
        try:
            kernel.fn(views, scalars)
        except Exception as exc:  # kernel bug: fail the task, not the server
            log.exception("kernel %s raised on %s", kernel.name, self.desc.name)
            token.error = exc
        return token

    def _launch_real(self, stream, kernel, views, scalars, dur):
        token = CompletionToken(event=threading.Event(), duration=dur)
        with self._run_lock:
            ticket = self._next_ticket
            self._next_ticket += 1
        self._work_queues[stream].put(_LaunchJob(ticket, kernel, views, scalars, dur, token))
        return token

    # real-mode stream workers -------------------------------------------

    def start(self) -> None:
        if self.clock.virtual or self._workers:
            return
        self._stopping = False
        for s in range(self.desc.streams):
            q = _queue.Queue()
            self._work_queues.append(q)
            t = threading.Thread(
                target=self._stream_worker, args=(q,), daemon=True,
                name=f"{self.desc.name}-s{s}",
            )
            t.start()
            self._workers.append(t)

    def stop(self) -> None:
        if not self._workers:
            return
        self._stopping = True
        for q in self._work_queues:
            q.put(None)
        with self._run_cond:
            self._run_cond.notify_all()
        for t in self._workers:
            t.join(timeout=5)
        self._workers = []
        self._work_queues = []

    def _stream_worker(self, q) -> None:
        while True:
            job = q.get()
            if job is None:
                return
            with self._run_cond:
                while not self._stopping and not (
                    job.ticket == self._next_admit
                    and self._running_occ + job.kernel.occupancy <= 1.0 + _EPS
                ):
                    self._run_cond.wait(timeout=0.1)
                if self._stopping:
                    job.token.error = RuntimeError("device stopped")
                    job.token.event.set()
                    return
                self._next_admit += 1
                self._running_occ += job.kernel.occupancy
                extra_ms = self._reload_ms(job.kernel.name)
                self._run_cond.notify_all()
            try:
                job.kernel.fn(job.views, job.scalars)
            except Exception as exc:
                log.exception("kernel %s raised on %s", job.kernel.name, self.desc.name)
                job.token.error = exc
            surcharge = job.duration * (self.desc.speed_factor / (1.0 + self.desc.speed_factor))
            pause = surcharge + extra_ms / 1e3
            if pause > 1e-5:
                self.clock.sleep(pause)
            with self._run_cond:
                self._running_occ -= job.kernel.occupancy
                self.busy_ms += job.duration * 1e3 * job.kernel.occupancy
                self._run_cond.notify_all()
            job.token.event.set()


def synthesized_info(devices) -> dict:
    """Minimum-capability profile across the configured devices."""
    if not devices:
        raise ValueError("no devices configured")
    return {
        "mem_capacity": min(d.desc.mem_capacity for d in devices),
        "streams": min(d.desc.streams for d in devices),
    }
