"""The server: accelerator threads, kernel dispatch, and lazy allocation.

One server process owns all devices.  Per device it spawns accelerator
threads; each thread consumes the task queues assigned to it, popping at
most one task per queue at a time (per-queue FIFO is the contract), staging
transfer payloads through the arena, realizing device memory lazily on
first touch, and launching compute kernels on stream slots.

Queue discovery works by watching the directory epoch counters, so clients
never make a control call: acquiring a queue or allocating a buffer is just
a table write in the shared arena.
"""

from __future__ import annotations

import logging
import threading
from collections import deque

from ..backends.device import Device, DeviceDescriptor, synthesized_info
from ..clock import Backoff, RealClock
from ..errors import DeviceOOM, DuplicateKernel
from ..shm import layout as L
from ..shm.directory import Directory
from ..shm.ring import RingQueue

log = logging.getLogger("arax.server")

# queue runtime states
Q_UNASSIGNED = "unassigned"
Q_ASSIGNED = "assigned"
Q_ORPHAN = "orphan"
Q_RELEASING = "releasing"


class DispatchTable:
    """kernel name -> device type -> implementation."""

    def __init__(self):
        self._table = {}

    def register(self, name, type_tag, impl) -> None:
        per_type = self._table.setdefault(name, {})
        if type_tag in per_type:
            raise DuplicateKernel(f"({name!r}, {type_tag!r}) already registered")
        per_type[type_tag] = impl

    def lookup(self, name, type_tag):
        return self._table.get(name, {}).get(type_tag)

    def types_for(self, name):
        return list(self._table.get(name, {}))

    def names(self):
        return list(self._table)


class LedgerBuf:
    """Server-side record of one task buffer."""

    __slots__ = ("buf_id", "declared", "slot", "owner_qid", "device_id", "staged")

    def __init__(self, buf_id, declared, slot):
        self.buf_id = buf_id
        self.declared = declared
        self.slot = slot
        self.owner_qid = None
        self.device_id = None  # realized device, or None
        self.staged = None  # server-memory copy while not device-resident


class QueueRuntime:
    __slots__ = (
        "qid",
        "slot",
        "ring",
        "desc_off",
        "desc_stride",
        "capacity",
        "session_id",
        "priority",
        "state",
        "device",
        "thread",
        "inflight",
        "completed",
        "buffers",
        "pending_migration",
        "serve_lock",
    )

    def __init__(self, entry, ring):
        self.qid = entry.queue_id
        self.slot = entry.index
        self.ring = ring
        self.desc_off = entry.desc_off
        self.desc_stride = entry.desc_stride
        self.capacity = entry.capacity
        self.session_id = entry.session_id
        self.priority = entry.priority
        self.state = Q_UNASSIGNED
        self.device = None
        self.thread = None
        self.inflight = None  # (token, desc_off, seq)
        self.completed = 0
        self.buffers = set()
        self.pending_migration = False
        # held while serving a step; migration takes it to mark the queue
        # orphan so a pop can never race the handoff
        self.serve_lock = threading.RLock()


class _ColocationNeeded(Exception):
    def __init__(self, target_device):
        self.target_device = target_device


class AcceleratorThread:
    """Server-side worker bound to one device."""

    _ids = 0

    def __init__(self, server, device, streams):
        self.server = server
        self.device = device
        self.streams = streams  # stream indices owned by this thread
        self.queues = []  # QueueRuntime list, mutated under server lock
        self.inflight_count = 0
        self._stream_rr = 0
        AcceleratorThread._ids += 1
        self.tid = AcceleratorThread._ids
        self.handle = None

    # ------------------------------------------------------------- serving

    def run(self) -> None:
        server = self.server
        clock = server.clock
        virtual = clock.virtual
        backoff = Backoff(clock, cap=1e-3)
        while not server._stop:
            progressed = False
            with server._lock:
                snapshot = list(self.queues)
            for qr in snapshot:
                try:
                    if self.serve_queue_step(qr):
                        progressed = True
                except Exception:
                    log.exception("accelerator thread %d failed on queue %d", self.tid, qr.qid)
            if progressed:
                backoff.reset()
                continue
            if virtual:
                # sleep exactly until the earliest in-flight completion
                earliest = None
                for qr in snapshot:
                    fl = qr.inflight
                    if fl is not None and fl[0].finish_time is not None:
                        if earliest is None or fl[0].finish_time < earliest:
                            earliest = fl[0].finish_time
                if earliest is not None:
                    dt = earliest - clock.now()
                    clock.sleep(dt if dt > 1e-7 else 1e-7)
                    backoff.reset()
                    continue
            backoff.pause()

    def serve_queue_step(self, qr) -> bool:
        """Advance one queue by at most one task; True if progress was made."""
        if not qr.serve_lock.acquire(blocking=False):
            return False
        try:
            if qr.thread is not self:
                return False
            return self._serve_locked(qr)
        finally:
            qr.serve_lock.release()

    def _serve_locked(self, qr) -> bool:
        server = self.server
        if qr.inflight is not None:
            token, desc_off, seq = qr.inflight
            if not token.done(server.clock.now()):
                return False
            self._finish(qr, token, desc_off, seq)
            return True
        if qr.state != Q_ASSIGNED or qr.pending_migration:
            return False
        if server.timeslice and server._timeslice_active.get(self.device.dev_id) != qr.qid:
            return False
        if self.inflight_count >= len(self.streams):
            return False
        rec = qr.ring.peek()
        if rec is None:
            return False
        desc_off, seq = rec
        buf = server.arena.buf
        (
            _seq,
            _status,
            kind,
            nargs,
            scalar_len,
            scalar_off,
            xbuf,
            xstag,
            xlen,
            _res,
        ) = L.DESC_FIXED.unpack_from(buf, desc_off)

        if kind == L.KIND_COMPUTE:
            name_len = L.U32.unpack_from(buf, desc_off + L.DESC_NAME_OFF)[0]
            name = bytes(buf[desc_off + 68 : desc_off + 68 + name_len]).decode()
            impl = server.dispatch.lookup(name, self.device.desc.type_tag)
            if impl is None or not self.device.supports(name):
                if server.feasible_devices(name):
                    server.request_migration(qr, reason=f"kernel {name!r}")
                    return False
                qr.ring.pop()
                server._log("pop", qr.qid, seq, self.tid)
                self._complete(qr, desc_off, seq, L.T_UNKNOWN_KERNEL)
                return True
            args = [
                L.ARG_ENTRY.unpack_from(buf, desc_off + L.DESC_ARGS_OFF + i * L.ARG_ENTRY_SIZE)
                for i in range(nargs)
            ]
            try:
                for buf_id, _direction, _pad in args:
                    server.ensure_resident(qr, buf_id)
            except DeviceOOM:
                qr.ring.pop()
                server._log("pop", qr.qid, seq, self.tid)
                self._complete(qr, desc_off, seq, L.T_DEVICE_OOM)
                return True
            except _ColocationNeeded as c:
                server.request_migration(qr, target=c.target_device)
                return False
            if scalar_off:
                scalars = bytes(buf[scalar_off : scalar_off + scalar_len])
            else:
                scalars = bytes(
                    buf[desc_off + L.DESC_INLINE_OFF : desc_off + L.DESC_INLINE_OFF + scalar_len]
                )
            qr.ring.pop()
            server._log("pop", qr.qid, seq, self.tid)
            views = [self.device.view(buf_id) for (buf_id, _d, _p) in args]
            stream = self.streams[self._stream_rr % len(self.streams)]
            self._stream_rr += 1
            token = self.device.launch(stream, impl, views, scalars)
            qr.inflight = (token, desc_off, seq)
            self.inflight_count += 1
            server._touch_device(self.device)
            return True

        # transfer task
        try:
            server.ensure_resident(qr, xbuf)
        except DeviceOOM:
            qr.ring.pop()
            server._log("pop", qr.qid, seq, self.tid)
            self._complete(qr, desc_off, seq, L.T_DEVICE_OOM)
            return True
        except _ColocationNeeded as c:
            server.request_migration(qr, target=c.target_device)
            return False
        qr.ring.pop()
        server._log("pop", qr.qid, seq, self.tid)
        if xlen:
            if kind == L.KIND_TO_DEV:
                self.device.sync_to(xbuf, 0, buf[xstag : xstag + xlen])
                server.arena.free(xstag)
            else:
                staging = buf[xstag : xstag + xlen]
                self.device.sync_from(xbuf, 0, staging)
        dur = self.device.xfer_duration_s(xlen)
        server.bytes_transferred += xlen
        if server.clock.virtual:
            from ..backends.device import CompletionToken

            token = CompletionToken(finish_time=server.clock.now() + dur, duration=dur)
        else:
            from ..backends.device import CompletionToken

            token = CompletionToken.completed(duration=dur)
        qr.inflight = (token, desc_off, seq)
        self.inflight_count += 1
        server._touch_device(self.device)
        return True

    # ---------------------------------------------------------- completion

    def _complete(self, qr, desc_off, seq, status) -> None:
        server = self.server
        L.I32.pack_into(server.arena.buf, desc_off + 8, status)
        qr.completed += 1
        server.tasks_completed += 1
        server._log("done", qr.qid, seq, self.tid)
        server._touch_device(self.device)
        hook = server.migrate_every
        if hook and qr.completed % hook == 0 and not qr.pending_migration:
            server.scheduler.force_rotate(qr)

    def _finish(self, qr, token, desc_off, seq) -> None:
        status = L.T_SUCCESS if token.error is None else L.T_ABORTED
        qr.inflight = None
        self.inflight_count -= 1
        self._complete(qr, desc_off, seq, status)


class Server:
    """Owns the arena view, devices, dispatch table, and worker threads."""

    def __init__(
        self,
        arena,
        device_descs,
        *,
        clock=None,
        policy="roundrobin",
        accel_threads_per_device=2,
        timeslice=False,
        timeslice_quantum=0.010,
        keep_event_log=False,
        migrate_every=0,
    ):
        from .scheduler import Scheduler

        self.arena = arena
        self.clock = clock or RealClock()
        self.directory = Directory(arena)
        self.dispatch = DispatchTable()
        self.devices = [Device(d, i, self.clock) for i, d in enumerate(device_descs)]
        self.policy = policy
        self.timeslice = timeslice
        self.timeslice_quantum = timeslice_quantum
        self.migrate_every = migrate_every

        self._lock = threading.RLock()
        self._stop = False
        self.queues = {}  # qid -> QueueRuntime
        self.ledger = {}  # buf_id -> LedgerBuf
        self._buf_slot_seen = {}  # table slot -> buf_id seen there
        self._qslot_seen = {}
        self._queue_epoch = -1
        self._buffer_epoch = -1
        self._timeslice_active = {}
        self._timeslice_mark = {}
        self._device_last_busy = {d.dev_id: 0.0 for d in self.devices}

        self.tasks_completed = 0
        self.bytes_transferred = 0
        self.migration_count = 0
        self.migration_bytes = 0
        self.migration_rollbacks = 0
        self.event_log = [] if keep_event_log else None

        self.accel_threads = []
        for dev in self.devices:
            n_threads = max(1, min(accel_threads_per_device, dev.desc.streams))
            streams = list(range(dev.desc.streams))
            per = max(1, len(streams) // n_threads)
            for t in range(n_threads):
                lo = t * per
                hi = len(streams) if t == n_threads - 1 else (t + 1) * per
                self.accel_threads.append(AcceleratorThread(self, dev, streams[lo:hi]))

        self.scheduler = Scheduler(self)
        self._threads = []

    # ------------------------------------------------------------ kernels

    def register_kernel(self, name, type_tag, impl) -> None:
        self.dispatch.register(name, type_tag, impl)

    def register_builtin_kernels(self, names=None) -> None:
        from ..backends.kernels import BUILTIN_KERNELS

        tags = {d.desc.type_tag for d in self.devices}
        for k in BUILTIN_KERNELS:
            if names is not None and k.name not in names:
                continue
            for tag in sorted(tags):
                if self.dispatch.lookup(k.name, tag) is None:
                    self.dispatch.register(k.name, tag, k)

    def feasible_devices(self, kernel_name):
        return [
            d
            for d in self.devices
            if d.supports(kernel_name)
            and self.dispatch.lookup(kernel_name, d.desc.type_tag) is not None
        ]

    def synthesized_device_info(self) -> dict:
        return synthesized_info(self.devices)

    # ---------------------------------------------------------- residency

    def ensure_resident(self, qr, buf_id) -> None:
        """Realize device memory for a buffer on the queue's device.

        Idempotent; the first realization zero-fills (or uploads the staged
        copy preserved by an earlier release/migration).  Raises DeviceOOM
        when the device cannot hold it; raises _ColocationNeeded when the
        buffer lives with another queue on a different device.
        """
        e = self.ledger.get(buf_id)
        if e is None:
            self._scan_buffers()
            e = self.ledger.get(buf_id)
            if e is None:
                raise DeviceOOM(f"unknown buffer id {buf_id}")
        dev = qr.device
        if e.owner_qid is None or e.owner_qid not in self.queues:
            e.owner_qid = qr.qid
            qr.buffers.add(buf_id)
        elif e.owner_qid != qr.qid:
            owner = self.queues[e.owner_qid]
            if owner.device is not None and owner.device is not dev:
                raise _ColocationNeeded(owner.device)
            # same device (or owner unassigned): shared use is fine
        if e.device_id == dev.dev_id:
            return
        if e.device_id is not None:
            # single-valid-copy: pull the bytes off the old device first
            old = self.devices[e.device_id]
            tmp = bytearray(e.declared)
            old.sync_from(buf_id, 0, tmp)
            old.free(buf_id)
            e.device_id = None
            e.staged = tmp
        dev.alloc(buf_id, e.declared)
        if e.staged is not None:
            dev.sync_to(buf_id, 0, e.staged)
            e.staged = None
        e.device_id = dev.dev_id

    # ------------------------------------------------------------- scans

    def _scan_queues(self) -> None:
        epoch = self.directory.queue_epoch()
        if epoch == self._queue_epoch:
            return
        self._queue_epoch = epoch
        for entry in self.directory.iter_queues():
            known = self._qslot_seen.get(entry.index)
            if entry.state == L.QS_ACTIVE and known != entry.queue_id:
                self._qslot_seen[entry.index] = entry.queue_id
                ring = RingQueue(self.arena, entry.ring_off)
                qr = QueueRuntime(entry, ring)
                with self._lock:
                    self.queues[qr.qid] = qr
                self._log("register", qr.qid, 0, 0)
            elif entry.state == L.QS_RELEASING:
                qr = self.queues.get(entry.queue_id)
                if qr is not None and qr.state != Q_RELEASING:
                    qr.state = Q_RELEASING
                    self.scheduler.pending_release.append(qr)

    def _scan_buffers(self) -> None:
        epoch = self.directory.buffer_epoch()
        if epoch == self._buffer_epoch:
            return
        self._buffer_epoch = epoch
        for entry in self.directory.iter_buffers():
            seen = self._buf_slot_seen.get(entry.index)
            if entry.state == L.BS_LIVE and seen != entry.buf_id:
                self._buf_slot_seen[entry.index] = entry.buf_id
                self.ledger[entry.buf_id] = LedgerBuf(entry.buf_id, entry.declared_size, entry.index)
            elif entry.state == L.BS_FREED and entry.buf_id in self.ledger:
                self.scheduler.pending_buffer_reap.append(entry.buf_id)

    # ---------------------------------------------------------- migration

    def request_migration(self, qr, target=None, reason="") -> None:
        if qr.pending_migration:
            return
        qr.pending_migration = True
        self.scheduler.requests.append((qr, target, reason))

    # ------------------------------------------------------------ helpers

    def _touch_device(self, device) -> None:
        self._device_last_busy[device.dev_id] = self.clock.now()

    def _log(self, event, qid, seq, tid) -> None:
        if self.event_log is not None:
            self.event_log.append((event, qid, seq, tid, self.clock.now()))

    def device_used(self, dev_id: int) -> int:
        return self.devices[dev_id].used

    def ledger_snapshot(self):
        """buf_id -> (declared, owner_qid, device_id or None); for tests."""
        with self._lock:
            return {
                b: (e.declared, e.owner_qid, e.device_id) for b, e in self.ledger.items()
            }

    def single_copy_violations(self):
        holders = {}
        for d in self.devices:
            for b in d.buffer_ids():
                holders.setdefault(b, []).append(d.dev_id)
        return {b: devs for b, devs in holders.items() if len(devs) > 1}

    # ----------------------------------------------------------- lifecycle

    def start(self) -> None:
        self._stop = False
        for d in self.devices:
            d.start()
        for at in self.accel_threads:
            at.handle = self.clock.spawn(at.run, name=f"accel-{at.device.desc.name}-{at.tid}")
        self._sched_handle = self.clock.spawn(self.scheduler.run, name="scheduler")
        log.info(
            "server started: %d devices, %d accelerator threads, policy=%s",
            len(self.devices),
            len(self.accel_threads),
            self.policy,
        )

    def shutdown(self) -> None:
        self._stop = True
        for at in self.accel_threads:
            if at.handle is not None:
                self.clock.join(at.handle)
        self.clock.join(self._sched_handle)
        for d in self.devices:
            d.stop()
        log.info("server stopped: %d tasks completed", self.tasks_completed)

    def idle(self) -> bool:
        with self._lock:
            qrs = list(self.queues.values())
        if self.scheduler.requests or self.scheduler.pending_release:
            return False
        if self.scheduler.pending_buffer_reap:
            return False
        for qr in qrs:
            if qr.inflight is not None or qr.ring.occupancy() > 0:
                return False
            if qr.state == Q_UNASSIGNED and qr.ring.occupancy() > 0:
                return False
        return True

    def quiesce(self, timeout=60.0) -> None:
        """Block until no queue has pending or in-flight work."""
        start = self.clock.now()
        while not self.idle():
            if self.clock.now() - start > timeout:
                raise TimeoutError("server did not quiesce")
            self.clock.sleep(0.001)
