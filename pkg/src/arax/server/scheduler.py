"""Queue-to-device assignment, elastic policy, and live migration.

Assignment default is round-robin over the devices that can actually run
the queue's first pending kernel.  The elastic policy additionally keeps a
session's queues together, spreads them onto devices that have sat idle,
and consolidates them back (freeing a device) when a high-priority session
arrives.

Migration is the three-phase protocol: mark the queue orphan so its
consumer stops popping, wait for the already-launched task to finish, then
move exactly the queue's realized buffers through server memory and hand
the queue to a thread on the target device.  The client keeps issuing into
the queue the whole time.  A target-side allocation failure rolls the data
back to the source device.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

from ..shm import layout as L
from .core import Q_ASSIGNED, Q_ORPHAN, Q_RELEASING, Q_UNASSIGNED

log = logging.getLogger("arax.scheduler")

EV_IDLE = "IdleDeviceDetected"
EV_HI_ARRIVAL = "HighPriorityArrival"
EV_HI_DEPARTURE = "HighPriorityDeparture"

IDLE_POLL_S = 0.010
IDLE_AFTER_S = 0.050


@dataclass
class MigrationPlan:
    queue_id: int
    source: int
    target: int
    reason: str = ""
    manifest: list = field(default_factory=list)  # (buf_id, size), filled on execution


class Scheduler:
    def __init__(self, server):
        self.server = server
        self.tick_interval = IDLE_POLL_S
        self.requests = deque()  # (qr, target_device | None, reason)
        self.pending_release = deque()
        self.pending_buffer_reap = deque()
        self._rr = 0
        # elastic state
        self.session_home = {}  # session_id -> dev_id
        self.reservations = {}  # dev_id -> high-priority session_id
        self.expansions = []  # LIFO of (session_id, qid, src_dev, dst_dev)

    # ------------------------------------------------------------ main loop

    def run(self) -> None:
        server = self.server
        while not server._stop:
            try:
                self.tick()
            except Exception:
                log.exception("scheduler tick failed")
            server.clock.sleep(self.tick_interval)

    def tick(self) -> None:
        server = self.server
        server._scan_queues()
        server._scan_buffers()
        self._process_releases()
        self._process_buffer_reaps()
        self._process_requests()
        if server.policy == "elastic":
            self._elastic_tick()
        self._assign_unassigned()
        if server.timeslice:
            self._rotate_timeslices()

    # ------------------------------------------------------------ assignment

    def _first_kernel(self, qr):
        rec = qr.ring.peek()
        if rec is None:
            return None
        desc_off, _seq = rec
        buf = self.server.arena.buf
        kind = L.U32.unpack_from(buf, desc_off + 12)[0]
        if kind != L.KIND_COMPUTE:
            return None
        nlen = L.U32.unpack_from(buf, desc_off + L.DESC_NAME_OFF)[0]
        return bytes(buf[desc_off + 68 : desc_off + 68 + nlen]).decode()

    def select_accelerator(self, qr):
        """Pick a device for an unassigned, non-empty queue."""
        server = self.server
        kernel = self._first_kernel(qr)
        devices = server.devices
        feasible = server.feasible_devices(kernel) if kernel else list(devices)
        if not feasible:
            # nobody can run it; assign anywhere so the task can be failed
            feasible = list(devices)

        if server.policy == "elastic":
            return self._elastic_select(qr, feasible)

        n = len(devices)
        for i in range(n):
            d = devices[(self._rr + i) % n]
            if d in feasible:
                self._rr = (self._rr + i + 1) % n
                return d
        return None

    def _elastic_select(self, qr, feasible):
        server = self.server
        sid = qr.session_id
        if qr.priority == L.PRIO_HIGH:
            for dev_id, owner in self.reservations.items():
                if owner == sid:
                    dev = server.devices[dev_id]
                    return dev if dev in feasible else feasible[0]
            free = [
                d
                for d in feasible
                if d.dev_id not in self.reservations and not self._hosts_low_priority(d)
            ]
            if free:
                self.reservations[free[0].dev_id] = sid
                return free[0]
            plans = self.elastic_rebalance(EV_HI_ARRIVAL, session_id=sid)
            for plan in plans:
                self.migrate_queue(plan)
            for dev_id, owner in self.reservations.items():
                if owner == sid:
                    return server.devices[dev_id]
            return feasible[0]
        # low priority: keep the session together, respect reservations
        open_devs = [d for d in feasible if d.dev_id not in self.reservations]
        if not open_devs:
            open_devs = feasible
        home = self.session_home.get(sid)
        if home is not None:
            for d in open_devs:
                if d.dev_id == home:
                    return d
        n = len(server.devices)
        for i in range(n):
            d = server.devices[(self._rr + i) % n]
            if d in open_devs:
                self._rr = (self._rr + i + 1) % n
                self.session_home[sid] = d.dev_id
                return d
        return None

    def _assign_unassigned(self) -> None:
        server = self.server
        with server._lock:
            qrs = [q for q in server.queues.values() if q.state == Q_UNASSIGNED]
        for qr in sorted(qrs, key=lambda q: q.qid):
            if qr.ring.occupancy() == 0:
                continue
            dev = self.select_accelerator(qr)
            if dev is not None:
                self._bind(qr, dev)

    def _bind(self, qr, dev) -> None:
        server = self.server
        with server._lock:
            threads = [t for t in server.accel_threads if t.device is dev]
            th = min(threads, key=lambda t: len(t.queues))
            qr.device = dev
            qr.thread = th
            qr.state = Q_ASSIGNED
            th.queues.append(qr)
        server._log("assign", qr.qid, 0, th.tid)

    # ------------------------------------------------------------- migration

    def force_rotate(self, qr) -> None:
        """Test hook: migrate a queue to the next device in id order."""
        server = self.server
        if len(server.devices) < 2 or qr.device is None:
            return
        target = server.devices[(qr.device.dev_id + 1) % len(server.devices)]
        qr.pending_migration = True
        self.migrate_queue(
            MigrationPlan(qr.qid, qr.device.dev_id, target.dev_id, reason="forced")
        )

    def _process_requests(self) -> None:
        server = self.server
        while self.requests:
            qr, target, reason = self.requests.popleft()
            if qr.state != Q_ASSIGNED or qr.device is None:
                qr.pending_migration = False
                continue
            if target is None:
                kernel = self._first_kernel(qr)
                feasible = server.feasible_devices(kernel) if kernel else []
                feasible = [d for d in feasible if d is not qr.device]
                if not feasible:
                    qr.pending_migration = False
                    continue
                target = feasible[0]
            if target is qr.device:
                qr.pending_migration = False
                continue
            self.migrate_queue(
                MigrationPlan(qr.qid, qr.device.dev_id, target.dev_id, reason=reason)
            )

    def migrate_queue(self, plan: MigrationPlan) -> bool:
        server = self.server
        clock = server.clock
        qr = server.queues.get(plan.queue_id)
        src = server.devices[plan.source]
        dst = server.devices[plan.target]
        if qr is None or src is dst or qr.device is not src or qr.state not in (
            Q_ASSIGNED,
            Q_ORPHAN,
        ):
            if qr is not None:
                qr.pending_migration = False
            return False
        qr.pending_migration = True

        # phase 1: orphan -- the consumer stops popping this queue
        with qr.serve_lock:
            qr.state = Q_ORPHAN
        server._log("orphan", qr.qid, 0, 0)

        # phase 2: drain -- wait for the already-launched task to finish
        while qr.inflight is not None:
            clock.sleep(2e-4)

        # phase 3: move exactly this queue's realized buffers via server memory
        manifest = [
            b
            for b in sorted(qr.buffers)
            if (e := server.ledger.get(b)) is not None and e.device_id == src.dev_id
        ]
        plan.manifest = [(b, server.ledger[b].declared) for b in manifest]
        total = sum(size for _b, size in plan.manifest)
        for b in manifest:
            e = server.ledger[b]
            tmp = bytearray(e.declared)
            src.sync_from(b, 0, tmp)
            src.free(b)
            e.device_id = None
            e.staged = tmp
        if clock.virtual and total:
            clock.sleep(src.xfer_duration_s(total))

        allocated = []
        failed = False
        for b in manifest:
            e = server.ledger[b]
            try:
                dst.alloc(b, e.declared)
            except Exception:
                failed = True
                break
            allocated.append(b)
        if failed:
            for b in allocated:
                dst.free(b)
            for b in manifest:
                e = server.ledger[b]
                try:
                    src.alloc(b, e.declared)
                    src.sync_to(b, 0, e.staged)
                    e.staged = None
                    e.device_id = src.dev_id
                except Exception:
                    # stays server-staged; the next touch re-realizes it
                    log.warning("rollback left buffer %d server-staged", b)
            with server._lock:
                qr.state = Q_ASSIGNED
                qr.pending_migration = False
            server.migration_rollbacks += 1
            server._log("rollback", qr.qid, 0, 0)
            return False

        for b in manifest:
            e = server.ledger[b]
            dst.sync_to(b, 0, e.staged)
            e.staged = None
            e.device_id = dst.dev_id
        if clock.virtual and total:
            clock.sleep(dst.xfer_duration_s(total))

        with server._lock:
            old = qr.thread
            if old is not None and qr in old.queues:
                old.queues.remove(qr)
            threads = [t for t in server.accel_threads if t.device is dst]
            th = min(threads, key=lambda t: len(t.queues))
            qr.device = dst
            qr.thread = th
            th.queues.append(qr)
            qr.state = Q_ASSIGNED
            qr.pending_migration = False
        server.migration_count += 1
        server.migration_bytes += total
        server._log("migrate", qr.qid, 0, th.tid)
        server._log("assign", qr.qid, 0, th.tid)
        return True

    # --------------------------------------------------------------- elastic

    def _hosts_low_priority(self, dev) -> bool:
        server = self.server
        with server._lock:
            return any(
                q.device is dev and q.priority == L.PRIO_LOW
                for q in server.queues.values()
                if q.state in (Q_ASSIGNED, Q_ORPHAN)
            )

    def _device_queues(self, dev):
        server = self.server
        with server._lock:
            return [
                q
                for q in server.queues.values()
                if q.device is dev and q.state in (Q_ASSIGNED, Q_ORPHAN)
            ]

    def elastic_rebalance(self, event, *, session_id=None, device_id=None):
        """Return the migration plans answering one elastic event."""
        server = self.server
        if len(server.devices) < 2:
            return []

        if event == EV_IDLE:
            dev = server.devices[device_id]
            if dev.dev_id in self.reservations:
                return []
            best = None
            for other in server.devices:
                if other is dev:
                    continue
                qs = [
                    q
                    for q in self._device_queues(other)
                    if q.priority == L.PRIO_LOW and not q.pending_migration
                ]
                if len(qs) >= 2:
                    cand = max(qs, key=lambda q: q.qid)  # most recently acquired
                    if best is None or cand.qid > best.qid:
                        best = cand
            if best is None:
                return []
            return [
                MigrationPlan(best.qid, best.device.dev_id, dev.dev_id, reason="expand")
            ]

        if event == EV_HI_ARRIVAL:
            # LIFO: undo the most recent expansion first
            while self.expansions:
                sid, qid, src_dev, dst_dev = self.expansions[-1]
                qr = server.queues.get(qid)
                if (
                    qr is None
                    or qr.device is None
                    or qr.device.dev_id != dst_dev
                    or qr.pending_migration
                ):
                    self.expansions.pop()
                    continue
                self.expansions.pop()
                self.reservations[dst_dev] = session_id
                return [MigrationPlan(qid, dst_dev, src_dev, reason="shrink")]
            # no recorded expansion: free the device with the fewest low-prio queues
            candidates = []
            for dev in server.devices:
                if dev.dev_id in self.reservations:
                    continue
                here = self._device_queues(dev)
                qs = [q for q in here if q.priority == L.PRIO_LOW and not q.pending_migration]
                if all(q.priority == L.PRIO_LOW for q in here) and len(qs) == len(here):
                    candidates.append((len(qs), dev, qs))
            if not candidates:
                return []
            _n, dev, qs = min(candidates, key=lambda c: (c[0], c[1].dev_id))
            others = [d for d in server.devices if d is not dev and d.dev_id not in self.reservations]
            if not others:
                return []
            plans = []
            for i, q in enumerate(sorted(qs, key=lambda q: q.qid)):
                to = self.session_home.get(q.session_id)
                target = (
                    server.devices[to]
                    if to is not None and to != dev.dev_id
                    else others[i % len(others)]
                )
                plans.append(MigrationPlan(q.qid, dev.dev_id, target.dev_id, reason="shrink"))
            self.reservations[dev.dev_id] = session_id
            return plans

        if event == EV_HI_DEPARTURE:
            gone = [d for d, owner in self.reservations.items() if owner == session_id]
            for d in gone:
                del self.reservations[d]
            return []

        raise ValueError(f"unknown elastic event {event!r}")

    def _elastic_tick(self) -> None:
        server = self.server
        now = server.clock.now()
        # departures: reserved sessions that no longer have queues
        with server._lock:
            live_sessions = {q.session_id for q in server.queues.values()}
        for dev_id, owner in list(self.reservations.items()):
            if owner not in live_sessions:
                self.elastic_rebalance(EV_HI_DEPARTURE, session_id=owner)
        # idle detection
        for dev in server.devices:
            if dev.dev_id in self.reservations:
                continue
            if now - server._device_last_busy[dev.dev_id] < IDLE_AFTER_S:
                continue
            if any(
                q.ring.occupancy() > 0 or q.inflight is not None
                for q in self._device_queues(dev)
            ):
                continue
            plans = self.elastic_rebalance(EV_IDLE, device_id=dev.dev_id)
            for plan in plans:
                qr = server.queues.get(plan.queue_id)
                if qr is not None and self.migrate_queue(plan):
                    self.expansions.append(
                        (qr.session_id, plan.queue_id, plan.source, plan.target)
                    )

    # ------------------------------------------------------- release / reap

    def _process_releases(self) -> None:
        server = self.server
        keep = deque()
        while self.pending_release:
            qr = self.pending_release.popleft()
            if qr.inflight is not None or qr.ring.occupancy() > 0:
                keep.append(qr)
                continue
            if not qr.serve_lock.acquire(blocking=False):
                keep.append(qr)
                continue
            try:
                with server._lock:
                    if qr.thread is not None and qr in qr.thread.queues:
                        qr.thread.queues.remove(qr)
                    qr.thread = None
                    qr.device = None
                    server.queues.pop(qr.qid, None)
                for b in sorted(qr.buffers):
                    e = server.ledger.get(b)
                    if e is None or e.owner_qid != qr.qid:
                        continue
                    if e.device_id is not None:
                        dev = server.devices[e.device_id]
                        tmp = bytearray(e.declared)
                        dev.sync_from(b, 0, tmp)
                        dev.free(b)
                        e.staged = tmp
                        e.device_id = None
                    e.owner_qid = None
                qr.buffers.clear()
                server._qslot_seen.pop(qr.slot, None)
                server.directory.release_queue_slot(qr.slot)
                server._log("release", qr.qid, 0, 0)
            finally:
                qr.serve_lock.release()
        self.pending_release = keep

    def _process_buffer_reaps(self) -> None:
        server = self.server
        while self.pending_buffer_reap:
            buf_id = self.pending_buffer_reap.popleft()
            e = server.ledger.pop(buf_id, None)
            if e is None:
                continue
            if e.device_id is not None:
                server.devices[e.device_id].free(buf_id)
            if e.owner_qid is not None:
                qr = server.queues.get(e.owner_qid)
                if qr is not None:
                    qr.buffers.discard(buf_id)
            server._buf_slot_seen.pop(e.slot, None)
            server.directory.set_buffer_state(e.slot, L.BS_FREE)

    # ------------------------------------------------------------ timeslice

    def _rotate_timeslices(self) -> None:
        server = self.server
        now = server.clock.now()
        for dev in server.devices:
            eligible = sorted(
                (
                    q
                    for q in self._device_queues(dev)
                    if q.state == Q_ASSIGNED
                    and (q.ring.occupancy() > 0 or q.inflight is not None)
                ),
                key=lambda q: q.qid,
            )
            if not eligible:
                server._timeslice_active.pop(dev.dev_id, None)
                continue
            active = server._timeslice_active.get(dev.dev_id)
            mark = server._timeslice_mark.get(dev.dev_id, -1.0)
            ids = [q.qid for q in eligible]
            if active not in ids:
                server._timeslice_active[dev.dev_id] = ids[0]
                server._timeslice_mark[dev.dev_id] = now
            elif now - mark >= server.timeslice_quantum:
                nxt = ids[(ids.index(active) + 1) % len(ids)]
                server._timeslice_active[dev.dev_id] = nxt
                server._timeslice_mark[dev.dev_id] = now
