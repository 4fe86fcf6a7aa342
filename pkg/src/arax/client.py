"""Application-facing API: sessions, queues, buffers, tasks.

The eight calls (a_acquire, a_release, a_allocate, a_free, a_sync_to,
a_sync_from, a_issue, a_wait) all operate on the shared arena; issuing a
task is a descriptor write plus a ring push, with no system call on the
fast path.  Nothing here ever exposes which device runs what: buffers and
queues are opaque handles and placement is entirely the server's business.

Buffer allocation is lazy end to end: a_allocate records the declared size
in the shared handle table and returns immediately; device memory appears
only when an assigned task first touches the buffer.
"""

from __future__ import annotations

import os
import struct
from enum import IntEnum

from .clock import Backoff, RealClock
from .errors import AraxError, BufferBusy, QueueBusy
from .shm import layout as L
from .shm.arena import SharedArena
from .shm.directory import Directory
from .shm.ring import RingQueue


class TaskStatus(IntEnum):
    PENDING = 0
    SUCCESS = 1
    UNKNOWN_KERNEL = -1
    DEVICE_OOM = -2
    ABORTED = -3


_DIR_CODES = {"in": L.DIR_IN, "out": L.DIR_OUT, "inout": L.DIR_INOUT}


class TaskDescriptor:
    """A compute or transfer request; carries no device-specific details."""

    __slots__ = ("kind", "kernel_name", "args", "scalars")

    def __init__(self, kind, kernel_name="", args=(), scalars=b""):
        self.kind = kind
        self.kernel_name = kernel_name
        self.args = list(args)
        self.scalars = scalars

    @classmethod
    def compute(cls, kernel_name, args=(), scalars=b""):
        return cls(L.KIND_COMPUTE, kernel_name, args, scalars)


class TaskBuffer:
    """Opaque data handle; contents live wherever the server put them."""

    __slots__ = ("session", "buf_id", "declared_size", "slot", "_dead", "_pending")

    def __init__(self, session, buf_id, declared_size, slot):
        self.session = session
        self.buf_id = buf_id
        self.declared_size = declared_size
        self.slot = slot
        self._dead = False
        self._pending = set()  # unwaited TaskHandles referencing this buffer

    def __repr__(self):
        return f"TaskBuffer(id={self.buf_id}, size={self.declared_size})"


class TaskHandle:
    __slots__ = ("queue", "seq", "desc_off", "kind", "staging", "nbytes", "dst", "bufs")

    def __init__(self, queue, seq, desc_off, kind, staging, nbytes, dst, bufs):
        self.queue = queue
        self.seq = seq
        self.desc_off = desc_off
        self.kind = kind
        self.staging = staging
        self.nbytes = nbytes
        self.dst = dst
        self.bufs = bufs


class TaskQueueHandle:
    """Client end of one task queue (single producer)."""

    __slots__ = (
        "session",
        "queue_id",
        "slot_index",
        "ring",
        "desc_base",
        "stride",
        "capacity",
        "buf",
        "_seq",
        "_slot_seq",
        "_slot_spill",
        "_cache",
        "_outstanding",
        "_released",
    )

    def __init__(self, session, entry):
        self.session = session
        self.queue_id = entry.queue_id
        self.slot_index = entry.index
        self.ring = RingQueue(session.arena, entry.ring_off)
        self.desc_base = entry.desc_off
        self.stride = entry.desc_stride
        self.capacity = entry.capacity
        self.buf = session.arena.buf
        self._seq = 1
        self._slot_seq = [0] * entry.capacity
        self._slot_spill = [0] * entry.capacity
        self._cache = {}  # seq -> final status, for handles outliving their slot
        self._outstanding = {}  # seq -> TaskHandle not yet waited on
        self._released = False

    def pending_tasks(self) -> int:
        return len(self._outstanding)

    # The hot path.  Slot gating doubles as backpressure: the descriptor
    # slot for this sequence number is only reusable once its previous
    # occupant reached a final status, which also implies the ring has room.
    def _issue_raw(self, kind, name_b, arg_pairs, scalars, xbuf, xstag, xlen, bufs, dst=None):
        if self._released:
            raise AraxError(f"queue {self.queue_id} already released")
        buf = self.buf
        seq = self._seq
        slot = (seq - 1) % self.capacity
        off = self.desc_base + slot * self.stride
        old = self._slot_seq[slot]
        if old:
            st = L.I32.unpack_from(buf, off + 8)[0]
            if st == 0:
                backoff = Backoff(self.session.clock)
                while st == 0:
                    backoff.pause()
                    st = L.I32.unpack_from(buf, off + 8)[0]
            if old in self._outstanding:
                self._cache[old] = st
            spill = self._slot_spill[slot]
            if spill:
                self.session.arena.free(spill)
                self._slot_spill[slot] = 0

        slen = len(scalars)
        scalar_off = 0
        if slen > L.INLINE_SCALAR_MAX:
            scalar_off = self.session.arena.alloc(slen)
            buf[scalar_off : scalar_off + slen] = scalars
            self._slot_spill[slot] = scalar_off
        L.DESC_FIXED.pack_into(
            buf, off, seq, 0, kind, len(arg_pairs), slen, scalar_off, xbuf, xstag, xlen, 0
        )
        L.U32.pack_into(buf, off + L.DESC_NAME_OFF, len(name_b))
        if name_b:
            buf[off + 68 : off + 68 + len(name_b)] = name_b
        pos = off + L.DESC_ARGS_OFF
        for bid, d in arg_pairs:
            L.ARG_ENTRY.pack_into(buf, pos, bid, d, 0)
            pos += L.ARG_ENTRY_SIZE
        if slen and not scalar_off:
            buf[off + L.DESC_INLINE_OFF : off + L.DESC_INLINE_OFF + slen] = scalars

        if not self.ring.push(off, seq):
            # unreachable given slot gating; defensive
            raise AraxError(f"queue {self.queue_id} full with completed slot")
        self._seq = seq + 1
        self._slot_seq[slot] = seq
        h = TaskHandle(self, seq, off, kind, xstag, xlen, dst, bufs)
        self._outstanding[seq] = h
        return h


class Session:
    """A client attachment to the arena; owns queues and buffers."""

    def __init__(
        self,
        arena: SharedArena,
        *,
        clock=None,
        priority=None,
        default_queue_capacity=1024,
        _owns_arena=False,
    ):
        self.arena = arena
        self.clock = clock or RealClock()
        self.directory = Directory(arena)
        if priority is None:
            priority = os.environ.get("ARAX_PRIORITY", "low")
        self.priority = L.PRIO_HIGH if str(priority).lower() == "high" else L.PRIO_LOW
        self.default_queue_capacity = default_queue_capacity
        self.session_id = self.directory.next_session_id()
        self._owns_arena = _owns_arena
        self._queues = []
        self._buffers = []
        self._released = False

    @classmethod
    def connect(cls, shm_name=None, **kw):
        """Attach to a served segment; name from ARAX_SHM if not given."""
        name = shm_name or os.environ.get("ARAX_SHM")
        if not name:
            raise AraxError("no segment name: pass shm_name or set ARAX_SHM")
        return cls(SharedArena.attach(name), _owns_arena=True, **kw)

    # ------------------------------------------------------------- queues

    def a_acquire(self, capacity=None) -> TaskQueueHandle:
        cap = capacity or self.default_queue_capacity
        entry = self.directory.acquire_queue(self.session_id, self.priority, cap)
        q = TaskQueueHandle(self, entry)
        self._queues.append(q)
        return q

    def a_release(self, q: TaskQueueHandle, timeout=30.0) -> None:
        if q._released:
            raise AraxError(f"queue {q.queue_id} already released")
        for h in list(q._outstanding.values()):
            if self._poll(h) == 0:
                raise QueueBusy(f"queue {q.queue_id} has in-flight tasks")
        if q.ring.occupancy() != 0:
            raise QueueBusy(f"queue {q.queue_id} has unconsumed tasks")
        for slot, spill in enumerate(q._slot_spill):
            if spill:
                self.arena.free(spill)
                q._slot_spill[slot] = 0
        self.directory.set_queue_state(q.slot_index, L.QS_RELEASING)
        # wait for the server to reclaim the slot so it is reusable on return
        backoff = Backoff(self.clock)
        start = self.clock.now()
        while True:
            state = L.QDIR_ENTRY.unpack_from(
                self.arena.buf, self.directory._qoff(q.slot_index)
            )[0]
            if state == L.QS_FREE:
                break
            if self.clock.now() - start > timeout:
                raise AraxError(f"server did not release queue {q.queue_id}")
            backoff.pause()
        q._released = True

    # ------------------------------------------------------------ buffers

    def a_allocate(self, size: int) -> TaskBuffer:
        if size <= 0:
            raise AraxError(f"buffer size must be positive, got {size}")
        entry = self.directory.allocate_buffer(size)
        b = TaskBuffer(self, entry.buf_id, size, entry.index)
        self._buffers.append(b)
        return b

    def a_free(self, buf: TaskBuffer) -> None:
        if buf._dead:
            raise AraxError(f"double free of buffer {buf.buf_id}")
        for h in list(buf._pending):
            if self._poll(h) == 0:
                raise BufferBusy(f"buffer {buf.buf_id} referenced by in-flight task")
            buf._pending.discard(h)
        buf._dead = True
        self.directory.set_buffer_state(buf.slot, L.BS_FREED)

    # -------------------------------------------------------------- tasks

    def a_issue(self, q: TaskQueueHandle, desc: TaskDescriptor) -> TaskHandle:
        if desc.kind != L.KIND_COMPUTE:
            raise AraxError("a_issue takes compute descriptors; use a_sync_to/from")
        if not desc.kernel_name:
            raise AraxError("compute task needs a kernel name")
        name_b = desc.kernel_name.encode()
        if len(name_b) > L.DESC_NAME_MAX:
            raise AraxError(f"kernel name too long ({len(name_b)} > {L.DESC_NAME_MAX})")
        if len(desc.args) > L.MAX_ARGS:
            raise AraxError(f"too many arguments ({len(desc.args)} > {L.MAX_ARGS})")
        if len(desc.scalars) > L.SCALAR_MAX:
            raise AraxError(f"scalar blob too large ({len(desc.scalars)} > {L.SCALAR_MAX})")
        pairs = []
        bufs = []
        for buf, direction in desc.args:
            if buf._dead:
                raise AraxError(f"buffer {buf.buf_id} is dead")
            pairs.append((buf.buf_id, _DIR_CODES[direction]))
            bufs.append(buf)
        h = q._issue_raw(L.KIND_COMPUTE, name_b, pairs, desc.scalars, 0, 0, 0, bufs)
        for b in bufs:
            b._pending.add(h)
        return h

    def a_sync_to(self, q: TaskQueueHandle, buf: TaskBuffer, src) -> TaskHandle:
        if buf._dead:
            raise AraxError(f"buffer {buf.buf_id} is dead")
        src = memoryview(src).cast("B") if not isinstance(src, (bytes, bytearray)) else src
        n = len(src)
        if n > buf.declared_size:
            raise AraxError(f"source ({n} bytes) exceeds buffer size {buf.declared_size}")
        stag = 0
        if n:
            stag = self.arena.alloc(n)
            self.arena.buf[stag : stag + n] = src
        h = q._issue_raw(L.KIND_TO_DEV, b"", (), b"", buf.buf_id, stag, n, (buf,))
        buf._pending.add(h)
        return h

    def a_sync_from(self, q: TaskQueueHandle, buf: TaskBuffer, dst) -> TaskHandle:
        if buf._dead:
            raise AraxError(f"buffer {buf.buf_id} is dead")
        dst = dst if isinstance(dst, memoryview) else memoryview(dst)
        if dst.readonly:
            raise AraxError("destination must be writable")
        dst = dst.cast("B")
        n = len(dst)
        if n > buf.declared_size:
            raise AraxError(f"destination ({n} bytes) exceeds buffer size {buf.declared_size}")
        stag = self.arena.alloc(n) if n else 0
        h = q._issue_raw(L.KIND_FROM_DEV, b"", (), b"", buf.buf_id, stag, n, (buf,), dst=dst)
        buf._pending.add(h)
        return h

    def _poll(self, t: TaskHandle) -> int:
        """Non-blocking status check; 0 means still pending."""
        q = t.queue
        st = q._cache.get(t.seq)
        if st is not None:
            return st
        cur = L.U64.unpack_from(q.buf, t.desc_off)[0]
        if cur != t.seq:
            # slot was reused; reuse requires completion, and any unwaited
            # handle had its status cached first
            return q._cache.get(t.seq, int(TaskStatus.SUCCESS))
        return L.I32.unpack_from(q.buf, t.desc_off + 8)[0]

    def a_wait(self, t: TaskHandle, timeout=None) -> TaskStatus:
        q = t.queue
        st = q._cache.pop(t.seq, None)
        if st is None:
            buf = q.buf
            off = t.desc_off
            backoff = Backoff(self.clock)
            start = self.clock.now() if timeout is not None else 0.0
            while True:
                cur = L.U64.unpack_from(buf, off)[0]
                if cur != t.seq:
                    st = q._cache.pop(t.seq, None)
                    if st is None:
                        raise AraxError(f"stale task handle (queue {q.queue_id}, seq {t.seq})")
                    break
                st = L.I32.unpack_from(buf, off + 8)[0]
                if st != 0:
                    break
                if timeout is not None and self.clock.now() - start > timeout:
                    raise TimeoutError(f"task (queue {q.queue_id}, seq {t.seq}) still pending")
                backoff.pause()
        q._outstanding.pop(t.seq, None)
        for b in t.bufs:
            b._pending.discard(t)
        if t.kind == L.KIND_FROM_DEV and t.staging:
            n = t.nbytes
            t.dst[:n] = q.buf[t.staging : t.staging + n]
            self.arena.free(t.staging)
            t.staging = 0
        return TaskStatus(st)

    # ----------------------------------------------------------- lifecycle

    def release(self) -> None:
        """Release every owned queue and buffer exactly once."""
        if self._released:
            return
        self._released = True
        for q in self._queues:
            if not q._released:
                try:
                    self.a_release(q)
                except AraxError:
                    pass
        for b in self._buffers:
            if not b._dead:
                try:
                    self.a_free(b)
                except AraxError:
                    pass
        if self._owns_arena:
            self.arena.close()

    close = release
