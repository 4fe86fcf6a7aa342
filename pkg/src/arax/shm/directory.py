"""Queue directory and buffer handle table inside the arena.

Both tables are fixed-size slot arrays right after the directory header.
Clients claim slots under the arena lock; the server discovers changes by
watching the epoch counters, so steady-state server ticks touch nothing
unless something actually changed.
"""

from __future__ import annotations

from ..errors import DirectoryFull, HandleTableFull
from . import layout as L
from .ring import RingQueue


class QueueEntry:
    __slots__ = (
        "index",
        "state",
        "queue_id",
        "session_id",
        "priority",
        "capacity",
        "ring_off",
        "desc_off",
        "desc_stride",
    )

    def __init__(self, index, fields):
        self.index = index
        (
            self.state,
            self.queue_id,
            self.session_id,
            self.priority,
            self.capacity,
            self.ring_off,
            self.desc_off,
            self.desc_stride,
            _res,
        ) = fields


class BufferEntry:
    __slots__ = ("index", "state", "buf_id", "declared_size")

    def __init__(self, index, fields):
        self.index = index
        self.state, _pad, self.buf_id, self.declared_size = fields


class Directory:
    def __init__(self, arena):
        self.arena = arena
        self.buf = arena.buf
        self.root = arena.queue_directory_root
        (
            self.queue_slots,
            self.buffer_slots,
            _qe,
            _be,
            _nq,
            _nb,
            _ns,
        ) = L.DIR_HDR.unpack_from(self.buf, self.root)
        self.qtab = self.root + L.DIR_HDR.size
        self.btab = self.qtab + self.queue_slots * L.QDIR_ENTRY_SIZE

    # -------------------------------------------------------------- epochs

    def _hdr(self):
        return L.DIR_HDR.unpack_from(self.buf, self.root)

    def _write_hdr(self, qs, bs, qe, be, nq, nb, ns):
        L.DIR_HDR.pack_into(self.buf, self.root, qs, bs, qe, be, nq, nb, ns)

    def queue_epoch(self) -> int:
        return self._hdr()[2]

    def buffer_epoch(self) -> int:
        return self._hdr()[3]

    def next_session_id(self) -> int:
        with self.arena.lock:
            qs, bs, qe, be, nq, nb, ns = self._hdr()
            self._write_hdr(qs, bs, qe, be, nq, nb, ns + 1)
        return ns

    # -------------------------------------------------------------- queues

    def _qoff(self, index: int) -> int:
        return self.qtab + index * L.QDIR_ENTRY_SIZE

    def queue_entry(self, index: int) -> QueueEntry:
        return QueueEntry(index, L.QDIR_ENTRY.unpack_from(self.buf, self._qoff(index)))

    def iter_queues(self):
        for i in range(self.queue_slots):
            e = self.queue_entry(i)
            if e.state != L.QS_FREE:
                yield e

    def acquire_queue(self, session_id, priority, capacity, desc_stride=L.DESC_STRIDE):
        """Claim a slot, carve the ring and descriptor regions, mark active."""
        ring_bytes = RingQueue.region_size(capacity)
        desc_bytes = capacity * desc_stride
        with self.arena.lock:
            slot = None
            for i in range(self.queue_slots):
                if L.QDIR_ENTRY.unpack_from(self.buf, self._qoff(i))[0] == L.QS_FREE:
                    slot = i
                    break
            if slot is None:
                raise DirectoryFull(f"all {self.queue_slots} queue slots in use")
            ring_off = self.arena.alloc(ring_bytes, align=64)
            desc_off = self.arena.alloc(desc_bytes, align=64)
            RingQueue.init(self.arena, ring_off, capacity)
            self.buf[desc_off : desc_off + desc_bytes] = bytes(desc_bytes)
            qs, bs, qe, be, nq, nb, ns = self._hdr()
            L.QDIR_ENTRY.pack_into(
                self.buf,
                self._qoff(slot),
                L.QS_ACTIVE,
                nq,
                session_id,
                priority,
                capacity,
                ring_off,
                desc_off,
                desc_stride,
                0,
            )
            self._write_hdr(qs, bs, qe + 1, be, nq + 1, nb, ns)
            return self.queue_entry(slot)

    def set_queue_state(self, index: int, state: int) -> None:
        with self.arena.lock:
            fields = list(L.QDIR_ENTRY.unpack_from(self.buf, self._qoff(index)))
            fields[0] = state
            L.QDIR_ENTRY.pack_into(self.buf, self._qoff(index), *fields)
            qs, bs, qe, be, nq, nb, ns = self._hdr()
            self._write_hdr(qs, bs, qe + 1, be, nq, nb, ns)

    def release_queue_slot(self, index: int) -> None:
        """Server side: return ring/descriptor space and free the slot."""
        with self.arena.lock:
            e = self.queue_entry(index)
            self.arena.free(e.ring_off)
            self.arena.free(e.desc_off)
            L.QDIR_ENTRY.pack_into(self.buf, self._qoff(index), *([0] * 9))
            qs, bs, qe, be, nq, nb, ns = self._hdr()
            self._write_hdr(qs, bs, qe + 1, be, nq, nb, ns)

    # ------------------------------------------------------------- buffers

    def _boff(self, index: int) -> int:
        return self.btab + index * L.BUF_ENTRY_SIZE

    def buffer_entry(self, index: int) -> BufferEntry:
        return BufferEntry(index, L.BUF_ENTRY.unpack_from(self.buf, self._boff(index)))

    def iter_buffers(self):
        for i in range(self.buffer_slots):
            e = self.buffer_entry(i)
            if e.state != L.BS_FREE:
                yield e

    def allocate_buffer(self, declared_size: int) -> BufferEntry:
        with self.arena.lock:
            slot = None
            for i in range(self.buffer_slots):
                if L.BUF_ENTRY.unpack_from(self.buf, self._boff(i))[0] == L.BS_FREE:
                    slot = i
                    break
            if slot is None:
                raise HandleTableFull(f"all {self.buffer_slots} buffer slots in use")
            qs, bs, qe, be, nq, nb, ns = self._hdr()
            L.BUF_ENTRY.pack_into(self.buf, self._boff(slot), L.BS_LIVE, 0, nb, declared_size)
            self._write_hdr(qs, bs, qe, be + 1, nq, nb + 1, ns)
            return self.buffer_entry(slot)

    def set_buffer_state(self, index: int, state: int) -> None:
        with self.arena.lock:
            fields = list(L.BUF_ENTRY.unpack_from(self.buf, self._boff(index)))
            fields[0] = state
            L.BUF_ENTRY.pack_into(self.buf, self._boff(index), *fields)
            qs, bs, qe, be, nq, nb, ns = self._hdr()
            self._write_hdr(qs, bs, qe, be + 1, nq, nb, ns)
