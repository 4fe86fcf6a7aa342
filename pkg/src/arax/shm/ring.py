"""Fixed-capacity single-producer/single-consumer ring over arena memory.

Head and tail are monotone u64 counters on separate cache lines; the
producer writes the record, then publishes it by storing head+1, and the
consumer mirrors that on pop.  Aligned 8-byte stores are single machine-word
writes on the platforms we run on, and CPython performs the buffer stores in
program order, which gives the publish/consume visibility contract the
transport needs.  Push and pop make no system calls.
"""

from __future__ import annotations

from . import layout as L


class RingQueue:
    __slots__ = ("arena", "buf", "off", "capacity", "_slots_off")

    def __init__(self, arena, off: int):
        self.arena = arena
        self.buf = arena.buf
        self.off = off
        self.capacity = L.RING_META.unpack_from(self.buf, off + 8)[0]
        self._slots_off = off + L.RING_HDR_SIZE

    @staticmethod
    def region_size(capacity: int) -> int:
        return L.RING_HDR_SIZE + capacity * L.RECORD_SIZE

    @classmethod
    def init(cls, arena, off: int, capacity: int) -> "RingQueue":
        buf = arena.buf
        L.U64.pack_into(buf, off + L.RING_HEAD_OFF, 0)
        L.RING_META.pack_into(buf, off + 8, capacity, L.RECORD_SIZE)
        L.U64.pack_into(buf, off + L.RING_TAIL_OFF, 0)
        return cls(arena, off)

    def head(self) -> int:
        return L.U64.unpack_from(self.buf, self.off + L.RING_HEAD_OFF)[0]

    def tail(self) -> int:
        return L.U64.unpack_from(self.buf, self.off + L.RING_TAIL_OFF)[0]

    def occupancy(self) -> int:
        return self.head() - self.tail()

    def push(self, desc_off: int, seq: int) -> bool:
        """Producer only.  False means Full; the queue is unchanged."""
        buf = self.buf
        off = self.off
        head = L.U64.unpack_from(buf, off + L.RING_HEAD_OFF)[0]
        tail = L.U64.unpack_from(buf, off + L.RING_TAIL_OFF)[0]
        if head - tail >= self.capacity:
            return False
        slot = self._slots_off + (head % self.capacity) * L.RECORD_SIZE
        L.RECORD.pack_into(buf, slot, desc_off, seq)
        L.U64.pack_into(buf, off + L.RING_HEAD_OFF, head + 1)
        return True

    def pop(self):
        """Consumer only.  Returns (desc_off, seq) or None when Empty."""
        buf = self.buf
        off = self.off
        tail = L.U64.unpack_from(buf, off + L.RING_TAIL_OFF)[0]
        head = L.U64.unpack_from(buf, off + L.RING_HEAD_OFF)[0]
        if head == tail:
            return None
        slot = self._slots_off + (tail % self.capacity) * L.RECORD_SIZE
        rec = L.RECORD.unpack_from(buf, slot)
        L.U64.pack_into(buf, off + L.RING_TAIL_OFF, tail + 1)
        return rec

    def peek(self):
        """Consumer only.  Returns the oldest record without consuming it."""
        buf = self.buf
        off = self.off
        tail = L.U64.unpack_from(buf, off + L.RING_TAIL_OFF)[0]
        head = L.U64.unpack_from(buf, off + L.RING_HEAD_OFF)[0]
        if head == tail:
            return None
        slot = self._slots_off + (tail % self.capacity) * L.RECORD_SIZE
        return L.RECORD.unpack_from(buf, slot)
