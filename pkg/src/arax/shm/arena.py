"""Offset-addressed shared arena with a segregated free-list allocator.

Two deployment modes with identical layout and semantics:

* cross-process (default): the segment is a file under /dev/shm mapped into
  each process; allocator calls are serialized with flock(2) on the segment
  file, which works across unrelated processes.
* same-process: the arena is an anonymous mapping and the allocator lock is
  an ordinary re-entrant lock.  Used by unit tests and the in-process bench
  harness.

The allocator rounds requests up to power-of-two size classes and keeps one
free list per class, so alloc and free are O(1).  Freed blocks are reused
within their class and never coalesced across classes; worst-case internal
fragmentation is 2x the requested size plus the 16-byte block header.  The
arena never grows.
"""

from __future__ import annotations

import mmap
import os
import threading

from ..errors import AllocatorError, ArenaAttachError, ArenaError, OutOfArenaMemory
from . import layout as L

SHM_DIR = "/dev/shm"

# header + allocator metadata + directory header; real arenas also need
# queue/buffer tables, rings and payload, so this is just a hard floor.
MIN_ARENA_SIZE = 4096


def _align_up(v: int, a: int) -> int:
    return (v + a - 1) & ~(a - 1)


class _FlockLock:
    """Cross-process mutual exclusion bound to the segment file."""

    def __init__(self, fd: int):
        self._fd = fd
        # flock is per-fd, not per-thread; serialize threads locally too.
        self._tlock = threading.RLock()
        self._depth = 0

    def __enter__(self):
        import fcntl

        self._tlock.acquire()
        self._depth += 1
        if self._depth == 1:
            fcntl.flock(self._fd, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        import fcntl

        self._depth -= 1
        if self._depth == 0:
            fcntl.flock(self._fd, fcntl.LOCK_UN)
        self._tlock.release()
        return False


class ArenaStats:
    __slots__ = ("live_bytes", "live_count", "capacity", "bump_cursor", "op_epoch")

    def __init__(self, live_bytes, live_count, capacity, bump_cursor, op_epoch):
        self.live_bytes = live_bytes
        self.live_count = live_count
        self.capacity = capacity
        self.bump_cursor = bump_cursor
        self.op_epoch = op_epoch

    def __repr__(self):
        return (
            f"ArenaStats(live_bytes={self.live_bytes}, live_count={self.live_count},"
            f" capacity={self.capacity})"
        )


class SharedArena:
    """A mapped segment plus the allocator operating on it."""

    def __init__(self, name, buf, mm, fd, lock, owner):
        self.name = name
        self.buf = buf  # memoryview over the whole segment
        self._mm = mm
        self._fd = fd
        self.lock = lock
        self._owner = owner
        self._closed = False
        (
            _magic,
            self.version,
            _res,
            self.total_size,
            self.allocator_root,
            self.queue_directory_root,
        ) = L.HEADER.unpack_from(buf, 0)

    # ------------------------------------------------------------ lifecycle

    @classmethod
    def create(
        cls,
        name: str | None,
        size: int,
        *,
        same_process: bool = False,
        queue_slots: int = 256,
        buffer_slots: int = 4096,
    ) -> "SharedArena":
        if size < MIN_ARENA_SIZE:
            raise ArenaError(f"size too small: {size} < {MIN_ARENA_SIZE}")

        if same_process:
            mm = mmap.mmap(-1, size)
            fd = None
            lock = threading.RLock()
        else:
            if not name:
                raise ArenaError("cross-process arena needs a segment name")
            path = os.path.join(SHM_DIR, name)
            try:
                fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o600)
            except FileExistsError:
                raise ArenaError(f"segment name collision: {name!r}") from None
            os.ftruncate(fd, size)
            mm = mmap.mmap(fd, size)
            lock = _FlockLock(fd)

        buf = memoryview(mm)
        arena = object.__new__(cls)
        alloc_root = L.HEADER_SIZE
        dir_root = _align_up(alloc_root + L.ALLOC_META_SIZE, 16)
        dir_size = (
            L.DIR_HDR.size
            + queue_slots * L.QDIR_ENTRY_SIZE
            + buffer_slots * L.BUF_ENTRY_SIZE
        )
        payload_base = _align_up(dir_root + dir_size, 16)
        if payload_base + 64 > size:
            raise ArenaError(f"size too small for directory tables: {size}")

        L.HEADER.pack_into(buf, 0, L.MAGIC, L.VERSION, 0, size, alloc_root, dir_root)
        L.ALLOC_HDR.pack_into(buf, alloc_root, payload_base, size, 0, 0, 0)
        L.CLASS_HEADS.pack_into(buf, alloc_root + L.ALLOC_HDR.size, *([0] * L.NUM_CLASSES))
        L.DIR_HDR.pack_into(buf, dir_root, queue_slots, buffer_slots, 0, 0, 1, 1, 1)
        # entry tables start zeroed (fresh mapping), i.e. all slots free

        SharedArena.__init__(arena, name, buf, mm, fd, lock, owner=True)
        return arena

    @classmethod
    def attach(cls, name: str) -> "SharedArena":
        path = os.path.join(SHM_DIR, name)
        try:
            fd = os.open(path, os.O_RDWR)
        except FileNotFoundError:
            raise ArenaError(f"no such segment: {name!r}") from None
        size = os.fstat(fd).st_size
        mm = mmap.mmap(fd, size)
        buf = memoryview(mm)
        magic, version, _r, total, _a, _d = L.HEADER.unpack_from(buf, 0)
        if magic != L.MAGIC:
            mm.close()
            os.close(fd)
            raise ArenaAttachError(f"bad magic 0x{magic:08X} in segment {name!r}")
        if version != L.VERSION:
            mm.close()
            os.close(fd)
            raise ArenaAttachError(f"version mismatch: segment {version}, runtime {L.VERSION}")
        if total != size:
            mm.close()
            os.close(fd)
            raise ArenaAttachError(f"size mismatch: header {total}, file {size}")
        return cls(name, buf, mm, fd, _FlockLock(fd), owner=False)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.buf.release()
        self._mm.close()
        if self._fd is not None:
            os.close(self._fd)

    def unlink(self) -> None:
        if self._fd is not None and self.name:
            try:
                os.unlink(os.path.join(SHM_DIR, self.name))
            except FileNotFoundError:
                pass

    @property
    def cross_process(self) -> bool:
        return self._fd is not None

    # ------------------------------------------------------------ allocator

    def alloc(self, size: int, align: int = 16) -> int:
        """Return the offset of a disjoint, aligned region of `size` bytes."""
        if size <= 0:
            raise ArenaError(f"alloc size must be positive, got {size}")
        if align < 1 or (align & (align - 1)) != 0:
            raise ArenaError(f"alignment must be a power of two, got {align}")
        pad = align - 16 if align > 16 else 0
        cls_idx = L.class_for(pad + size)
        if cls_idx >= L.NUM_CLASSES:
            raise OutOfArenaMemory(f"request too large: {size}")
        # the class covers the payload; the 16-byte block header rides on top
        blk_size = L.class_size(cls_idx) + L.BLOCK_HDR_BYTES
        buf = self.buf
        root = self.allocator_root
        heads_off = root + L.ALLOC_HDR.size

        with self.lock:
            bump, bump_end, live_bytes, live_count, epoch = L.ALLOC_HDR.unpack_from(buf, root)
            head_pos = heads_off + cls_idx * 8
            base = L.U64.unpack_from(buf, head_pos)[0]
            if base:
                nxt = L.U64.unpack_from(buf, base + 8)[0]
                L.U64.pack_into(buf, head_pos, nxt)
            else:
                if bump + blk_size > bump_end:
                    raise OutOfArenaMemory(
                        f"arena exhausted: need {blk_size}, free {bump_end - bump}"
                    )
                base = bump
                bump += blk_size
            L.BLOCK_META.pack_into(buf, base, L.BLOCK_MAGIC, cls_idx, L.ST_LIVE, 0, 0)
            payload = _align_up(base + L.BLOCK_HDR_BYTES, align)
            L.U64.pack_into(buf, payload - 8, base)
            L.ALLOC_HDR.pack_into(
                buf, root, bump, bump_end, live_bytes + blk_size, live_count + 1, epoch + 1
            )
        return payload

    def free(self, offset: int) -> None:
        buf = self.buf
        root = self.allocator_root
        with self.lock:
            if offset < 24 or offset >= self.total_size:
                raise AllocatorError(f"foreign offset {offset}")
            base = L.U64.unpack_from(buf, offset - 8)[0]
            if base < L.HEADER_SIZE or base + L.BLOCK_HDR_BYTES > offset:
                raise AllocatorError(f"foreign offset {offset}")
            magic, cls_idx, status, _p, _p2 = L.BLOCK_META.unpack_from(buf, base)
            if magic != L.BLOCK_MAGIC or cls_idx >= L.NUM_CLASSES:
                raise AllocatorError(f"foreign offset {offset}")
            if status != L.ST_LIVE:
                raise AllocatorError(f"double free at offset {offset}")
            bump, bump_end, live_bytes, live_count, epoch = L.ALLOC_HDR.unpack_from(buf, root)
            heads_off = root + L.ALLOC_HDR.size
            head_pos = heads_off + cls_idx * 8
            L.BLOCK_META.pack_into(buf, base, L.BLOCK_MAGIC, cls_idx, L.ST_FREE, 0, 0)
            L.U64.pack_into(buf, base + 8, L.U64.unpack_from(buf, head_pos)[0])
            L.U64.pack_into(buf, head_pos, base)
            L.ALLOC_HDR.pack_into(
                buf,
                root,
                bump,
                bump_end,
                live_bytes - L.class_size(cls_idx),
                live_count - 1,
                epoch + 1,
            )

    def payload_base(self) -> int:
        qslots, bslots = L.DIR_HDR.unpack_from(self.buf, self.queue_directory_root)[:2]
        dir_size = L.DIR_HDR.size + qslots * L.QDIR_ENTRY_SIZE + bslots * L.BUF_ENTRY_SIZE
        return _align_up(self.queue_directory_root + dir_size, 16)

    def stats(self) -> ArenaStats:
        with self.lock:
            bump, bump_end, live_bytes, live_count, epoch = L.ALLOC_HDR.unpack_from(
                self.buf, self.allocator_root
            )
        return ArenaStats(live_bytes, live_count, bump_end - self.payload_base(), bump, epoch)
