"""Real and virtual clocks.

Every blocking wait in the runtime goes through a clock object so the same
threaded code can run against wall time or against a deterministic virtual
timeline.  The virtual clock runs registered threads one at a time: a thread
keeps the "baton" until it calls sleep(), at which point the thread with the
earliest pending wake-up runs next.  Ties break by scheduling order, so a
virtual run is fully deterministic for a fixed program.

Rules for code running under a VirtualClock:

* every blocking point must be a clock.sleep() loop (never Event.wait etc.);
* never hold a lock across a clock.sleep() call;
* threads must be created with clock.spawn() and joined with clock.join().
"""

from __future__ import annotations

import heapq
import threading
import time

# Watchdog for virtual-mode stalls; generous because CI machines are slow.
_STALL_TIMEOUT = 300.0


class RealClock:
    """Wall-clock time; spawn/join are thin wrappers over threading."""

    virtual = False

    def now(self) -> float:
        return time.monotonic()

    def sleep(self, dt: float) -> None:
        time.sleep(dt)

    def spawn(self, fn, name=None):
        t = threading.Thread(target=fn, name=name, daemon=True)
        t.start()
        return t

    def join(self, handle, poll=0.001) -> None:
        handle.join()

    def attach(self, name="driver"):
        return None

    def detach(self) -> None:
        pass


class _VThread:
    __slots__ = ("name", "event", "alive")

    def __init__(self, name):
        self.name = name
        self.event = threading.Event()
        self.alive = True


class VirtualClock:
    virtual = True

    def __init__(self):
        self._mutex = threading.Lock()
        self._heap = []  # (wake_time, seq, vthread)
        self._seq = 0
        self._now = 0.0
        self._local = threading.local()

    def now(self) -> float:
        return self._now

    def _me(self) -> _VThread:
        vt = getattr(self._local, "vt", None)
        if vt is None:
            raise RuntimeError(
                "thread is not attached to the virtual clock; use clock.spawn()/attach()"
            )
        return vt

    def _dispatch_next_locked(self) -> None:
        if not self._heap:
            return
        wake, _, vt = heapq.heappop(self._heap)
        if wake > self._now:
            self._now = wake
        vt.event.set()

    def sleep(self, dt: float) -> None:
        me = self._me()
        with self._mutex:
            self._seq += 1
            heapq.heappush(self._heap, (self._now + max(dt, 0.0), self._seq, me))
            me.event.clear()
            self._dispatch_next_locked()
        if not me.event.wait(_STALL_TIMEOUT):
            raise RuntimeError(f"virtual clock stall in thread {me.name!r}")

    def attach(self, name="driver") -> _VThread:
        """Register the calling thread; it holds the baton immediately."""
        vt = _VThread(name)
        self._local.vt = vt
        return vt

    def detach(self) -> None:
        """Deregister the calling thread and pass the baton on."""
        vt = getattr(self._local, "vt", None)
        if vt is None:
            return
        vt.alive = False
        self._local.vt = None
        with self._mutex:
            self._dispatch_next_locked()

    def spawn(self, fn, name=None):
        vt = _VThread(name or f"vthread-{self._seq}")

        def body():
            self._local.vt = vt
            if not vt.event.wait(_STALL_TIMEOUT):
                raise RuntimeError(f"virtual thread {vt.name!r} never scheduled")
            try:
                fn()
            finally:
                vt.alive = False
                with self._mutex:
                    self._dispatch_next_locked()

        thread = threading.Thread(target=body, name=vt.name, daemon=True)
        with self._mutex:
            self._seq += 1
            heapq.heappush(self._heap, (self._now, self._seq, vt))
        thread.start()
        return vt

    def join(self, handle, poll=0.001) -> None:
        while handle.alive:
            self.sleep(poll)


class Backoff:
    """Exponential backoff pauses: start at 1 us, double up to a 1 ms cap."""

    __slots__ = ("clock", "initial", "cap", "_cur")

    def __init__(self, clock, initial=1e-6, cap=1e-3):
        self.clock = clock
        self.initial = initial
        self.cap = cap
        self._cur = initial

    def pause(self) -> None:
        self.clock.sleep(self._cur)
        nxt = self._cur * 2
        self._cur = nxt if nxt < self.cap else self.cap

    def reset(self) -> None:
        self._cur = self.initial
