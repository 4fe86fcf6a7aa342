"""Built-in kernel library.

Every kernel is a plain CPU function over device buffer views plus an opaque
scalar blob, so outputs are bit-identical regardless of which device runs
them; only the timing model differs per device.  That functional determinism
is what makes migration checks exact.

Each kernel carries an occupancy fraction (how much of a device one launch
consumes; occupancy-1.0 kernels never overlap anything on their device) and
a cost model mapping argument sizes to simulated milliseconds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class KernelImpl:
    name: str
    fn: Callable[[Sequence[memoryview], bytes], None]
    occupancy: float = 0.25
    cost_ms: Callable[[Sequence[int], bytes], float] = field(default=lambda sizes, sc: 0.0)

    def __post_init__(self):
        if not (0.0 < self.occupancy <= 1.0):
            raise ValueError(f"occupancy must be in (0,1], got {self.occupancy}")


# ------------------------------------------------------------------ helpers

def _u32pair(scalars: bytes, default=(0, 0)):
    if len(scalars) >= 8:
        return struct.unpack_from("<II", scalars)[:2]
    if len(scalars) >= 4:
        return struct.unpack_from("<I", scalars)[0], default[1]
    return default


# ------------------------------------------------------------------ kernels

def _noop(views, scalars):
    pass


def _noop_cost(sizes, scalars):
    # scalars may carry a simulated duration in ms (f64) for timing tests
    if len(scalars) >= 8:
        return struct.unpack_from("<d", scalars)[0]
    return 0.0


def _memcopy(views, scalars):
    dst, src = views[0], views[1]
    n = min(len(dst), len(src))
    dst[:n] = src[:n]


def _vec_increment(views, scalars):
    a = np.frombuffer(views[0], dtype=np.int64)
    a += 1


def _gaussian_step(views, scalars):
    """One row-elimination step of Gaussian elimination (dense float64)."""
    n, k = _u32pair(scalars)
    m = np.frombuffer(views[0], dtype=np.float64)[: n * n].reshape(n, n)
    v = np.frombuffer(views[1], dtype=np.float64)[:n]
    if k >= n - 1:
        return
    pivot = m[k, k]
    if pivot == 0.0:
        pivot = 1.0
    factors = m[k + 1 :, k] / pivot
    m[k + 1 :, k:] -= factors[:, None] * m[k, k:]
    v[k + 1 :] -= factors * v[k]


def _grid_relax(views, scalars):
    """Iterative 5-point stencil relaxation over an n x n float32 grid."""
    n, passes = _u32pair(scalars, (0, 1))
    g = np.frombuffer(views[0], dtype=np.float32)[: n * n].reshape(n, n)
    for _ in range(max(passes, 1)):
        interior = 0.25 * (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:])
        g[1:-1, 1:-1] = interior


def _path_dp(views, scalars):
    """Row-by-row dynamic program over an int32 grid (min of 3 neighbours)."""
    w, rows = _u32pair(scalars, (0, 1))
    g = np.frombuffer(views[0], dtype=np.int32)[: w * rows].reshape(rows, w)
    r = np.frombuffer(views[1], dtype=np.int32)[:w]
    for i in range(rows):
        left = np.empty_like(r)
        left[0] = r[0]
        left[1:] = r[:-1]
        right = np.empty_like(r)
        right[-1] = r[-1]
        right[:-1] = r[1:]
        r[:] = g[i] + np.minimum(r, np.minimum(left, right))


# Work-unit costs (milliseconds per unit); modeling knobs, not measurements.
MS_PER_BYTE_COPY = 1.0 / 8e6  # ~8 GB/s
MS_PER_CELL_RELAX = 2e-6
MS_PER_CELL_GAUSS = 2e-5
MS_PER_CELL_PATH = 1e-6
MS_PER_ELEM_INC = 1e-6


def _memcopy_cost(sizes, scalars):
    return min(sizes) * MS_PER_BYTE_COPY if sizes else 0.0


def _inc_cost(sizes, scalars):
    return (sizes[0] // 8) * MS_PER_ELEM_INC if sizes else 0.0


def _gauss_cost(sizes, scalars):
    n, k = _u32pair(scalars)
    rem = max(n - k, 0)
    return rem * rem * MS_PER_CELL_GAUSS


def _relax_cost(sizes, scalars):
    n, passes = _u32pair(scalars, (0, 1))
    return n * n * max(passes, 1) * MS_PER_CELL_RELAX


def _path_cost(sizes, scalars):
    w, rows = _u32pair(scalars, (0, 1))
    return w * max(rows, 1) * MS_PER_CELL_PATH


BUILTIN_KERNELS = (
    KernelImpl("noop", _noop, occupancy=0.25, cost_ms=_noop_cost),
    KernelImpl("memcopy", _memcopy, occupancy=0.25, cost_ms=_memcopy_cost),
    KernelImpl("vec_increment", _vec_increment, occupancy=0.25, cost_ms=_inc_cost),
    KernelImpl("gaussian_step", _gaussian_step, occupancy=1.0, cost_ms=_gauss_cost),
    KernelImpl("grid_relax", _grid_relax, occupancy=0.25, cost_ms=_relax_cost),
    KernelImpl("path_dp", _path_dp, occupancy=0.25, cost_ms=_path_cost),
)


def builtin(name: str) -> KernelImpl:
    for k in BUILTIN_KERNELS:
        if k.name == name:
            return k
    raise KeyError(name)
