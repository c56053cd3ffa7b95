"""Uniform voxel hash grid for exact radius-bounded nearest-neighbor lookup.

Cells are packed into sorted int64 keys (21 bits per axis), so lookups are
binary searches and results match a linear scan exactly, including the
lowest-id tie break.  The default cell size should be the query radius; any
radius works, at the cost of scanning more cells.  Indexes are immutable and
safe for concurrent queries.
"""

import math
from typing import Optional, Tuple

import numpy as np
from numba import njit

from .errors import ConfigError

_COORD_BIAS = 1 << 20  # cell coordinates must fit [-2^20, 2^20)


@njit(cache=True, inline="always")
def _pack_cell(cx, cy, cz):
    return ((cx + _COORD_BIAS) << 42) | ((cy + _COORD_BIAS) << 21) | (cz + _COORD_BIAS)


class PointIndex:
    """Immutable voxel-grid index over an (n, 3) point array."""

    def __init__(self, points, cell_size):
        if cell_size <= 0 or not math.isfinite(cell_size):
            raise ConfigError(f"cell size must be positive and finite, got {cell_size}")
        points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(points).all():
            raise ConfigError("indexed points must be finite")
        self.cell_size = float(cell_size)
        self.num_points = len(points)

        cells = np.floor(points / self.cell_size).astype(np.int64)
        if len(cells) and (np.abs(cells) >= _COORD_BIAS).any():
            raise ConfigError(
                f"point extent exceeds the grid range (|cell coordinate| >= 2^20 at cell size {cell_size})"
            )
        keys = _pack_cell(cells[:, 0], cells[:, 1], cells[:, 2]) if len(cells) else np.empty(0, dtype=np.int64)
        order = np.argsort(keys, kind="stable")  # stable: ids ascending within a cell
        self._ids = order.astype(np.int64)
        self._xs = np.ascontiguousarray(points[order, 0])
        self._ys = np.ascontiguousarray(points[order, 1])
        self._zs = np.ascontiguousarray(points[order, 2])
        sorted_keys = keys[order]
        if len(sorted_keys):
            new_cell = np.empty(len(sorted_keys), dtype=bool)
            new_cell[0] = True
            new_cell[1:] = sorted_keys[1:] != sorted_keys[:-1]
            self._unique_keys = sorted_keys[new_cell]
            starts = np.flatnonzero(new_cell)
            self._starts = np.append(starts, len(sorted_keys)).astype(np.int64)
        else:
            self._unique_keys = np.empty(0, dtype=np.int64)
            self._starts = np.zeros(1, dtype=np.int64)

    def query(self, point, radius) -> Optional[Tuple[int, float]]:
        """Closest indexed point within ``radius`` of ``point``; ties go to the
        lowest point id.  Returns ``(point_id, distance)`` or None."""
        if radius <= 0:
            raise ConfigError(f"query radius must be positive, got {radius}")
        q = np.asarray(point, dtype=np.float64).reshape(3)
        pid, d2 = _query_one(self._unique_keys, self._starts, self._ids,
                             self._xs, self._ys, self._zs,
                             q[0], q[1], q[2], float(radius), self.cell_size)
        if pid < 0:
            return None
        return int(pid), math.sqrt(d2)

    def query_batch(self, points, radius):
        """Vector form of :meth:`query`; returns (ids, distances) with id -1
        and distance +inf for queries with no neighbor in range."""
        if radius <= 0:
            raise ConfigError(f"query radius must be positive, got {radius}")
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        ids = np.empty(len(pts), dtype=np.int64)
        d2 = np.empty(len(pts))
        _query_batch(self._unique_keys, self._starts, self._ids,
                     self._xs, self._ys, self._zs,
                     pts, float(radius), self.cell_size, ids, d2)
        return ids, np.sqrt(d2)


def nearest_neighbor(index, query, radius) -> Optional[Tuple[int, float]]:
    """Functional alias for :meth:`PointIndex.query`."""
    return index.query(query, radius)


@njit(cache=True, nogil=True)
def _query_one(unique_keys, starts, ids, xs, ys, zs, qx, qy, qz, radius, cell_size):
    r2 = radius * radius
    cx_lo = int(math.floor((qx - radius) / cell_size))
    cx_hi = int(math.floor((qx + radius) / cell_size))
    cy_lo = int(math.floor((qy - radius) / cell_size))
    cy_hi = int(math.floor((qy + radius) / cell_size))
    cz_lo = int(math.floor((qz - radius) / cell_size))
    cz_hi = int(math.floor((qz + radius) / cell_size))
    best_d2 = np.inf
    best_id = np.int64(-1)
    n_cells = len(unique_keys)
    for cx in range(max(cx_lo, -_COORD_BIAS), min(cx_hi, _COORD_BIAS - 1) + 1):
        for cy in range(max(cy_lo, -_COORD_BIAS), min(cy_hi, _COORD_BIAS - 1) + 1):
            for cz in range(max(cz_lo, -_COORD_BIAS), min(cz_hi, _COORD_BIAS - 1) + 1):
                key = _pack_cell(np.int64(cx), np.int64(cy), np.int64(cz))
                lo, hi = 0, n_cells
                while lo < hi:
                    mid = (lo + hi) // 2
                    if unique_keys[mid] < key:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo >= n_cells or unique_keys[lo] != key:
                    continue
                for k in range(starts[lo], starts[lo + 1]):
                    dx = xs[k] - qx
                    dy = ys[k] - qy
                    dz = zs[k] - qz
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= r2:
                        pid = ids[k]
                        if d2 < best_d2 or (d2 == best_d2 and pid < best_id):
                            best_d2 = d2
                            best_id = pid
    return best_id, best_d2


@njit(cache=True, nogil=True)
def _query_batch(unique_keys, starts, ids, xs, ys, zs, queries, radius, cell_size, out_ids, out_d2):
    for i in range(queries.shape[0]):
        pid, d2 = _query_one(unique_keys, starts, ids, xs, ys, zs,
                             queries[i, 0], queries[i, 1], queries[i, 2], radius, cell_size)
        out_ids[i] = pid
        out_d2[i] = d2
