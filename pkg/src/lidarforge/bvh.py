"""Bounding volume hierarchy over flattened mesh instances.

Instances (mesh, pose) are flattened into world space before the build; the
tree is a binned surface-area-heuristic BVH (16 bins, leaf size <= 4) stored
as flat arrays so the numba kernels can traverse it.  The ray-triangle
kernel is a barycentric (Moller-Trumbore style) test with culling disabled:
meshes extracted from neural scene representations have inconsistent
winding, so both faces count.  Determinants closer to zero than 1e-12 are
treated as parallel.

Construction is single-threaded and deterministic: identical inputs produce
bitwise-identical layouts.  A built tree is immutable and safe to share
across threads; ``intersect`` is reentrant.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .errors import ConfigError

N_BINS = 16
LEAF_SIZE = 4
MAX_DEPTH = 64
DET_EPSILON = 1e-12


@dataclass
class Ray:
    """Half-open ray segment; ``direction`` must be unit length (1e-9)."""

    origin: np.ndarray
    direction: np.ndarray
    t_min: float = 0.0
    t_max: float = np.inf

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.origin.shape != (3,) or self.direction.shape != (3,):
            raise ConfigError("ray origin/direction must have 3 components")
        if not (np.isfinite(self.origin).all() and np.isfinite(self.direction).all()):
            raise ConfigError("ray origin/direction must be finite")
        norm = float(np.linalg.norm(self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ConfigError(f"ray direction must be unit length, |d| = {norm!r}")
        if not (0.0 <= self.t_min < self.t_max):
            raise ConfigError(f"ray range must satisfy 0 <= t_min < t_max, got [{self.t_min}, {self.t_max}]")


@dataclass
class Hit:
    """Closest intersection: parameter, owning instance, global triangle id."""

    t: float
    instance_id: int
    triangle_id: int
    point: np.ndarray


@dataclass
class Bvh:
    """Flat-array BVH plus the world-space triangle soup it indexes.

    ``node_a`` holds the right-child index for internal nodes and the first
    primitive offset for leaves (``node_count`` > 0 marks a leaf, giving the
    primitive count).  The left child of an internal node is always the next
    node.  ``prim_order`` maps sorted primitive positions back to global
    triangle ids (instance-major flattening order).
    """

    nodes_min: np.ndarray
    nodes_max: np.ndarray
    node_a: np.ndarray
    node_count: np.ndarray
    prim_order: np.ndarray
    tri_v0: np.ndarray
    tri_e1: np.ndarray
    tri_e2: np.ndarray
    tri_instance: np.ndarray
    depth: int
    num_instances: int

    @property
    def num_triangles(self):
        return len(self.prim_order)

    @property
    def num_nodes(self):
        return len(self.node_a)


def flatten_instances(instances):
    """Flatten (mesh, pose) pairs into world-space triangle arrays.

    Returns ``(v0, e1, e2, instance_ids)`` where the global triangle id is
    the row index (instances in input order, triangles in mesh order).
    """
    v0s, e1s, e2s, inst = [], [], [], []
    for i, (mesh, pose) in enumerate(instances):
        if mesh.num_triangles == 0:
            continue
        world = pose.apply(mesh.vertices)
        corners = world[mesh.triangles]
        v0s.append(corners[:, 0])
        e1s.append(corners[:, 1] - corners[:, 0])
        e2s.append(corners[:, 2] - corners[:, 0])
        inst.append(np.full(mesh.num_triangles, i, dtype=np.int32))
    if not v0s:
        return (np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3)), np.empty(0, dtype=np.int32))
    return (
        np.ascontiguousarray(np.concatenate(v0s)),
        np.ascontiguousarray(np.concatenate(e1s)),
        np.ascontiguousarray(np.concatenate(e2s)),
        np.concatenate(inst),
    )


def build_bvh(instances):
    """Build a BVH over every triangle of the given (mesh, pose) instances."""
    instances = list(instances)
    if not instances:
        raise ConfigError("cannot build a BVH over an empty scene")
    v0, e1, e2, inst = flatten_instances(instances)
    if len(v0) == 0:
        raise ConfigError("cannot build a BVH: no instance has any triangle")

    c1 = v0 + e1
    c2 = v0 + e2
    tri_min = np.minimum(np.minimum(v0, c1), c2)
    tri_max = np.maximum(np.maximum(v0, c1), c2)
    centroids = (v0 + c1 + c2) / 3.0

    nodes_min, nodes_max, node_a, node_count, order, n_nodes, depth = _build_kernel(
        tri_min, tri_max, centroids
    )
    order = order.astype(np.int32)
    return Bvh(
        nodes_min=nodes_min[:n_nodes].copy(),
        nodes_max=nodes_max[:n_nodes].copy(),
        node_a=node_a[:n_nodes].copy(),
        node_count=node_count[:n_nodes].copy(),
        prim_order=order,
        tri_v0=np.ascontiguousarray(v0[order]),
        tri_e1=np.ascontiguousarray(e1[order]),
        tri_e2=np.ascontiguousarray(e2[order]),
        tri_instance=inst[order],
        depth=int(depth),
        num_instances=len(instances),
    )


def intersect(bvh, ray) -> Optional[Hit]:
    """Closest hit along ``ray`` in [t_min, t_max], or None."""
    t, sorted_idx = _traverse_kernel(
        bvh.nodes_min, bvh.nodes_max, bvh.node_a, bvh.node_count,
        bvh.tri_v0, bvh.tri_e1, bvh.tri_e2,
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        ray.t_min, ray.t_max,
    )
    if sorted_idx < 0:
        return None
    return Hit(
        t=float(t),
        instance_id=int(bvh.tri_instance[sorted_idx]),
        triangle_id=int(bvh.prim_order[sorted_idx]),
        point=ray.origin + t * ray.direction,
    )


@njit(cache=True, nogil=True)
def _build_kernel(tri_min, tri_max, centroids):
    m = tri_min.shape[0]
    cap = 2 * m
    nodes_min = np.empty((cap, 3))
    nodes_max = np.empty((cap, 3))
    node_a = np.zeros(cap, dtype=np.int32)
    node_count = np.zeros(cap, dtype=np.int32)
    prim = np.arange(m, dtype=np.int64)

    stack_lo = np.empty(MAX_DEPTH + 4, dtype=np.int64)
    stack_hi = np.empty(MAX_DEPTH + 4, dtype=np.int64)
    stack_depth = np.empty(MAX_DEPTH + 4, dtype=np.int64)
    stack_patch = np.empty(MAX_DEPTH + 4, dtype=np.int64)

    bin_count = np.empty(N_BINS, dtype=np.int64)
    bin_min = np.empty((N_BINS, 3))
    bin_max = np.empty((N_BINS, 3))
    suffix_sa = np.empty(N_BINS)
    suffix_n = np.empty(N_BINS, dtype=np.int64)

    sp = 0
    stack_lo[0], stack_hi[0], stack_depth[0], stack_patch[0] = 0, m, 0, -1
    sp = 1
    next_node = 0
    max_depth = 0

    while sp > 0:
        sp -= 1
        lo, hi = stack_lo[sp], stack_hi[sp]
        depth, patch = stack_depth[sp], stack_patch[sp]
        s = next_node
        next_node += 1
        if patch >= 0:
            node_a[patch] = s
        if depth > max_depth:
            max_depth = depth

        # node and centroid bounds
        bminx = bminy = bminz = np.inf
        bmaxx = bmaxy = bmaxz = -np.inf
        cminx = cminy = cminz = np.inf
        cmaxx = cmaxy = cmaxz = -np.inf
        for k in range(lo, hi):
            p = prim[k]
            bminx = min(bminx, tri_min[p, 0]); bmaxx = max(bmaxx, tri_max[p, 0])
            bminy = min(bminy, tri_min[p, 1]); bmaxy = max(bmaxy, tri_max[p, 1])
            bminz = min(bminz, tri_min[p, 2]); bmaxz = max(bmaxz, tri_max[p, 2])
            cminx = min(cminx, centroids[p, 0]); cmaxx = max(cmaxx, centroids[p, 0])
            cminy = min(cminy, centroids[p, 1]); cmaxy = max(cmaxy, centroids[p, 1])
            cminz = min(cminz, centroids[p, 2]); cmaxz = max(cmaxz, centroids[p, 2])
        nodes_min[s, 0], nodes_min[s, 1], nodes_min[s, 2] = bminx, bminy, bminz
        nodes_max[s, 0], nodes_max[s, 1], nodes_max[s, 2] = bmaxx, bmaxy, bmaxz

        n = hi - lo
        if n <= LEAF_SIZE or depth >= MAX_DEPTH:
            node_a[s] = lo
            node_count[s] = n
            continue

        ex, ey, ez = cmaxx - cminx, cmaxy - cminy, cmaxz - cminz
        axis = 0
        ext = ex
        if ey > ext:
            axis, ext = 1, ey
        if ez > ext:
            axis, ext = 2, ez
        cmin_axis = cminx if axis == 0 else (cminy if axis == 1 else cminz)

        mid = lo
        if ext > 0.0:
            for b in range(N_BINS):
                bin_count[b] = 0
                for a in range(3):
                    bin_min[b, a] = np.inf
                    bin_max[b, a] = -np.inf
            scale = N_BINS / ext
            for k in range(lo, hi):
                p = prim[k]
                b = int((centroids[p, axis] - cmin_axis) * scale)
                if b >= N_BINS:
                    b = N_BINS - 1
                bin_count[b] += 1
                for a in range(3):
                    if tri_min[p, a] < bin_min[b, a]:
                        bin_min[b, a] = tri_min[p, a]
                    if tri_max[p, a] > bin_max[b, a]:
                        bin_max[b, a] = tri_max[p, a]

            # suffix surface areas (bins b..N-1)
            rminx = rminy = rminz = np.inf
            rmaxx = rmaxy = rmaxz = -np.inf
            rn = 0
            for b in range(N_BINS - 1, -1, -1):
                if bin_count[b] > 0:
                    rminx = min(rminx, bin_min[b, 0]); rmaxx = max(rmaxx, bin_max[b, 0])
                    rminy = min(rminy, bin_min[b, 1]); rmaxy = max(rmaxy, bin_max[b, 1])
                    rminz = min(rminz, bin_min[b, 2]); rmaxz = max(rmaxz, bin_max[b, 2])
                    rn += bin_count[b]
                suffix_n[b] = rn
                if rn > 0:
                    dx, dy, dz = rmaxx - rminx, rmaxy - rminy, rmaxz - rminz
                    suffix_sa[b] = 2.0 * (dx * dy + dy * dz + dz * dx)
                else:
                    suffix_sa[b] = 0.0

            best_cost = np.inf
            best_split = -1
            lminx = lminy = lminz = np.inf
            lmaxx = lmaxy = lmaxz = -np.inf
            ln = 0
            for b in range(N_BINS - 1):
                if bin_count[b] > 0:
                    lminx = min(lminx, bin_min[b, 0]); lmaxx = max(lmaxx, bin_max[b, 0])
                    lminy = min(lminy, bin_min[b, 1]); lmaxy = max(lmaxy, bin_max[b, 1])
                    lminz = min(lminz, bin_min[b, 2]); lmaxz = max(lmaxz, bin_max[b, 2])
                    ln += bin_count[b]
                if ln == 0 or suffix_n[b + 1] == 0:
                    continue
                dx, dy, dz = lmaxx - lminx, lmaxy - lminy, lmaxz - lminz
                sa_l = 2.0 * (dx * dy + dy * dz + dz * dx)
                cost = sa_l * ln + suffix_sa[b + 1] * suffix_n[b + 1]
                if cost < best_cost:
                    best_cost = cost
                    best_split = b

            if best_split >= 0:
                i, j = lo, hi - 1
                while i <= j:
                    p = prim[i]
                    b = int((centroids[p, axis] - cmin_axis) * scale)
                    if b >= N_BINS:
                        b = N_BINS - 1
                    if b <= best_split:
                        i += 1
                    else:
                        prim[i], prim[j] = prim[j], prim[i]
                        j -= 1
                mid = i

        if mid <= lo or mid >= hi:
            # degenerate centroids or one-sided SAH: equal-count fallback
            mid = lo + n // 2

        node_count[s] = 0
        stack_lo[sp], stack_hi[sp], stack_depth[sp], stack_patch[sp] = mid, hi, depth + 1, s
        sp += 1
        stack_lo[sp], stack_hi[sp], stack_depth[sp], stack_patch[sp] = lo, mid, depth + 1, -1
        sp += 1

    return nodes_min, nodes_max, node_a, node_count, prim, next_node, max_depth


@njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _aabb_enter(nodes_min, nodes_max, ni, ox, oy, oz, dx, dy, dz, t_lo, t_hi):
    """Entry parameter of the ray into node ``ni``; (False, 0) on miss."""
    lo = t_lo
    hi = t_hi
    if dx != 0.0:
        inv = 1.0 / dx
        u0 = (nodes_min[ni, 0] - ox) * inv
        u1 = (nodes_max[ni, 0] - ox) * inv
        if u0 > u1:
            u0, u1 = u1, u0
        if u0 > lo:
            lo = u0
        if u1 < hi:
            hi = u1
        if hi < lo:
            return False, 0.0
    elif ox < nodes_min[ni, 0] or ox > nodes_max[ni, 0]:
        return False, 0.0
    if dy != 0.0:
        inv = 1.0 / dy
        u0 = (nodes_min[ni, 1] - oy) * inv
        u1 = (nodes_max[ni, 1] - oy) * inv
        if u0 > u1:
            u0, u1 = u1, u0
        if u0 > lo:
            lo = u0
        if u1 < hi:
            hi = u1
        if hi < lo:
            return False, 0.0
    elif oy < nodes_min[ni, 1] or oy > nodes_max[ni, 1]:
        return False, 0.0
    if dz != 0.0:
        inv = 1.0 / dz
        u0 = (nodes_min[ni, 2] - oz) * inv
        u1 = (nodes_max[ni, 2] - oz) * inv
        if u0 > u1:
            u0, u1 = u1, u0
        if u0 > lo:
            lo = u0
        if u1 < hi:
            hi = u1
        if hi < lo:
            return False, 0.0
    elif oz < nodes_min[ni, 2] or oz > nodes_max[ni, 2]:
        return False, 0.0
    return True, lo


@njit(cache=True, nogil=True, inline="always", error_model="numpy")
def _tri_hit_t(v0, e1, e2, k, ox, oy, oz, dx, dy, dz):
    """Moller-Trumbore without culling; returns hit t or -inf on miss."""
    e1x, e1y, e1z = e1[k, 0], e1[k, 1], e1[k, 2]
    e2x, e2y, e2z = e2[k, 0], e2[k, 1], e2[k, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if det < DET_EPSILON and det > -DET_EPSILON:
        return -np.inf
    inv = 1.0 / det
    tx = ox - v0[k, 0]
    ty = oy - v0[k, 1]
    tz = oz - v0[k, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@njit(cache=True, nogil=True, error_model="numpy")
def _traverse_kernel(nodes_min, nodes_max, node_a, node_count, v0, e1, e2,
                     ox, oy, oz, dx, dy, dz, t_min, t_max):
    """Closest (t, sorted primitive index) within [t_min, t_max]; -1 on miss."""
    best_t = t_max
    best_i = -1
    if len(node_a) == 0:
        return best_t, best_i

    stack_node = np.empty(2 * MAX_DEPTH + 4, dtype=np.int64)
    stack_t = np.empty(2 * MAX_DEPTH + 4, dtype=np.float64)
    hit0, te0 = _aabb_enter(nodes_min, nodes_max, 0, ox, oy, oz, dx, dy, dz, t_min, best_t)
    if not hit0:
        return best_t, best_i
    stack_node[0] = 0
    stack_t[0] = te0
    sp = 1
    while sp > 0:
        sp -= 1
        te = stack_t[sp]
        if best_i >= 0 and te > best_t:
            continue
        ni = stack_node[sp]
        cnt = node_count[ni]
        if cnt > 0:
            start = node_a[ni]
            for k in range(start, start + cnt):
                t = _tri_hit_t(v0, e1, e2, k, ox, oy, oz, dx, dy, dz)
                if t >= t_min:
                    if best_i < 0:
                        if t <= best_t:
                            best_t = t
                            best_i = k
                    elif t < best_t:
                        best_t = t
                        best_i = k
        else:
            left = ni + 1
            right = node_a[ni]
            hit_l, t_l = _aabb_enter(nodes_min, nodes_max, left, ox, oy, oz, dx, dy, dz, t_min, best_t)
            hit_r, t_r = _aabb_enter(nodes_min, nodes_max, right, ox, oy, oz, dx, dy, dz, t_min, best_t)
            if hit_l and hit_r:
                if t_l <= t_r:
                    stack_node[sp] = right; stack_t[sp] = t_r; sp += 1
                    stack_node[sp] = left; stack_t[sp] = t_l; sp += 1
                else:
                    stack_node[sp] = left; stack_t[sp] = t_l; sp += 1
                    stack_node[sp] = right; stack_t[sp] = t_r; sp += 1
            elif hit_l:
                stack_node[sp] = left; stack_t[sp] = t_l; sp += 1
            elif hit_r:
                stack_node[sp] = right; stack_t[sp] = t_r; sp += 1
    return best_t, best_i


@njit(cache=True, nogil=True, error_model="numpy")
def _traverse_batch_kernel(nodes_min, nodes_max, node_a, node_count, v0, e1, e2,
                           origins, directions, t_min, t_max, out_t, out_idx):
    for r in range(origins.shape[0]):
        t, i = _traverse_kernel(nodes_min, nodes_max, node_a, node_count, v0, e1, e2,
                                origins[r, 0], origins[r, 1], origins[r, 2],
                                directions[r, 0], directions[r, 1], directions[r, 2],
                                t_min, t_max)
        out_t[r] = t
        out_idx[r] = i


def intersect_batch(bvh, origins, directions, t_min, t_max):
    """Vector form of :func:`intersect` over (n, 3) origin/direction arrays.

    Returns ``(t, sorted_index)`` arrays; index -1 marks a miss.  Exposed for
    tests and bulk tooling; the scan simulator uses its own fused kernel.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    directions = np.ascontiguousarray(directions, dtype=np.float64)
    out_t = np.empty(len(origins))
    out_idx = np.empty(len(origins), dtype=np.int64)
    _traverse_batch_kernel(bvh.nodes_min, bvh.nodes_max, bvh.node_a, bvh.node_count,
                           bvh.tri_v0, bvh.tri_e1, bvh.tri_e2,
                           origins, directions, float(t_min), float(t_max), out_t, out_idx)
    return out_t, out_idx
