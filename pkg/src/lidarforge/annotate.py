"""Semi-automatic annotation of scan sequences.

The pipeline registers consecutive frames with classical point-to-point ICP
(voxel downsampling, grid nearest-neighbor correspondences, closed-form SVD
alignment with a reflection fix), aggregates a deduplicated map in frame-0
coordinates, strips the ground, clusters what remains by single-linkage
Euclidean distance, and propagates per-cluster class assignments back to
every frame.  Cluster-to-class assignment itself is a human step: the CLI
prints the cluster table and reads an id-to-class file.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from numba import njit
from scipy.spatial.transform import Rotation

from .errors import ConfigError, RegistrationError
from .geometry import Pose
from .lidar import LabeledPointCloud
from .pointindex import PointIndex, _pack_cell, _COORD_BIAS


@dataclass
class IcpParams:
    voxel_m: float = 0.5
    max_corr_dist_m: float = 1.0
    max_iters: int = 50
    epsilon: float = 1e-5


@dataclass
class IcpResult:
    pose: Pose
    rmse: float
    iterations: int
    converged: bool
    num_correspondences: int


@dataclass
class Sequence:
    """Ordered scan frames at a nominal rate; labels may be all zero."""

    frames: List[LabeledPointCloud]
    rate_hz: float = 10.0

    def __post_init__(self):
        if any(f.num_points == 0 for f in self.frames):
            raise ConfigError("sequence frames must be non-empty")


@dataclass
class Trajectory:
    """Per-frame pose mapping frame i into frame 0 coordinates."""

    poses: List[Pose]

    def __post_init__(self):
        if not self.poses:
            raise ConfigError("trajectory must contain at least one pose")
        first = self.poses[0]
        if (np.abs(first.rotation - np.eye(3)).max() > 1e-9
                or np.abs(first.translation).max() > 1e-9):
            raise ConfigError("trajectory pose 0 must be the identity")


@dataclass
class ClusterSet:
    """Map-frame points with dense cluster ids (-1 = unclustered).

    ``classes[k]`` is the class assigned to cluster k, or -1 while
    unassigned; unassigned clusters propagate as "other".
    """

    points: np.ndarray
    cluster_ids: np.ndarray
    centroids: np.ndarray
    extents: np.ndarray
    sizes: np.ndarray
    classes: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.classes is None:
            self.classes = np.full(len(self.sizes), -1, dtype=np.int32)

    @property
    def num_clusters(self):
        return len(self.sizes)

    def assign(self, cluster_id, class_id):
        if not 0 <= cluster_id < self.num_clusters:
            raise ConfigError(f"cluster id {cluster_id} out of range (0..{self.num_clusters - 1})")
        self.classes[cluster_id] = class_id

    @classmethod
    def from_point_ids(cls, points, cluster_ids):
        """Rebuild a ClusterSet from stored per-point cluster ids (-1 = none)."""
        pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        ids = np.ascontiguousarray(cluster_ids, dtype=np.int32).reshape(-1)
        if len(ids) != len(pts):
            raise ConfigError(f"{len(ids)} cluster ids for {len(pts)} points")
        k = int(ids.max()) + 1 if len(ids) and ids.max() >= 0 else 0
        centroids = np.zeros((k, 3))
        extents = np.zeros((k, 3))
        sizes = np.zeros(k, dtype=np.int64)
        for cid in range(k):
            members = pts[ids == cid]
            if len(members) == 0:
                raise ConfigError(f"cluster ids are not dense: {cid} has no points")
            centroids[cid] = members.mean(axis=0)
            extents[cid] = members.max(axis=0) - members.min(axis=0)
            sizes[cid] = len(members)
        return cls(points=pts, cluster_ids=ids, centroids=centroids, extents=extents, sizes=sizes)


def _as_points(obj):
    pts = obj.points if isinstance(obj, LabeledPointCloud) else obj
    return np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)


def _pack_keys(points, cell):
    cells = np.floor(points / cell).astype(np.int64)
    if len(cells) and (np.abs(cells) >= _COORD_BIAS).any():
        raise ConfigError(f"point extent exceeds the voxel grid range at cell size {cell}")
    return _pack_cell(cells[:, 0], cells[:, 1], cells[:, 2])


def voxel_downsample(points, voxel):
    """Centroid per occupied voxel, in sorted-cell order (deterministic)."""
    if voxel <= 0:
        raise ConfigError(f"voxel size must be positive, got {voxel}")
    pts = _as_points(points)
    if len(pts) == 0:
        return pts
    keys = _pack_keys(pts, voxel)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    sorted_pts = pts[order]
    boundary = np.empty(len(sorted_keys), dtype=bool)
    boundary[0] = True
    boundary[1:] = sorted_keys[1:] != sorted_keys[:-1]
    starts = np.flatnonzero(boundary)
    sums = np.add.reduceat(sorted_pts, starts, axis=0)
    counts = np.diff(np.append(starts, len(sorted_keys)))
    return sums / counts[:, None]


def voxel_dedup_first(points, voxel):
    """Indices of the first point in each occupied voxel, in input order."""
    if voxel <= 0:
        raise ConfigError(f"voxel size must be positive, got {voxel}")
    pts = _as_points(points)
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    keys = _pack_keys(pts, voxel)
    _, first = np.unique(keys, return_index=True)
    return np.sort(first)


def solve_rigid(source, target) -> Pose:
    """Closed-form rigid transform mapping paired ``source`` onto ``target``.

    Kabsch solution: SVD of the centered cross-covariance, flipping the sign
    of the smallest singular direction when the raw solution is a reflection.
    """
    src = _as_points(source)
    dst = _as_points(target)
    if src.shape != dst.shape or len(src) < 3:
        raise ConfigError(f"rigid solve needs matched point sets of >= 3 points, got {src.shape}/{dst.shape}")
    mu_s = src.mean(axis=0)
    mu_t = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    rot = vt.T @ flip @ u.T
    return Pose(rot, mu_t - rot @ mu_s)


def _pose_delta_magnitude(delta: Pose) -> float:
    cos_angle = np.clip((np.trace(delta.rotation) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle) + np.linalg.norm(delta.translation))


def icp_align(source, target, initial=None, params=IcpParams()) -> IcpResult:
    """Rigid transform taking ``source`` onto ``target`` by point-to-point ICP.

    Both sets are voxel-downsampled first; each iteration matches every
    source point to its nearest target point within the correspondence
    distance and applies the closed-form alignment.  Terminates when the
    pose update magnitude (rotation angle + translation norm) drops below
    ``epsilon`` or after ``max_iters`` (non-convergence is flagged, not
    fatal).  Fewer than 10 correspondences at any iteration is an error.
    """
    src = voxel_downsample(_as_points(source), params.voxel_m)
    tgt = voxel_downsample(_as_points(target), params.voxel_m)
    if len(src) < 10 or len(tgt) < 10:
        raise RegistrationError(
            f"too few points after voxelization (source {len(src)}, target {len(tgt)}; need >= 10)"
        )
    index = PointIndex(tgt, cell_size=params.max_corr_dist_m)
    pose = initial if initial is not None else Pose.identity()

    converged = False
    iterations = 0
    n_corr = 0
    for iterations in range(1, params.max_iters + 1):
        moved = pose.apply(src)
        ids, _ = index.query_batch(moved, params.max_corr_dist_m)
        valid = ids >= 0
        n_corr = int(valid.sum())
        if n_corr < 10:
            raise RegistrationError(
                f"iteration {iterations}: {n_corr} correspondences within "
                f"{params.max_corr_dist_m} m (need >= 10)"
            )
        delta = solve_rigid(moved[valid], tgt[ids[valid]])
        pose = delta.compose(pose)
        if _pose_delta_magnitude(delta) < params.epsilon:
            converged = True
            break

    moved = pose.apply(src)
    ids, dist = index.query_batch(moved, params.max_corr_dist_m)
    valid = ids >= 0
    rmse = float(np.sqrt(np.mean(dist[valid] ** 2))) if valid.any() else math.inf
    return IcpResult(pose=pose, rmse=rmse, iterations=iterations,
                     converged=converged, num_correspondences=n_corr)


def register_sequence(seq, params=IcpParams()):
    """Chain frame-to-frame ICP into frame-0 poses and aggregate the map.

    The initial guess for each pair is the previous relative pose (constant
    velocity).  Returns ``(Trajectory, map cloud)`` where the map is every
    frame transformed into frame 0 and deduplicated at the voxel size.
    """
    frames = seq.frames
    if len(frames) < 2:
        raise ConfigError(f"registration needs >= 2 frames, got {len(frames)}")
    poses = [Pose.identity()]
    delta_prev = Pose.identity()
    for i in range(1, len(frames)):
        try:
            result = icp_align(frames[i], frames[i - 1], initial=delta_prev, params=params)
        except RegistrationError as exc:
            raise RegistrationError(f"frame {i}: {exc}") from exc
        delta_prev = result.pose
        poses.append(poses[-1].compose(result.pose))

    all_pts = np.concatenate([poses[i].apply(frames[i].points) for i in range(len(frames))])
    all_labels = np.concatenate([f.labels for f in frames])
    keep = voxel_dedup_first(all_pts, params.voxel_m)
    map_cloud = LabeledPointCloud(
        points=all_pts[keep],
        labels=all_labels[keep],
        class_names=frames[0].class_names,
    )
    return Trajectory(poses), map_cloud


@dataclass
class GroundParams:
    """Ground detection: seeded RANSAC plane fit with a z-threshold fallback.

    When the best plane's inlier ratio is below ``min_inlier_ratio`` the
    method falls back to masking points with z below ``z_threshold_m``.
    Setting ``method="z"`` skips RANSAC entirely.
    """

    method: str = "ransac"
    ransac_iters: int = 200
    inlier_dist_m: float = 0.15
    z_threshold_m: float = 0.3
    min_inlier_ratio: float = 0.2
    seed: int = 0


def remove_ground(points, params=GroundParams()):
    """Boolean mask marking ground points of a map cloud."""
    pts = _as_points(points)
    if len(pts) == 0:
        raise ConfigError("ground removal needs a non-empty cloud")
    if params.method == "z":
        return pts[:, 2] < params.z_threshold_m
    if params.method != "ransac":
        raise ConfigError(f"unknown ground method {params.method!r}")

    gen = np.random.Generator(np.random.PCG64(int(params.seed) & ((1 << 64) - 1)))
    best_count = -1
    best_plane = None
    n = len(pts)
    for _ in range(params.ransac_iters):
        i, j, k = gen.integers(0, n, 3)
        if i == j or j == k or i == k:
            continue
        normal = np.cross(pts[j] - pts[i], pts[k] - pts[i])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        count = int((np.abs((pts - pts[i]) @ normal) <= params.inlier_dist_m).sum())
        if count > best_count:
            best_count = count
            best_plane = (pts[i].copy(), normal)
    if best_plane is None or best_count < params.min_inlier_ratio * n:
        return pts[:, 2] < params.z_threshold_m
    anchor, normal = best_plane
    return np.abs((pts - anchor) @ normal) <= params.inlier_dist_m


@njit(cache=True, nogil=True)
def _uf_find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@njit(cache=True, nogil=True)
def _cluster_union_kernel(unique_keys, starts, ids, xs, ys, zs, points, cell_size, d2, parent):
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        cx = int(math.floor(px / cell_size))
        cy = int(math.floor(py / cell_size))
        cz = int(math.floor(pz / cell_size))
        for ox in range(-1, 2):
            for oy in range(-1, 2):
                for oz in range(-1, 2):
                    key = _pack_cell(np.int64(cx + ox), np.int64(cy + oy), np.int64(cz + oz))
                    lo, hi = 0, len(unique_keys)
                    while lo < hi:
                        mid = (lo + hi) // 2
                        if unique_keys[mid] < key:
                            lo = mid + 1
                        else:
                            hi = mid
                    if lo >= len(unique_keys) or unique_keys[lo] != key:
                        continue
                    for k in range(starts[lo], starts[lo + 1]):
                        j = ids[k]
                        if j <= i:
                            continue
                        dx = xs[k] - px
                        dy = ys[k] - py
                        dz = zs[k] - pz
                        if dx * dx + dy * dy + dz * dz <= d2:
                            ri = _uf_find(parent, i)
                            rj = _uf_find(parent, j)
                            if ri != rj:
                                if ri < rj:
                                    parent[rj] = ri
                                else:
                                    parent[ri] = rj


def euclidean_cluster(points, linkage_distance, min_cluster_size=1) -> ClusterSet:
    """Single-linkage clustering: connected components of the graph joining
    points within ``linkage_distance``.

    Components smaller than ``min_cluster_size`` are marked unclustered
    (id -1).  Cluster ids are dense, ordered by each cluster's first point.
    """
    if linkage_distance <= 0:
        raise ConfigError(f"linkage distance must be positive, got {linkage_distance}")
    pts = _as_points(points)
    n = len(pts)
    parent = np.arange(n, dtype=np.int64)
    if n:
        index = PointIndex(pts, cell_size=linkage_distance)
        _cluster_union_kernel(index._unique_keys, index._starts, index._ids,
                              index._xs, index._ys, index._zs,
                              pts, linkage_distance, float(linkage_distance) ** 2, parent)
    roots = np.array([_uf_find(parent, i) for i in range(n)], dtype=np.int64)
    sizes_by_root = np.bincount(roots, minlength=n) if n else np.empty(0, dtype=np.int64)

    cluster_ids = np.full(n, -1, dtype=np.int32)
    next_id = 0
    root_to_id: Dict[int, int] = {}
    for i in range(n):
        r = int(roots[i])
        if sizes_by_root[r] < min_cluster_size:
            continue
        if r not in root_to_id:
            root_to_id[r] = next_id
            next_id += 1
        cluster_ids[i] = root_to_id[r]

    centroids = np.zeros((next_id, 3))
    extents = np.zeros((next_id, 3))
    sizes = np.zeros(next_id, dtype=np.int64)
    for cid in range(next_id):
        members = pts[cluster_ids == cid]
        centroids[cid] = members.mean(axis=0)
        extents[cid] = members.max(axis=0) - members.min(axis=0)
        sizes[cid] = len(members)
    return ClusterSet(points=pts, cluster_ids=cluster_ids, centroids=centroids,
                      extents=extents, sizes=sizes)


def propagate_labels(seq, trajectory, clusters, radius=0.3, other_class=0) -> Sequence:
    """Label every frame point from the nearest clustered map point.

    Each point is moved into map coordinates with its frame pose and takes
    the class of the closest clustered point within ``radius``; points with
    no such neighbor (and points matched to unassigned clusters) become
    ``other_class``.  Pure function of the map: re-running changes nothing.
    """
    if len(trajectory.poses) != len(seq.frames):
        raise ConfigError(
            f"trajectory covers {len(trajectory.poses)} frames, sequence has {len(seq.frames)}"
        )
    if radius <= 0:
        raise ConfigError(f"propagation radius must be positive, got {radius}")
    clustered = clusters.cluster_ids >= 0
    cluster_class = np.where(clusters.classes >= 0, clusters.classes, other_class).astype(np.int64)
    member_class = cluster_class[clusters.cluster_ids[clustered]] if clustered.any() else np.empty(0, np.int64)
    index = PointIndex(clusters.points[clustered], cell_size=radius) if clustered.any() else None

    frames_out = []
    for pose, frame in zip(trajectory.poses, seq.frames):
        if index is None:
            labels = np.full(frame.num_points, other_class, dtype=np.uint16)
        else:
            ids, _ = index.query_batch(pose.apply(frame.points), radius)
            labels = np.where(ids >= 0, member_class[np.clip(ids, 0, None)], other_class).astype(np.uint16)
        frames_out.append(replace(frame, labels=labels))
    return Sequence(frames=frames_out, rate_hz=seq.rate_hz)


def save_trajectory(trajectory, path):
    """Write ``frame tx ty tz qx qy qz qw`` lines (Hamilton quaternion)."""
    lines = []
    for i, pose in enumerate(trajectory.poses):
        q = Rotation.from_matrix(pose.rotation).as_quat()  # x, y, z, w
        t = pose.translation
        lines.append(
            f"{i} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} {q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_trajectory(path) -> Trajectory:
    poses = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        tokens = raw.split()
        if len(tokens) != 8:
            raise ConfigError(f"{path}: line {lineno}: expected 8 fields, got {len(tokens)}")
        vals = [float(v) for v in tokens[1:]]
        rot = Rotation.from_quat(vals[3:]).as_matrix()
        poses.append(Pose(rot, vals[:3]))
    if not poses:
        raise ConfigError(f"{path}: empty trajectory")
    return Trajectory(poses)


def load_cluster_assignments(path) -> Dict[int, str]:
    """Parse ``cluster_id class_name`` lines."""
    out: Dict[int, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise ConfigError(f"{path}: line {lineno}: expected 'cluster_id class_name'")
        try:
            cid = int(tokens[0])
        except ValueError as exc:
            raise ConfigError(f"{path}: line {lineno}: bad cluster id {tokens[0]!r}") from exc
        out[cid] = tokens[1]
    return out
