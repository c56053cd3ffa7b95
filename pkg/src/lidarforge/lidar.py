"""Spinning multi-channel LiDAR model and the scan simulator.

The sensor is described geometrically: a fan of beams at fixed elevations
swept through 360 degrees of azimuth.  Defaults model a 128-channel unit
with a +/-45 degree vertical field of view, 1024 columns per revolution and
0.3-50 m range gates; the cited hardware publishes no beam table, so
uniform spacing is the default and every field is config-overridable.

``simulate_scan`` casts the expanded ray table through a scene BVH and
returns one labeled point cloud per revolution.  All randomness (range
noise, dropout) comes from a counter-based generator keyed by
(seed, ring, column), so output is a pure function of its arguments and
independent of thread count or evaluation order.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import rng
from .bvh import _traverse_kernel
from .errors import ConfigError

MAX_U16 = 65535


@dataclass
class LidarSpec:
    """Sensor geometry, range gates, and noise knobs."""

    channels: int = 128
    columns: int = 1024
    vertical_fov_deg: tuple = (-45.0, 45.0)
    beam_elevations_deg: Optional[Sequence[float]] = None
    range_min_m: float = 0.3
    range_max_m: float = 50.0
    rotation_rate_hz: float = 10.0
    range_noise_sigma_m: float = 0.0
    dropout_prob: float = 0.0

    def validate(self):
        """Raise ConfigError listing every invalid field."""
        problems = []
        if not (isinstance(self.channels, (int, np.integer)) and 1 <= self.channels <= MAX_U16):
            problems.append(f"channels: must be an integer in [1, {MAX_U16}], got {self.channels!r}")
        if not (isinstance(self.columns, (int, np.integer)) and 1 <= self.columns <= MAX_U16):
            problems.append(f"columns: must be an integer in [1, {MAX_U16}], got {self.columns!r}")
        fov = self.vertical_fov_deg
        if len(fov) != 2 or not all(math.isfinite(v) for v in fov):
            problems.append(f"vertical_fov_deg: must be a finite (min, max) pair, got {fov!r}")
        elif not fov[0] < fov[1] and self.channels > 1:
            problems.append(f"vertical_fov_deg: min must be < max, got {fov!r}")
        elif fov[0] > fov[1]:
            problems.append(f"vertical_fov_deg: min must be <= max, got {fov!r}")
        if self.beam_elevations_deg is not None:
            beams = np.asarray(self.beam_elevations_deg, dtype=np.float64)
            if beams.ndim != 1 or len(beams) != self.channels:
                problems.append(
                    f"beam_elevations_deg: table length {beams.size} must equal channels {self.channels}"
                )
            elif not np.isfinite(beams).all() or (len(beams) > 1 and not (np.diff(beams) > 0).all()):
                problems.append("beam_elevations_deg: table must be finite and strictly increasing")
        if not (math.isfinite(self.range_min_m) and math.isfinite(self.range_max_m)
                and 0 <= self.range_min_m < self.range_max_m):
            problems.append(
                f"range_min_m/range_max_m: need 0 <= min < max, got {self.range_min_m}/{self.range_max_m}"
            )
        if not (math.isfinite(self.rotation_rate_hz) and self.rotation_rate_hz > 0):
            problems.append(f"rotation_rate_hz: must be positive, got {self.rotation_rate_hz!r}")
        if not (math.isfinite(self.range_noise_sigma_m) and self.range_noise_sigma_m >= 0):
            problems.append(f"range_noise_sigma_m: must be >= 0, got {self.range_noise_sigma_m!r}")
        if not (0.0 <= self.dropout_prob <= 1.0):
            problems.append(f"dropout_prob: must be in [0, 1], got {self.dropout_prob!r}")
        if problems:
            raise ConfigError("invalid lidar spec: " + "; ".join(problems))
        return self


@dataclass
class ScanPattern:
    """Expanded ray table in the sensor frame, ring-major.

    Row ``r * columns + c`` is ring ``r`` at azimuth ``2*pi*c / columns``;
    every direction is unit length.
    """

    directions: np.ndarray
    rings: np.ndarray
    columns: np.ndarray
    num_channels: int
    num_columns: int

    @property
    def num_rays(self):
        return len(self.directions)


def scan_pattern(spec: LidarSpec) -> ScanPattern:
    """Expand a sensor spec into its deterministic ray table."""
    spec.validate()
    if spec.beam_elevations_deg is not None:
        elev = np.deg2rad(np.asarray(spec.beam_elevations_deg, dtype=np.float64))
    else:
        elev = np.deg2rad(np.linspace(spec.vertical_fov_deg[0], spec.vertical_fov_deg[1], spec.channels))
    azim = 2.0 * np.pi * np.arange(spec.columns) / spec.columns

    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(azim), np.sin(azim)
    dirs = np.empty((spec.channels, spec.columns, 3))
    dirs[:, :, 0] = ce[:, None] * ca[None, :]
    dirs[:, :, 1] = ce[:, None] * sa[None, :]
    dirs[:, :, 2] = se[:, None]

    rings = np.repeat(np.arange(spec.channels, dtype=np.uint16), spec.columns)
    cols = np.tile(np.arange(spec.columns, dtype=np.uint16), spec.channels)
    return ScanPattern(
        directions=np.ascontiguousarray(dirs.reshape(-1, 3)),
        rings=rings,
        columns=cols,
        num_channels=spec.channels,
        num_columns=spec.columns,
    )


@dataclass
class LabeledPointCloud:
    """Points with per-point class labels and optional (ring, column) slots.

    Points are float32 in the sensor frame, matching the on-disk layout so a
    serialization round trip is the identity.  All per-point arrays have
    equal length and every label indexes ``class_names``.
    """

    points: np.ndarray
    labels: np.ndarray
    class_names: tuple
    rings: Optional[np.ndarray] = None
    columns: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16).reshape(-1)
        self.class_names = tuple(str(n) for n in self.class_names)
        if self.rings is not None:
            self.rings = np.ascontiguousarray(self.rings, dtype=np.uint16).reshape(-1)
        if self.columns is not None:
            self.columns = np.ascontiguousarray(self.columns, dtype=np.uint16).reshape(-1)
        if (self.rings is None) != (self.columns is None):
            raise ConfigError("rings and columns must be given together")
        n = len(self.points)
        for name, arr in (("labels", self.labels), ("rings", self.rings), ("columns", self.columns)):
            if arr is not None and len(arr) != n:
                raise ConfigError(f"{name} has {len(arr)} entries for {n} points")
        if len(self.labels) and int(self.labels.max()) >= len(self.class_names):
            raise ConfigError(
                f"label {int(self.labels.max())} out of range for {len(self.class_names)} classes"
            )

    @property
    def num_points(self):
        return len(self.points)

    def take(self, indices):
        """Subset cloud preserving the order of ``indices``."""
        idx = np.asarray(indices)
        return LabeledPointCloud(
            points=self.points[idx],
            labels=self.labels[idx],
            class_names=self.class_names,
            rings=None if self.rings is None else self.rings[idx],
            columns=None if self.columns is None else self.columns[idx],
        )

    def class_histogram(self):
        """Per-class point counts as an int64 array of len(class_names)."""
        return np.bincount(self.labels, minlength=len(self.class_names)).astype(np.int64)


_EMPTY_NODES3 = np.empty((0, 3))
_EMPTY_I4 = np.empty(0, dtype=np.int32)


def simulate_scan(bvh, instance_labels, sensor_pose, pattern, spec, seed,
                  class_names, ground_class=None) -> LabeledPointCloud:
    """Cast one revolution of ``pattern`` through the scene and label returns.

    Each ray keeps its nearest hit inside [range_min, range_max]; the return
    point is expressed in the sensor frame and labeled with the hit
    instance's class.  ``ground_class`` adds an implicit infinite z=0 plane
    with that label.  Range noise and dropout (when enabled in ``spec``) use
    the per-(seed, ring, column) keyed stream; returns whose noisy range
    leaves the gates are discarded.

    ``bvh`` may be None for scenes with no mesh geometry (ground plane only).
    """
    spec.validate()
    labels_arr = np.ascontiguousarray(instance_labels, dtype=np.uint16).reshape(-1)
    if bvh is not None and len(labels_arr) != bvh.num_instances:
        raise ConfigError(
            f"{len(labels_arr)} instance labels for a BVH of {bvh.num_instances} instances"
        )
    class_names = tuple(class_names)
    if len(labels_arr) and int(labels_arr.max()) >= len(class_names):
        raise ConfigError("instance label out of range for the class table")
    if ground_class is not None and not 0 <= int(ground_class) < len(class_names):
        raise ConfigError(f"ground class {ground_class} out of range for the class table")

    if bvh is None:
        nodes_min = nodes_max = _EMPTY_NODES3
        node_a = node_count = _EMPTY_I4
        v0 = e1 = e2 = _EMPTY_NODES3
        tri_inst = _EMPTY_I4
    else:
        nodes_min, nodes_max = bvh.nodes_min, bvh.nodes_max
        node_a, node_count = bvh.node_a, bvh.node_count
        v0, e1, e2 = bvh.tri_v0, bvh.tri_e1, bvh.tri_e2
        tri_inst = bvh.tri_instance

    n = pattern.num_rays
    mask = np.zeros(n, dtype=np.bool_)
    pts = np.zeros((n, 3), dtype=np.float32)
    out_labels = np.zeros(n, dtype=np.uint16)
    _scan_kernel(
        nodes_min, nodes_max, node_a, node_count, v0, e1, e2, tri_inst, labels_arr,
        sensor_pose.rotation, sensor_pose.translation,
        pattern.directions, pattern.rings, pattern.columns,
        float(spec.range_min_m), float(spec.range_max_m),
        float(spec.range_noise_sigma_m), float(spec.dropout_prob),
        np.uint64(int(seed) & rng.MASK64),
        ground_class is not None,
        np.uint16(0 if ground_class is None else int(ground_class)),
        mask, pts, out_labels,
    )
    return LabeledPointCloud(
        points=pts[mask],
        labels=out_labels[mask],
        class_names=class_names,
        rings=pattern.rings[mask],
        columns=pattern.columns[mask],
    )


@njit(cache=True, nogil=True, error_model="numpy")
def _scan_kernel(nodes_min, nodes_max, node_a, node_count, v0, e1, e2, tri_inst, inst_labels,
                 rot, trans, dirs, rings, cols, rmin, rmax, sigma, dropout, seed,
                 ground_on, ground_label, out_mask, out_pts, out_labels):
    two_pi = 2.0 * np.pi
    for i in range(dirs.shape[0]):
        dsx, dsy, dsz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        dwx = rot[0, 0] * dsx + rot[0, 1] * dsy + rot[0, 2] * dsz
        dwy = rot[1, 0] * dsx + rot[1, 1] * dsy + rot[1, 2] * dsz
        dwz = rot[2, 0] * dsx + rot[2, 1] * dsy + rot[2, 2] * dsz

        t_hit, idx = _traverse_kernel(
            nodes_min, nodes_max, node_a, node_count, v0, e1, e2,
            trans[0], trans[1], trans[2], dwx, dwy, dwz, rmin, rmax,
        )
        label = np.uint16(0)
        have = idx >= 0
        if have:
            label = inst_labels[tri_inst[idx]]
        if ground_on and dwz != 0.0:
            t_g = -trans[2] / dwz
            if rmin <= t_g <= rmax and (not have or t_g < t_hit):
                t_hit = t_g
                label = ground_label
                have = True
        if not have:
            continue

        if dropout > 0.0 or sigma > 0.0:
            key = rng.ray_key_nb(seed, rings[i], cols[i])
            if dropout > 0.0:
                if rng.unit_double_nb(rng.stream_u64_nb(key, 0)) < dropout:
                    continue
            if sigma > 0.0:
                u1 = 1.0 - rng.unit_double_nb(rng.stream_u64_nb(key, 1))
                u2 = rng.unit_double_nb(rng.stream_u64_nb(key, 2))
                t_hit = t_hit + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(two_pi * u2)
                if t_hit < rmin or t_hit > rmax:
                    continue

        out_mask[i] = True
        out_pts[i, 0] = np.float32(t_hit * dsx)
        out_pts[i, 1] = np.float32(t_hit * dsy)
        out_pts[i, 2] = np.float32(t_hit * dsz)
        out_labels[i] = label
