"""Rigid transforms and indexed triangle meshes.

Meshes are plain vertex/index arrays in world units (meters).  All structures
here are immutable by convention: operations return new objects and never
mutate their inputs, which keeps them safe to share across worker threads.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

ORTHONORMAL_TOL = 1e-9


@dataclass
class Pose:
    """Rigid transform: ``x -> rotation @ x + translation``.

    The rotation must be orthonormal with determinant +1 (checked to 1e-9 at
    construction).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ConfigError(f"pose rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise ConfigError(f"pose translation must have 3 components, got {self.translation.shape}")
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise ConfigError("pose entries must be finite")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        det = np.linalg.det(self.rotation)
        if err > ORTHONORMAL_TOL or abs(det - 1.0) > ORTHONORMAL_TOL:
            raise ConfigError(
                f"rotation is not orthonormal with det +1 (orthogonality error {err:.3g}, det {det:.12g})"
            )

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw, translation=(0.0, 0.0, 0.0)):
        """Rotation about +z by ``yaw`` radians plus a translation."""
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(rot, np.asarray(translation, dtype=np.float64))

    def compose(self, other):
        """``self`` after ``other``: (self ∘ other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self):
        rot_t = self.rotation.T.copy()
        return Pose(rot_t, -(rot_t @ self.translation))

    def apply(self, points):
        """Transform an (n, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


@dataclass
class TriangleMesh:
    """Indexed triangle soup with cached axis-aligned bounds.

    ``vertices`` is (n, 3) float64, ``triangles`` is (m, 3) int32 indexing
    into the vertex array.  An empty mesh (zero triangles) is a valid value
    for intermediate results such as crops; its bounds are the min/max
    identities (+inf / -inf).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    bounds_min: np.ndarray = field(init=False)
    bounds_max: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if not np.isfinite(self.vertices).all():
            raise ConfigError("mesh vertices must be finite")
        if self.triangles.size:
            lo, hi = self.triangles.min(), self.triangles.max()
            if lo < 0 or hi >= len(self.vertices):
                raise ConfigError(
                    f"triangle index out of range: [{lo}, {hi}] vs {len(self.vertices)} vertices"
                )
        if len(self.vertices):
            self.bounds_min = self.vertices.min(axis=0)
            self.bounds_max = self.vertices.max(axis=0)
        else:
            self.bounds_min = np.full(3, np.inf)
            self.bounds_max = np.full(3, -np.inf)

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    def triangle_corners(self):
        """Return the (m, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]


def transform_mesh(mesh, pose, scale=1.0):
    """Apply ``v -> scale * R v + t`` to every vertex and recompute bounds."""
    if not (np.isfinite(scale) and scale > 0):
        raise ConfigError(f"scale must be a positive finite number, got {scale}")
    verts = (scale * mesh.vertices) @ pose.rotation.T + pose.translation
    return TriangleMesh(verts, mesh.triangles.copy())


def crop_mesh(mesh, box_min, box_max):
    """Keep exactly the triangles whose three corners lie inside the closed box.

    Unreferenced vertices are dropped and indices compacted; relative vertex
    order is preserved.  An empty result is valid.
    """
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    if box_min.shape != (3,) or box_max.shape != (3,):
        raise ConfigError("crop box min/max must each have 3 components")
    if not (box_min < box_max).all():
        raise ConfigError(f"crop box min {box_min} must be < max {box_max} componentwise")

    inside = ((mesh.vertices >= box_min) & (mesh.vertices <= box_max)).all(axis=1)
    keep = inside[mesh.triangles].all(axis=1)
    kept_tris = mesh.triangles[keep]
    used = np.unique(kept_tris)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int32)
    remap[used] = np.arange(len(used), dtype=np.int32)
    return TriangleMesh(mesh.vertices[used], remap[kept_tris])


def weld_vertices(mesh, tolerance=1e-6):
    """Merge vertices closer than ``tolerance`` (snap-to-grid) and re-index.

    Off by default in the loaders; cropping and labeling do not need shared
    topology.  Triangles that collapse to fewer than three distinct vertices
    are dropped.
    """
    if tolerance <= 0:
        raise ConfigError(f"weld tolerance must be positive, got {tolerance}")
    keys = np.round(mesh.vertices / tolerance).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    # Renumber so merged vertices keep first-appearance order.
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    new_tris = rank[inverse][mesh.triangles].astype(np.int32)
    degenerate = (
        (new_tris[:, 0] == new_tris[:, 1])
        | (new_tris[:, 1] == new_tris[:, 2])
        | (new_tris[:, 0] == new_tris[:, 2])
    )
    return TriangleMesh(mesh.vertices[np.sort(first)], new_tris[~degenerate])
