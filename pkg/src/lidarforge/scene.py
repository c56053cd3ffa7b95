"""Class-tagged asset library and randomized scene generation.

Scenes follow simple placement rules: instances get a random planar position
and yaw inside a rectangular area, rest on the z=0 ground, must stay within
sensor range, and must keep a disc-based separation from each other
(footprint radii are conservative but cheap; overlap is never mesh-accurate).
Placement is rejection sampling, deterministic in the seed, so scenes can be
generated concurrently with distinct seeds.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, PlacementError
from .geometry import Pose, TriangleMesh, transform_mesh
from .meshio import load_mesh

DEFAULT_CLASS_NAMES = ("other", "tractor", "combine")


@dataclass
class Asset:
    """One mesh in the library with its class tag and derived footprint.

    ``footprint_radius`` is the largest horizontal distance of any vertex
    from the mesh vertex centroid; ``ground_offset`` is the z shift that
    rests the mesh on z=0.
    """

    name: str
    class_id: int
    mesh: TriangleMesh
    footprint_radius: float = field(init=False)
    ground_offset: float = field(init=False)

    def __post_init__(self):
        if self.mesh.num_vertices == 0:
            raise ConfigError(f"asset {self.name!r} has no vertices")
        centroid = self.mesh.vertices.mean(axis=0)
        horiz = self.mesh.vertices[:, :2] - centroid[:2]
        self.footprint_radius = float(np.sqrt((horiz ** 2).sum(axis=1)).max())
        self.ground_offset = -float(self.mesh.vertices[:, 2].min())


@dataclass
class PlacementRules:
    """Area, separation, and per-class instance count rules for one scene.

    ``area`` is (xmin, ymin, xmax, ymax) in meters; ``counts`` maps a class
    name to its inclusive (min, max) instance count per scene.
    """

    area: Tuple[float, float, float, float]
    counts: Dict[str, Tuple[int, int]]
    min_separation_m: float = 2.0
    sensor_max_range_m: float = 45.0
    sensor_height_m: float = 2.0
    max_rejection_attempts: int = 1000
    ground_plane: bool = True

    def validate(self, lidar_range_max=None):
        xmin, ymin, xmax, ymax = self.area
        if not (xmin < xmax and ymin < ymax):
            raise ConfigError(f"placement area must have positive extent, got {self.area}")
        if self.min_separation_m < 0:
            raise ConfigError(f"min_separation_m must be >= 0, got {self.min_separation_m}")
        if self.sensor_max_range_m <= 0:
            raise ConfigError(f"sensor_max_range_m must be positive, got {self.sensor_max_range_m}")
        if lidar_range_max is not None and self.sensor_max_range_m > lidar_range_max:
            raise ConfigError(
                f"sensor_max_range_m {self.sensor_max_range_m} exceeds lidar range_max_m {lidar_range_max}"
            )
        if self.max_rejection_attempts < 1:
            raise ConfigError("max_rejection_attempts must be >= 1")
        for cname, (lo, hi) in self.counts.items():
            if not (0 <= lo <= hi):
                raise ConfigError(f"counts[{cname!r}]: need 0 <= min <= max, got ({lo}, {hi})")
        return self

    def validate_for_library(self, library, class_names):
        """Check the area can plausibly admit the densest configured scene.

        Conservative heuristic: the summed disc area of the maximum instance
        count per class (radius = largest class footprint plus half the
        separation) must not exceed half the placement rectangle.
        """
        self.validate()
        by_class = {}
        for asset in library:
            by_class.setdefault(asset.class_id, []).append(asset)
        name_to_id = {n: i for i, n in enumerate(class_names)}
        total = 0.0
        for cname, (lo, hi) in self.counts.items():
            if cname not in name_to_id:
                raise ConfigError(f"counts refer to unknown class {cname!r}")
            cid = name_to_id[cname]
            if hi > 0 and cid not in by_class:
                raise ConfigError(f"counts require class {cname!r} but the library has no such asset")
            if hi > 0:
                r = max(a.footprint_radius for a in by_class[cid]) + self.min_separation_m / 2.0
                total += hi * math.pi * r * r
        xmin, ymin, xmax, ymax = self.area
        rect = (xmax - xmin) * (ymax - ymin)
        if total > 0.5 * rect:
            raise ConfigError(
                f"placement area {rect:.1f} m^2 cannot admit the configured footprints "
                f"(~{total:.1f} m^2 of separation discs)"
            )
        return self


@dataclass
class SceneInstance:
    asset_name: str
    pose: Pose


@dataclass
class SceneDescription:
    """Posed instances plus the sensor pose; with a seed this fully
    determines a simulated scan."""

    instances: List[SceneInstance]
    sensor_pose: Pose
    seed: int


def load_asset_library(manifest_path, class_names=DEFAULT_CLASS_NAMES):
    """Load the asset manifest: a JSON list of {name, class, mesh, scale?}.

    Mesh paths are resolved relative to the manifest file.  Duplicate asset
    names, unknown classes, and missing mesh files are errors.
    """
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read asset manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"asset manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(entries, list):
        raise ConfigError(f"asset manifest {manifest_path} must be a JSON list")

    name_to_id = {n: i for i, n in enumerate(class_names)}
    library = []
    seen = set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or not {"name", "class", "mesh"} <= set(entry):
            raise ConfigError(f"asset entry {i} must be an object with name/class/mesh keys")
        unknown = set(entry) - {"name", "class", "mesh", "scale"}
        if unknown:
            raise ConfigError(f"asset entry {i}: unknown keys {sorted(unknown)}")
        name = str(entry["name"])
        if name in seen:
            raise ConfigError(f"duplicate asset name {name!r}")
        seen.add(name)
        cname = str(entry["class"])
        if cname not in name_to_id:
            raise ConfigError(f"asset {name!r}: unknown class {cname!r} (classes: {list(class_names)})")
        mesh_path = manifest_path.parent / entry["mesh"]
        if not mesh_path.exists():
            raise ConfigError(f"asset {name!r}: mesh file {mesh_path} does not exist")
        mesh = load_mesh(mesh_path)
        scale = float(entry.get("scale", 1.0))
        if scale != 1.0:
            mesh = transform_mesh(mesh, Pose.identity(), scale)
        library.append(Asset(name=name, class_id=name_to_id[cname], mesh=mesh))
    return library


def randomize_scene(library, rules, seed, class_names=DEFAULT_CLASS_NAMES):
    """Draw one rule-respecting scene configuration, deterministic in seed.

    The instance count per class is uniform over [min, max]; each instance
    picks a uniform asset of its class, then rejection-samples a position
    and yaw until the separation and sensor-range rules hold.
    """
    rules.validate()
    gen = np.random.Generator(np.random.PCG64(int(seed) & ((1 << 64) - 1)))
    xmin, ymin, xmax, ymax = rules.area

    sx = gen.uniform(xmin, xmax)
    sy = gen.uniform(ymin, ymax)
    syaw = gen.uniform(0.0, 2.0 * np.pi)
    sensor_pose = Pose.from_yaw(syaw, (sx, sy, rules.sensor_height_m))

    by_class = {}
    for asset in library:
        by_class.setdefault(asset.class_id, []).append(asset)
    name_to_id = {n: i for i, n in enumerate(class_names)}

    placed = []       # (x, y, footprint_radius)
    instances = []
    for cname in sorted(rules.counts, key=lambda n: name_to_id.get(n, len(class_names))):
        lo, hi = rules.counts[cname]
        cid = name_to_id.get(cname)
        if cid is None:
            raise ConfigError(f"counts refer to unknown class {cname!r}")
        n = int(gen.integers(lo, hi + 1))
        if n > 0 and cid not in by_class:
            raise ConfigError(f"no asset of class {cname!r} in the library")
        for k in range(n):
            assets = by_class[cid]
            asset = assets[int(gen.integers(len(assets)))]
            for _ in range(rules.max_rejection_attempts):
                x = gen.uniform(xmin, xmax)
                y = gen.uniform(ymin, ymax)
                yaw = gen.uniform(0.0, 2.0 * np.pi)
                if math.hypot(x - sx, y - sy) > rules.sensor_max_range_m:
                    continue
                ok = True
                for (px, py, pr) in placed:
                    if math.hypot(x - px, y - py) < rules.min_separation_m + pr + asset.footprint_radius:
                        ok = False
                        break
                if ok:
                    break
            else:
                raise PlacementError(
                    f"seed {seed}: could not place instance {k} of class {cname!r} within "
                    f"{rules.max_rejection_attempts} attempts (area or separation rules too tight)"
                )
            placed.append((x, y, asset.footprint_radius))
            instances.append(SceneInstance(
                asset_name=asset.name,
                pose=Pose.from_yaw(yaw, (x, y, asset.ground_offset)),
            ))
    return SceneDescription(instances=instances, sensor_pose=sensor_pose, seed=int(seed))


def scene_geometry(scene, library):
    """Materialize a scene as ((mesh, pose) instances, per-instance class ids)."""
    assets = {a.name: a for a in library}
    pairs = []
    labels = []
    for inst in scene.instances:
        asset = assets.get(inst.asset_name)
        if asset is None:
            raise ConfigError(f"scene references unknown asset {inst.asset_name!r}")
        pairs.append((asset.mesh, inst.pose))
        labels.append(asset.class_id)
    return pairs, np.asarray(labels, dtype=np.uint16)
