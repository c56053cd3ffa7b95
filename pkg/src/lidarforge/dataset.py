"""Dataset generation, manifests, and composition procedures.

``generate_dataset`` renders ``count`` randomized scenes to numbered .lpc
files plus a JSON manifest carrying per-file class histograms and the digest
of the generating config.  Scene seeds derive from the master seed through
SplitMix64 of (master XOR index), so output is byte-identical regardless of
worker count or scheduling.

The composition helpers mirror common training-set surgery: seeded uniform
downsampling without replacement, train/val splits, and mixed lists that
oversample a small real pool to match a synthetic share.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from numba import njit

from .bvh import build_bvh
from .errors import ConfigError, LidarForgeError
from .lidar import scan_pattern, simulate_scan
from .rng import MASK64, derive_seed
from .scene import randomize_scene, scene_geometry

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def canonical_config_bytes(lidar_spec, rules, class_names) -> bytes:
    """Canonical (sorted-key, compact) JSON encoding of the generating config."""
    beams = lidar_spec.beam_elevations_deg
    payload = {
        "lidar": {
            "channels": lidar_spec.channels,
            "columns": lidar_spec.columns,
            "vertical_fov_deg": list(lidar_spec.vertical_fov_deg),
            "beam_elevations_deg": None if beams is None else [float(b) for b in beams],
            "range_min_m": lidar_spec.range_min_m,
            "range_max_m": lidar_spec.range_max_m,
            "rotation_rate_hz": lidar_spec.rotation_rate_hz,
            "range_noise_sigma_m": lidar_spec.range_noise_sigma_m,
            "dropout_prob": lidar_spec.dropout_prob,
        },
        "scene": {
            "area": list(rules.area),
            "counts": {k: list(v) for k, v in sorted(rules.counts.items())},
            "min_separation_m": rules.min_separation_m,
            "sensor_max_range_m": rules.sensor_max_range_m,
            "sensor_height_m": rules.sensor_height_m,
            "max_rejection_attempts": rules.max_rejection_attempts,
            "ground_plane": rules.ground_plane,
        },
        "class_names": list(class_names),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class FileEntry:
    path: str
    points: int
    histogram: List[int]
    scene_seed: int


@dataclass
class DatasetManifest:
    """Dataset-level bookkeeping: seeds, config digest, per-file histograms."""

    name: str
    master_seed: int
    config_digest: str
    class_names: List[str]
    files: List[FileEntry] = field(default_factory=list)

    @property
    def aggregate_histogram(self):
        agg = np.zeros(len(self.class_names), dtype=np.int64)
        for entry in self.files:
            agg += np.asarray(entry.histogram, dtype=np.int64)
        return agg

    @property
    def class_percentages(self):
        agg = self.aggregate_histogram
        total = int(agg.sum())
        if total == 0:
            return np.zeros(len(self.class_names))
        return 100.0 * agg / total

    def to_dict(self):
        return {
            "name": self.name,
            "master_seed": self.master_seed,
            "config_digest": self.config_digest,
            "class_names": list(self.class_names),
            "files": [
                {"path": e.path, "points": e.points, "histogram": list(map(int, e.histogram)),
                 "scene_seed": e.scene_seed}
                for e in self.files
            ],
            "aggregate_histogram": [int(v) for v in self.aggregate_histogram],
            "class_percentages": [float(p) for p in self.class_percentages],
        }

    @classmethod
    def from_dict(cls, d):
        manifest = cls(
            name=d["name"],
            master_seed=int(d["master_seed"]),
            config_digest=d["config_digest"],
            class_names=list(d["class_names"]),
        )
        for e in d["files"]:
            manifest.files.append(FileEntry(
                path=e["path"], points=int(e["points"]),
                histogram=[int(v) for v in e["histogram"]], scene_seed=int(e["scene_seed"]),
            ))
        return manifest

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@njit(cache=True)
def _partial_shuffle(idx, draws):
    for i in range(len(draws)):
        j = draws[i]
        tmp = idx[i]
        idx[i] = idx[j]
        idx[j] = tmp


def sample_without_replacement(n, k, seed):
    """First ``k`` slots of a seeded Fisher-Yates shuffle of range(n), sorted
    ascending.  Exactly uniform over k-subsets, O(k) swaps."""
    if k >= n:
        return np.arange(n, dtype=np.int64)
    gen = np.random.Generator(np.random.PCG64(int(seed) & MASK64))
    draws = gen.integers(np.arange(k, dtype=np.int64), n)
    idx = np.arange(n, dtype=np.int64)
    _partial_shuffle(idx, draws.astype(np.int64))
    return np.sort(idx[:k])


def downsample(cloud, k, seed):
    """Uniform random subset of exactly ``k`` points, without replacement.

    Deterministic in ``seed``; output points keep their input order.  If
    ``k >= num_points`` the cloud is returned unchanged.
    """
    if k < 0:
        raise ConfigError(f"downsample size must be >= 0, got {k}")
    if k >= cloud.num_points:
        return cloud
    return cloud.take(sample_without_replacement(cloud.num_points, int(k), seed))


@dataclass
class MixSpec:
    """Composition of a mixed training list.

    The synthetic share is ``floor(total * synthetic_fraction)`` unique files;
    the real share fills the remainder by cycling the (shuffled) real pool so
    per-file repetition counts differ by at most one.
    """

    total: int = 10000
    synthetic_fraction: float = 0.5
    synthetic_pool: Sequence[str] = ()
    real_pool: Sequence[str] = ()

    def validate(self):
        if self.total < 0:
            raise ConfigError(f"mix total must be >= 0, got {self.total}")
        if not 0.0 <= self.synthetic_fraction <= 1.0:
            raise ConfigError(f"synthetic_fraction must be in [0, 1], got {self.synthetic_fraction}")
        n_syn = int(self.total * self.synthetic_fraction)
        if n_syn > 0 and not self.synthetic_pool:
            raise ConfigError("synthetic pool is empty but its share is positive")
        if self.total - n_syn > 0 and not self.real_pool:
            raise ConfigError("real pool is empty but its share is positive")
        if n_syn > len(self.synthetic_pool):
            raise ConfigError(
                f"synthetic share needs {n_syn} unique files but the pool has {len(self.synthetic_pool)}"
            )
        return self


@dataclass
class MixResult:
    entries: List[str]
    counts: Dict[str, int]
    num_synthetic: int
    num_real: int


def mix_datasets(spec: MixSpec, seed) -> MixResult:
    """Build the mixed, oversampled file list for ``spec``; deterministic in seed."""
    spec.validate()
    gen = np.random.Generator(np.random.PCG64(int(seed) & MASK64))
    n_syn = int(spec.total * spec.synthetic_fraction)
    n_real = spec.total - n_syn

    entries = []
    if n_syn:
        order = gen.permutation(len(spec.synthetic_pool))[:n_syn]
        entries.extend(spec.synthetic_pool[i] for i in order)
    if n_real:
        order = gen.permutation(len(spec.real_pool))
        pool = [spec.real_pool[i] for i in order]
        entries.extend(pool[i % len(pool)] for i in range(n_real))

    counts: Dict[str, int] = {}
    for e in entries:
        counts[e] = counts.get(e, 0) + 1
    return MixResult(entries=entries, counts=counts, num_synthetic=n_syn, num_real=n_real)


def split_files(paths, val_fraction, seed):
    """Deterministic train/val partition of ``paths`` by seeded shuffle."""
    if not 0.0 <= val_fraction <= 1.0:
        raise ConfigError(f"val fraction must be in [0, 1], got {val_fraction}")
    paths = list(paths)
    gen = np.random.Generator(np.random.PCG64(int(seed) & MASK64))
    order = gen.permutation(len(paths))
    n_val = int(round(len(paths) * val_fraction))
    val = [paths[i] for i in order[:n_val]]
    train = [paths[i] for i in order[n_val:]]
    return train, val


def resolve_workers(workers=None):
    """--workers flag, else LIDARFORGE_WORKERS, else hardware parallelism."""
    if workers is not None:
        n = int(workers)
    else:
        env = os.environ.get("LIDARFORGE_WORKERS")
        n = int(env) if env else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigError(f"worker count must be >= 1, got {n}")
    return n


def generate_dataset(library, rules, lidar_spec, count, master_seed, out_dir,
                     class_names, workers=None, dataset_name=None, force=False):
    """Render ``count`` seeded scenes to ``out_dir`` and write the manifest.

    File ``i`` is named ``{i:06}.lpc`` and uses scene seed
    ``splitmix64(master_seed XOR i)``.  Generation is parallel over indices
    with output independent of the worker count.  Existing output files are
    refused unless ``force``.
    """
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    lidar_spec.validate()
    rules.validate(lidar_range_max=lidar_spec.range_max_m)
    rules.validate_for_library(library, class_names)
    class_names = tuple(class_names)
    ground_class = None
    if rules.ground_plane:
        if "other" not in class_names:
            raise ConfigError('ground plane requires an "other" class')
        ground_class = class_names.index("other")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [f"{i:06}.lpc" for i in range(count)]
    if not force:
        existing = [n for n in names + ["manifest.json"] if (out_dir / n).exists()]
        if existing:
            raise ConfigError(
                f"refusing to overwrite {len(existing)} existing file(s) in {out_dir} "
                f"(first: {existing[0]}); pass force/--force to allow"
            )

    pattern = scan_pattern(lidar_spec)
    master_seed = int(master_seed) & MASK64

    from .lpc import write_lpc  # local import to avoid a cycle at module load

    def render(i):
        seed_i = derive_seed(master_seed, i)
        try:
            scene = randomize_scene(library, rules, seed_i, class_names)
            pairs, labels = scene_geometry(scene, library)
            scene_bvh = build_bvh(pairs) if pairs else None
            cloud = simulate_scan(scene_bvh, labels, scene.sensor_pose, pattern,
                                  lidar_spec, seed_i, class_names, ground_class=ground_class)
        except LidarForgeError as exc:
            raise type(exc)(f"scene {i}: {exc}") from exc
        write_lpc(cloud, out_dir / names[i])
        return FileEntry(
            path=names[i],
            points=cloud.num_points,
            histogram=[int(v) for v in cloud.class_histogram()],
            scene_seed=seed_i,
        )

    n_workers = resolve_workers(workers)
    if count == 0:
        entries = []
    elif n_workers == 1:
        entries = [render(i) for i in range(count)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            entries = list(pool.map(render, range(count)))

    manifest = DatasetManifest(
        name=dataset_name or out_dir.name,
        master_seed=master_seed,
        config_digest=f"{fnv1a64(canonical_config_bytes(lidar_spec, rules, class_names)):016x}",
        class_names=list(class_names),
        files=entries,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
