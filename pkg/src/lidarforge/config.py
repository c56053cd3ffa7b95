"""Run-config file: one JSON document driving the whole pipeline.

The schema is strict: unknown keys anywhere are rejected before any work
happens, so typos fail loudly instead of silently falling back to defaults.
The file's lidar and scene sections are hashed (FNV-1a) into the Dataset
manifest, which makes a run reproducible from the manifest alone.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .lidar import LidarSpec
from .scene import DEFAULT_CLASS_NAMES, PlacementRules

_NUMBER = (int, float)


def _check_keys(section, obj, allowed, required=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{section}: must be a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}: unknown keys {unknown} (allowed: {sorted(allowed)})")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"{section}: missing required keys {missing}")


def _get(section, obj, key, types, default=None):
    if key not in obj:
        return default
    value = obj[key]
    allowed = types if isinstance(types, tuple) else (types,)
    # bool is an int subclass; only accept it where bool is explicitly allowed
    if not isinstance(value, allowed) or (isinstance(value, bool) and bool not in allowed):
        raise ConfigError(f"{section}.{key}: unexpected type {type(value).__name__}")
    return value


@dataclass
class OutputConfig:
    dir: Optional[str] = None
    count: int = 0
    seed: int = 0
    name: Optional[str] = None


@dataclass
class RunConfig:
    lidar: LidarSpec
    rules: PlacementRules
    class_names: tuple
    asset_manifest: Optional[Path] = None
    output: OutputConfig = field(default_factory=OutputConfig)
    downsample_k: Optional[int] = None
    mix_total: Optional[int] = None
    mix_fraction: Optional[float] = None


def _parse_lidar(obj, noise_obj):
    allowed = {"channels", "columns", "vertical_fov_deg", "beam_elevations_deg",
               "range_min_m", "range_max_m", "rotation_rate_hz",
               "range_noise_sigma_m", "dropout_prob"}
    _check_keys("lidar", obj, allowed)
    fov = obj.get("vertical_fov_deg", (-45.0, 45.0))
    if not (isinstance(fov, (list, tuple)) and len(fov) == 2):
        raise ConfigError("lidar.vertical_fov_deg: must be a [min, max] pair")
    spec = LidarSpec(
        channels=_get("lidar", obj, "channels", int, 128),
        columns=_get("lidar", obj, "columns", int, 1024),
        vertical_fov_deg=(float(fov[0]), float(fov[1])),
        beam_elevations_deg=obj.get("beam_elevations_deg"),
        range_min_m=float(_get("lidar", obj, "range_min_m", _NUMBER, 0.3)),
        range_max_m=float(_get("lidar", obj, "range_max_m", _NUMBER, 50.0)),
        rotation_rate_hz=float(_get("lidar", obj, "rotation_rate_hz", _NUMBER, 10.0)),
        range_noise_sigma_m=float(_get("lidar", obj, "range_noise_sigma_m", _NUMBER, 0.0)),
        dropout_prob=float(_get("lidar", obj, "dropout_prob", _NUMBER, 0.0)),
    )
    if noise_obj is not None:
        _check_keys("noise", noise_obj, {"range_sigma_m", "dropout_prob"})
        if "range_sigma_m" in noise_obj:
            spec.range_noise_sigma_m = float(_get("noise", noise_obj, "range_sigma_m", _NUMBER))
        if "dropout_prob" in noise_obj:
            spec.dropout_prob = float(_get("noise", noise_obj, "dropout_prob", _NUMBER))
    spec.validate()
    return spec


def _parse_scene(obj, base_dir):
    allowed = {"assets", "class_names", "area", "counts", "min_separation_m",
               "sensor_max_range_m", "sensor_height_m", "max_rejection_attempts",
               "ground_plane"}
    _check_keys("scene", obj, allowed, required=("area", "counts"))

    class_names = tuple(obj.get("class_names", DEFAULT_CLASS_NAMES))
    if len(set(class_names)) != len(class_names) or not class_names:
        raise ConfigError("scene.class_names: must be a non-empty list of unique names")

    area = obj["area"]
    if not (isinstance(area, list) and len(area) == 4 and all(isinstance(v, _NUMBER) for v in area)):
        raise ConfigError("scene.area: must be [xmin, ymin, xmax, ymax]")

    counts_obj = obj["counts"]
    if not isinstance(counts_obj, dict):
        raise ConfigError("scene.counts: must map class name to [min, max]")
    counts = {}
    for cname, pair in counts_obj.items():
        if cname not in class_names:
            raise ConfigError(f"scene.counts: unknown class {cname!r}")
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, int) for v in pair)):
            raise ConfigError(f"scene.counts[{cname!r}]: must be [min, max] integers")
        counts[cname] = (pair[0], pair[1])

    rules = PlacementRules(
        area=tuple(float(v) for v in area),
        counts=counts,
        min_separation_m=float(_get("scene", obj, "min_separation_m", _NUMBER, 2.0)),
        sensor_max_range_m=float(_get("scene", obj, "sensor_max_range_m", _NUMBER, 45.0)),
        sensor_height_m=float(_get("scene", obj, "sensor_height_m", _NUMBER, 2.0)),
        max_rejection_attempts=_get("scene", obj, "max_rejection_attempts", int, 1000),
        ground_plane=_get("scene", obj, "ground_plane", bool, True),
    )
    rules.validate()

    manifest = obj.get("assets")
    manifest_path = None if manifest is None else (base_dir / manifest)
    return rules, class_names, manifest_path


def load_run_config(path) -> RunConfig:
    """Parse and strictly validate a run-config JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    _check_keys("config", doc, {"lidar", "scene", "output", "noise", "downsample", "mix"},
                required=("lidar", "scene"))
    lidar = _parse_lidar(doc["lidar"], doc.get("noise"))
    rules, class_names, manifest_path = _parse_scene(doc["scene"], path.parent)
    rules.validate(lidar_range_max=lidar.range_max_m)

    output = OutputConfig()
    if "output" in doc:
        _check_keys("output", doc["output"], {"dir", "count", "seed", "name"})
        out = doc["output"]
        output = OutputConfig(
            dir=_get("output", out, "dir", str),
            count=_get("output", out, "count", int, 0),
            seed=_get("output", out, "seed", int, 0),
            name=_get("output", out, "name", str),
        )

    downsample_k = None
    if "downsample" in doc:
        _check_keys("downsample", doc["downsample"], {"k"}, required=("k",))
        downsample_k = _get("downsample", doc["downsample"], "k", int)

    mix_total = mix_fraction = None
    if "mix" in doc:
        _check_keys("mix", doc["mix"], {"total", "synthetic_fraction"})
        mix_total = _get("mix", doc["mix"], "total", int, 10000)
        mix_fraction = float(_get("mix", doc["mix"], "synthetic_fraction", _NUMBER, 0.5))

    return RunConfig(
        lidar=lidar,
        rules=rules,
        class_names=class_names,
        asset_manifest=manifest_path,
        output=output,
        downsample_k=downsample_k,
        mix_total=mix_total,
        mix_fraction=mix_fraction,
    )
