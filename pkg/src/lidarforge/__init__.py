"""lidarforge: synthetic LiDAR dataset forge.

Ray-cast a configurable spinning LiDAR against class-tagged triangle meshes
placed under randomized rules, emit perfectly labeled point clouds, annotate
real scan sequences semi-automatically via ICP map aggregation and
clustering, and evaluate segmentation output with per-class IoU and mIoU.
"""

from .annotate import (
    ClusterSet,
    GroundParams,
    IcpParams,
    IcpResult,
    Sequence,
    Trajectory,
    euclidean_cluster,
    icp_align,
    propagate_labels,
    register_sequence,
    remove_ground,
    solve_rigid,
    voxel_downsample,
)
from .bvh import Bvh, Hit, Ray, build_bvh, intersect
from .dataset import (
    DatasetManifest,
    MixSpec,
    downsample,
    generate_dataset,
    mix_datasets,
    split_files,
)
from .errors import (
    ConfigError,
    LidarForgeError,
    LpcFormatError,
    MeshFormatError,
    PlacementError,
    RegistrationError,
)
from .geometry import Pose, TriangleMesh, crop_mesh, transform_mesh, weld_vertices
from .lidar import LabeledPointCloud, LidarSpec, ScanPattern, scan_pattern, simulate_scan
from .lpc import export_ply, read_lpc, write_lpc
from .meshio import load_mesh, save_mesh_ply
from .metrics import ConfusionMatrix, IoUReport, class_distribution, iou_report, mean_iou
from .pointindex import PointIndex, nearest_neighbor
from .scene import (
    Asset,
    PlacementRules,
    SceneDescription,
    load_asset_library,
    randomize_scene,
)

__version__ = "0.1.0"

__all__ = [
    "Asset",
    "Bvh",
    "ClusterSet",
    "ConfigError",
    "ConfusionMatrix",
    "DatasetManifest",
    "GroundParams",
    "Hit",
    "IcpParams",
    "IcpResult",
    "IoUReport",
    "LabeledPointCloud",
    "LidarForgeError",
    "LidarSpec",
    "LpcFormatError",
    "MeshFormatError",
    "MixSpec",
    "PlacementError",
    "PlacementRules",
    "PointIndex",
    "Pose",
    "Ray",
    "RegistrationError",
    "ScanPattern",
    "SceneDescription",
    "Sequence",
    "Trajectory",
    "TriangleMesh",
    "build_bvh",
    "class_distribution",
    "crop_mesh",
    "downsample",
    "euclidean_cluster",
    "export_ply",
    "generate_dataset",
    "icp_align",
    "intersect",
    "iou_report",
    "load_asset_library",
    "load_mesh",
    "mean_iou",
    "mix_datasets",
    "nearest_neighbor",
    "propagate_labels",
    "randomize_scene",
    "read_lpc",
    "register_sequence",
    "remove_ground",
    "save_mesh_ply",
    "scan_pattern",
    "simulate_scan",
    "solve_rigid",
    "split_files",
    "transform_mesh",
    "voxel_downsample",
    "weld_vertices",
    "write_lpc",
]
