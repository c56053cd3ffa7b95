"""Command-line pipeline: generate, compose, annotate, and evaluate datasets.

One executable with subcommands sharing the JSON run-config and the .lpc
format.  Every subcommand is deterministic given its inputs and flags
(``--seed`` defaults to 0 everywhere), refuses to overwrite existing outputs
unless ``--force``, and reports failures as a one-line machine-parsable
``error: <kind>: <message>`` on stderr (config errors exit 2, runtime
failures exit 1).
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import annotate, dataset, lpc, metrics
from .config import load_run_config
from .errors import ConfigError, LidarForgeError
from .geometry import crop_mesh
from .lidar import LabeledPointCloud
from .meshio import load_mesh, save_mesh_ply
from .scene import load_asset_library


def main():
    sys.exit(execute(sys.argv[1:]))


def execute(argv):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        args.func(args)
        return 0
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except LidarForgeError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 1


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="lidarforge",
        description="Synthetic LiDAR dataset forge: generate labeled point clouds, "
                    "annotate real sequences, and evaluate segmentation output.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("generate", help="render a randomized dataset from a run config")
    p.add_argument("--config", required=True, help="run-config JSON file")
    p.add_argument("--count", type=int, default=None, help="number of clouds (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config; default 0)")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--name", default=None, help="dataset name for the manifest")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel workers (default: LIDARFORGE_WORKERS or hardware)")
    p.add_argument("--force", action="store_true", help="overwrite existing output files")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("mix", help="build a mixed synthetic/real training list")
    p.add_argument("--synthetic-dir", required=True, help="directory of synthetic .lpc files")
    p.add_argument("--real-dir", required=True, help="directory of real .lpc files")
    p.add_argument("--total", type=int, default=10000, help="total list length")
    p.add_argument("--fraction", type=float, default=0.5, help="synthetic fraction of the list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="output JSON list")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_mix)

    p = sub.add_parser("split", help="deterministic train/val partition by seeded shuffle")
    p.add_argument("--input", required=True, help="directory of .lpc files")
    p.add_argument("--val-fraction", type=float, default=None, help="validation share in [0, 1]")
    p.add_argument("--val-count", type=int, default=None, help="validation file count (overrides fraction)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train", required=True, help="output text list of training files")
    p.add_argument("--out-val", required=True, help="output text list of validation files")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("downsample", help="uniform random subsample without replacement")
    p.add_argument("--input", required=True, help=".lpc file or directory")
    p.add_argument("--k", type=int, required=True, help="points to keep per cloud")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True, help="output .lpc file or directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_downsample)

    p = sub.add_parser("register", help="register a scan sequence into a trajectory and map")
    p.add_argument("--input", required=True, help="directory of ordered .lpc frames")
    p.add_argument("--voxel", type=float, default=0.5, help="ICP voxel size, m")
    p.add_argument("--max-corr", type=float, default=1.0, help="max correspondence distance, m")
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=1e-5, help="pose-delta convergence threshold")
    p.add_argument("--rate", type=float, default=10.0, help="nominal frame rate, Hz")
    p.add_argument("--out-trajectory", required=True, help="output trajectory text file")
    p.add_argument("--out-map", required=True, help="output aggregated map .lpc")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_register)

    p = sub.add_parser("cluster", help="remove ground and cluster a map cloud")
    p.add_argument("--input", required=True, help="map .lpc from `register`")
    p.add_argument("--distance", type=float, default=1.0, help="single-linkage distance, m")
    p.add_argument("--min-size", type=int, default=50, help="minimum cluster point count")
    p.add_argument("--ground-method", choices=["ransac", "z", "none"], default="ransac")
    p.add_argument("--ground-inlier-dist", type=float, default=0.15)
    p.add_argument("--z-threshold", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-clusters", required=True,
                   help="output .lpc whose labels are cluster id + 1 (0 = unclustered/ground)")
    p.add_argument("--table", default=None, help="optional JSON cluster table")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_cluster)

    p = sub.add_parser("propagate", help="propagate cluster classes back to every frame")
    p.add_argument("--input", required=True, help="directory of ordered .lpc frames")
    p.add_argument("--trajectory", required=True, help="trajectory file from `register`")
    p.add_argument("--clusters", required=True, help="clusters .lpc from `cluster`")
    p.add_argument("--assignments", required=True,
                   help="text file of `cluster_id class_name` lines")
    p.add_argument("--radius", type=float, default=0.3, help="label propagation radius, m")
    p.add_argument("--out", required=True, help="output directory for labeled frames")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_propagate)

    p = sub.add_parser("eval", help="IoU/mIoU of predictions against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth .lpc file or directory")
    p.add_argument("--pred", required=True, help="prediction .lpc file or directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-ply", help="export a class-colored ASCII PLY")
    p.add_argument("--input", required=True, help=".lpc file, or directory with --trajectory")
    p.add_argument("--trajectory", default=None,
                   help="combine a frame directory into one map-frame export")
    p.add_argument("--pred", default=None, help="color by this prediction .lpc instead of labels")
    p.add_argument("--output", required=True, help="output .ply")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_export_ply)

    p = sub.add_parser("crop-mesh", help="crop a mesh to an axis-aligned box")
    p.add_argument("--input", required=True, help="mesh file (.ply/.obj/.stl)")
    p.add_argument("--min", required=True, help="box minimum as x,y,z")
    p.add_argument("--max", required=True, help="box maximum as x,y,z")
    p.add_argument("--output", required=True, help="output .ply")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=_cmd_crop_mesh)

    return parser


def _refuse_overwrite(paths, force):
    if force:
        return
    for p in paths:
        if Path(p).exists():
            raise ConfigError(f"refusing to overwrite existing {p} (pass --force to allow)")


def _lpc_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"{directory} is not a directory")
    files = sorted(directory.glob("*.lpc"))
    if not files:
        raise ConfigError(f"no .lpc files in {directory}")
    return files


def _load_sequence(directory, rate=10.0):
    frames = [lpc.read_lpc(p) for p in _lpc_files(directory)]
    return annotate.Sequence(frames=frames, rate_hz=rate)


def _cmd_generate(args):
    cfg = load_run_config(args.config)
    out = args.out if args.out is not None else cfg.output.dir
    if out is None:
        raise ConfigError("no output directory: set output.dir in the config or pass --out")
    count = args.count if args.count is not None else cfg.output.count
    seed = args.seed if args.seed is not None else cfg.output.seed
    if cfg.asset_manifest is None:
        raise ConfigError("config has no scene.assets manifest")
    library = load_asset_library(cfg.asset_manifest, cfg.class_names)
    manifest = dataset.generate_dataset(
        library, cfg.rules, cfg.lidar, count, seed, out,
        class_names=cfg.class_names, workers=args.workers,
        dataset_name=args.name or cfg.output.name, force=args.force,
    )
    total = int(manifest.aggregate_histogram.sum())
    print(f"generated {count} clouds ({total} points) in {out}; digest {manifest.config_digest}")


def _cmd_mix(args):
    _refuse_overwrite([args.output], args.force)
    spec = dataset.MixSpec(
        total=args.total,
        synthetic_fraction=args.fraction,
        synthetic_pool=[str(p) for p in _lpc_files(args.synthetic_dir)],
        real_pool=[str(p) for p in _lpc_files(args.real_dir)],
    )
    result = dataset.mix_datasets(spec, args.seed)
    payload = {
        "total": args.total,
        "synthetic_fraction": args.fraction,
        "seed": args.seed,
        "num_synthetic": result.num_synthetic,
        "num_real": result.num_real,
        "entries": result.entries,
        "counts": result.counts,
    }
    Path(args.output).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"mixed list: {result.num_synthetic} synthetic + {result.num_real} real -> {args.output}")


def _cmd_split(args):
    _refuse_overwrite([args.out_train, args.out_val], args.force)
    files = [str(p) for p in _lpc_files(args.input)]
    if args.val_count is not None:
        if not 0 <= args.val_count <= len(files):
            raise ConfigError(f"--val-count {args.val_count} out of range for {len(files)} files")
        fraction = args.val_count / len(files)
    else:
        fraction = args.val_fraction if args.val_fraction is not None else 0.2
    train, val = dataset.split_files(files, fraction, args.seed)
    Path(args.out_train).write_text("\n".join(train) + ("\n" if train else ""))
    Path(args.out_val).write_text("\n".join(val) + ("\n" if val else ""))
    print(f"split {len(files)} files into {len(train)} train / {len(val)} val")


def _cmd_downsample(args):
    src = Path(args.input)
    if src.is_dir():
        files = _lpc_files(src)
        out_dir = Path(args.output)
        out_dir.mkdir(parents=True, exist_ok=True)
        targets = [out_dir / f.name for f in files]
        _refuse_overwrite(targets, args.force)
        total = 0
        for i, (fin, fout) in enumerate(zip(files, targets)):
            cloud = dataset.downsample(lpc.read_lpc(fin), args.k, dataset.derive_seed(args.seed, i))
            lpc.write_lpc(cloud, fout)
            total += cloud.num_points
        print(f"downsampled {len(files)} clouds to <= {args.k} points each ({total} total)")
    else:
        _refuse_overwrite([args.output], args.force)
        cloud = dataset.downsample(lpc.read_lpc(src), args.k, args.seed)
        lpc.write_lpc(cloud, args.output)
        print(f"downsampled {src} to {cloud.num_points} points")


def _cmd_register(args):
    _refuse_overwrite([args.out_trajectory, args.out_map], args.force)
    seq = _load_sequence(args.input, rate=args.rate)
    params = annotate.IcpParams(voxel_m=args.voxel, max_corr_dist_m=args.max_corr,
                                max_iters=args.max_iters, epsilon=args.epsilon)
    trajectory, map_cloud = annotate.register_sequence(seq, params)
    annotate.save_trajectory(trajectory, args.out_trajectory)
    lpc.write_lpc(map_cloud, args.out_map)
    print(f"registered {len(seq.frames)} frames; map has {map_cloud.num_points} points")


def _cmd_cluster(args):
    _refuse_overwrite([args.out_clusters] + ([args.table] if args.table else []), args.force)
    cloud = lpc.read_lpc(args.input)
    pts = cloud.points.astype(np.float64)
    if args.ground_method == "none":
        ground = np.zeros(len(pts), dtype=bool)
    else:
        ground = annotate.remove_ground(pts, annotate.GroundParams(
            method=args.ground_method, inlier_dist_m=args.ground_inlier_dist,
            z_threshold_m=args.z_threshold, seed=args.seed,
        ))
    above = np.flatnonzero(~ground)
    clusters = annotate.euclidean_cluster(pts[above], args.distance, args.min_size)
    if clusters.num_clusters >= 0xFFFF:
        raise ConfigError(f"{clusters.num_clusters} clusters exceed the label range; raise --min-size")

    labels = np.zeros(len(pts), dtype=np.uint16)
    ids = clusters.cluster_ids
    labels[above[ids >= 0]] = (ids[ids >= 0] + 1).astype(np.uint16)
    names = ["unclustered"] + [f"cluster_{k:04d}" for k in range(clusters.num_clusters)]
    lpc.write_lpc(
        LabeledPointCloud(points=cloud.points, labels=labels, class_names=names),
        args.out_clusters,
    )

    rows = []
    print(f"{'id':>4} {'points':>8} {'centroid':>28} {'extent':>24}")
    for k in range(clusters.num_clusters):
        c = clusters.centroids[k]
        e = clusters.extents[k]
        print(f"{k:>4} {int(clusters.sizes[k]):>8} "
              f"({c[0]:8.2f},{c[1]:8.2f},{c[2]:6.2f}) ({e[0]:6.2f},{e[1]:6.2f},{e[2]:6.2f})")
        rows.append({"id": k, "points": int(clusters.sizes[k]),
                     "centroid": [float(v) for v in c], "extent": [float(v) for v in e]})
    if args.table:
        Path(args.table).write_text(json.dumps(rows, indent=2) + "\n")
    print(f"{clusters.num_clusters} clusters ({int(ground.sum())} ground points removed) "
          f"-> {args.out_clusters}")


def _cmd_propagate(args):
    seq_files = _lpc_files(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / f.name for f in seq_files]
    _refuse_overwrite(targets, args.force)

    seq = annotate.Sequence(frames=[lpc.read_lpc(p) for p in seq_files])
    trajectory = annotate.load_trajectory(args.trajectory)
    cluster_cloud = lpc.read_lpc(args.clusters)
    assignments = annotate.load_cluster_assignments(args.assignments)

    class_names = seq.frames[0].class_names
    name_to_id = {n: i for i, n in enumerate(class_names)}
    if "other" not in name_to_id:
        raise ConfigError('frames have no "other" class to use as the default')
    ids = cluster_cloud.labels.astype(np.int64) - 1
    clusters = annotate.ClusterSet.from_point_ids(cluster_cloud.points.astype(np.float64), ids)
    for cid, cname in assignments.items():
        if cname not in name_to_id:
            raise ConfigError(f"assignment names unknown class {cname!r} (classes: {list(class_names)})")
        clusters.assign(cid, name_to_id[cname])

    labeled = annotate.propagate_labels(seq, trajectory, clusters, radius=args.radius,
                                        other_class=name_to_id["other"])
    for frame, target in zip(labeled.frames, targets):
        lpc.write_lpc(frame, target)
    print(f"propagated labels to {len(targets)} frames -> {out_dir}")


def _pair_gt_pred(gt, pred):
    gt, pred = Path(gt), Path(pred)
    if gt.is_dir() != pred.is_dir():
        raise ConfigError("--gt and --pred must both be files or both directories")
    if not gt.is_dir():
        return [(gt, pred)]
    pairs = []
    for g in _lpc_files(gt):
        p = pred / g.name
        if not p.exists():
            raise ConfigError(f"prediction {p} missing for ground truth {g.name}")
        pairs.append((g, p))
    return pairs


def _cmd_eval(args):
    cm = None
    for g, p in _pair_gt_pred(args.gt, args.pred):
        gt_cloud = lpc.read_lpc(g)
        pred_cloud = lpc.read_lpc(p)
        if pred_cloud.num_points != gt_cloud.num_points:
            raise ConfigError(
                f"{p.name}: {pred_cloud.num_points} predictions for {gt_cloud.num_points} points"
            )
        if cm is None:
            cm = metrics.ConfusionMatrix.zeros(gt_cloud.class_names)
        elif cm.class_names != gt_cloud.class_names:
            raise ConfigError(f"{g.name}: class table differs from earlier files")
        cm.accumulate(gt_cloud.labels, pred_cloud.labels)
    report = metrics.iou_report(cm)
    out = report.to_dict()
    out["confusion"] = [[int(v) for v in row] for row in cm.counts]
    out["class_names"] = list(cm.class_names)
    print(json.dumps(out, indent=2))


def _cmd_export_ply(args):
    _refuse_overwrite([args.output], args.force)
    src = Path(args.input)
    if args.trajectory is not None:
        if not src.is_dir():
            raise ConfigError("--trajectory requires --input to be a frame directory")
        seq = _load_sequence(src)
        trajectory = annotate.load_trajectory(args.trajectory)
        if len(trajectory.poses) != len(seq.frames):
            raise ConfigError(
                f"trajectory covers {len(trajectory.poses)} frames, directory has {len(seq.frames)}"
            )
        pts = np.concatenate([pose.apply(f.points)
                              for pose, f in zip(trajectory.poses, seq.frames)])
        labels = np.concatenate([f.labels for f in seq.frames])
        cloud = LabeledPointCloud(points=pts, labels=labels,
                                  class_names=seq.frames[0].class_names)
    else:
        cloud = lpc.read_lpc(src)
    predictions = lpc.read_lpc(args.pred).labels if args.pred else None
    lpc.export_ply(cloud, args.output, predictions=predictions)
    print(f"exported {cloud.num_points} points -> {args.output}")


def _parse_triple(text, name):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"{name} must be x,y,z")
    try:
        return [float(v) for v in parts]
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _cmd_crop_mesh(args):
    _refuse_overwrite([args.output], args.force)
    mesh = load_mesh(args.input)
    cropped = crop_mesh(mesh, _parse_triple(args.min, "--min"), _parse_triple(args.max, "--max"))
    save_mesh_ply(cropped, args.output)
    print(f"cropped {mesh.num_triangles} -> {cropped.num_triangles} triangles -> {args.output}")


if __name__ == "__main__":
    main()
