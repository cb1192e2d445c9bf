"""Command-line front end: ``calib simulate | calibrate-3d3d | calibrate-2d3d
| chain | fuse --config <json> [--seed N] [--out <dir>]``.

Exit codes: 0 success, 1 input/validation error, 2 numerical failure
(degenerate geometry, no consensus, no convergence). ``CALIB_LOG`` sets the
log level (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io, plots
from .camera import board_corners_camera_frame, pnp_ransac, pnp_solve
from .config import (
    parse_calibrate_2d3d_config,
    parse_calibrate_3d3d_config,
    parse_chain_config,
    parse_fuse_config,
    parse_simulate_config,
)
from .errors import CalibrationError, ConfigError, FrameMismatchError, ValidationError
from .extraction import EdgeCluster, cluster_edges, extract_board
from .fusion import fuse_clouds
from .geometry import PointCloud, compose, invert
from .registration import (
    CorrespondenceSet,
    IcpParams,
    average_runs,
    icp_solve,
    kabsch_solve,
    mean_offset,
    running_average_trace,
)
from .simulate import board_corners_lidar_frame, simulate_lidar_scan, simulate_tag_observation

logger = logging.getLogger(__name__)


@contextmanager
def _stage(name, scan=None):
    """Prefix any toolkit error with the pipeline stage and scan index."""
    try:
        yield
    except CalibrationError as exc:
        where = name if scan is None else f"scan {scan}, {name}"
        raise type(exc)(f"[{where}] {exc}") from None


def _fmt_transform(t):
    e = t.euler_xyz()
    tr = t.translation
    return (
        f"  frames      : {t.from_frame} -> {t.to_frame}\n"
        f"  translation : x={tr[0]:+.6f} y={tr[1]:+.6f} z={tr[2]:+.6f} m\n"
        f"  euler XYZ   : roll={e.roll:+.4f} pitch={e.pitch:+.4f} yaw={e.yaw:+.4f} deg"
    )


def _write_running_average(out_dir, runs):
    trace = running_average_trace(runs)
    rows = [
        [str(i + 1)] + [repr(float(v)) for v in trace[i]]
        for i in range(len(trace))
    ]
    lines = [",".join(["iteration", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])]
    lines += [",".join(r) for r in rows]
    (out_dir / "running_average.csv").write_text("\n".join(lines) + "\n")
    plots.save_running_average_figure(trace, out_dir / "running_average.png")


def _write_residuals(out_dir, result, units):
    lines = ["index,residual"]
    lines += [f"{i},{float(r)!r}" for i, r in enumerate(result.per_point_residuals)]
    (out_dir / "residuals.csv").write_text("\n".join(lines) + "\n")
    plots.save_residual_figure(result.per_point_residuals, units, out_dir / "residuals.png")


def cmd_simulate(config_path, seed, out_dir):
    cfg = parse_simulate_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = cfg.scene
    root = np.random.SeedSequence(cfg.seed)
    scan_entries = []
    for k in range(cfg.scans):
        scan_rng, tag_rng = (np.random.default_rng(s) for s in root.spawn(2))
        with _stage("simulate-lidar", k):
            cloud, labels = simulate_lidar_scan(
                scene, cfg.lidar_model, rng=scan_rng, edge_band_m=cfg.edge_band_m
            )
        with _stage("simulate-tags", k):
            obs = simulate_tag_observation(scene, cfg.intrinsics, cfg.tag_noise, rng=tag_rng)
        cloud_name = f"scan_{k:03d}.pcd"
        labels_name = f"labels_{k:03d}.csv"
        tags_name = f"tags_{k:03d}.json"
        corr_name = f"correspondences_{k:03d}.csv"
        corr2d_name = f"correspondences_2d3d_{k:03d}.csv"
        io.write_pcd(out_dir / cloud_name, cloud)
        io.write_edge_labels_csv(out_dir / labels_name, labels)
        io.write_tag_poses(out_dir / tags_name, obs.tags, scene.camera_frame)
        lidar_pts = np.vstack(
            [board_corners_lidar_frame(scene, b) for b in range(len(scene.boards))]
        )
        camera_pts = np.vstack(
            [
                board_corners_camera_frame(scene.boards[b][0], obs.tags[b]).xyz
                for b in range(len(scene.boards))
            ]
        )
        io.write_correspondences_3d3d(
            out_dir / corr_name,
            CorrespondenceSet(
                PointCloud(scene.lidar_frame, lidar_pts),
                PointCloud(scene.camera_frame, camera_pts),
            ),
        )
        io.write_correspondences_2d3d(
            out_dir / corr2d_name, list(zip(lidar_pts, np.vstack(obs.pixels)))
        )
        scan_entries.append(
            {"cloud": cloud_name, "labels": labels_name, "tags": tags_name,
             "correspondences": corr_name, "correspondences_2d3d": corr2d_name}
        )
    truth = scene.ground_truth_lidar_to_camera
    io.write_json(
        out_dir / "ground_truth.json",
        {"schema_version": io.SCHEMA_VERSION, "type": "transform", **io.transform_to_dict(truth)},
    )
    io.write_json(
        out_dir / "dataset.json",
        {
            "schema_version": io.SCHEMA_VERSION,
            "type": "dataset",
            "lidar_frame": scene.lidar_frame,
            "camera_frame": scene.camera_frame,
            "boards": [io.board_model_to_dict(m) for m, _ in scene.boards],
            "intrinsics": io.intrinsics_to_dict(cfg.intrinsics),
            "scans": scan_entries,
            "ground_truth": "ground_truth.json",
        },
    )
    print(f"simulated {cfg.scans} scan(s) of {len(scene.boards)} board(s) into {out_dir}")
    print("ground truth lidar -> camera:")
    print(_fmt_transform(truth))
    return 0


def _clusters_from_label_file(cloud, label_map, board_index):
    groups = {}
    for index, label in label_map.items():
        if index >= len(cloud):
            raise ValidationError(
                f"label refers to point {index} but the cloud has {len(cloud)} points"
            )
        if label.board == board_index and label.edge is not None:
            groups.setdefault(label.edge, []).append(index)
    return [
        EdgeCluster(edge, cloud.select(np.array(sorted(idx))))
        for edge, idx in sorted(groups.items())
    ]


def _roi_clusters(cloud, roi, model, cfg, board, index):
    """Crop an axis-aligned ROI box and auto-split it into edge clusters."""
    if model.has_inner:
        raise ConfigError(
            f"scan {index}, board {board}: hollow boards need an edge label file; "
            "the ROI splitter only separates outer edges"
        )
    lo, hi = np.asarray(roi[0]), np.asarray(roi[1])
    keep = np.all((cloud.xyz >= lo) & (cloud.xyz <= hi), axis=1)
    return cluster_edges(cloud.select(keep), model, up_hint=cfg.extraction.up_hint)


def _calibrate_scan(cfg, scan, index):
    with _stage("parse-cloud", index):
        cloud = io.parse_pcd(scan.cloud, default_frame=cfg.lidar_frame)
    if scan.tags is None:
        raise ConfigError(f"scan {index} has no tag pose file")
    if scan.labels is None and not scan.rois:
        raise ConfigError(f"scan {index} needs an edge label file or per-board ROI boxes")
    with _stage("parse-tags", index):
        _, tags = io.parse_tag_poses(scan.tags)
    label_map = None
    if scan.labels is not None:
        with _stage("parse-labels", index):
            label_map = io.parse_edge_labels_csv(scan.labels)
    elif len(scan.rois) != len(cfg.boards):
        raise ConfigError(
            f"scan {index}: {len(scan.rois)} ROI boxes for {len(cfg.boards)} board models"
        )
    if len(tags) != len(cfg.boards):
        raise ValidationError(
            f"scan {index}: {len(tags)} tag poses for {len(cfg.boards)} board models"
        )
    tags = sorted(tags, key=lambda t: t.tag_id)
    lidar_pts, camera_pts = [], []
    camera_frame = cfg.camera_frame
    for b, model in enumerate(cfg.boards):
        with _stage(f"extract-board-{b}", index):
            if label_map is not None:
                clusters = _clusters_from_label_file(cloud, label_map, b)
            else:
                clusters = _roi_clusters(cloud, scan.rois[b], model, cfg, b, index)
            extracted = extract_board(clusters, model, cfg.extraction)
        with _stage(f"tag-corners-board-{b}", index):
            camera_cloud = board_corners_camera_frame(model, tags[b], cfg.camera_up_hint)
        camera_frame = camera_cloud.frame  # honor the tag file's camera frame
        lidar_pts.append(extracted.corners_xyz)
        camera_pts.append(camera_cloud.xyz)
    corr = CorrespondenceSet(
        PointCloud(cfg.lidar_frame, np.vstack(lidar_pts)),
        PointCloud(camera_frame, np.vstack(camera_pts)),
    )
    with _stage("kabsch", index):
        return corr, kabsch_solve(corr)


def cmd_calibrate_3d3d(config_path, seed, out_dir):
    cfg = parse_calibrate_3d3d_config(config_path, seed_override=seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    last_corr = None
    if cfg.correspondence_files:
        for k, file in enumerate(cfg.correspondence_files):
            with _stage("parse-correspondences", k):
                corr = io.parse_correspondences_csv(
                    file, source_frame=cfg.lidar_frame, target_frame=cfg.camera_frame
                )
            if not isinstance(corr, CorrespondenceSet):
                raise ValidationError(f"{file} holds 2D-3D rows; calibrate-3d3d needs px..qz rows")
            with _stage("kabsch", k):
                runs.append(kabsch_solve(corr))
            last_corr = corr
    else:
        for k, scan in enumerate(cfg.scans):
            corr, result = _calibrate_scan(cfg, scan, k)
            runs.append(result)
            last_corr = corr
    if cfg.run_icp and last_corr is not None:
        # diagnostic comparison only: an out-of-basin ICP must not sink the run
        guess = runs[-1].transform if cfg.icp_init == "kabsch" else None
        try:
            icp_result = icp_solve(
                last_corr.source, last_corr.target, IcpParams(initial_guess=guess)
            )
        except CalibrationError as exc:
            print(f"icp comparison failed ({type(exc).__name__}): {exc}")
        else:
            io.write_result_json(out_dir / "result_icp.json", icp_result)
            print(f"icp comparison rmse: {icp_result.rmse:.6f} m (kabsch: {runs[-1].rmse:.6f} m)")

    if last_corr is not None:
        offset = mean_offset(last_corr).as_array()
        print(
            "mean cloud offset (no-rotation estimate): "
            f"x={offset[0]:+.4f} y={offset[1]:+.4f} z={offset[2]:+.4f} m"
        )
    if len(runs) == 1:
        outcome = runs[0]
        io.write_result_json(out_dir / "result.json", outcome)
        _write_residuals(out_dir, outcome, "m")
        transform = outcome.transform
        print(f"calibrated from 1 scan, rmse {outcome.rmse:.6f} m")
    else:
        averaged = average_runs(runs)
        io.write_result_json(out_dir / "result.json", averaged)
        _write_running_average(out_dir, runs)
        transform = averaged.transform
        rmses = [r.rmse for r in runs]
        print(
            f"calibrated from {len(runs)} scans, per-run rmse "
            f"min/mean/max = {min(rmses):.6f}/{float(np.mean(rmses)):.6f}/{max(rmses):.6f} m"
        )
    print(_fmt_transform(transform))
    print(f"wrote {out_dir / 'result.json'}")
    return 0


def cmd_calibrate_2d3d(config_path, seed, out_dir):
    cfg = parse_calibrate_2d3d_config(config_path, seed_override=seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _stage("parse-correspondences"):
        pairs = io.parse_correspondences_csv(cfg.correspondences)
    if isinstance(pairs, CorrespondenceSet):
        raise ValidationError(
            f"{cfg.correspondences} holds 3D-3D rows; calibrate-2d3d needs X,Y,Z,u,v rows"
        )
    if cfg.remove_points:
        bad = [i for i in cfg.remove_points if not 0 <= i < len(pairs)]
        if bad:
            raise ValidationError(f"remove_points out of range: {bad} (have {len(pairs)} rows)")
        keep = [p for i, p in enumerate(pairs) if i not in set(cfg.remove_points)]
        print(f"removed {len(pairs) - len(keep)} of {len(pairs)} correspondences")
        pairs = keep
    inliers = None
    if cfg.method == "pnp":
        with _stage("pnp"):
            result = pnp_solve(
                cfg.intrinsics, pairs, from_frame=cfg.lidar_frame, camera_frame=cfg.camera_frame
            )
    else:
        with _stage("pnp-ransac"):
            result, inliers = pnp_ransac(
                cfg.intrinsics, pairs, cfg.ransac,
                from_frame=cfg.lidar_frame, camera_frame=cfg.camera_frame,
            )
    io.write_result_json(out_dir / "result.json", result)
    _write_residuals(out_dir, result, "px")
    if inliers is not None:
        lines = ["index,inlier"] + [f"{i},{int(v)}" for i, v in enumerate(inliers)]
        (out_dir / "inliers.csv").write_text("\n".join(lines) + "\n")
        print(f"ransac kept {int(inliers.sum())}/{len(inliers)} correspondences as inliers")
    print(f"back-projection rmse: {result.rmse:.6f} px over {len(result.per_point_residuals)} points")
    print(_fmt_transform(result.transform))
    print(f"wrote {out_dir / 'result.json'}")
    return 0


def cmd_chain(config_path, out_dir):
    cfg = parse_chain_config(config_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _stage("read-results"):
        t1 = io.read_transform_json(cfg.lidar_to_cam1)
        t2 = io.read_transform_json(cfg.lidar_to_cam2)
    if t1.from_frame != t2.from_frame:
        raise FrameMismatchError(
            f"results do not share the lidar frame: {t1.from_frame!r} vs {t2.from_frame!r}"
        )
    chained = compose(t1, invert(t2))
    io.write_json(
        out_dir / "chained.json",
        {"schema_version": io.SCHEMA_VERSION, "type": "transform", **io.transform_to_dict(chained)},
    )
    print(f"chained transform {chained.from_frame} -> {chained.to_frame}:")
    print(_fmt_transform(chained))
    print(f"wrote {out_dir / 'chained.json'}")
    return 0


def cmd_fuse(config_path, out_dir):
    cfg = parse_fuse_config(config_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _stage("parse-clouds"):
        cloud_a = io.parse_pcd(cfg.cloud_a, default_frame=cfg.frame_a)
        cloud_b = io.parse_pcd(cfg.cloud_b, default_frame=cfg.frame_b)
    if cfg.frame_a is not None and cloud_a.frame != cfg.frame_a:
        cloud_a = PointCloud(cfg.frame_a, cloud_a.xyz, cloud_a.ring)
    if cfg.frame_b is not None and cloud_b.frame != cfg.frame_b:
        cloud_b = PointCloud(cfg.frame_b, cloud_b.xyz, cloud_b.ring)
    transform = cfg.transform_inline
    if transform is None:
        with _stage("read-transform"):
            transform = io.read_transform_json(cfg.transform_file)
    with _stage("fuse"):
        merged, report = fuse_clouds(cloud_a, cloud_b, transform, cfg.params)
    io.write_pcd(out_dir / "merged.pcd", merged)
    io.write_json(
        out_dir / "fusion_report.json",
        {"schema_version": io.SCHEMA_VERSION, "type": "fusion_report", **report.as_dict()},
    )
    lines = ["bin_lo_m,bin_hi_m,mean_nn_m,count"]
    for i in range(len(report.bin_counts)):
        lines.append(
            f"{report.bin_edges_m[i]!r},{report.bin_edges_m[i + 1]!r},"
            f"{report.bin_mean_nn_m[i]!r},{report.bin_counts[i]}"
        )
    (out_dir / "fusion_bins.csv").write_text("\n".join(lines) + "\n")
    plots.save_fusion_figure(report, out_dir / "fusion_report.png")
    print(
        f"fused {len(cloud_a)} + {len(cloud_b)} points; mean NN {report.mean_nn_m:.4f} m, "
        f"median NN {report.median_nn_m:.4f} m, duplication score {report.duplication_score:.3f}"
    )
    print(f"wrote {out_dir / 'merged.pcd'} and {out_dir / 'fusion_report.json'}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are input errors: exit code 1
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser():
    parser = _Parser(prog="calib", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_seed in (
        ("simulate", True),
        ("calibrate-3d3d", True),
        ("calibrate-2d3d", True),
        ("chain", False),
        ("fuse", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        if needs_seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv=None):
    level = os.environ.get("CALIB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        out_dir = Path(args.out)
        if args.command == "simulate":
            return cmd_simulate(args.config, args.seed, out_dir)
        if args.command == "calibrate-3d3d":
            return cmd_calibrate_3d3d(args.config, args.seed, out_dir)
        if args.command == "calibrate-2d3d":
            return cmd_calibrate_2d3d(args.config, args.seed, out_dir)
        if args.command == "chain":
            return cmd_chain(args.config, out_dir)
        if args.command == "fuse":
            return cmd_fuse(args.config, out_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
