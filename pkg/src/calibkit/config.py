"""Run configuration documents for the CLI commands.

Configs are JSON objects with a ``schema_version`` field; unknown keys are
rejected so typos fail loudly. All lengths are meters, all angles degrees.
Relative paths are resolved against the directory of the config file (or
dataset manifest) that mentions them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .board import BoardModel
from .camera import CameraIntrinsics, PnpRansacParams
from .errors import ConfigError
from .extraction import ExtractionParams, RansacLineParams
from .fusion import FusionParams
from .geometry import RigidTransform, quat_to_matrix
from .io import (
    board_model_from_dict,
    intrinsics_from_dict,
    read_json,
    transform_from_dict,
)
from .simulate import LidarModel, ScenePlacement, TagNoise

__all__ = [
    "SimulateConfig",
    "Calibrate3d3dConfig",
    "Calibrate2d3dConfig",
    "ChainConfig",
    "FuseConfig",
    "ScanEntry",
    "DatasetManifest",
    "parse_simulate_config",
    "parse_calibrate_3d3d_config",
    "parse_calibrate_2d3d_config",
    "parse_chain_config",
    "parse_fuse_config",
    "load_dataset_manifest",
]


def _check_keys(obj, ctx, required=(), optional=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{ctx}: expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {unknown}")
    missing = sorted(k for k in required if k not in obj)
    if missing:
        raise ConfigError(f"{ctx}: missing required keys {missing}")


def _load(path):
    try:
        return read_json(path)
    except Exception as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _pose(data, from_frame, to_frame, ctx):
    _check_keys(data, ctx, required=("rotation_wxyz", "translation_m"))
    rotation = quat_to_matrix(np.asarray(data["rotation_wxyz"], dtype=np.float64))
    return RigidTransform(rotation, np.asarray(data["translation_m"], float), from_frame, to_frame)


def _resolve(base_dir, value):
    p = Path(value)
    return p if p.is_absolute() else base_dir / p


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulateConfig:
    scene: ScenePlacement
    lidar_model: LidarModel
    intrinsics: CameraIntrinsics
    tag_noise: TagNoise
    scans: int
    seed: int
    edge_band_m: float


def parse_simulate_config(path):
    cfg = _load(path)
    _check_keys(
        cfg,
        f"{path}",
        required=("schema_version", "boards", "lidar", "camera"),
        optional=("seed", "scans", "world_frame", "tag_noise", "edge_band_m"),
    )
    world = cfg.get("world_frame", "world")

    lidar = cfg["lidar"]
    _check_keys(
        lidar,
        "lidar",
        optional=(
            "frame",
            "num_rings",
            "vertical_angles_deg",
            "azimuth_step_deg",
            "range_noise_sigma_m",
            "world_to_lidar",
        ),
    )
    lidar_frame = lidar.get("frame", "lidar")
    model_kwargs = {}
    if "num_rings" in lidar:
        model_kwargs["num_rings"] = int(lidar["num_rings"])
    if "vertical_angles_deg" in lidar:
        model_kwargs["vertical_angles_deg"] = tuple(lidar["vertical_angles_deg"])
    elif "num_rings" in lidar:
        n = model_kwargs["num_rings"]
        model_kwargs["vertical_angles_deg"] = tuple(np.linspace(-15.0, 15.0, n))
    if "azimuth_step_deg" in lidar:
        model_kwargs["azimuth_step_deg"] = float(lidar["azimuth_step_deg"])
    if "range_noise_sigma_m" in lidar:
        model_kwargs["range_noise_sigma_m"] = float(lidar["range_noise_sigma_m"])
    lidar_model = LidarModel(seed=int(cfg.get("seed", 0)), **model_kwargs)
    if "world_to_lidar" in lidar:
        lidar_pose = _pose(lidar["world_to_lidar"], world, lidar_frame, "lidar.world_to_lidar")
    else:
        lidar_pose = RigidTransform.identity(world, lidar_frame)

    camera = cfg["camera"]
    _check_keys(
        camera,
        "camera",
        required=("fx", "fy", "cx", "cy", "world_to_camera"),
        optional=("frame", "gamma"),
    )
    camera_frame = camera.get("frame", "camera")
    intr = intrinsics_from_dict(
        {k: camera[k] for k in ("fx", "fy", "cx", "cy", "gamma") if k in camera}, "camera"
    )
    camera_pose = _pose(camera["world_to_camera"], world, camera_frame, "camera.world_to_camera")

    boards = []
    for i, entry in enumerate(cfg["boards"]):
        ctx = f"boards[{i}]"
        if not isinstance(entry, dict) or "world_to_board" not in entry:
            raise ConfigError(f"{ctx}: needs a world_to_board pose")
        pose_data = entry["world_to_board"]
        model_data = {k: v for k, v in entry.items() if k != "world_to_board"}
        model = board_model_from_dict(model_data, ctx)
        boards.append((model, _pose(pose_data, world, f"board{i}", f"{ctx}.world_to_board")))

    noise_data = cfg.get("tag_noise", {})
    _check_keys(noise_data, "tag_noise", optional=("rot_sigma_deg", "trans_sigma_m", "pixel_sigma_px"))
    tag_noise = TagNoise(
        rot_sigma_deg=float(noise_data.get("rot_sigma_deg", 0.2)),
        trans_sigma_m=float(noise_data.get("trans_sigma_m", 0.003)),
        pixel_sigma_px=float(noise_data.get("pixel_sigma_px", 0.5)),
    )
    scene = ScenePlacement(tuple(boards), lidar_pose, camera_pose)
    return SimulateConfig(
        scene=scene,
        lidar_model=lidar_model,
        intrinsics=intr,
        tag_noise=tag_noise,
        scans=int(cfg.get("scans", 1)),
        seed=int(cfg.get("seed", 0)),
        edge_band_m=float(cfg.get("edge_band_m", 0.01)),
    )


# --------------------------------------------------------------------------
# calibrate-3d3d
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScanEntry:
    cloud: Path
    tags: Path | None = None
    labels: Path | None = None
    rois: tuple[tuple[tuple[float, ...], tuple[float, ...]], ...] = ()


def _parse_rois(entries, ctx):
    rois = []
    for i, roi in enumerate(entries):
        _check_keys(roi, f"{ctx}.rois[{i}]", required=("min", "max"))
        lo, hi = tuple(float(v) for v in roi["min"]), tuple(float(v) for v in roi["max"])
        if len(lo) != 3 or len(hi) != 3 or any(h <= l for l, h in zip(lo, hi)):
            raise ConfigError(f"{ctx}.rois[{i}]: min/max must be 3-vectors with min < max")
        rois.append((lo, hi))
    return tuple(rois)


@dataclass(frozen=True)
class DatasetManifest:
    lidar_frame: str
    camera_frame: str
    boards: tuple[BoardModel, ...]
    scans: tuple[ScanEntry, ...]
    intrinsics: CameraIntrinsics | None = None
    ground_truth: Path | None = None


def load_dataset_manifest(path):
    path = Path(path)
    payload = read_json(path, expected_type="dataset")
    _check_keys(
        payload,
        str(path),
        required=("schema_version", "type", "scans", "boards", "lidar_frame", "camera_frame"),
        optional=("intrinsics", "ground_truth"),
    )
    base = path.parent
    scans = []
    for i, entry in enumerate(payload["scans"]):
        _check_keys(
            entry, f"scans[{i}]",
            required=("cloud",),
            optional=("tags", "labels", "rois", "correspondences", "correspondences_2d3d"),
        )
        scans.append(
            ScanEntry(
                cloud=_resolve(base, entry["cloud"]),
                tags=_resolve(base, entry["tags"]) if "tags" in entry else None,
                labels=_resolve(base, entry["labels"]) if "labels" in entry else None,
                rois=_parse_rois(entry.get("rois", ()), f"scans[{i}]"),
            )
        )
    boards = tuple(board_model_from_dict(b, f"boards[{i}]") for i, b in enumerate(payload["boards"]))
    intr = intrinsics_from_dict(payload["intrinsics"], "intrinsics") if "intrinsics" in payload else None
    gt = _resolve(base, payload["ground_truth"]) if "ground_truth" in payload else None
    return DatasetManifest(
        lidar_frame=payload["lidar_frame"],
        camera_frame=payload["camera_frame"],
        boards=boards,
        scans=tuple(scans),
        intrinsics=intr,
        ground_truth=gt,
    )


@dataclass(frozen=True)
class Calibrate3d3dConfig:
    lidar_frame: str
    camera_frame: str
    boards: tuple[BoardModel, ...] = ()
    scans: tuple[ScanEntry, ...] = ()
    correspondence_files: tuple[Path, ...] = ()
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    camera_up_hint: tuple[float, float, float] = (0.0, -1.0, 0.0)
    run_icp: bool = False
    icp_init: str = "identity"  # or "kabsch"
    seed: int = 0


def _extraction_from_config(data, seed):
    _check_keys(
        data,
        "extraction",
        optional=(
            "ransac_threshold_m",
            "ransac_iterations",
            "min_inliers",
            "reject_threshold_m",
            "lidar_up_hint",
        ),
    )
    ransac = RansacLineParams(
        threshold_m=float(data.get("ransac_threshold_m", 0.01)),
        iterations=int(data.get("ransac_iterations", 1000)),
        min_inliers=data.get("min_inliers"),
        seed=seed,
    )
    return ExtractionParams(
        ransac=ransac,
        reject_threshold_m=float(data.get("reject_threshold_m", 0.05)),
        up_hint=tuple(data.get("lidar_up_hint", (0.0, 0.0, 1.0))),
    )


def parse_calibrate_3d3d_config(path, seed_override=None):
    path = Path(path)
    cfg = _load(path)
    _check_keys(
        cfg,
        str(path),
        required=("schema_version",),
        optional=(
            "dataset",
            "scans",
            "correspondence_files",
            "boards",
            "lidar_frame",
            "camera_frame",
            "extraction",
            "camera_up_hint",
            "run_icp",
            "icp_init",
            "seed",
        ),
    )
    base = path.parent
    seed = int(seed_override if seed_override is not None else cfg.get("seed", 0))
    extraction = _extraction_from_config(cfg.get("extraction", {}), seed)
    sources = [k for k in ("dataset", "scans", "correspondence_files") if k in cfg]
    if len(sources) != 1:
        raise ConfigError(
            f"{path}: exactly one of dataset / scans / correspondence_files is required, got {sources}"
        )
    icp_init = cfg.get("icp_init", "identity")
    if icp_init not in ("identity", "kabsch"):
        raise ConfigError(f"{path}: icp_init must be 'identity' or 'kabsch', got {icp_init!r}")
    common = dict(
        extraction=extraction,
        camera_up_hint=tuple(cfg.get("camera_up_hint", (0.0, -1.0, 0.0))),
        run_icp=bool(cfg.get("run_icp", False)),
        icp_init=icp_init,
        seed=seed,
    )
    if "dataset" in cfg:
        manifest = load_dataset_manifest(_resolve(base, cfg["dataset"]))
        return Calibrate3d3dConfig(
            lidar_frame=manifest.lidar_frame,
            camera_frame=manifest.camera_frame,
            boards=manifest.boards,
            scans=manifest.scans,
            **common,
        )
    lidar_frame = cfg.get("lidar_frame", "lidar")
    camera_frame = cfg.get("camera_frame", "camera")
    if "correspondence_files" in cfg:
        files = tuple(_resolve(base, f) for f in cfg["correspondence_files"])
        if not files:
            raise ConfigError(f"{path}: correspondence_files is empty")
        return Calibrate3d3dConfig(
            lidar_frame=lidar_frame, camera_frame=camera_frame,
            correspondence_files=files, **common,
        )
    if "boards" not in cfg:
        raise ConfigError(f"{path}: scans mode requires a boards list")
    boards = tuple(board_model_from_dict(b, f"boards[{i}]") for i, b in enumerate(cfg["boards"]))
    scans = []
    for i, entry in enumerate(cfg["scans"]):
        _check_keys(entry, f"scans[{i}]", required=("cloud",), optional=("tags", "labels", "rois"))
        scans.append(
            ScanEntry(
                cloud=_resolve(base, entry["cloud"]),
                tags=_resolve(base, entry["tags"]) if "tags" in entry else None,
                labels=_resolve(base, entry["labels"]) if "labels" in entry else None,
                rois=_parse_rois(entry.get("rois", ()), f"scans[{i}]"),
            )
        )
    return Calibrate3d3dConfig(
        lidar_frame=lidar_frame, camera_frame=camera_frame,
        boards=boards, scans=tuple(scans), **common,
    )


# --------------------------------------------------------------------------
# calibrate-2d3d
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Calibrate2d3dConfig:
    correspondences: Path
    intrinsics: CameraIntrinsics
    method: str
    remove_points: tuple[int, ...]
    ransac: PnpRansacParams
    lidar_frame: str
    camera_frame: str
    seed: int


def parse_calibrate_2d3d_config(path, seed_override=None):
    path = Path(path)
    cfg = _load(path)
    _check_keys(
        cfg,
        str(path),
        required=("schema_version", "correspondences", "intrinsics"),
        optional=("method", "remove_points", "ransac", "lidar_frame", "camera_frame", "seed"),
    )
    method = cfg.get("method", "pnp")
    if method not in ("pnp", "pnp-ransac"):
        raise ConfigError(f"{path}: method must be 'pnp' or 'pnp-ransac', got {method!r}")
    seed = int(seed_override if seed_override is not None else cfg.get("seed", 0))
    ransac_data = cfg.get("ransac", {})
    _check_keys(ransac_data, "ransac", optional=("subset_size", "iterations", "inlier_threshold_px"))
    ransac = PnpRansacParams(
        subset_size=ransac_data.get("subset_size"),
        iterations=int(ransac_data.get("iterations", 10000)),
        inlier_threshold_px=float(ransac_data.get("inlier_threshold_px", 2.0)),
        seed=seed,
    )
    return Calibrate2d3dConfig(
        correspondences=_resolve(path.parent, cfg["correspondences"]),
        intrinsics=intrinsics_from_dict(cfg["intrinsics"], "intrinsics"),
        method=method,
        remove_points=tuple(int(i) for i in cfg.get("remove_points", ())),
        ransac=ransac,
        lidar_frame=cfg.get("lidar_frame", "lidar"),
        camera_frame=cfg.get("camera_frame", "camera"),
        seed=seed,
    )


# --------------------------------------------------------------------------
# chain / fuse
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainConfig:
    lidar_to_cam1: Path
    lidar_to_cam2: Path


def parse_chain_config(path):
    path = Path(path)
    cfg = _load(path)
    _check_keys(cfg, str(path), required=("schema_version", "lidar_to_cam1", "lidar_to_cam2"))
    return ChainConfig(
        lidar_to_cam1=_resolve(path.parent, cfg["lidar_to_cam1"]),
        lidar_to_cam2=_resolve(path.parent, cfg["lidar_to_cam2"]),
    )


@dataclass(frozen=True)
class FuseConfig:
    cloud_a: Path
    cloud_b: Path
    transform_file: Path | None
    transform_inline: RigidTransform | None
    params: FusionParams
    frame_a: str | None
    frame_b: str | None


def parse_fuse_config(path):
    path = Path(path)
    cfg = _load(path)
    _check_keys(
        cfg,
        str(path),
        required=("schema_version", "cloud_a", "cloud_b", "transform"),
        optional=(
            "hallucination_radius_m",
            "structure_radius_m",
            "range_bins",
            "cloud_a_frame",
            "cloud_b_frame",
        ),
    )
    params = FusionParams(
        hallucination_radius_m=float(cfg.get("hallucination_radius_m", 0.05)),
        structure_radius_m=float(cfg.get("structure_radius_m", 0.5)),
        range_bins=int(cfg.get("range_bins", 8)),
    )
    transform = cfg["transform"]
    transform_file = transform_inline = None
    if isinstance(transform, str):
        transform_file = _resolve(path.parent, transform)
    else:
        transform_inline = transform_from_dict(transform, f"{path}: transform")
    return FuseConfig(
        cloud_a=_resolve(path.parent, cfg["cloud_a"]),
        cloud_b=_resolve(path.parent, cfg["cloud_b"]),
        transform_file=transform_file,
        transform_inline=transform_inline,
        params=params,
        frame_a=cfg.get("cloud_a_frame"),
        frame_b=cfg.get("cloud_b_frame"),
    )
