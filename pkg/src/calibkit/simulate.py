"""Synthetic calibration scenes with exact ground truth.

A scene places tilted planar boards, a multi-ring LiDAR, and a pinhole
camera in a world frame. ``simulate_lidar_scan`` ray-casts every
(ring, azimuth) direction against the boards and labels each return with its
board and nearest edge; ``simulate_tag_observation`` produces fiducial tag
poses and pixel observations with configurable noise. ``run_end_to_end``
drives the full extraction + registration pipeline on a simulated scene and
compares every estimate against the known extrinsics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .board import INNER_EDGE_IDS, OUTER_EDGE_IDS, BoardModel, canonical_corner_order, \
    inner_corners_board_frame, outer_corners_board_frame
from .camera import (
    CAMERA_UP_HINT,
    CameraIntrinsics,
    PnpRansacParams,
    TagPose,
    board_corners_camera_frame,
    pnp_ransac,
    pnp_solve,
    project_points,
)
from .errors import BehindCameraError, TooSparseError, ValidationError
from .extraction import EdgeCluster, ExtractionParams, cluster_edges, extract_board
from .geometry import (
    PointCloud,
    RigidTransform,
    compose,
    invert,
    rotation_about_axis,
    rotation_angle_between,
    rotation_z,
)
from .registration import CalibrationResult, CorrespondenceSet, IcpParams, icp_solve, kabsch_solve

__all__ = [
    "LidarModel",
    "ScenePlacement",
    "PointLabel",
    "TagNoise",
    "TagObservations",
    "PipelineParams",
    "MethodOutcome",
    "EndToEndReport",
    "simulate_lidar_scan",
    "simulate_tag_observation",
    "run_end_to_end",
    "make_default_scene",
    "default_intrinsics",
    "board_corners_lidar_frame",
]

logger = logging.getLogger(__name__)

LIDAR_UP_HINT = (0.0, 0.0, 1.0)


def _default_vertical_angles():
    return tuple(float(a) for a in range(-15, 16, 2))


@dataclass(frozen=True)
class LidarModel:
    """Spinning multi-beam LiDAR geometry. Defaults encode a 16-ring sensor
    with a -15..+15 degree fan and 0.2 degree azimuth resolution."""

    num_rings: int = 16
    vertical_angles_deg: tuple[float, ...] = field(default_factory=_default_vertical_angles)
    azimuth_step_deg: float = 0.2
    range_noise_sigma_m: float = 0.003
    seed: int = 0

    def __post_init__(self):
        angles = tuple(float(a) for a in self.vertical_angles_deg)
        object.__setattr__(self, "vertical_angles_deg", angles)
        if len(angles) != self.num_rings:
            raise ValidationError(
                f"{len(angles)} vertical angles for {self.num_rings} rings"
            )
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ValidationError("vertical angles must be strictly increasing")
        if not 0 < self.azimuth_step_deg <= 360:
            raise ValidationError("azimuth step must be in (0, 360] degrees")
        if self.range_noise_sigma_m < 0:
            raise ValidationError("range noise sigma must be >= 0")


@dataclass(frozen=True)
class ScenePlacement:
    """Boards and sensor poses, all given as world -> frame transforms."""

    boards: tuple[tuple[BoardModel, RigidTransform], ...]
    lidar_pose: RigidTransform
    camera_pose: RigidTransform

    def __post_init__(self):
        object.__setattr__(self, "boards", tuple(self.boards))
        world = self.lidar_pose.from_frame
        if self.camera_pose.from_frame != world:
            raise ValidationError("lidar and camera poses must share the world frame")
        for _, pose in self.boards:
            if pose.from_frame != world:
                raise ValidationError("board poses must start at the world frame")

    @property
    def world_frame(self):
        return self.lidar_pose.from_frame

    @property
    def lidar_frame(self):
        return self.lidar_pose.to_frame

    @property
    def camera_frame(self):
        return self.camera_pose.to_frame

    @property
    def ground_truth_lidar_to_camera(self):
        return compose(self.camera_pose, invert(self.lidar_pose))


@dataclass(frozen=True)
class PointLabel:
    """Ground-truth membership of one LiDAR return."""

    board: int
    edge: str | None = None


def _board_to_sensor(scene, board_index, sensor_pose):
    _, world_to_board = scene.boards[board_index]
    return compose(sensor_pose, invert(world_to_board))


def board_corners_lidar_frame(scene, board_index, up_hint=LIDAR_UP_HINT):
    """Ground-truth board corners in the LiDAR frame, canonical order
    (outer first, then inner for hollow boards)."""
    model, _ = scene.boards[board_index]
    to_lidar = _board_to_sensor(scene, board_index, scene.lidar_pose)
    blocks = [outer_corners_board_frame(model)]
    inner = inner_corners_board_frame(model)
    if inner is not None:
        blocks.append(inner)
    ordered = []
    for corners in blocks:
        pts = to_lidar.transform_points(corners)
        ordered.append(pts[canonical_corner_order(pts, up_hint)])
    return np.vstack(ordered)


def _segment_distances(points, seg_a, seg_b):
    """Distance from points (m, 3) to each segment (k, 3)->(k, 3): (m, k)."""
    ab = seg_b - seg_a  # (k, 3)
    ab_len2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    rel = points[:, None, :] - seg_a[None, :, :]  # (m, k, 3)
    t = np.clip(np.einsum("mkj,kj->mk", rel, ab) / ab_len2, 0.0, 1.0)
    closest = seg_a[None, :, :] + t[:, :, None] * ab[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def _board_edge_segments(scene, board_index, up_hint):
    """(edge ids, segment starts, segment ends) for one board, lidar frame."""
    model, _ = scene.boards[board_index]
    corners = board_corners_lidar_frame(scene, board_index, up_hint)
    ids = list(OUTER_EDGE_IDS)
    starts = [corners[i] for i in range(4)]
    ends = [corners[(i + 1) % 4] for i in range(4)]
    if model.has_inner:
        ids += list(INNER_EDGE_IDS)
        starts += [corners[4 + i] for i in range(4)]
        ends += [corners[4 + (i + 1) % 4] for i in range(4)]
    return ids, np.array(starts), np.array(ends)


def simulate_lidar_scan(scene, model=None, rng=None, edge_band_m=0.01, up_hint=LIDAR_UP_HINT):
    """Ray-cast a full revolution and return the scan with per-point labels.

    Rays are ordered ring-major, azimuth-minor. Each return is the nearest
    board-plane intersection inside the board bounds (and outside the cutout
    of hollow boards), with Gaussian range noise applied along the ray. A
    return is edge-labeled when it lies within ``edge_band_m`` of that
    board's nearest analytic edge segment.
    """
    model = model or LidarModel()
    if rng is None:
        rng = np.random.default_rng(model.seed)
    elevations = np.radians(np.asarray(model.vertical_angles_deg))
    n_az = int(round(360.0 / model.azimuth_step_deg))
    azimuths = np.radians(np.arange(n_az) * model.azimuth_step_deg)
    cos_el = np.cos(elevations)[:, None]
    directions = np.empty((model.num_rings, n_az, 3))
    directions[:, :, 0] = cos_el * np.cos(azimuths)[None, :]
    directions[:, :, 1] = cos_el * np.sin(azimuths)[None, :]
    directions[:, :, 2] = np.sin(elevations)[:, None]
    directions = directions.reshape(-1, 3)
    rings = np.repeat(np.arange(model.num_rings), n_az)

    n_rays = len(directions)
    ranges = np.full((n_rays, len(scene.boards)), np.inf)
    for b, (board, _) in enumerate(scene.boards):
        to_lidar = _board_to_sensor(scene, b, scene.lidar_pose)
        c = to_lidar.translation
        bx, by, bz = to_lidar.rotation.T  # board axes expressed in lidar frame
        denom = directions @ bz
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, (c @ bz) / denom, np.inf)
        valid = np.isfinite(t) & (t > 1e-6)
        hit = t[valid, None] * directions[valid]
        rel = hit - c
        xi = np.column_stack([rel @ bx, rel @ by])
        cx, cy = -board.tag_center_offset_m[0], -board.tag_center_offset_m[1]
        inside = (np.abs(xi[:, 0] - cx) <= board.outer_width_m / 2.0) & (
            np.abs(xi[:, 1] - cy) <= board.outer_height_m / 2.0
        )
        if board.has_inner:
            ox, oy = board.inner_offset_m
            in_cut = (np.abs(xi[:, 0] - (cx + ox)) < board.inner_width_m / 2.0) & (
                np.abs(xi[:, 1] - (cy + oy)) < board.inner_height_m / 2.0
            )
            inside &= ~in_cut
        col = np.full(n_rays, np.inf)
        idx = np.flatnonzero(valid)
        col[idx[inside]] = t[valid][inside]
        ranges[:, b] = col

    board_hit = np.argmin(ranges, axis=1)
    best = ranges[np.arange(n_rays), board_hit]
    hit_mask = np.isfinite(best)
    best = best[hit_mask]
    dirs = directions[hit_mask]
    boards = board_hit[hit_mask]
    if model.range_noise_sigma_m > 0:
        best = best + rng.normal(0.0, model.range_noise_sigma_m, size=len(best))
    points = best[:, None] * dirs
    cloud = PointCloud(scene.lidar_frame, points, rings[hit_mask])

    labels = [PointLabel(int(b)) for b in boards]
    for b in range(len(scene.boards)):
        members = np.flatnonzero(boards == b)
        if len(members) == 0:
            continue
        ids, seg_a, seg_b = _board_edge_segments(scene, b, up_hint)
        dist = _segment_distances(points[members], seg_a, seg_b)
        nearest = np.argmin(dist, axis=1)
        within = dist[np.arange(len(members)), nearest] <= edge_band_m
        for row, k in enumerate(members):
            if within[row]:
                labels[k] = PointLabel(int(b), ids[int(nearest[row])])
    logger.debug("simulated scan: %d returns on %d boards", len(cloud), len(scene.boards))
    return cloud, labels


@dataclass(frozen=True)
class TagNoise:
    rot_sigma_deg: float = 0.2
    trans_sigma_m: float = 0.003
    pixel_sigma_px: float = 0.5


def _zero_noise():
    return TagNoise(0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class TagObservations:
    """Noisy tag poses and pixel corners, with the exact ground truth kept
    alongside."""

    tags: tuple[TagPose, ...]
    pixels: tuple[np.ndarray, ...]
    true_poses: tuple[TagPose, ...]
    true_pixels: tuple[np.ndarray, ...]


def simulate_tag_observation(scene, intrinsics, noise=None, rng=None, seed=0,
                             up_hint=CAMERA_UP_HINT):
    """Simulate fiducial detections: exact board -> camera poses perturbed by
    the given noise, plus pixel observations of the board corners.

    Raises BehindCameraError for boards out of view or facing away.
    """
    noise = noise or _zero_noise()
    if rng is None:
        rng = np.random.default_rng(seed)
    cam_identity = RigidTransform.identity(scene.camera_frame)
    tags, pixels, true_tags, true_pixels = [], [], [], []
    for b, (model, _) in enumerate(scene.boards):
        exact = _board_to_sensor(scene, b, scene.camera_pose)
        center = exact.translation
        normal = exact.rotation[:, 2]
        if center[2] <= 0:
            raise BehindCameraError(f"board {b} is behind the camera (z = {center[2]:.3f} m)")
        if normal @ center >= 0:
            raise BehindCameraError(f"board {b} faces away from the camera")
        true_pose = TagPose(exact, tag_id=b)
        corners_true = board_corners_camera_frame(model, true_pose, up_hint)
        uv_true = project_points(intrinsics, cam_identity, corners_true.xyz)

        axis = rng.normal(size=3)
        angle = math.radians(rng.normal(0.0, noise.rot_sigma_deg)) if noise.rot_sigma_deg > 0 else 0.0
        d_rot = rotation_about_axis(axis, angle) if np.linalg.norm(axis) > 1e-12 else np.eye(3)
        d_trans = rng.normal(0.0, noise.trans_sigma_m, size=3) if noise.trans_sigma_m > 0 else np.zeros(3)
        noisy = RigidTransform(
            d_rot @ exact.rotation, center + d_trans, exact.from_frame, exact.to_frame
        )
        uv_obs = uv_true + (
            rng.normal(0.0, noise.pixel_sigma_px, size=uv_true.shape)
            if noise.pixel_sigma_px > 0
            else 0.0
        )
        tags.append(TagPose(noisy, tag_id=b))
        true_tags.append(true_pose)
        pixels.append(uv_obs)
        true_pixels.append(uv_true)
    return TagObservations(tuple(tags), tuple(pixels), tuple(true_tags), tuple(true_pixels))


@dataclass(frozen=True)
class PipelineParams:
    """Knobs for the end-to-end pipeline run.

    ``lidar_corner_source`` selects between corners extracted from the
    simulated scan ("extracted", the real pipeline) and the scene's analytic
    corners ("analytic"), which bypasses ray quantization and checks the
    frame bookkeeping and solver paths exactly.
    """

    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    cluster_source: str = "auto"  # "auto": endpoint/hull splitter for solid boards; "labels": always
    lidar_corner_source: str = "extracted"  # or "analytic"
    run_icp: bool = False
    icp: IcpParams = field(default_factory=IcpParams)
    run_pnp: bool = False
    run_pnp_ransac: bool = False
    pnp_ransac: PnpRansacParams = field(default_factory=PnpRansacParams)
    lidar_up_hint: tuple[float, float, float] = LIDAR_UP_HINT
    camera_up_hint: tuple[float, float, float] = CAMERA_UP_HINT
    edge_band_m: float = 0.01
    seed: int = 0


@dataclass(frozen=True)
class MethodOutcome:
    result: CalibrationResult
    rotation_error_deg: float
    translation_error_m: float


@dataclass(frozen=True, eq=False)
class EndToEndReport:
    ground_truth: RigidTransform
    correspondences: CorrespondenceSet
    boards: tuple
    kabsch: MethodOutcome
    icp: MethodOutcome | None = None
    pnp: MethodOutcome | None = None
    pnp_ransac: MethodOutcome | None = None


def clusters_from_labels(cloud, labels, board_index):
    """Build edge clusters for one board from ground-truth (or manual)
    point labels."""
    groups = {}
    for i, lab in enumerate(labels):
        if lab.board == board_index and lab.edge is not None:
            groups.setdefault(lab.edge, []).append(i)
    clusters = []
    for edge_id, idx in groups.items():
        if len(idx) < 2:
            raise TooSparseError(f"edge {edge_id!r} of board {board_index} has {len(idx)} point(s)")
        clusters.append(EdgeCluster(edge_id, cloud.select(np.array(idx))))
    return clusters


def _outcome(result, truth):
    return MethodOutcome(
        result,
        math.degrees(rotation_angle_between(result.transform.rotation, truth.rotation)),
        float(np.linalg.norm(result.transform.translation - truth.translation)),
    )


def run_end_to_end(scene, lidar_model=None, intrinsics=None, noise=None, params=None):
    """Simulate one scene, run extraction + calibration, and score every
    requested method against the known lidar -> camera transform."""
    params = params or PipelineParams()
    lidar_model = lidar_model or LidarModel()
    intrinsics = intrinsics or default_intrinsics()
    root = np.random.SeedSequence(params.seed)
    scan_rng, tag_rng = (np.random.default_rng(s) for s in root.spawn(2))
    cloud, labels = simulate_lidar_scan(
        scene, lidar_model, rng=scan_rng, edge_band_m=params.edge_band_m,
        up_hint=params.lidar_up_hint,
    )
    obs = simulate_tag_observation(
        scene, intrinsics, noise, rng=tag_rng, up_hint=params.camera_up_hint
    )

    extraction = ExtractionParams(
        ransac=params.extraction.ransac,
        reject_threshold_m=params.extraction.reject_threshold_m,
        up_hint=params.lidar_up_hint,
        sensor_origin=(0.0, 0.0, 0.0),
    )
    lidar_corners, camera_corners, pixel_obs, boards = [], [], [], []
    for b, (model, _) in enumerate(scene.boards):
        if params.lidar_corner_source == "analytic":
            lidar_corners.append(board_corners_lidar_frame(scene, b, params.lidar_up_hint))
        else:
            use_labels = params.cluster_source == "labels" or model.has_inner
            if use_labels:
                clusters = clusters_from_labels(cloud, labels, b)
            else:
                members = np.array([i for i, lab in enumerate(labels) if lab.board == b])
                clusters = cluster_edges(
                    cloud.select(members), model, up_hint=params.lidar_up_hint
                )
            extracted = extract_board(clusters, model, extraction)
            boards.append(extracted)
            lidar_corners.append(extracted.corners_xyz)
        camera_corners.append(
            board_corners_camera_frame(model, obs.tags[b], params.camera_up_hint).xyz
        )
        pixel_obs.append(obs.pixels[b])

    correspondences = CorrespondenceSet(
        PointCloud(scene.lidar_frame, np.vstack(lidar_corners)),
        PointCloud(scene.camera_frame, np.vstack(camera_corners)),
    )
    truth = scene.ground_truth_lidar_to_camera
    kabsch = _outcome(kabsch_solve(correspondences), truth)
    icp = pnp = ransac = None
    if params.run_icp:
        icp = _outcome(
            icp_solve(correspondences.source, correspondences.target, params.icp), truth
        )
    if params.run_pnp or params.run_pnp_ransac:
        pairs = list(zip(np.vstack(lidar_corners), np.vstack(pixel_obs)))
        if params.run_pnp:
            pnp = _outcome(
                pnp_solve(intrinsics, pairs, from_frame=scene.lidar_frame,
                          camera_frame=scene.camera_frame),
                truth,
            )
        if params.run_pnp_ransac:
            result, _ = pnp_ransac(
                intrinsics, pairs, params.pnp_ransac,
                from_frame=scene.lidar_frame, camera_frame=scene.camera_frame,
            )
            ransac = _outcome(result, truth)
    return EndToEndReport(
        ground_truth=truth,
        correspondences=correspondences,
        boards=tuple(boards),
        kabsch=kabsch,
        icp=icp,
        pnp=pnp,
        pnp_ransac=ransac,
    )


def default_intrinsics():
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=640.0, cy=360.0)


def _board_pose_world(center, tilt_deg):
    """world -> board transform for a board facing the origin from +x."""
    z_axis = np.array([-1.0, 0.0, 0.0])  # normal, toward the sensors
    y_axis = np.array([0.0, 0.0, 1.0])
    x_axis = np.cross(y_axis, z_axis)
    board_to_world = np.column_stack([x_axis, y_axis, z_axis]) @ rotation_z(math.radians(tilt_deg))
    t = RigidTransform(board_to_world, np.asarray(center, dtype=float), "board", "world")
    return invert(t)


def make_default_scene(
    n_boards=3,
    distance_m=2.0,
    tilt_deg=45.0,
    hollow=(True, False, True),
    world_frame="world",
    lidar_frame="lidar",
    camera_frame="camera",
    extrinsics=None,
):
    """A ready-made scene: boards about 2 m in front of the sensors, tilted
    45 degrees in plane, LiDAR at the world origin, camera offset by a known
    ground-truth transform (the quantity the pipeline is asked to recover)."""
    lidar_pose = RigidTransform.identity(world_frame, lidar_frame)
    if extrinsics is None:
        axes = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        wobble = (
            rotation_about_axis((1.0, 0.0, 0.0), math.radians(1.5))
            @ rotation_about_axis((0.0, 1.0, 0.0), math.radians(-0.8))
            @ rotation_about_axis((0.0, 0.0, 1.0), math.radians(0.6))
        )
        extrinsics = RigidTransform(
            wobble @ axes, np.array([0.03, -0.25, 0.10]), lidar_frame, camera_frame
        )
    camera_pose = compose(extrinsics, lidar_pose)
    offsets = np.linspace(-0.8, 0.8, n_boards) if n_boards > 1 else np.array([0.0])
    heights = [0.0, 0.1, -0.1, 0.05, -0.05][:n_boards] or [0.0]
    boards = []
    for i in range(n_boards):
        is_hollow = hollow[i % len(hollow)]
        if is_hollow:
            # cutout sized so 3+ rings cross every inner edge at ~2 m range
            model = BoardModel(0.5, 0.5, inner_width_m=0.3, inner_height_m=0.3)
        else:
            model = BoardModel(0.5, 0.5)
        center = (distance_m, float(offsets[i]), float(heights[i % len(heights)]))
        world_to_board = _board_pose_world(center, tilt_deg)
        world_to_board = RigidTransform(
            world_to_board.rotation, world_to_board.translation, world_frame, f"board{i}"
        )
        boards.append((model, world_to_board))
    return ScenePlacement(tuple(boards), lidar_pose, camera_pose)
