"""Rigid registration between paired 3D point sets.

``kabsch_solve`` is the closed-form least-squares alignment for known
correspondences: the rotation comes from the SVD of the centered
cross-covariance with a determinant correction that excludes reflections,
and the translation is t = mean(Q) - R @ mean(P). ``icp_solve`` is the
point-to-point baseline that alternates nearest-neighbor pairing with the
closed-form solve. ``average_runs`` combines repeated calibrations by
averaging translations arithmetically and quaternions by hemisphere-aligned
normalized mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGeometryError,
    EmptyInputError,
    FrameMismatchError,
    InconsistentFramesError,
    NoCorrespondencesError,
    ValidationError,
)
from .geometry import (
    Point3,
    PointCloud,
    RigidTransform,
    UnitQuaternion,
    quat_to_matrix,
)

__all__ = [
    "CorrespondenceSet",
    "SolveDiagnostics",
    "CalibrationResult",
    "AveragedExtrinsics",
    "IcpParams",
    "kabsch_solve",
    "icp_solve",
    "average_runs",
    "running_average_trace",
    "registration_rmse",
    "mean_offset",
]

logger = logging.getLogger(__name__)

METHOD_KABSCH = "kabsch"
METHOD_ICP = "icp"
METHOD_PNP = "pnp"
METHOD_PNP_RANSAC = "pnp-ransac"


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Index-paired source (P) and target (Q) clouds in distinct frames."""

    source: PointCloud
    target: PointCloud

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise ValidationError(
                f"correspondence clouds differ in length: {len(self.source)} vs {len(self.target)}"
            )
        if len(self.source) == 0:
            raise EmptyInputError("correspondence set is empty")
        if self.source.frame == self.target.frame:
            raise FrameMismatchError(
                f"source and target must be in distinct frames, both are {self.source.frame!r}"
            )

    def __len__(self):
        return len(self.source)


@dataclass(frozen=True)
class SolveDiagnostics:
    """Condition flags recorded by the solvers."""

    near_degenerate: bool = False
    reflection_corrected: bool = False
    iterations: int | None = None
    converged: bool | None = None
    rmse_history: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Estimated transform plus residual statistics.

    ``rmse`` and ``per_point_residuals`` are meters for the 3D-3D methods
    and pixels for the PnP methods.
    """

    transform: RigidTransform
    rmse: float
    per_point_residuals: np.ndarray
    method: str
    diagnostics: SolveDiagnostics = field(default_factory=SolveDiagnostics)

    def __post_init__(self):
        res = np.asarray(self.per_point_residuals, dtype=np.float64)
        res.setflags(write=False)
        object.__setattr__(self, "per_point_residuals", res)
        object.__setattr__(self, "rmse", float(self.rmse))


def _residuals(source_xyz, target_xyz, transform):
    mapped = transform.transform_points(source_xyz)
    return np.linalg.norm(mapped - target_xyz, axis=1)


def _rmse(residuals):
    return float(np.sqrt(np.mean(np.square(residuals))))


def kabsch_solve(correspondences, degenerate_ratio=1e-10):
    """Closed-form [R|t] minimizing sum ||R P_i + t - Q_i||^2.

    Raises DegenerateGeometryError for fewer than 3 pairs or when the source
    scatter is (near-)collinear, which leaves the rotation about the point
    axis unobservable. Planar sets (rank 2) are fine.
    """
    c = correspondences
    if len(c) < 3:
        raise DegenerateGeometryError(f"registration needs >= 3 correspondences, got {len(c)}")
    p = c.source.xyz
    q = c.target.xyz
    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    x = p - p_mean
    y = q - q_mean
    h = x.T @ y  # 3x3 cross-covariance sum x_i y_i^T
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or (s[1] < degenerate_ratio * s[0] and s[2] < degenerate_ratio * s[0]):
        raise DegenerateGeometryError(
            "correspondences are (near-)collinear; rotation about the point axis "
            f"is unobservable (singular values {s})"
        )
    d = float(np.sign(np.linalg.det(u @ vt)))
    if d == 0.0:
        d = 1.0
    correction = np.diag([1.0, 1.0, d])
    rotation = vt.T @ correction @ u.T
    translation = q_mean - rotation @ p_mean
    transform = RigidTransform(rotation, translation, c.source.frame, c.target.frame)
    residuals = _residuals(p, q, transform)
    diagnostics = SolveDiagnostics(
        near_degenerate=bool(s[1] < 1e-6 * s[0]),
        reflection_corrected=bool(d < 0.0),
    )
    return CalibrationResult(transform, _rmse(residuals), residuals, METHOD_KABSCH, diagnostics)


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 100
    tolerance_m: float = 1e-6
    max_correspondence_distance_m: float | None = None
    initial_guess: RigidTransform | None = None


def _nearest_neighbors(tree, points, n_target):
    """Exact nearest neighbors with ties broken to the lowest target index."""
    k = min(4, n_target)
    dist, idx = tree.query(points, k=k)
    if k == 1:
        return np.atleast_1d(dist), np.atleast_1d(idx)
    tied = dist == dist[:, :1]
    masked = np.where(tied, idx, n_target)
    return dist[:, 0], masked.min(axis=1)


def icp_solve(source, target, params=None):
    """Point-to-point ICP: alternate exact nearest-neighbor pairing with the
    closed-form Kabsch solve until the rmse change drops below tolerance.

    Returns the transform mapping source.frame -> target.frame with the rmse
    of the final pairing; iteration count and the per-iteration rmse history
    are recorded in the diagnostics.
    """
    params = params or IcpParams()
    if len(source) < 3 or len(target) < 3:
        raise DegenerateGeometryError("icp needs at least 3 points in each cloud")
    if source.frame == target.frame:
        raise FrameMismatchError("icp clouds must be in distinct frames")
    current = params.initial_guess
    if current is None:
        current = RigidTransform.identity(source.frame, target.frame)
    elif current.from_frame != source.frame or current.to_frame != target.frame:
        raise FrameMismatchError(
            f"initial guess maps {current.from_frame!r}->{current.to_frame!r}, "
            f"expected {source.frame!r}->{target.frame!r}"
        )

    tree = cKDTree(target.xyz)
    gate = params.max_correspondence_distance_m
    history = []
    result = None
    for iteration in range(1, params.max_iterations + 1):
        moved = current.transform_points(source.xyz)
        dist, idx = _nearest_neighbors(tree, moved, len(target))
        if gate is not None:
            keep = dist <= gate
            if not np.any(keep):
                raise NoCorrespondencesError(
                    f"distance gate {gate} m left no correspondences at iteration {iteration}"
                )
        else:
            keep = slice(None)
        pairs = CorrespondenceSet(
            PointCloud(source.frame, source.xyz[keep]),
            PointCloud(target.frame, target.xyz[idx[keep]]),
        )
        step = kabsch_solve(pairs)
        current = step.transform
        history.append(step.rmse)
        result = step
        if len(history) >= 2 and abs(history[-2] - history[-1]) <= params.tolerance_m:
            break
    logger.debug("icp finished after %d iterations, rmse %.6g m", len(history), history[-1])
    diagnostics = replace(
        result.diagnostics,
        iterations=len(history),
        converged=len(history) < params.max_iterations
        or (len(history) >= 2 and abs(history[-2] - history[-1]) <= params.tolerance_m),
        rmse_history=tuple(history),
    )
    return CalibrationResult(
        result.transform, result.rmse, result.per_point_residuals, METHOD_ICP, diagnostics
    )


@dataclass(frozen=True, eq=False)
class AveragedExtrinsics:
    """Mean of repeated calibration runs: arithmetic translation mean and the
    hemisphere-aligned normalized quaternion mean."""

    mean_translation: Point3
    mean_rotation: UnitQuaternion
    sample_count: int
    per_run_results: tuple[CalibrationResult, ...]

    @property
    def transform(self):
        first = self.per_run_results[0].transform
        return RigidTransform(
            quat_to_matrix(self.mean_rotation),
            self.mean_translation.as_array(),
            first.from_frame,
            first.to_frame,
        )


def _aligned_quaternions(runs):
    quats = np.array([r.transform.quaternion().as_array() for r in runs])
    signs = np.where(quats @ quats[0] < 0.0, -1.0, 1.0)
    return quats * signs[:, None]


def average_runs(runs):
    """Average N calibration runs into one extrinsic estimate.

    Quaternions are sign-flipped onto the first run's hemisphere before the
    arithmetic mean so that q and -q (the same rotation) cannot cancel.
    """
    runs = tuple(runs)
    if not runs:
        raise EmptyInputError("no runs to average")
    frames = {(r.transform.from_frame, r.transform.to_frame) for r in runs}
    if len(frames) != 1:
        raise InconsistentFramesError(f"runs disagree on frames: {sorted(frames)}")
    translations = np.array([r.transform.translation for r in runs])
    quats = _aligned_quaternions(runs)
    mean_q = quats.mean(axis=0)
    if np.linalg.norm(mean_q) < 1e-12:
        raise DegenerateGeometryError("quaternion mean vanished; rotations too spread to average")
    return AveragedExtrinsics(
        mean_translation=Point3.from_array(translations.mean(axis=0)),
        mean_rotation=UnitQuaternion.from_array(mean_q),
        sample_count=len(runs),
        per_run_results=runs,
    )


def running_average_trace(runs):
    """(N, 7) array of running averages [tx, ty, tz, qw, qx, qy, qz]: row i
    is the average of runs 0..i, mirroring the per-iteration averaging plots."""
    runs = tuple(runs)
    if not runs:
        raise EmptyInputError("no runs to average")
    translations = np.array([r.transform.translation for r in runs])
    quats = _aligned_quaternions(runs)
    counts = np.arange(1, len(runs) + 1)[:, None]
    t_run = np.cumsum(translations, axis=0) / counts
    q_run = np.cumsum(quats, axis=0) / counts
    norms = np.linalg.norm(q_run, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateGeometryError("running quaternion mean vanished")
    return np.hstack([t_run, q_run / norms])


def registration_rmse(correspondences, transform):
    """Root mean square distance between transformed source and target."""
    c = correspondences
    if c.source.frame != transform.from_frame or c.target.frame != transform.to_frame:
        raise FrameMismatchError(
            f"transform maps {transform.from_frame!r}->{transform.to_frame!r} but "
            f"correspondences are {c.source.frame!r}->{c.target.frame!r}"
        )
    return _rmse(_residuals(c.source.xyz, c.target.xyz, transform))


def mean_offset(correspondences):
    """Component-wise mean of Q_i - P_i: the crude no-rotation translation
    estimate; zero for any pure rotation about the common centroid."""
    c = correspondences
    return Point3.from_array((c.target.xyz - c.source.xyz).mean(axis=0))
