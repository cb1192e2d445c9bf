"""Camera-side correspondences and the 2D-3D calibration path.

Board corners are produced in the camera frame from fiducial tag poses;
``pnp_solve`` estimates camera extrinsics from 2D-3D correspondences by
minimizing the back-projection cost with Gauss-Newton refinement on top of a
direct linear (general position) or planar-homography (coplanar boards)
initialization. ``pnp_ransac`` wraps it with random-subset consensus.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .board import canonical_corner_order, inner_corners_board_frame, outer_corners_board_frame
from .errors import (
    BehindCameraError,
    DegenerateConfigurationError,
    EmptyInputError,
    InsufficientPointsError,
    NoConsensusError,
    NoConvergenceError,
    NonFiniteValueError,
    ValidationError,
)
from .geometry import PointCloud, RigidTransform, as_vec3, rotation_about_axis
from .registration import METHOD_PNP, METHOD_PNP_RANSAC, CalibrationResult, SolveDiagnostics

__all__ = [
    "CameraIntrinsics",
    "TagPose",
    "Point2",
    "PnpParams",
    "PnpRansacParams",
    "board_corners_camera_frame",
    "project",
    "project_points",
    "backprojection_rmse",
    "pnp_solve",
    "pnp_ransac",
]

logger = logging.getLogger(__name__)

_MIN_DEPTH = 1e-9
CAMERA_UP_HINT = (0.0, -1.0, 0.0)  # optical convention: x right, y down, z forward


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; ``gamma`` is the skew term."""

    fx: float
    fy: float
    cx: float
    cy: float
    gamma: float = 0.0

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.gamma)
        if not all(math.isfinite(v) for v in vals):
            raise NonFiniteValueError(f"intrinsics contain non-finite values: {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")

    def as_matrix(self):
        return np.array(
            [[self.fx, self.gamma, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class TagPose:
    """Fiducial tag detection: rigid transform board frame -> camera frame."""

    pose: RigidTransform
    tag_id: int = 0


@dataclass(frozen=True)
class Point2:
    u: float
    v: float

    def __post_init__(self):
        for label, v in (("u", self.u), ("v", self.v)):
            v = float(v)
            if not math.isfinite(v):
                raise NonFiniteValueError(f"Point2.{label} is non-finite: {v}")
            object.__setattr__(self, label, v)

    def as_array(self):
        return np.array([self.u, self.v], dtype=np.float64)


def board_corners_camera_frame(model, tag_pose, up_hint=CAMERA_UP_HINT):
    """Board corners mapped through the tag pose into the camera frame, in
    canonical order (outer rectangle first, then the inner one if hollow)."""
    pose = tag_pose.pose
    blocks = [outer_corners_board_frame(model)]
    inner = inner_corners_board_frame(model)
    if inner is not None:
        blocks.append(inner)
    ordered = []
    for corners in blocks:
        cam = pose.transform_points(corners)
        ordered.append(cam[canonical_corner_order(cam, up_hint)])
    return PointCloud(pose.to_frame, np.vstack(ordered))


def _pixel_of(intr, xyz_cam):
    x, y, z = xyz_cam
    u = (intr.fx * x + intr.gamma * y) / z + intr.cx
    v = intr.fy * y / z + intr.cy
    return u, v


def project(intr, extr, point):
    """Pinhole projection of one 3D point through extrinsics ``extr``."""
    p = extr.rotation @ as_vec3(point, "point") + extr.translation
    if p[2] <= _MIN_DEPTH:
        raise BehindCameraError(f"point projects behind the camera (z' = {p[2]:.3e} m)")
    u, v = _pixel_of(intr, p)
    return Point2(u, v)


def project_points(intr, extr, xyz):
    """Vectorized projection of (N, 3) points; raises if any lies behind."""
    cam = np.asarray(xyz, dtype=np.float64) @ extr.rotation.T + extr.translation
    if np.any(cam[:, 2] <= _MIN_DEPTH):
        bad = int(np.argmin(cam[:, 2]))
        raise BehindCameraError(f"point {bad} projects behind the camera (z' = {cam[bad, 2]:.3e})")
    uv = np.empty((len(cam), 2))
    uv[:, 0] = (intr.fx * cam[:, 0] + intr.gamma * cam[:, 1]) / cam[:, 2] + intr.cx
    uv[:, 1] = intr.fy * cam[:, 1] / cam[:, 2] + intr.cy
    return uv


def _project_valid(intr, rotation, translation, xyz):
    """Projection that reports non-positive depth instead of raising."""
    cam = xyz @ rotation.T + translation
    valid = cam[:, 2] > _MIN_DEPTH
    z = np.where(valid, cam[:, 2], 1.0)
    uv = np.empty((len(cam), 2))
    uv[:, 0] = (intr.fx * cam[:, 0] + intr.gamma * cam[:, 1]) / z + intr.cx
    uv[:, 1] = intr.fy * cam[:, 1] / z + intr.cy
    return uv, valid


def _corr_arrays(correspondences):
    xs, us = [], []
    for pair in correspondences:
        p3, p2 = pair
        xs.append(as_vec3(p3, "3D point"))
        if isinstance(p2, Point2):
            us.append(p2.as_array())
        else:
            arr = np.asarray(p2, dtype=np.float64)
            if arr.shape != (2,):
                raise ValidationError(f"2D point must have 2 components, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValueError(f"2D point is non-finite: {arr}")
            us.append(arr)
    if not xs:
        raise EmptyInputError("no correspondences")
    return np.array(xs), np.array(us)


def backprojection_rmse(intr, extr, correspondences):
    """Root mean square pixel distance between projections and observations."""
    xyz, uv = _corr_arrays(correspondences)
    proj = project_points(intr, extr, xyz)
    return float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))


@dataclass(frozen=True)
class PnpParams:
    max_iterations: int = 50
    gradient_tol: float = 1e-10


def _normalized_coords(intr, uv):
    y = (uv[:, 1] - intr.cy) / intr.fy
    x = (uv[:, 0] - intr.cx - intr.gamma * y) / intr.fx
    return np.column_stack([x, y])


def _nearest_rotation(m):
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _dlt_init(xyz, xn):
    """General-position direct linear transform for the 3x4 pose matrix."""
    n = len(xyz)
    a = np.zeros((2 * n, 12))
    xh = np.hstack([xyz, np.ones((n, 1))])
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -xn[:, 0:1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -xn[:, 1:2] * xh
    _, s, vt = np.linalg.svd(a)
    if s[10] < 1e-10 * s[0]:
        raise DegenerateConfigurationError("rank-deficient DLT design matrix")
    p = vt[-1].reshape(3, 4)
    depths = xh @ p[2]
    if np.sum(depths > 0) < np.sum(depths < 0):
        p = -p
    scale = np.linalg.norm(p[2, :3])
    if scale < 1e-12:
        raise DegenerateConfigurationError("DLT produced a zero rotation row")
    p = p / scale
    rotation = _nearest_rotation(p[:, :3])
    return rotation, p[:, 3]


def _homography_init(xyz, xn):
    """Pose from a plane-to-image homography for coplanar 3D points."""
    centroid = xyz.mean(axis=0)
    _, _, vt = np.linalg.svd(xyz - centroid)
    e1, e2 = vt[0], vt[1]
    plane = np.column_stack([(xyz - centroid) @ e1, (xyz - centroid) @ e2])
    n = len(xyz)
    a = np.zeros((2 * n, 9))
    ph = np.hstack([plane, np.ones((n, 1))])
    a[0::2, 0:3] = ph
    a[0::2, 6:9] = -xn[:, 0:1] * ph
    a[1::2, 3:6] = ph
    a[1::2, 6:9] = -xn[:, 1:2] * ph
    _, s, vh = np.linalg.svd(a)
    if s[7] < 1e-10 * s[0]:
        raise DegenerateConfigurationError("rank-deficient homography design matrix")
    h = vh[-1].reshape(3, 3)
    depths = ph @ h[2]
    if np.sum(depths > 0) < np.sum(depths < 0):
        h = -h
    lam = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    r1 = lam * h[:, 0]
    r2 = lam * h[:, 1]
    basis_cam = _nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    basis_world = np.column_stack([e1, e2, np.cross(e1, e2)])
    rotation = basis_cam @ basis_world.T
    translation = lam * h[:, 2] - rotation @ centroid
    return rotation, translation


def _projection_jacobian(intr, rotation, translation, xyz):
    """Stacked (2n, 6) Jacobian of pixel residuals w.r.t. (rot. increment,
    translation), using a left multiplicative rotation update."""
    cam = xyz @ rotation.T + translation
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    inv_z = 1.0 / z
    du = np.column_stack([intr.fx * inv_z, intr.gamma * inv_z, -(intr.fx * x + intr.gamma * y) * inv_z**2])
    dv = np.column_stack([np.zeros_like(z), intr.fy * inv_z, -intr.fy * y * inv_z**2])
    rx = cam - translation  # = R @ X
    # d(cam)/d(omega) = -skew(R X): columns for omega_x, omega_y, omega_z
    dcam = np.zeros((len(xyz), 3, 6))
    dcam[:, 0, 1] = rx[:, 2]
    dcam[:, 0, 2] = -rx[:, 1]
    dcam[:, 1, 0] = -rx[:, 2]
    dcam[:, 1, 2] = rx[:, 0]
    dcam[:, 2, 0] = rx[:, 1]
    dcam[:, 2, 1] = -rx[:, 0]
    dcam[:, 0, 3] = 1.0
    dcam[:, 1, 4] = 1.0
    dcam[:, 2, 5] = 1.0
    jac = np.empty((2 * len(xyz), 6))
    jac[0::2] = np.einsum("nk,nkj->nj", du, dcam)
    jac[1::2] = np.einsum("nk,nkj->nj", dv, dcam)
    return jac


def _gauss_newton(intr, rotation, translation, xyz, uv, params):
    """Minimize the squared back-projection error; step halving keeps the
    accepted cost strictly non-increasing."""
    def cost_of(rot, t):
        proj, valid = _project_valid(intr, rot, t, xyz)
        if not np.all(valid):
            return np.inf, None
        r = (proj - uv).reshape(-1)
        return float(r @ r), r

    cost, residual = cost_of(rotation, translation)
    if not math.isfinite(cost):
        raise BehindCameraError("initialization leaves points behind the camera")
    history = [cost]
    converged = False
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        jac = _projection_jacobian(intr, rotation, translation, xyz)
        grad = jac.T @ residual
        if np.linalg.norm(grad) <= params.gradient_tol:
            converged = True
            iterations -= 1
            break
        step, *_ = np.linalg.lstsq(jac, -residual, rcond=None)
        improved = False
        scale = 1.0
        for _ in range(30):
            w = step[:3] * scale
            angle = np.linalg.norm(w)
            # below ~1e-15 rad the update is the identity at double precision
            rot_new = rotation if angle < 1e-15 else rotation_about_axis(w / angle, angle) @ rotation
            t_new = translation + step[3:] * scale
            cost_new, residual_new = cost_of(rot_new, t_new)
            if cost_new < cost:
                rotation, translation = rot_new, t_new
                relative_drop = (cost - cost_new) / max(cost, 1e-300)
                cost, residual = cost_new, residual_new
                history.append(cost)
                improved = True
                if relative_drop < 1e-14:
                    converged = True
                break
            scale *= 0.5
        if not improved:
            converged = True  # no descent direction left at working precision
            break
        if converged:
            break
    if not converged:
        grad = _projection_jacobian(intr, rotation, translation, xyz).T @ residual
        if np.linalg.norm(grad) > params.gradient_tol:
            raise NoConvergenceError(
                f"Gauss-Newton did not converge in {params.max_iterations} iterations "
                f"(|grad| = {np.linalg.norm(grad):.3e})"
            )
    return rotation, translation, iterations, tuple(history)


def pnp_solve(intr, correspondences, params=None, from_frame="world", camera_frame="camera"):
    """Estimate [R|t] from >= 6 2D-3D correspondences by Gauss-Newton
    refinement of the back-projection cost from a direct linear (or, for
    coplanar points, planar-homography) initialization."""
    params = params or PnpParams()
    xyz, uv = _corr_arrays(correspondences)
    n = len(xyz)
    if n < 6:
        raise InsufficientPointsError(f"pnp needs >= 6 correspondences, got {n}")
    xn = _normalized_coords(intr, uv)
    sx = np.linalg.svd(xyz - xyz.mean(axis=0), compute_uv=False)
    if sx[1] < 1e-9 * sx[0]:
        raise DegenerateConfigurationError("3D points are (near-)collinear")
    # Try both initializations: the DLT degrades as the points approach a
    # plane, where the homography route takes over; the cheaper-cost valid
    # candidate wins, so no planarity threshold is needed.
    candidates = []
    if sx[2] > 1e-9 * sx[0]:
        try:
            candidates.append(_dlt_init(xyz, xn))
        except DegenerateConfigurationError:
            pass
    try:
        candidates.append(_homography_init(xyz, xn))
    except DegenerateConfigurationError:
        pass
    if not candidates:
        raise DegenerateConfigurationError("no usable PnP initialization for these points")

    def _init_cost(rt):
        proj, valid = _project_valid(intr, rt[0], rt[1], xyz)
        if not np.all(valid):
            return np.inf
        return float(np.sum((proj - uv) ** 2))

    rotation, translation = min(candidates, key=_init_cost)
    rotation, translation, iterations, history = _gauss_newton(
        intr, rotation, translation, xyz, uv, params
    )
    transform = RigidTransform(rotation, translation, from_frame, camera_frame)
    proj = project_points(intr, transform, xyz)
    residuals = np.linalg.norm(proj - uv, axis=1)
    diagnostics = SolveDiagnostics(
        iterations=iterations, converged=True, rmse_history=tuple(math.sqrt(c / n) for c in history)
    )
    return CalibrationResult(
        transform,
        float(np.sqrt(np.mean(residuals**2))),
        residuals,
        METHOD_PNP,
        diagnostics,
    )


@dataclass(frozen=True)
class PnpRansacParams:
    """Subset size defaults to 15 when at least 20 correspondences are
    available, otherwise to the 6-point minimum."""

    subset_size: int | None = None
    iterations: int = 10000
    inlier_threshold_px: float = 2.0
    seed: int = 0


def pnp_ransac(intr, correspondences, params=None, gn_params=None,
               from_frame="world", camera_frame="camera"):
    """RANSAC-wrapped PnP: the model with the most inliers (ties resolved to
    the earliest iteration) is refit on its inliers.

    Returns ``(CalibrationResult, inlier_mask)``. Stops early only when a
    hypothesis already explains every correspondence, which cannot change
    the selected model. Deterministic for a given seed.
    """
    params = params or PnpRansacParams()
    xyz, uv = _corr_arrays(correspondences)
    n = len(xyz)
    subset_size = params.subset_size
    if subset_size is None:
        subset_size = 15 if n >= 20 else 6
    if subset_size < 6:
        raise ValidationError(f"subset size must be >= 6, got {subset_size}")
    if n < subset_size:
        raise InsufficientPointsError(f"need >= {subset_size} correspondences, got {n}")
    pairs = list(zip(xyz, uv))
    rng = np.random.default_rng(params.seed)
    best_count = -1
    best_mask = None
    for iteration in range(params.iterations):
        subset = rng.choice(n, size=subset_size, replace=False)
        try:
            model = pnp_solve(
                intr,
                [pairs[i] for i in subset],
                gn_params,
                from_frame=from_frame,
                camera_frame=camera_frame,
            )
        except (DegenerateConfigurationError, NoConvergenceError, BehindCameraError):
            continue
        proj, valid = _project_valid(
            intr, model.transform.rotation, model.transform.translation, xyz
        )
        dist = np.linalg.norm(proj - uv, axis=1)
        inliers = valid & (dist <= params.inlier_threshold_px)
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_mask = inliers
            logger.debug("ransac iteration %d: %d/%d inliers", iteration, count, n)
            if count == n:
                break
    if best_count < subset_size:
        raise NoConsensusError(
            f"best PnP consensus has {best_count} inliers, needs >= {subset_size}"
        )
    refit = pnp_solve(
        intr,
        [p for p, keep in zip(pairs, best_mask) if keep],
        gn_params,
        from_frame=from_frame,
        camera_frame=camera_frame,
    )
    result = CalibrationResult(
        refit.transform,
        refit.rmse,
        refit.per_point_residuals,
        METHOD_PNP_RANSAC,
        refit.diagnostics,
    )
    return result, best_mask
