"""Marker board geometry: dimensions, corner layout, canonical corner order.

The canonical corner order is what makes LiDAR-extracted corners pair
automatically with camera-side corners: in the board plane, corners are
sorted by angle around their centroid, starting from straight "up" and going
counter-clockwise as seen from the sensor. Both sensor paths call
:func:`canonical_corner_order` on corners expressed in their own frame, with
the plane normal oriented toward the sensor origin and "up" taken from a
per-sensor hint (LiDAR +z, camera -y by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .geometry import as_vec3

__all__ = [
    "BoardModel",
    "OUTER_EDGE_IDS",
    "INNER_EDGE_IDS",
    "outer_corners_board_frame",
    "inner_corners_board_frame",
    "sensor_facing_plane_basis",
    "canonical_corner_order",
]

# Edge identifiers follow the arcs of the convex hull walked counter-clockwise
# from the topmost corner; adjacent edges in this cycle share a corner.
OUTER_EDGE_IDS = ("top-left", "bottom-left", "bottom-right", "top-right")
INNER_EDGE_IDS = tuple("inner-" + e for e in OUTER_EDGE_IDS)


@dataclass(frozen=True)
class BoardModel:
    """Rectangular marker board, optionally with a rectangular cutout.

    All lengths in meters. The board frame has its origin at the fiducial
    tag center, x right, y up, z out of the board plane; the board center
    sits at ``-tag_center_offset`` in that frame. ``inner_offset_m`` is the
    cutout center relative to the board center.
    """

    outer_width_m: float
    outer_height_m: float
    inner_width_m: float | None = None
    inner_height_m: float | None = None
    inner_offset_m: tuple[float, float] = (0.0, 0.0)
    tag_center_offset_m: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.outer_width_m > 0 and self.outer_height_m > 0):
            raise ValidationError("board outer dimensions must be positive")
        if (self.inner_width_m is None) != (self.inner_height_m is None):
            raise ValidationError("inner cutout needs both width and height")
        if self.inner_width_m is not None:
            if not (self.inner_width_m > 0 and self.inner_height_m > 0):
                raise ValidationError("inner cutout dimensions must be positive")
            ox, oy = self.inner_offset_m
            if (abs(ox) + self.inner_width_m / 2 >= self.outer_width_m / 2) or (
                abs(oy) + self.inner_height_m / 2 >= self.outer_height_m / 2
            ):
                raise ValidationError("inner cutout must lie strictly inside the outer rectangle")

    @property
    def has_inner(self):
        return self.inner_width_m is not None


def _rect_corners(center_xy, width, height):
    cx, cy = center_xy
    hw, hh = width / 2.0, height / 2.0
    return np.array(
        [
            [cx - hw, cy - hh, 0.0],
            [cx + hw, cy - hh, 0.0],
            [cx + hw, cy + hh, 0.0],
            [cx - hw, cy + hh, 0.0],
        ]
    )


def board_center_board_frame(model):
    ox, oy = model.tag_center_offset_m
    return np.array([-ox, -oy, 0.0])


def outer_corners_board_frame(model):
    """Outer rectangle corners (4, 3) in the board (tag) frame; order is
    construction order, not yet canonical."""
    c = board_center_board_frame(model)
    return _rect_corners((c[0], c[1]), model.outer_width_m, model.outer_height_m)


def inner_corners_board_frame(model):
    if not model.has_inner:
        return None
    c = board_center_board_frame(model)
    ox, oy = model.inner_offset_m
    return _rect_corners((c[0] + ox, c[1] + oy), model.inner_width_m, model.inner_height_m)


def sensor_facing_plane_basis(points_xyz, up_hint, sensor_origin=(0.0, 0.0, 0.0)):
    """Fit a plane to points and build an in-plane right-handed basis.

    Returns ``(centroid, e1, e2, normal)`` with the normal oriented toward
    ``sensor_origin``, e2 the projection of ``up_hint`` into the plane, and
    e1 = e2 x n ("right" as seen from the sensor), so e1 x e2 = n.
    """
    pts = np.asarray(points_xyz, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
        raise ValidationError("plane basis needs at least 3 points of shape (N, 3)")
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid)
    normal = vt[2]
    toward = as_vec3(sensor_origin, "sensor_origin") - centroid
    facing = float(normal @ toward)
    if facing < 0.0:
        normal = -normal
    elif facing == 0.0:
        # sensor sits in the plane: fall back to a sign-canonical normal
        for c in normal:
            if c < 0.0:
                normal = -normal
                break
            if c > 0.0:
                break
    up = as_vec3(up_hint, "up_hint")
    e2 = up - (up @ normal) * normal
    n2 = np.linalg.norm(e2)
    if n2 < 1e-9:
        # board is face-on to the up axis; pick a deterministic in-plane axis
        e2 = vt[0] if abs(vt[0] @ normal) < 0.9 else vt[1]
        e2 = e2 - (e2 @ normal) * normal
        n2 = np.linalg.norm(e2)
    e2 = e2 / n2
    e1 = np.cross(e2, normal)
    return centroid, e1, e2, normal


def canonical_corner_order(corners_xyz, up_hint, sensor_origin=(0.0, 0.0, 0.0)):
    """Indices ordering corners canonically: counter-clockwise by angle
    around the centroid as seen from the sensor, starting at the topmost
    corner (max in-plane "up" coordinate; ties broken to the leftmost).

    Starting at the topmost corner rather than at a fixed angle keeps the
    cycle origin stable when a corner sits straight above the centroid, as
    the tilted boards' top corners do.
    """
    pts = np.asarray(corners_xyz, dtype=np.float64)
    centroid, e1, e2, _ = sensor_facing_plane_basis(pts, up_hint, sensor_origin)
    rel = pts - centroid
    u = rel @ e1
    v = rel @ e2
    order = list(np.argsort(np.arctan2(v, u), kind="stable"))
    top_candidates = [i for i in range(len(pts)) if v[i] >= v.max() - 1e-12]
    start = min(top_candidates, key=lambda i: u[i])
    k = order.index(start)
    return np.array(order[k:] + order[:k], dtype=np.int64)
