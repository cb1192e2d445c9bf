"""Board corner recovery from sparse LiDAR returns.

Edges are fitted as 3D lines with RANSAC, adjacent edges are intersected via
the midpoint of their shortest connecting segment, and the result is sanity
checked against the known board dimensions. Edge point clusters come either
from the convex-hull splitter (:func:`cluster_edges`, the automatic stand-in
for marking segments by hand) or from externally supplied labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .board import (
    INNER_EDGE_IDS,
    OUTER_EDGE_IDS,
    canonical_corner_order,
    sensor_facing_plane_basis,
)
from .errors import (
    BoardRejectedError,
    InsufficientPointsError,
    NoConsensusError,
    ParallelLinesError,
    TooSparseError,
    ValidationError,
)
from .geometry import Point3, PointCloud, as_vec3

__all__ = [
    "Line3",
    "LineSegment3",
    "EdgeCluster",
    "ExtractedBoard",
    "RansacLineParams",
    "ExtractionParams",
    "ransac_fit_line",
    "shortest_connecting_segment",
    "corner_from_edges",
    "cluster_edges",
    "extract_board",
    "point_line_distance",
]

logger = logging.getLogger(__name__)

_PARALLEL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Line3:
    """Infinite 3D line through ``point`` with a unit ``direction`` whose
    first nonzero component is positive (canonical sign)."""

    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        point = as_vec3(self.point, "line point")
        direction = as_vec3(self.direction, "line direction")
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            raise ValidationError("line direction has (near-)zero norm")
        direction = direction / norm
        for c in direction:
            if c < 0.0:
                direction = -direction
                break
            if c > 0.0:
                break
        point.setflags(write=False)
        direction.setflags(write=False)
        object.__setattr__(self, "point", point)
        object.__setattr__(self, "direction", direction)


@dataclass(frozen=True, eq=False)
class LineSegment3:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = as_vec3(self.a, "segment endpoint a")
        b = as_vec3(self.b, "segment endpoint b")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def length(self):
        return float(np.linalg.norm(self.a - self.b))

    @property
    def midpoint(self):
        return (self.a + self.b) / 2.0


@dataclass(frozen=True, eq=False)
class EdgeCluster:
    """Points assigned to one board edge."""

    edge_id: str
    points: PointCloud


def point_line_distance(xyz, line):
    """Perpendicular distance from points (N, 3) or (3,) to a line."""
    xyz = np.asarray(xyz, dtype=np.float64)
    rel = xyz - line.point
    along = rel @ line.direction
    perp = rel - np.outer(np.atleast_1d(along), line.direction).reshape(rel.shape)
    return np.linalg.norm(perp, axis=-1)


@dataclass(frozen=True)
class RansacLineParams:
    threshold_m: float = 0.01
    iterations: int = 1000
    min_inliers: int | None = None  # default max(2, ceil(n/2))
    seed: int = 0


def _cloud_xyz(points):
    if isinstance(points, PointCloud):
        return points.xyz
    xyz = np.asarray(points, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ValidationError(f"points must be (N, 3), got shape {xyz.shape}")
    return xyz


def _least_squares_line(xyz):
    centroid = xyz.mean(axis=0)
    _, _, vt = np.linalg.svd(xyz - centroid)
    return Line3(centroid, vt[0])


def ransac_fit_line(points, params=None, rng=None):
    """RANSAC 3D line fit: best candidate by inlier count (ties by lower
    total inlier distance), refit to its inliers by least squares.

    Returns ``(Line3, inlier_mask)``. Deterministic for a given seed.
    """
    params = params or RansacLineParams()
    xyz = _cloud_xyz(points)
    n = len(xyz)
    if n < 2:
        raise InsufficientPointsError(f"line fit needs >= 2 points, got {n}")
    min_inliers = params.min_inliers
    if min_inliers is None:
        min_inliers = max(2, math.ceil(0.5 * n))
    if rng is None:
        rng = np.random.default_rng(params.seed)

    # sample all index pairs up front; b is re-mapped to guarantee a != b
    a_idx = rng.integers(0, n, size=params.iterations)
    b_idx = rng.integers(0, n - 1, size=params.iterations)
    b_idx = b_idx + (b_idx >= a_idx)

    best_count = -1
    best_total = np.inf
    best_mask = None
    chunk = max(1, int(4_000_000 // max(n, 1)))
    for start in range(0, params.iterations, chunk):
        a = xyz[a_idx[start : start + chunk]]
        d = xyz[b_idx[start : start + chunk]] - a
        norms = np.linalg.norm(d, axis=1)
        ok = norms > 1e-12
        d[ok] /= norms[ok, None]
        rel = xyz[None, :, :] - a[:, None, :]  # (chunk, n, 3)
        along = np.einsum("cnk,ck->cn", rel, d)
        perp = rel - along[:, :, None] * d[:, None, :]
        dist = np.linalg.norm(perp, axis=2)
        inliers = (dist <= params.threshold_m) & ok[:, None]
        counts = inliers.sum(axis=1)
        totals = np.where(inliers, dist, 0.0).sum(axis=1)
        for i in range(len(counts)):
            c, t = int(counts[i]), float(totals[i])
            if c > best_count or (c == best_count and t < best_total):
                best_count = c
                best_total = t
                best_mask = inliers[i]
    if best_count < min_inliers:
        raise NoConsensusError(
            f"best line consensus has {best_count} inliers, needs >= {min_inliers}"
        )
    line = _least_squares_line(xyz[best_mask])
    return line, best_mask


def shortest_connecting_segment(l1, l2):
    """Mutual-perpendicular segment between two non-parallel lines; zero
    length at the intersection if the lines meet."""
    d1, d2 = l1.direction, l2.direction
    b = float(d1 @ d2)
    if abs(b) > 1.0 - _PARALLEL_TOL:
        raise ParallelLinesError(f"lines are (anti)parallel: |d1.d2| = {abs(b):.12f}")
    w0 = l1.point - l2.point
    denom = 1.0 - b * b
    s = (b * (w0 @ d2) - (w0 @ d1)) / denom
    u = (w0 @ d2) + s * b
    return LineSegment3(l1.point + s * d1, l2.point + u * d2)


def corner_from_edges(l1, l2):
    """Corner approximated by the midpoint of the shortest connecting
    segment; its length is returned as the gap sanity statistic."""
    seg = shortest_connecting_segment(l1, l2)
    return Point3.from_array(seg.midpoint), seg.length


def _edge_candidates(uv, ring):
    """Indices of boundary-point candidates in the board plane.

    When ring indices are available, each scan line's two in-plane endpoints
    (min/max u per ring) are the returns that touch the board edges; interior
    ring samples near the top and bottom corners would otherwise masquerade
    as edge points. Without rings, the planar convex hull is the boundary
    detector.
    """
    if ring is not None and len(np.unique(ring)) >= 2:
        candidates = set()
        for r in np.unique(ring):
            members = np.flatnonzero(ring == r)
            candidates.add(int(members[np.argmin(uv[members, 0])]))
            candidates.add(int(members[np.argmax(uv[members, 0])]))
        return np.array(sorted(candidates), dtype=np.int64)
    try:
        return np.array(sorted(ConvexHull(uv).vertices), dtype=np.int64)
    except QhullError as exc:
        raise TooSparseError(f"convex hull of board points failed: {exc}") from None


def cluster_edges(board_points, model, up_hint=(0.0, 0.0, 1.0), sensor_origin=(0.0, 0.0, 0.0)):
    """Split one board's returns into the four outer edge clusters.

    Points are projected onto the board's best-fit plane; boundary
    candidates (per-ring scan line endpoints, or the planar convex hull when
    no ring channel is present) are walked counter-clockwise around the
    centroid and cut at the four extreme vertices (top / left / bottom /
    right in plane coordinates): candidates between "top" and "left" form
    the top-left edge, and so on. This replaces marking edge segments by
    hand; it only separates outer edges, so hollow boards need labels.
    """
    xyz = _cloud_xyz(board_points)
    ring = board_points.ring if isinstance(board_points, PointCloud) else None
    if len(xyz) < 4:
        raise TooSparseError(f"edge clustering needs >= 4 points, got {len(xyz)}")
    centroid, e1, e2, _ = sensor_facing_plane_basis(xyz, up_hint, sensor_origin)
    rel = xyz - centroid
    uv = np.column_stack([rel @ e1, rel @ e2])
    diag = math.hypot(model.outer_width_m, model.outer_height_m)
    extent = float(np.ptp(uv, axis=0).max()) if len(uv) else 0.0
    if extent > 1.5 * diag:
        logger.warning(
            "board points span %.3f m, more than 1.5x the model diagonal %.3f m; "
            "check the region of interest",
            extent,
            diag,
        )
    candidates = _edge_candidates(uv, ring)
    if len(candidates) < 4:
        raise TooSparseError(f"only {len(candidates)} boundary candidates; need >= 4")
    cuv = uv[candidates]
    spread = cuv - cuv.mean(axis=0)
    keys = np.mod(np.arctan2(spread[:, 1], spread[:, 0]) - math.pi / 2.0, 2.0 * math.pi)
    order = np.argsort(keys, kind="stable")
    cycle = candidates[order]
    cycle_uv = cuv[order]
    u, v = cycle_uv[:, 0], cycle_uv[:, 1]
    # Extreme vertices start the arcs. Candidates within a small tolerance of
    # an extreme (side rows of axis-aligned boards tie to sampling precision)
    # count as that extreme; the corner-most member of the group starts the
    # arc so the four extremes stay distinct whenever the data allows it.
    tol = 0.02 * max(float(np.ptp(u)), float(np.ptp(v)), 1e-12)

    def _start(primary, secondary):
        group = np.flatnonzero(primary >= primary.max() - tol)
        return int(group[np.argmax(secondary[group])])

    positions = {
        OUTER_EDGE_IDS[0]: _start(v, -u),  # top extreme, top-left-most
        OUTER_EDGE_IDS[1]: _start(-u, -v),  # left extreme, bottom-left-most
        OUTER_EDGE_IDS[2]: _start(-v, u),  # bottom extreme, bottom-right-most
        OUTER_EDGE_IDS[3]: _start(u, v),  # right extreme, top-right-most
    }
    n = len(cycle)
    cloud = (
        board_points
        if isinstance(board_points, PointCloud)
        else PointCloud("board-roi", xyz)
    )
    clusters = []
    for k, edge_id in enumerate(OUTER_EDGE_IDS):
        start = positions[edge_id]
        stop = positions[OUTER_EDGE_IDS[(k + 1) % 4]]
        span = (stop - start) % n
        # both splitting extremes belong to the arc: they sit at the corners
        members = sorted({int(cycle[(start + j) % n]) for j in range(span + 1)})
        if len(members) < 2:
            raise TooSparseError(
                f"edge {edge_id!r} received {len(members)} boundary point(s); "
                "too few rings cross the board"
            )
        clusters.append(EdgeCluster(edge_id, cloud.select(np.array(members))))
    return clusters


@dataclass(frozen=True)
class ExtractionParams:
    ransac: RansacLineParams = field(default_factory=RansacLineParams)
    reject_threshold_m: float = 0.05
    up_hint: tuple[float, float, float] = (0.0, 0.0, 1.0)
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class ExtractedBoard:
    """Corners (4 solid / 8 hollow: outer then inner, each in canonical
    order) with the per-corner gap statistic and per-edge length errors."""

    corners: tuple[Point3, ...]
    edge_lines: dict[str, Line3]
    gap_lengths: tuple[float, ...]
    edge_lengths: tuple[float, ...]
    edge_length_errors: tuple[float, ...]
    low_confidence: bool = False

    @property
    def corners_xyz(self):
        return np.array([c.as_array() for c in self.corners])


def _match_edge_errors(lengths, dim_a, dim_b):
    """Per-edge |estimated - expected| with opposite sides sharing a
    dimension; the (a, b) vs (b, a) assignment minimizing total error wins."""
    lengths = np.asarray(lengths)
    expect_1 = np.array([dim_a, dim_b, dim_a, dim_b])
    expect_2 = np.array([dim_b, dim_a, dim_b, dim_a])
    err_1 = np.abs(lengths - expect_1)
    err_2 = np.abs(lengths - expect_2)
    return err_1 if err_1.sum() <= err_2.sum() else err_2


def _corners_from_cycle(lines_by_edge, edge_cycle, params):
    """Intersect adjacent edges of a 4-edge cycle; returns corners, gaps,
    side lengths (consecutive corners, cyclic)."""
    corners = []
    gaps = []
    for i in range(4):
        l1 = lines_by_edge[edge_cycle[i]]
        l2 = lines_by_edge[edge_cycle[(i + 1) % 4]]
        corner, gap = corner_from_edges(l1, l2)
        corners.append(corner)
        gaps.append(gap)
    xyz = np.array([c.as_array() for c in corners])
    order = canonical_corner_order(xyz, params.up_hint, params.sensor_origin)
    corners = [corners[i] for i in order]
    gaps = [gaps[i] for i in order]
    xyz = xyz[order]
    sides = [float(np.linalg.norm(xyz[(i + 1) % 4] - xyz[i])) for i in range(4)]
    return corners, gaps, sides


def extract_board(clusters, model, params=None):
    """Fit edges, intersect adjacent pairs, order corners canonically, and
    check estimated side lengths against the board model.

    Expects the 4 outer edge clusters for solid boards, plus the 4 inner
    ones for hollow boards. Raises BoardRejectedError when any edge length
    error exceeds ``params.reject_threshold_m``.
    """
    params = params or ExtractionParams()
    by_id = {c.edge_id: c for c in clusters}
    if len(by_id) != len(clusters):
        raise ValidationError("duplicate edge ids among clusters")
    expected = OUTER_EDGE_IDS + (INNER_EDGE_IDS if model.has_inner else ())
    missing = [e for e in expected if e not in by_id]
    if missing:
        raise TooSparseError(f"missing edge clusters: {missing}")
    extra = [e for e in by_id if e not in expected]
    if extra:
        raise ValidationError(f"unexpected edge clusters: {extra}")

    root = np.random.SeedSequence(params.ransac.seed)
    streams = [np.random.default_rng(s) for s in root.spawn(len(expected))]
    lines = {}
    low_confidence = False
    for edge_id, rng in zip(expected, streams):
        cluster = by_id[edge_id]
        if len(cluster.points) < 3:
            low_confidence = True
        line, _ = ransac_fit_line(cluster.points, params.ransac, rng=rng)
        lines[edge_id] = line

    corners, gaps, sides = _corners_from_cycle(lines, OUTER_EDGE_IDS, params)
    errors = list(_match_edge_errors(sides, model.outer_width_m, model.outer_height_m))
    if model.has_inner:
        in_corners, in_gaps, in_sides = _corners_from_cycle(lines, INNER_EDGE_IDS, params)
        corners += in_corners
        gaps += in_gaps
        sides += in_sides
        errors += list(_match_edge_errors(in_sides, model.inner_width_m, model.inner_height_m))
    worst = max(errors)
    if worst > params.reject_threshold_m:
        raise BoardRejectedError(
            f"edge length error {worst:.4f} m exceeds reject threshold "
            f"{params.reject_threshold_m} m"
        )
    return ExtractedBoard(
        corners=tuple(corners),
        edge_lines=lines,
        gap_lengths=tuple(float(g) for g in gaps),
        edge_lengths=tuple(float(s) for s in sides),
        edge_length_errors=tuple(float(e) for e in errors),
        low_confidence=low_confidence,
    )
