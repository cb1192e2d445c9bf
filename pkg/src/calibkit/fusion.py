"""Point cloud fusion and the numeric quality metrics for it.

A bad translation shows up as duplicated structure ("two of everything"):
points that sit farther than ``hallucination_radius_m`` from the other cloud
while structure still exists within ``structure_radius_m``. A bad rotation
shows up as misalignment that grows with distance from the origin, which the
range-binned divergence makes visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError, FrameMismatchError
from .geometry import PointCloud

__all__ = ["FusionParams", "FusionReport", "fuse_clouds"]


@dataclass(frozen=True)
class FusionParams:
    hallucination_radius_m: float = 0.05
    structure_radius_m: float = 0.5
    range_bins: int = 8


@dataclass(frozen=True)
class FusionReport:
    """Nearest-neighbor statistics of transformed cloud A against cloud B.

    ``mean_nn_m`` / ``median_nn_m`` are taken over the mutual-overlap region
    (A points with a B neighbor within ``structure_radius_m``).
    ``duplication_score`` is the fraction of A points whose nearest B
    neighbor is farther than ``hallucination_radius_m`` yet still within
    ``structure_radius_m``: displaced duplicates rather than genuinely
    non-overlapping field of view.
    """

    mean_nn_m: float
    median_nn_m: float
    duplication_score: float
    bin_edges_m: tuple[float, ...]
    bin_mean_nn_m: tuple[float, ...]
    bin_counts: tuple[int, ...]
    overlap_fraction: float
    params: FusionParams

    def as_dict(self):
        return {
            "mean_nn_m": self.mean_nn_m,
            "median_nn_m": self.median_nn_m,
            "duplication_score": self.duplication_score,
            "bin_edges_m": list(self.bin_edges_m),
            "bin_mean_nn_m": list(self.bin_mean_nn_m),
            "bin_counts": list(self.bin_counts),
            "overlap_fraction": self.overlap_fraction,
            "hallucination_radius_m": self.params.hallucination_radius_m,
            "structure_radius_m": self.params.structure_radius_m,
        }


def fuse_clouds(cloud_a, cloud_b, transform, params=None):
    """Transform cloud A into B's frame, concatenate, and score alignment.

    Returns ``(merged, FusionReport)``. Range bins cover the span of the
    transformed A points' distances from the B-frame origin.
    """
    params = params or FusionParams()
    if transform.from_frame != cloud_a.frame or transform.to_frame != cloud_b.frame:
        raise FrameMismatchError(
            f"transform maps {transform.from_frame!r}->{transform.to_frame!r}; "
            f"clouds are {cloud_a.frame!r} and {cloud_b.frame!r}"
        )
    if len(cloud_a) == 0 or len(cloud_b) == 0:
        raise EmptyInputError("fusion needs two nonempty clouds")
    moved = transform.apply(cloud_a)
    ring = None
    if moved.ring is not None and cloud_b.ring is not None:
        ring = np.concatenate([moved.ring, cloud_b.ring])
    merged = PointCloud(cloud_b.frame, np.vstack([moved.xyz, cloud_b.xyz]), ring)

    dist, _ = cKDTree(cloud_b.xyz).query(moved.xyz)
    dist = np.atleast_1d(dist)
    overlap = dist <= params.structure_radius_m
    if np.any(overlap):
        mean_nn = float(np.mean(dist[overlap]))
        median_nn = float(np.median(dist[overlap]))
    else:
        mean_nn = median_nn = float("inf")
    duplicated = (dist > params.hallucination_radius_m) & overlap
    score = float(np.mean(duplicated))

    ranges = np.linalg.norm(moved.xyz, axis=1)
    lo, hi = float(ranges.min()), float(ranges.max())
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, params.range_bins + 1)
    which = np.clip(np.searchsorted(edges, ranges, side="right") - 1, 0, params.range_bins - 1)
    bin_means, bin_counts = [], []
    for b in range(params.range_bins):
        members = which == b
        bin_counts.append(int(members.sum()))
        bin_means.append(float(np.mean(dist[members])) if bin_counts[-1] else float("nan"))
    report = FusionReport(
        mean_nn_m=mean_nn,
        median_nn_m=median_nn,
        duplication_score=score,
        bin_edges_m=tuple(float(e) for e in edges),
        bin_mean_nn_m=tuple(bin_means),
        bin_counts=tuple(bin_counts),
        overlap_fraction=float(np.mean(overlap)),
        params=params,
    )
    return merged, report
