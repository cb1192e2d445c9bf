import math

import numpy as np
import pytest

from calibkit.errors import (
    DegenerateGeometryError,
    EmptyInputError,
    FrameMismatchError,
    InconsistentFramesError,
    NoCorrespondencesError,
)
from calibkit.geometry import (
    PointCloud,
    RigidTransform,
    quat_to_matrix,
    rotation_about_axis,
    rotation_x,
    rotation_z,
)
from calibkit.registration import (
    CorrespondenceSet,
    IcpParams,
    average_runs,
    icp_solve,
    kabsch_solve,
    mean_offset,
    registration_rmse,
    running_average_trace,
)

from _helpers import (
    ambiguity_scene,
    correspondences_from_transform,
    geodesic_deg,
    noisy_kabsch_runs,
    random_transform,
    symmetric_square,
)


def pair(p, q, frames=("lidar", "camera")):
    return CorrespondenceSet(PointCloud(frames[0], p), PointCloud(frames[1], q))


def objective(corr, transform):
    mapped = transform.transform_points(corr.source.xyz)
    return float(np.sum((mapped - corr.target.xyz) ** 2))


# --- kabsch ------------------------------------------------------------------

def test_kabsch_identical_clouds_gives_identity():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.3, 0.2, 0.9]], float)
    res = kabsch_solve(pair(p, p.copy()))
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(res.transform.translation, np.zeros(3), atol=1e-12)
    assert res.rmse <= 1e-12
    assert res.method == "kabsch"


def test_kabsch_recovers_generating_transform():
    rng = np.random.default_rng(42)
    p = rng.normal(size=(8, 3))
    r = rotation_z(math.radians(30.0))
    t = np.array([0.5, -0.2, 0.1])
    res = kabsch_solve(pair(p, p @ r.T + t))
    assert geodesic_deg(res.transform.rotation, r) <= math.degrees(1e-12)
    np.testing.assert_allclose(res.transform.translation, t, atol=1e-12)
    assert res.rmse <= 1e-12


def test_kabsch_planar_mirror_returns_proper_rotation():
    # Mirroring a planar triangle exercises the determinant correction
    # (det(U V^T) = -1 for numpy's SVD of this rank-2 cross-covariance), yet
    # the corrected proper rotation aligns the planar sets exactly: a planar
    # mirror image is reachable by a 180-degree in-plane flip.
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    q = p.copy()
    q[:, 0] *= -1
    res = kabsch_solve(pair(p, q))
    assert np.linalg.det(res.transform.rotation) == pytest.approx(1.0, abs=1e-9)
    assert res.diagnostics.reflection_corrected
    assert res.rmse <= 1e-12


def test_kabsch_3d_mirror_forces_residual():
    # A non-planar mirrored set cannot be aligned by any proper rotation:
    # det stays +1, the correction flag is set, and the residual is real.
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0.3, 0.4, 0.5]], float)
    q = p.copy()
    q[:, 0] *= -1
    res = kabsch_solve(pair(p, q))
    assert np.linalg.det(res.transform.rotation) == pytest.approx(1.0, abs=1e-9)
    assert res.diagnostics.reflection_corrected
    assert res.rmse > 0.1


def test_kabsch_noisy_recovery_bounds():
    rng = np.random.default_rng(11)
    truth = random_transform(rng, "lidar", "camera")
    failures = 0
    for _ in range(20):
        corr = correspondences_from_transform(rng, truth, 12, noise=0.005)
        res = kabsch_solve(corr)
        rot_err = geodesic_deg(res.transform.rotation, truth.rotation)
        t_err = np.linalg.norm(res.transform.translation - truth.translation)
        if rot_err > 0.5 or t_err > 0.005:
            failures += 1
    assert failures == 0


def test_kabsch_rejects_too_few_and_collinear():
    with pytest.raises(DegenerateGeometryError):
        kabsch_solve(pair(np.zeros((2, 3)), np.zeros((2, 3))))
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], float)
    with pytest.raises(DegenerateGeometryError):
        kabsch_solve(pair(line, line @ rotation_z(0.3).T))


def test_kabsch_translation_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        corr = correspondences_from_transform(rng, random_transform(rng, "lidar", "camera"), 10, noise=0.01)
        res = kabsch_solve(corr)
        expected_t = corr.target.xyz.mean(axis=0) - res.transform.rotation @ corr.source.xyz.mean(axis=0)
        np.testing.assert_allclose(res.transform.translation, expected_t, atol=1e-12)


def test_kabsch_objective_beats_random_candidates():
    # stochastic global-minimum check: 10,000 perturbed candidates never win
    rng = np.random.default_rng(99)
    for _ in range(3):
        truth = random_transform(rng, "lidar", "camera")
        corr = correspondences_from_transform(rng, truth, 6, noise=0.05)
        res = kabsch_solve(corr)
        best = objective(corr, res.transform)
        angles = rng.uniform(0, math.pi, size=10_000)
        axes = rng.normal(size=(10_000, 3))
        shifts = rng.normal(scale=0.3, size=(10_000, 3))
        for k in range(10_000):
            r_cand = rotation_about_axis(axes[k], angles[k]) @ res.transform.rotation
            t_cand = res.transform.translation + shifts[k]
            cand = RigidTransform(r_cand, t_cand, "lidar", "camera")
            assert objective(corr, cand) >= best - 1e-9


def test_kabsch_left_invariance():
    rng = np.random.default_rng(17)
    for _ in range(10):
        corr = correspondences_from_transform(
            rng, random_transform(rng, "lidar", "camera"), 9, noise=0.02
        )
        g = random_transform(rng, "x", "y")
        base = kabsch_solve(corr).transform
        moved = kabsch_solve(
            pair(g.transform_points(corr.source.xyz), g.transform_points(corr.target.xyz))
        ).transform
        expected = g.as_matrix() @ base.as_matrix() @ np.linalg.inv(g.as_matrix())
        np.testing.assert_allclose(moved.rotation, expected[:3, :3], atol=1e-9)
        np.testing.assert_allclose(moved.translation, expected[:3, 3], atol=1e-9)


def test_kabsch_rejects_same_frames_and_length_mismatch():
    p = np.zeros((3, 3))
    with pytest.raises(FrameMismatchError):
        CorrespondenceSet(PointCloud("a", p), PointCloud("a", p))
    with pytest.raises(Exception):
        CorrespondenceSet(PointCloud("a", p), PointCloud("b", np.zeros((2, 3))))
    with pytest.raises(EmptyInputError):
        CorrespondenceSet(PointCloud("a", np.zeros((0, 3))), PointCloud("b", np.zeros((0, 3))))


# --- icp ---------------------------------------------------------------------

def test_icp_identical_clouds_converges_immediately():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    res = icp_solve(PointCloud("a", pts), PointCloud("b", pts.copy()), IcpParams())
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-9)
    assert res.rmse <= 1e-12
    assert res.diagnostics.iterations <= 2
    assert res.method == "icp"


def test_icp_small_motion_dense_cloud():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(600, 3))
    r = rotation_z(math.radians(5.0))
    t = np.array([0.05, 0.0, 0.02])
    res = icp_solve(PointCloud("a", pts), PointCloud("b", pts @ r.T + t), IcpParams())
    assert geodesic_deg(res.transform.rotation, r) <= 0.2
    assert np.linalg.norm(res.transform.translation - t) <= 0.005


def test_icp_symmetric_square_finds_wrong_local_optimum():
    # A square overlapping its quarter-turned copy: nearest neighbors lock
    # onto the self-symmetric pairing, so ICP converges to a transform ~90
    # degrees away from the true motion while Kabsch on known pairs is exact.
    sq = symmetric_square()
    rz90 = rotation_z(math.pi / 2)
    tgt = sq @ rz90.T
    icp = icp_solve(PointCloud("a", sq), PointCloud("b", tgt), IcpParams())
    kab = kabsch_solve(pair(sq, tgt, frames=("a", "b")))
    assert geodesic_deg(icp.transform.rotation, rz90) > 45.0
    assert geodesic_deg(kab.transform.rotation, rz90) <= 1e-9


def test_icp_ambiguity_scene_rmse_gap():
    p, q, rz90 = ambiguity_scene()
    icp = icp_solve(PointCloud("a", p), PointCloud("b", q), IcpParams())
    kab = kabsch_solve(pair(p, q, frames=("a", "b")))
    assert icp.rmse >= 5.0 * kab.rmse
    assert geodesic_deg(kab.transform.rotation, rz90) < 0.5


def test_icp_kabsch_init_never_increases_rmse():
    rng = np.random.default_rng(8)
    truth = random_transform(rng, "a", "b", t_scale=0.05)
    pts = rng.uniform(-1, 1, size=(200, 3))
    tgt = truth.transform_points(pts) + rng.normal(0, 0.002, size=(200, 3))
    start = kabsch_solve(pair(pts, tgt, frames=("a", "b"))).transform
    res = icp_solve(
        PointCloud("a", pts), PointCloud("b", tgt), IcpParams(initial_guess=start)
    )
    history = res.diagnostics.rmse_history
    assert all(history[i + 1] <= history[i] + 1e-12 for i in range(len(history) - 1))


def test_icp_distance_gate_can_empty_pairing():
    src = PointCloud("a", np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float))
    tgt = PointCloud("b", np.array([[10, 10, 10], [11, 10, 10], [10, 11, 10]], float))
    with pytest.raises(NoCorrespondencesError):
        icp_solve(src, tgt, IcpParams(max_correspondence_distance_m=0.5))


def test_icp_frame_checks():
    pts = np.eye(3)
    with pytest.raises(FrameMismatchError):
        icp_solve(PointCloud("a", pts), PointCloud("a", pts))
    guess = RigidTransform.identity("x", "y")
    with pytest.raises(FrameMismatchError):
        icp_solve(PointCloud("a", pts), PointCloud("b", pts), IcpParams(initial_guess=guess))


# --- averaging ---------------------------------------------------------------

def test_average_identical_runs_is_exact():
    rng = np.random.default_rng(2)
    truth = random_transform(rng, "lidar", "camera")
    runs = [kabsch_solve(correspondences_from_transform(rng, truth, 8))] * 5
    avg = average_runs(runs)
    np.testing.assert_allclose(
        quat_to_matrix(avg.mean_rotation), runs[0].transform.rotation, atol=1e-12
    )
    np.testing.assert_allclose(
        avg.mean_translation.as_array(), runs[0].transform.translation, atol=1e-12
    )
    assert avg.sample_count == 5


def test_average_hemisphere_alignment_near_180_degrees():
    # Two rotations straddling 180 degrees about x: their canonical
    # quaternions have near-opposite vector parts, so a naive mean collapses;
    # hemisphere alignment must average them to ~180 degrees about x.
    r_a = rotation_x(math.radians(179.9))
    r_b = rotation_x(math.radians(-179.9))
    runs = []
    for r in (r_a, r_b):
        p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
        runs.append(kabsch_solve(pair(p, p @ r.T)))
    avg = average_runs(runs)
    assert geodesic_deg(quat_to_matrix(avg.mean_rotation), rotation_x(math.pi)) <= 0.11


def test_average_converges_to_truth():
    rng = np.random.default_rng(3)
    truth = random_transform(rng, "lidar", "camera")
    runs = []
    p = rng.normal(size=(10, 3))
    for _ in range(1000):
        wiggle = rotation_about_axis(rng.normal(size=3), math.radians(rng.normal(0, 1.0)))
        r = wiggle @ truth.rotation
        t = truth.translation + rng.normal(0, 0.005, size=3)
        q = p @ r.T + t
        runs.append(kabsch_solve(pair(p, q)))
    avg = average_runs(runs)
    assert geodesic_deg(quat_to_matrix(avg.mean_rotation), truth.rotation) <= 0.1
    assert np.linalg.norm(avg.mean_translation.as_array() - truth.translation) <= 5e-4


def test_average_permutation_invariant():
    rng = np.random.default_rng(4)
    truth = random_transform(rng, "lidar", "camera")
    runs = noisy_kabsch_runs(rng, 15, truth)
    fwd = average_runs(runs)
    rev = average_runs(list(reversed(runs)))
    np.testing.assert_allclose(
        fwd.mean_translation.as_array(), rev.mean_translation.as_array(), atol=1e-12
    )
    np.testing.assert_allclose(
        fwd.mean_rotation.as_array(), rev.mean_rotation.as_array(), atol=1e-12
    )


def test_average_validations():
    with pytest.raises(EmptyInputError):
        average_runs([])
    rng = np.random.default_rng(6)
    a = kabsch_solve(correspondences_from_transform(rng, random_transform(rng, "l", "c"), 5))
    b = kabsch_solve(correspondences_from_transform(rng, random_transform(rng, "l", "x"), 5))
    with pytest.raises(InconsistentFramesError):
        average_runs([a, b])


def test_running_average_trace_matches_average():
    rng = np.random.default_rng(13)
    truth = random_transform(rng, "lidar", "camera")
    runs = noisy_kabsch_runs(rng, 25, truth)
    trace = running_average_trace(runs)
    assert trace.shape == (25, 7)
    first = runs[0].transform
    np.testing.assert_allclose(trace[0, :3], first.translation, atol=1e-12)
    avg = average_runs(runs)
    np.testing.assert_allclose(trace[-1, :3], avg.mean_translation.as_array(), atol=1e-12)
    np.testing.assert_allclose(np.abs(trace[-1, 3:]), np.abs(avg.mean_rotation.as_array()), atol=1e-12)


# --- rmse / offset -----------------------------------------------------------

def test_registration_rmse_cases():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    ident = RigidTransform.identity("lidar", "camera")
    assert registration_rmse(pair(p, p.copy()), ident) == 0.0
    single = pair(np.array([[0.0, 0.0, 0.0]]), np.array([[0.1, 0.0, 0.0]]))
    assert registration_rmse(single, ident) == pytest.approx(0.1, abs=1e-15)
    many = pair(p, p + np.array([0.0, 0.0, 0.25]))
    assert registration_rmse(many, ident) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(FrameMismatchError):
        registration_rmse(single, RigidTransform.identity("x", "camera"))


def test_mean_offset_cases():
    p = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], float)
    assert mean_offset(pair(p, p.copy())).as_array() == pytest.approx([0, 0, 0])
    shifted = mean_offset(pair(p, p + np.array([1.0, 2.0, 3.0])))
    np.testing.assert_allclose(shifted.as_array(), [1.0, 2.0, 3.0], atol=1e-15)
    # rotation about the centroid is invisible to the offset statistic
    rotated = mean_offset(pair(p, p @ rotation_z(math.pi / 2).T))
    np.testing.assert_allclose(rotated.as_array(), [0.0, 0.0, 0.0], atol=1e-12)
