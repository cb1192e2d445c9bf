from pathlib import Path

import numpy as np
import pytest

from calibkit import io
from calibkit.board import BoardModel
from calibkit.camera import CameraIntrinsics, TagPose
from calibkit.errors import (
    MalformedFileError,
    MissingFieldError,
    NonFiniteValueError,
    UnsupportedEncodingError,
    WrongArityError,
)
from calibkit.geometry import PointCloud, RigidTransform, rotation_about_axis
from calibkit.registration import CorrespondenceSet, average_runs, kabsch_solve
from calibkit.simulate import PointLabel

from _helpers import correspondences_from_transform, noisy_kabsch_runs, random_transform

DATA = Path(__file__).parent / "data"


# --- pcd -----------------------------------------------------------------------

def test_parse_pcd_golden(tmp_path):
    cloud = io.parse_pcd(DATA / "golden.pcd")
    assert cloud.frame == "lidar"
    assert len(cloud) == 3
    np.testing.assert_array_equal(cloud.ring, [0, 3, 15])
    assert cloud.xyz[2, 0] == 0.1234567890123456
    assert cloud.xyz[1, 0] == 1e-07


def test_pcd_golden_round_trip_is_byte_exact(tmp_path):
    golden = (DATA / "golden.pcd").read_bytes()
    cloud = io.parse_pcd(DATA / "golden.pcd")
    out = tmp_path / "copy.pcd"
    io.write_pcd(out, cloud)
    assert out.read_bytes() == golden


def test_pcd_write_parse_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud("weird frame-name", rng.normal(size=(17, 3)) * 1e3, ring=rng.integers(0, 16, 17))
    path = tmp_path / "c.pcd"
    io.write_pcd(path, cloud)
    back = io.parse_pcd(path)
    assert back.frame == cloud.frame
    np.testing.assert_array_equal(back.xyz, cloud.xyz)
    np.testing.assert_array_equal(back.ring, cloud.ring)
    # and without rings
    bare = PointCloud("x", rng.normal(size=(4, 3)))
    io.write_pcd(path, bare)
    again = io.parse_pcd(path)
    assert again.ring is None
    np.testing.assert_array_equal(again.xyz, bare.xyz)


def test_pcd_width_height_points_mismatch(tmp_path):
    text = (DATA / "golden.pcd").read_text().replace("WIDTH 3", "WIDTH 2")
    p = tmp_path / "bad.pcd"
    p.write_text(text)
    with pytest.raises(MalformedFileError) as err:
        io.parse_pcd(p)
    assert "2" in str(err.value) and "3" in str(err.value)


def test_pcd_binary_rejected(tmp_path):
    text = (DATA / "golden.pcd").read_text().replace("DATA ascii", "DATA binary")
    p = tmp_path / "bin.pcd"
    p.write_text(text)
    with pytest.raises(UnsupportedEncodingError):
        io.parse_pcd(p)


def test_pcd_missing_field(tmp_path):
    p = tmp_path / "no_z.pcd"
    p.write_text(
        "VERSION 0.7\nFIELDS x y\nSIZE 8 8\nTYPE F F\nCOUNT 1 1\nWIDTH 1\nHEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\nPOINTS 1\nDATA ascii\n1.0 2.0\n"
    )
    with pytest.raises(MissingFieldError):
        io.parse_pcd(p)


def test_pcd_malformed_row_reports_line(tmp_path):
    text = (DATA / "golden.pcd").read_text().replace("1e-07 2.0 3.0 3", "1e-07 oops 3.0 3")
    p = tmp_path / "bad_row.pcd"
    p.write_text(text)
    with pytest.raises(MalformedFileError) as err:
        io.parse_pcd(p)
    assert ":13:" in str(err.value)  # the offending line number


def test_pcd_default_frame_fallback(tmp_path):
    text = "\n".join((DATA / "golden.pcd").read_text().splitlines()[1:]) + "\n"
    p = tmp_path / "frameless.pcd"
    p.write_text(text)
    assert io.parse_pcd(p).frame == "cloud"
    assert io.parse_pcd(p, default_frame="lidar").frame == "lidar"


# --- correspondence csv ----------------------------------------------------------

def test_csv_3d3d_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    corr = correspondences_from_transform(rng, random_transform(rng, "lidar", "camera"), 4)
    path = tmp_path / "c.csv"
    io.write_correspondences_3d3d(path, corr)
    back = io.parse_correspondences_csv(path)
    assert isinstance(back, CorrespondenceSet)
    assert len(back) == 4
    np.testing.assert_array_equal(back.source.xyz, corr.source.xyz)
    np.testing.assert_array_equal(back.target.xyz, corr.target.xyz)
    # byte determinism
    path2 = tmp_path / "c2.csv"
    io.write_correspondences_3d3d(path2, corr)
    assert path.read_bytes() == path2.read_bytes()


def test_csv_2d3d_round_trip(tmp_path):
    pairs = [(np.array([1.0, 2.0, 3.0]), np.array([100.5, 200.25]))]
    path = tmp_path / "p.csv"
    io.write_correspondences_2d3d(path, pairs)
    back = io.parse_correspondences_csv(path)
    assert isinstance(back, list)
    np.testing.assert_array_equal(back[0][0], pairs[0][0])
    np.testing.assert_array_equal(back[0][1], pairs[0][1])


def test_csv_wrong_arity_names_row(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("px,py,pz,qx,qy,qz\n1,2,3,4,5,6\n1,2,3,4,5\n")
    with pytest.raises(WrongArityError) as err:
        io.parse_correspondences_csv(path)
    assert ":3:" in str(err.value)


def test_csv_scientific_notation_equals_decimal(tmp_path):
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("px,py,pz,qx,qy,qz\n1e-2,2.0,3.0,4.0,5.0,6.0\n" * 1)
    b.write_text("px,py,pz,qx,qy,qz\n0.01,2.0,3.0,4.0,5.0,6.0\n")
    ca = io.parse_correspondences_csv(a)
    cb = io.parse_correspondences_csv(b)
    np.testing.assert_array_equal(ca.source.xyz, cb.source.xyz)


def test_csv_non_finite_rejected(tmp_path):
    path = tmp_path / "nan.csv"
    path.write_text("px,py,pz,qx,qy,qz\nnan,2,3,4,5,6\n")
    with pytest.raises(NonFiniteValueError):
        io.parse_correspondences_csv(path)


def test_csv_unknown_header_rejected(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(MalformedFileError):
        io.parse_correspondences_csv(path)


# --- edge labels -------------------------------------------------------------------

def test_edge_labels_round_trip(tmp_path):
    labels = [PointLabel(0, "top-left"), PointLabel(0, None), PointLabel(1, "inner-top-right")]
    path = tmp_path / "labels.csv"
    io.write_edge_labels_csv(path, labels)
    back = io.parse_edge_labels_csv(path)
    assert back[0] == PointLabel(0, "top-left")
    assert back[1] == PointLabel(0, None)
    assert back[2] == PointLabel(1, "inner-top-right")


def test_edge_labels_manual_two_column_form(tmp_path):
    path = tmp_path / "manual.csv"
    path.write_text("point_index,edge_id\n4,top-left\n9,bottom-right\n")
    back = io.parse_edge_labels_csv(path)
    assert back == {4: PointLabel(0, "top-left"), 9: PointLabel(0, "bottom-right")}


# --- json documents -----------------------------------------------------------------

def test_result_json_round_trip_exact(tmp_path):
    rng = np.random.default_rng(2)
    corr = correspondences_from_transform(rng, random_transform(rng, "lidar", "camera"), 7, noise=0.01)
    result = kabsch_solve(corr)
    path = tmp_path / "result.json"
    io.write_result_json(path, result)
    back = io.read_result_json(path)
    np.testing.assert_array_equal(back.transform.rotation, result.transform.rotation)
    np.testing.assert_array_equal(back.transform.translation, result.transform.translation)
    assert back.rmse == result.rmse
    np.testing.assert_array_equal(back.per_point_residuals, result.per_point_residuals)
    assert back.method == result.method
    assert back.diagnostics == result.diagnostics
    assert (back.transform.from_frame, back.transform.to_frame) == ("lidar", "camera")


def test_averaged_result_json_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    runs = noisy_kabsch_runs(rng, 6, random_transform(rng, "lidar", "camera"))
    avg = average_runs(runs)
    path = tmp_path / "avg.json"
    io.write_result_json(path, avg)
    back = io.read_result_json(path)
    assert back.sample_count == 6
    np.testing.assert_allclose(
        back.mean_translation.as_array(), avg.mean_translation.as_array(), atol=1e-15
    )
    np.testing.assert_allclose(
        back.mean_rotation.as_array(), avg.mean_rotation.as_array(), atol=1e-12
    )
    assert len(back.per_run_results) == 6
    np.testing.assert_array_equal(
        back.per_run_results[2].transform.rotation, runs[2].transform.rotation
    )


def test_transform_json_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    t = random_transform(rng, "cam2", "cam1")
    path = tmp_path / "t.json"
    io.write_transform_json(path, t)
    back = io.read_transform_json(path)
    np.testing.assert_array_equal(back.rotation, t.rotation)
    np.testing.assert_array_equal(back.translation, t.translation)
    assert (back.from_frame, back.to_frame) == ("cam2", "cam1")


def test_read_transform_from_result_document(tmp_path):
    rng = np.random.default_rng(5)
    result = kabsch_solve(
        correspondences_from_transform(rng, random_transform(rng, "lidar", "camera"), 5)
    )
    path = tmp_path / "r.json"
    io.write_result_json(path, result)
    t = io.read_transform_json(path)
    np.testing.assert_array_equal(t.rotation, result.transform.rotation)


def test_tag_poses_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    tags = [
        TagPose(
            RigidTransform(
                rotation_about_axis(rng.normal(size=3), 0.4), rng.normal(size=3), f"board{i}", "camera"
            ),
            tag_id=i,
        )
        for i in range(3)
    ]
    path = tmp_path / "tags.json"
    io.write_tag_poses(path, tags, "camera")
    frame, back = io.parse_tag_poses(path)
    assert frame == "camera"
    assert [t.tag_id for t in back] == [0, 1, 2]
    for a, b in zip(tags, back):
        np.testing.assert_allclose(a.pose.rotation, b.pose.rotation, atol=1e-12)
        np.testing.assert_array_equal(a.pose.translation, b.pose.translation)


def test_schema_version_enforced(tmp_path):
    path = tmp_path / "v.json"
    path.write_text('{"schema_version": 99, "type": "transform"}')
    with pytest.raises(MalformedFileError):
        io.read_json(path)
    path.write_text("not json")
    with pytest.raises(MalformedFileError):
        io.read_json(path)


def test_board_and_intrinsics_dict_round_trip():
    model = BoardModel(0.5, 0.45, inner_width_m=0.2, inner_height_m=0.22,
                       inner_offset_m=(0.01, -0.02), tag_center_offset_m=(0.03, 0.04))
    assert io.board_model_from_dict(io.board_model_to_dict(model)) == model
    intr = CameraIntrinsics(600.0, 610.0, 640.0, 360.0, gamma=0.5)
    assert io.intrinsics_from_dict(io.intrinsics_to_dict(intr)) == intr
