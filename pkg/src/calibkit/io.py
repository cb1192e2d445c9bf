"""File formats: ASCII PCD v0.7 clouds, correspondence/label CSVs, and the
JSON documents for tag poses, calibration results, and ground truth.

Floats are serialized with ``repr``, the shortest round-tripping decimal
form, so every parse(write(x)) round trip is exact and every writer is
byte-deterministic. Result JSONs carry the rotation in three redundant forms
(matrix, quaternion, Euler XYZ degrees) so convention errors are visible to
a human; the matrix is authoritative when reading back.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .board import BoardModel
from .camera import CameraIntrinsics, TagPose
from .errors import (
    MalformedFileError,
    MissingFieldError,
    NonFiniteValueError,
    UnsupportedEncodingError,
    ValidationError,
    WrongArityError,
)
from .geometry import PointCloud, RigidTransform, quat_to_matrix
from .registration import (
    AveragedExtrinsics,
    CalibrationResult,
    CorrespondenceSet,
    SolveDiagnostics,
)
from .simulate import PointLabel

__all__ = [
    "parse_pcd",
    "write_pcd",
    "parse_correspondences_csv",
    "write_correspondences_3d3d",
    "write_correspondences_2d3d",
    "parse_edge_labels_csv",
    "write_edge_labels_csv",
    "parse_tag_poses",
    "write_tag_poses",
    "transform_to_dict",
    "transform_from_dict",
    "result_to_dict",
    "result_from_dict",
    "write_result_json",
    "read_result_json",
    "board_model_to_dict",
    "board_model_from_dict",
    "intrinsics_to_dict",
    "intrinsics_from_dict",
    "write_json",
    "read_json",
]

SCHEMA_VERSION = 1

HEADER_3D3D = ["px", "py", "pz", "qx", "qy", "qz"]
HEADER_2D3D = ["X", "Y", "Z", "u", "v"]


def _fmt(value):
    return repr(float(value))


def _parse_float(token, path, line, what):
    try:
        value = float(token)
    except ValueError:
        raise MalformedFileError(f"{what}: cannot parse {token!r} as a number", path, line) from None
    if not math.isfinite(value):
        raise NonFiniteValueError(f"{path}:{line}: {what} is non-finite ({token})")
    return value


# --------------------------------------------------------------------------
# PCD
# --------------------------------------------------------------------------

def parse_pcd(path, default_frame=None):
    """Parse an ASCII PCD v0.7 file with at least x y z fields (optional
    ring). Binary encodings are rejected; point order is preserved. The frame
    comes from a leading ``# frame <name>`` comment, falling back to
    ``default_frame`` and then ``"cloud"``."""
    path = Path(path)
    header = {}
    frame = default_frame
    fields = None
    data_line = None
    lines = path.read_text().splitlines()
    i = 0
    for i, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            comment = line[1:].strip()
            if comment.startswith("frame "):
                frame = comment[len("frame "):].strip()
            continue
        tokens = line.split()
        key = tokens[0].upper()
        if key == "DATA":
            if len(tokens) != 2:
                raise MalformedFileError("DATA needs exactly one argument", path, i)
            header["DATA"] = tokens[1].lower()
            data_line = i
            break
        header[key] = tokens[1:]
    if data_line is None:
        raise MalformedFileError("no DATA line found", path)
    if "VERSION" in header and header["VERSION"] and header["VERSION"][0] not in ("0.7", ".7"):
        raise UnsupportedEncodingError(
            f"{path}: unsupported PCD version {header['VERSION'][0]} (expected 0.7)"
        )
    if header["DATA"] != "ascii":
        raise UnsupportedEncodingError(
            f"{path}: DATA {header['DATA']!r} is not supported; only ascii PCD is read"
        )
    if "FIELDS" not in header:
        raise MissingFieldError(f"{path}: header has no FIELDS line")
    fields = header["FIELDS"]
    for needed in ("x", "y", "z"):
        if needed not in fields:
            raise MissingFieldError(f"{path}: FIELDS is missing {needed!r} (got {fields})")
    if "COUNT" in header and any(c != "1" for c in header["COUNT"]):
        raise UnsupportedEncodingError(f"{path}: multi-count fields are not supported")
    for key in ("WIDTH", "HEIGHT", "POINTS"):
        if key not in header:
            raise MissingFieldError(f"{path}: header has no {key} line")
    try:
        width = int(header["WIDTH"][0])
        height = int(header["HEIGHT"][0])
        n_points = int(header["POINTS"][0])
    except (ValueError, IndexError):
        raise MalformedFileError("WIDTH/HEIGHT/POINTS must be integers", path) from None
    if width * height != n_points:
        raise MalformedFileError(
            f"WIDTH x HEIGHT = {width} x {height} = {width * height} "
            f"does not match POINTS = {n_points}",
            path,
        )

    col = {name: k for k, name in enumerate(fields)}
    has_ring = "ring" in col
    xyz = np.empty((n_points, 3))
    ring = np.empty(n_points, dtype=np.int64) if has_ring else None
    row = 0
    for lineno in range(data_line + 1, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line:
            continue
        if row >= n_points:
            raise MalformedFileError(f"more than POINTS = {n_points} data rows", path, lineno)
        tokens = line.split()
        if len(tokens) != len(fields):
            raise MalformedFileError(
                f"expected {len(fields)} values per row, got {len(tokens)}", path, lineno
            )
        for j, axis in enumerate(("x", "y", "z")):
            xyz[row, j] = _parse_float(tokens[col[axis]], path, lineno, f"field {axis!r}")
        if has_ring:
            token = tokens[col["ring"]]
            try:
                ring[row] = int(token)
            except ValueError:
                raise MalformedFileError(
                    f"field 'ring': cannot parse {token!r} as an integer", path, lineno
                ) from None
        row += 1
    if row != n_points:
        raise MalformedFileError(f"expected {n_points} data rows, found {row}", path)
    return PointCloud(frame if frame else "cloud", xyz, ring)


def write_pcd(path, cloud):
    """Write a cloud in the canonical ASCII PCD form parse_pcd reads back."""
    has_ring = cloud.ring is not None
    fields = "x y z ring" if has_ring else "x y z"
    size = "8 8 8 4" if has_ring else "8 8 8"
    ftype = "F F F U" if has_ring else "F F F"
    count = "1 1 1 1" if has_ring else "1 1 1"
    n = len(cloud)
    out = [
        f"# frame {cloud.frame}",
        "VERSION 0.7",
        f"FIELDS {fields}",
        f"SIZE {size}",
        f"TYPE {ftype}",
        f"COUNT {count}",
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    for k in range(n):
        row = " ".join(_fmt(v) for v in cloud.xyz[k])
        if has_ring:
            row += f" {int(cloud.ring[k])}"
        out.append(row)
    Path(path).write_text("\n".join(out) + "\n")


# --------------------------------------------------------------------------
# correspondence CSV
# --------------------------------------------------------------------------

def parse_correspondences_csv(path, source_frame="lidar", target_frame="camera"):
    """Parse a correspondence CSV; the header picks the mode.

    ``px,py,pz,qx,qy,qz`` rows produce a :class:`CorrespondenceSet`;
    ``X,Y,Z,u,v`` rows produce a list of (3D point, 2D pixel) pairs.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        rows = [(reader.line_num, r) for r in reader]
    rows = [(ln, r) for ln, r in rows if r]
    if not rows:
        raise MalformedFileError("empty correspondence file", path)
    header = [c.strip() for c in rows[0][1]]
    if header == HEADER_3D3D:
        arity, mode = 6, "3d3d"
    elif header == HEADER_2D3D:
        arity, mode = 5, "2d3d"
    else:
        raise MalformedFileError(
            f"unrecognized header {header}; expected {HEADER_3D3D} or {HEADER_2D3D}", path, rows[0][0]
        )
    values = []
    for lineno, row in rows[1:]:
        if len(row) != arity:
            raise WrongArityError(
                f"{path}:{lineno}: expected {arity} fields, got {len(row)}"
            )
        values.append([_parse_float(tok, path, lineno, f"column {header[k]!r}")
                       for k, tok in enumerate(row)])
    data = np.array(values, dtype=np.float64).reshape(len(values), arity)
    if mode == "3d3d":
        return CorrespondenceSet(
            PointCloud(source_frame, data[:, 0:3]),
            PointCloud(target_frame, data[:, 3:6]),
        )
    return [(data[i, 0:3], data[i, 3:5]) for i in range(len(data))]


def _write_csv(path, header, rows):
    lines = [",".join(header)]
    lines += [",".join(row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_correspondences_3d3d(path, correspondences):
    rows = [
        [_fmt(v) for v in np.concatenate([p, q])]
        for p, q in zip(correspondences.source.xyz, correspondences.target.xyz)
    ]
    _write_csv(path, HEADER_3D3D, rows)


def write_correspondences_2d3d(path, pairs):
    rows = [[_fmt(v) for v in np.concatenate([np.asarray(p3, float), np.asarray(p2, float)])]
            for p3, p2 in pairs]
    _write_csv(path, HEADER_2D3D, rows)


# --------------------------------------------------------------------------
# edge label CSV
# --------------------------------------------------------------------------

def parse_edge_labels_csv(path):
    """Parse point labels: 3-column ``point_index,board_id,edge_id`` (the
    simulator's format) or the 2-column manual form ``point_index,edge_id``
    (board id 0). Empty edge ids mean board-interior points.

    Returns ``dict[point_index, PointLabel]``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        rows = [(reader.line_num, [c.strip() for c in r]) for r in reader if r]
    if not rows:
        raise MalformedFileError("empty label file", path)
    header = rows[0][1]
    if header == ["point_index", "board_id", "edge_id"]:
        three = True
    elif header == ["point_index", "edge_id"]:
        three = False
    else:
        raise MalformedFileError(f"unrecognized label header {header}", path, rows[0][0])
    labels = {}
    for lineno, row in rows[1:]:
        if len(row) != (3 if three else 2):
            raise WrongArityError(f"{path}:{lineno}: expected {3 if three else 2} fields")
        try:
            index = int(row[0])
            board = int(row[1]) if three else 0
        except ValueError:
            raise MalformedFileError("indices must be integers", path, lineno) from None
        edge = row[-1] or None
        labels[index] = PointLabel(board, edge)
    return labels


def write_edge_labels_csv(path, labels):
    rows = [[str(i), str(lab.board), lab.edge or ""] for i, lab in enumerate(labels)]
    _write_csv(path, ["point_index", "board_id", "edge_id"], rows)


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------

def write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_json(path, expected_type=None):
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"invalid JSON: {exc}", path) from None
    if not isinstance(payload, dict):
        raise MalformedFileError("top-level JSON value must be an object", path)
    version = payload.get("schema_version")
    if version != SCHEMA_VERSION:
        raise MalformedFileError(
            f"schema_version {version!r} unsupported (expected {SCHEMA_VERSION})", path
        )
    if expected_type is not None and payload.get("type") != expected_type:
        raise MalformedFileError(
            f"expected a {expected_type!r} document, got {payload.get('type')!r}", path
        )
    return payload


def transform_to_dict(transform):
    e = transform.euler_xyz()
    return {
        "from_frame": transform.from_frame,
        "to_frame": transform.to_frame,
        "rotation_matrix": [[float(v) for v in row] for row in transform.rotation],
        "rotation_wxyz": [float(v) for v in transform.quaternion().as_array()],
        "euler_xyz_deg": {"roll": e.roll, "pitch": e.pitch, "yaw": e.yaw},
        "translation_m": [float(v) for v in transform.translation],
    }


def transform_from_dict(data, context="transform"):
    try:
        if "rotation_matrix" in data:
            rotation = np.array(data["rotation_matrix"], dtype=np.float64)
        else:
            rotation = quat_to_matrix(np.asarray(data["rotation_wxyz"], dtype=np.float64))
        return RigidTransform(
            rotation,
            np.asarray(data["translation_m"], dtype=np.float64),
            data["from_frame"],
            data["to_frame"],
        )
    except KeyError as exc:
        raise MissingFieldError(f"{context}: missing key {exc.args[0]!r}") from None


def _diagnostics_to_dict(d):
    return {
        "near_degenerate": d.near_degenerate,
        "reflection_corrected": d.reflection_corrected,
        "iterations": d.iterations,
        "converged": d.converged,
        "rmse_history": list(d.rmse_history) if d.rmse_history is not None else None,
    }


def _diagnostics_from_dict(data):
    history = data.get("rmse_history")
    return SolveDiagnostics(
        near_degenerate=bool(data.get("near_degenerate", False)),
        reflection_corrected=bool(data.get("reflection_corrected", False)),
        iterations=data.get("iterations"),
        converged=data.get("converged"),
        rmse_history=tuple(history) if history is not None else None,
    )


def result_to_dict(result):
    units = "px" if result.method.startswith("pnp") else "m"
    payload = {
        "method": result.method,
        **transform_to_dict(result.transform),
        "rmse": result.rmse,
        "rmse_units": units,
        "per_point_residuals": [float(v) for v in result.per_point_residuals],
        "diagnostics": _diagnostics_to_dict(result.diagnostics),
    }
    return payload


def result_from_dict(data, context="result"):
    return CalibrationResult(
        transform=transform_from_dict(data, context),
        rmse=data["rmse"],
        per_point_residuals=np.asarray(data["per_point_residuals"], dtype=np.float64),
        method=data["method"],
        diagnostics=_diagnostics_from_dict(data.get("diagnostics", {})),
    )


def write_result_json(path, result):
    """Serialize a CalibrationResult or AveragedExtrinsics."""
    if isinstance(result, AveragedExtrinsics):
        transform = result.transform
        payload = {
            "schema_version": SCHEMA_VERSION,
            "type": "averaged_extrinsics",
            "sample_count": result.sample_count,
            **transform_to_dict(transform),
            "mean_run_rmse": float(np.mean([r.rmse for r in result.per_run_results])),
            "rmse_units": "m",
            "runs": [result_to_dict(r) for r in result.per_run_results],
        }
        # the averaged quaternion is the authoritative rotation here; going
        # through the matrix and back would perturb the last bits
        payload["rotation_wxyz"] = [float(v) for v in result.mean_rotation.as_array()]
        payload["translation_m"] = [float(v) for v in result.mean_translation.as_array()]
    else:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "type": "calibration_result",
            **result_to_dict(result),
        }
    write_json(path, payload)


def read_result_json(path):
    payload = read_json(path)
    kind = payload.get("type")
    if kind == "calibration_result":
        return result_from_dict(payload, str(path))
    if kind == "averaged_extrinsics":
        from .geometry import Point3, UnitQuaternion

        runs = tuple(result_from_dict(r, f"{path} run") for r in payload["runs"])
        return AveragedExtrinsics(
            mean_translation=Point3.from_array(np.asarray(payload["translation_m"], float)),
            mean_rotation=UnitQuaternion.from_array(np.asarray(payload["rotation_wxyz"], float)),
            sample_count=payload["sample_count"],
            per_run_results=runs,
        )
    raise MalformedFileError(f"unknown result type {kind!r}", path)


def read_transform_json(path):
    """Read a rigid transform out of any transform-bearing document: a bare
    transform, a calibration result, or averaged extrinsics."""
    payload = read_json(path)
    kind = payload.get("type")
    if kind in ("transform", "calibration_result", "averaged_extrinsics"):
        return transform_from_dict(payload, str(path))
    raise MalformedFileError(f"document type {kind!r} carries no transform", path)


def write_transform_json(path, transform):
    write_json(
        path,
        {"schema_version": SCHEMA_VERSION, "type": "transform", **transform_to_dict(transform)},
    )


def parse_tag_poses(path):
    """Read fiducial tag poses: returns (camera_frame, list[TagPose])."""
    payload = read_json(path, expected_type="tag_poses")
    camera_frame = payload.get("camera_frame", "camera")
    tags = []
    for k, entry in enumerate(payload.get("tags", [])):
        rotation = quat_to_matrix(np.asarray(entry["rotation_wxyz"], dtype=np.float64))
        pose = RigidTransform(
            rotation,
            np.asarray(entry["translation_m"], dtype=np.float64),
            entry.get("board_frame", f"board{k}"),
            camera_frame,
        )
        tags.append(TagPose(pose, tag_id=int(entry.get("tag_id", k))))
    return camera_frame, tags


def write_tag_poses(path, tags, camera_frame):
    payload = {
        "schema_version": SCHEMA_VERSION,
        "type": "tag_poses",
        "camera_frame": camera_frame,
        "tags": [
            {
                "tag_id": tag.tag_id,
                "board_frame": tag.pose.from_frame,
                "rotation_wxyz": [float(v) for v in tag.pose.quaternion().as_array()],
                "translation_m": [float(v) for v in tag.pose.translation],
            }
            for tag in tags
        ],
    }
    write_json(path, payload)


def board_model_to_dict(model):
    return {
        "outer_width_m": model.outer_width_m,
        "outer_height_m": model.outer_height_m,
        "inner_width_m": model.inner_width_m,
        "inner_height_m": model.inner_height_m,
        "inner_offset_m": list(model.inner_offset_m),
        "tag_center_offset_m": list(model.tag_center_offset_m),
    }


def board_model_from_dict(data, context="board"):
    known = {
        "outer_width_m",
        "outer_height_m",
        "inner_width_m",
        "inner_height_m",
        "inner_offset_m",
        "tag_center_offset_m",
    }
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"{context}: unknown keys {sorted(unknown)}")
    try:
        return BoardModel(
            outer_width_m=float(data["outer_width_m"]),
            outer_height_m=float(data["outer_height_m"]),
            inner_width_m=None if data.get("inner_width_m") is None else float(data["inner_width_m"]),
            inner_height_m=None if data.get("inner_height_m") is None else float(data["inner_height_m"]),
            inner_offset_m=tuple(data.get("inner_offset_m", (0.0, 0.0))),
            tag_center_offset_m=tuple(data.get("tag_center_offset_m", (0.0, 0.0))),
        )
    except KeyError as exc:
        raise MissingFieldError(f"{context}: missing key {exc.args[0]!r}") from None


def intrinsics_to_dict(intr):
    return {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "gamma": intr.gamma}


def intrinsics_from_dict(data, context="intrinsics"):
    known = {"fx", "fy", "cx", "cy", "gamma"}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"{context}: unknown keys {sorted(unknown)}")
    try:
        return CameraIntrinsics(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            gamma=float(data.get("gamma", 0.0)),
        )
    except KeyError as exc:
        raise MissingFieldError(f"{context}: missing key {exc.args[0]!r}") from None
