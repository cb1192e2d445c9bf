"""calibkit: LiDAR-camera extrinsic calibration toolkit.

Rigid 3D-3D registration (closed-form Kabsch, point-to-point ICP), marker
corner extraction from sparse LiDAR scans, tag-based camera correspondences
with a PnP / RANSAC-PnP path, multi-run averaging, transform chaining, point
cloud fusion diagnostics, and a synthetic scene simulator with exact ground
truth. The ``calib`` CLI drives the file-based pipelines.
"""

from .board import BoardModel, canonical_corner_order
from .camera import (
    CameraIntrinsics,
    PnpParams,
    PnpRansacParams,
    Point2,
    TagPose,
    backprojection_rmse,
    board_corners_camera_frame,
    pnp_ransac,
    pnp_solve,
    project,
    project_points,
)
from .errors import CalibrationError, NumericalError, ValidationError
from .extraction import (
    EdgeCluster,
    ExtractedBoard,
    ExtractionParams,
    Line3,
    LineSegment3,
    RansacLineParams,
    cluster_edges,
    corner_from_edges,
    extract_board,
    ransac_fit_line,
    shortest_connecting_segment,
)
from .fusion import FusionParams, FusionReport, fuse_clouds
from .geometry import (
    EulerAnglesXYZ,
    Point3,
    PointCloud,
    RigidTransform,
    UnitQuaternion,
    apply,
    compose,
    euler_xyz_to_matrix,
    invert,
    matrix_to_euler_xyz,
    matrix_to_quat,
    quat_to_matrix,
    rotation_about_axis,
    rotation_angle_between,
    rotation_x,
    rotation_y,
    rotation_z,
)
from .registration import (
    AveragedExtrinsics,
    CalibrationResult,
    CorrespondenceSet,
    IcpParams,
    average_runs,
    icp_solve,
    kabsch_solve,
    mean_offset,
    registration_rmse,
    running_average_trace,
)
from .simulate import (
    EndToEndReport,
    LidarModel,
    PipelineParams,
    ScenePlacement,
    TagNoise,
    make_default_scene,
    run_end_to_end,
    simulate_lidar_scan,
    simulate_tag_observation,
)

__version__ = "0.1.0"
