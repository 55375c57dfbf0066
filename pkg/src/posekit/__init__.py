"""posekit: iterative render-and-compare 6D pose refinement toolkit."""

from posekit.pose import (
    CameraIntrinsics,
    NonPositiveDepth,
    Pose,
    Rotation,
    UntangledDelta,
    angular_distance,
    apply_camera_frame,
    apply_model_frame,
    apply_untangled,
    compute_camera_frame,
    compute_untangled,
    project,
    project_center,
)

__all__ = [
    "CameraIntrinsics",
    "NonPositiveDepth",
    "Pose",
    "Rotation",
    "UntangledDelta",
    "angular_distance",
    "apply_camera_frame",
    "apply_model_frame",
    "apply_untangled",
    "compute_camera_frame",
    "compute_untangled",
    "project",
    "project_center",
]

__version__ = "0.1.0"
