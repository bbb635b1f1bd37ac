"""Camera pose estimation for small-baseline video.

The toolkit reconstructs a frozen Gaussian-splat scene from the first frame
of each video segment, recovers the remaining camera poses of the segment by
minimizing rendering losses against RGB or reduced feature maps, chains the
segments into a trajectory and evaluates it against ground truth.
"""

from .geometry import (
    CameraIntrinsics,
    Se3Pose,
    Trajectory,
    apply,
    compose,
    matrix_to_quat,
    quat_to_matrix,
    se3_exp_increment,
)
from .scene import Gaussian3D, GaussianScene, PlanarMap
from .rasterizer import (
    ProjectedGaussian,
    RenderOutput,
    build_covariance,
    project_gaussian,
    rasterize,
    rasterize_backward,
)
from .scene_init import (
    LiftConfig,
    fit_canonical,
    init_gaussians,
    lift_depth,
    load_pointcloud,
    pca_select_channels,
)
from .losses import masked_mse, smoothness_loss, ssim
from .window import (
    WindowConfig,
    WindowEstimate,
    chain_windows,
    estimate_sequence,
    optimize_window,
    split_into_windows,
)
from .evaluation import (
    AlignmentResult,
    MetricsReport,
    ate,
    delta_v,
    evaluate_trajectories,
    rpe,
    umeyama_align,
)
from .interchange import (
    DatasetLayout,
    RunConfig,
    SynthSettings,
    load_config,
    read_tensor,
    read_tum,
    write_tensor,
    write_tum,
)
from .synth import generate

__all__ = [
    "AlignmentResult",
    "CameraIntrinsics",
    "DatasetLayout",
    "Gaussian3D",
    "GaussianScene",
    "LiftConfig",
    "MetricsReport",
    "PlanarMap",
    "ProjectedGaussian",
    "RenderOutput",
    "RunConfig",
    "Se3Pose",
    "SynthSettings",
    "Trajectory",
    "WindowConfig",
    "WindowEstimate",
    "apply",
    "ate",
    "build_covariance",
    "chain_windows",
    "compose",
    "delta_v",
    "estimate_sequence",
    "evaluate_trajectories",
    "fit_canonical",
    "generate",
    "init_gaussians",
    "lift_depth",
    "load_config",
    "load_pointcloud",
    "masked_mse",
    "matrix_to_quat",
    "optimize_window",
    "pca_select_channels",
    "project_gaussian",
    "quat_to_matrix",
    "rasterize",
    "rasterize_backward",
    "read_tensor",
    "read_tum",
    "rpe",
    "se3_exp_increment",
    "smoothness_loss",
    "split_into_windows",
    "ssim",
    "umeyama_align",
    "write_tensor",
    "write_tum",
]

__version__ = "0.1.0"
