"""fragtrack: fiducial-based fragment pose estimation for PAO fluoroscopy."""
from __future__ import annotations

__version__ = "0.1.0"

from .detection import (
    PRESET_BB_LARGE,
    PRESET_BB_SMALL,
    PRESETS,
    DetectionSet,
    DetectorConfig,
    detect_bbs,
    detect_bbs_in_image,
    load_image,
    radial_symmetry_map,
)
from .errors import FragtrackError
from .geometry import (
    AnatomicalFrame,
    CArmCamera,
    LceLandmarks,
    RigidTransform,
    default_carm,
    lce_angle,
    relative_fragment_pose,
    triangulate,
)
from .metrics import (
    BenchmarkConfig,
    BenchmarkSummary,
    ErrorReport,
    evaluate,
    run_benchmark,
    run_seed,
)
from .p3p import P3PConfig, min_length_roots, solve_p3p, solve_p3p_grid
from .pipeline import (
    FragmentPoseEstimate,
    FragmentStageConfig,
    IliumStageConfig,
    ScenePriors,
    count_max_candidates,
    estimate_single_view,
)
from .reconstruct import (
    Constellation,
    SurfaceModel,
    label_constellations,
    reconstruct_bbs,
)
from .simulate import (
    NOISE_PROFILES,
    NoiseModel,
    Scene,
    SceneConfig,
    apply_fragment_motion,
    generate_scene,
    make_view_cameras,
    render_views,
    sample_fragment_motion,
)

__all__ = [
    "AnatomicalFrame",
    "BenchmarkConfig",
    "BenchmarkSummary",
    "CArmCamera",
    "Constellation",
    "DetectionSet",
    "DetectorConfig",
    "ErrorReport",
    "FragmentPoseEstimate",
    "FragmentStageConfig",
    "FragtrackError",
    "IliumStageConfig",
    "LceLandmarks",
    "NOISE_PROFILES",
    "NoiseModel",
    "P3PConfig",
    "PRESETS",
    "PRESET_BB_LARGE",
    "PRESET_BB_SMALL",
    "RigidTransform",
    "Scene",
    "SceneConfig",
    "ScenePriors",
    "SurfaceModel",
    "__version__",
    "apply_fragment_motion",
    "count_max_candidates",
    "default_carm",
    "detect_bbs",
    "detect_bbs_in_image",
    "estimate_single_view",
    "evaluate",
    "generate_scene",
    "label_constellations",
    "lce_angle",
    "load_image",
    "make_view_cameras",
    "min_length_roots",
    "radial_symmetry_map",
    "reconstruct_bbs",
    "relative_fragment_pose",
    "render_views",
    "run_benchmark",
    "run_seed",
    "sample_fragment_motion",
    "solve_p3p",
    "solve_p3p_grid",
    "triangulate",
]
