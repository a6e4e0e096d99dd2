"""Neural-guided RANSAC: learned sampling weights for robust model fitting."""

from .errors import NGRansacError
from .estimator import EstimateReport, ng_ransac, progressive_ransac, ransac, with_ratio_filter
from .geometry import Correspondence, Line2, Model3x3, ModelKind, Pose
from .guidance import GuidanceNet, GuidanceNetSpec
from .sampling import GuidanceDistribution, SamplerConfig, make_rng, sample_pool
from .synthdata import EpipolarSceneConfig, LineSceneConfig, gen_epipolar_scene, gen_line_scene
from .training import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "NGRansacError", "EstimateReport", "ng_ransac", "progressive_ransac", "ransac", "with_ratio_filter",
    "Correspondence", "Line2", "Model3x3", "ModelKind", "Pose", "GuidanceNet", "GuidanceNetSpec",
    "GuidanceDistribution", "SamplerConfig", "make_rng", "sample_pool", "EpipolarSceneConfig",
    "LineSceneConfig", "gen_epipolar_scene", "gen_line_scene", "TrainConfig", "train_loop",
]
