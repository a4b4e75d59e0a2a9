"""warpsynth: keypoint-driven video motion retargeting with joint
warp-based transformation and warp-free synthesis branches."""

from .dataio import (
    AugmentParams,
    BoundingBox,
    EmptyMaskError,
    KeypointSet,
    MaskFrame,
    NormalizationError,
    RasterStyle,
    TrainingSample,
    VideoClip,
    VideoDataset,
    augment,
    load_clip,
    load_dataset,
    normalize_driving_mask,
    rasterize_mask,
    sample_training_batch,
)
from .geometry import (
    SimilarityMatrix,
    cosine_similarity,
    mask_aware_similarity,
    regular_grid,
    warp_features,
    warp_image_patchwise,
    weighted_grid,
)
from .losses import FeatureExtractor, LossWeights, TrainingDivergedError
from .networks import Generator, GeneratorConfig, GeneratorOutput, PatchDiscriminator
# the retarget *function* lives at warpsynth.retarget.retarget; re-exporting it
# here would shadow the submodule
from .retarget import EvalReport, RetargetJob, RetargetResult, self_reconstruction_eval
from .trainer import TrainConfig, Trainer, lr_schedule, train

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
