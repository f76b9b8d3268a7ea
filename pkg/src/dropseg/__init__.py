"""Training-free open-vocabulary segmentation from attention salience.

Per-class cross-attention and gradient tensors (from any compatible provider,
or a synthetic stand-in) are sharpened GradCAM-style, completed by iterative
salience dropout, softened with a Gaussian blur, refined with a dense-CRF
mean field, and scored/tuned with a weakly-supervised reward.
"""

from .config import CrfParams, PipelineConfig
from .crf import densecrf_meanfield, labels_from_q
from .estimator import DropoutSegmenter
from .pipeline import segment_image
from .refine import (
    SegmentationResult,
    build_unaries,
    gaussian_blur,
    normalize_salience,
    refine_pipeline,
    threshold_masks,
    upsample_nearest,
)
from .salience import (
    AccumulatedSalience,
    ActivePatchSet,
    SalienceResponse,
    TokenSpanMap,
    aggregate_token_maps,
    class_softmax,
    drop_set_update,
    gradcam_combine,
    salience_dropout_run,
)
from .tuner import (
    GridAxis,
    RewardReport,
    SearchSpace,
    class_probability,
    random_search,
    reward_dataset,
    reward_image,
    staged_tune,
)

__version__ = "0.1.0"

__all__ = [
    "AccumulatedSalience",
    "ActivePatchSet",
    "CrfParams",
    "DropoutSegmenter",
    "GridAxis",
    "PipelineConfig",
    "RewardReport",
    "SalienceResponse",
    "SearchSpace",
    "SegmentationResult",
    "TokenSpanMap",
    "aggregate_token_maps",
    "build_unaries",
    "class_probability",
    "class_softmax",
    "densecrf_meanfield",
    "drop_set_update",
    "gaussian_blur",
    "gradcam_combine",
    "labels_from_q",
    "normalize_salience",
    "random_search",
    "refine_pipeline",
    "reward_dataset",
    "reward_image",
    "salience_dropout_run",
    "segment_image",
    "staged_tune",
    "threshold_masks",
    "upsample_nearest",
]
