"""Glue from a provider plus an image to a finished segmentation."""

from __future__ import annotations

import numpy as np

from .config import PipelineConfig
from .refine import SegmentationResult, refine_pipeline
from .salience import AccumulatedSalience, salience_dropout_run

__all__ = [
    "segment_image",
    "relabel_to_global",
    "synthetic_factory",
]


def segment_image(
    provider, image, cfg: PipelineConfig
) -> tuple[SegmentationResult, AccumulatedSalience]:
    """Dropout accumulation followed by the refinement chain."""
    acc = salience_dropout_run(provider, cfg.dropout_rounds)
    result = refine_pipeline(acc, image, cfg)
    return result, acc


def relabel_to_global(labels, class_ids) -> np.ndarray:
    """Map a local label raster (0=bg, 1..m local) onto global class ids."""
    lut = np.zeros(len(class_ids) + 1, dtype=np.int32)
    lut[1:] = np.asarray(class_ids, dtype=np.int32)
    labels = np.asarray(labels)
    if labels.max(initial=0) >= lut.size:
        raise ValueError(f"label {labels.max()} out of range for {len(class_ids)} classes")
    return lut[labels]


def synthetic_factory(record, layer, head):
    """Provider factory over SceneRecord-like objects carrying a scene."""
    from .provider.synthetic import SyntheticProvider

    return SyntheticProvider(record.scene, layer, head)
