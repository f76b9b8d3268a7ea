"""sklearn-style facade over the pipeline and the tuner.

``DropoutSegmenter`` is a BaseEstimator: hyperparameters are flat constructor
params (so ``get_params``/``set_params``/``clone`` work, and the segmenter
drops into sklearn-style model selection), ``fit`` runs the weak-label staged
tuner and stores the learned configuration as ``config_``, ``predict`` turns
records into label rasters, and ``score`` reports mIoU against ground-truth
rasters. Records are objects with at least ``image`` (H, W, 3 uint8) and
``classes_present``; the provider factory decides what else it needs (the
synthetic factory reads ``record.scene``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import CrfParams, PipelineConfig
from .evalkit import ConfusionAccumulator, miou
from .pipeline import relabel_to_global, segment_image
from .tuner import SearchSpace, make_stage_evaluators, staged_tune

__all__ = ["DropoutSegmenter"]


class DropoutSegmenter(BaseEstimator):
    def __init__(
        self,
        provider_factory=None,
        oracle=None,
        layer=8,
        head=10,
        threshold=0.15,
        blur_sigma=0.05,
        dropout_rounds=4,
        use_blur=True,
        use_crf=True,
        crf_iterations=10,
        crf_smooth_weight=3.0,
        crf_smooth_sigma=3.0,
        crf_appearance_weight=4.0,
        crf_appearance_sigma_xy=49.0,
        crf_appearance_sigma_rgb=5.0,
        crf_unary_clamp=1e-3,
        crf_engine="auto",
        search_space=None,
        groups=3,
        iters_per_group=34,
        seed=0,
    ):
        self.provider_factory = provider_factory
        self.oracle = oracle
        self.layer = layer
        self.head = head
        self.threshold = threshold
        self.blur_sigma = blur_sigma
        self.dropout_rounds = dropout_rounds
        self.use_blur = use_blur
        self.use_crf = use_crf
        self.crf_iterations = crf_iterations
        self.crf_smooth_weight = crf_smooth_weight
        self.crf_smooth_sigma = crf_smooth_sigma
        self.crf_appearance_weight = crf_appearance_weight
        self.crf_appearance_sigma_xy = crf_appearance_sigma_xy
        self.crf_appearance_sigma_rgb = crf_appearance_sigma_rgb
        self.crf_unary_clamp = crf_unary_clamp
        self.crf_engine = crf_engine
        self.search_space = search_space
        self.groups = groups
        self.iters_per_group = iters_per_group
        self.seed = seed

    def build_config(self) -> PipelineConfig:
        """PipelineConfig from the current (unfitted) parameters."""
        return PipelineConfig(
            layer=self.layer,
            head=self.head,
            threshold=self.threshold,
            blur_sigma=self.blur_sigma,
            dropout_rounds=self.dropout_rounds,
            use_blur=self.use_blur,
            use_crf=self.use_crf,
            crf=CrfParams(
                iterations=self.crf_iterations,
                smooth_weight=self.crf_smooth_weight,
                smooth_sigma=self.crf_smooth_sigma,
                appearance_weight=self.crf_appearance_weight,
                appearance_sigma_xy=self.crf_appearance_sigma_xy,
                appearance_sigma_rgb=self.crf_appearance_sigma_rgb,
                unary_clamp=self.crf_unary_clamp,
                engine=self.crf_engine,
            ),
        )

    def _active_config(self) -> PipelineConfig:
        return getattr(self, "config_", None) or self.build_config()

    def fit(self, X, y=None):
        """Tune (layer, head, threshold, blur sigma) on weakly-labeled records.

        ``X`` is a sequence of records; weak labels come from each record's
        ``classes_present`` (``y`` is accepted for sklearn compatibility and
        ignored). Requires ``provider_factory`` and ``oracle``.
        """
        if self.provider_factory is None or self.oracle is None:
            raise ValueError("fit requires provider_factory and oracle")
        space = self.search_space or SearchSpace()
        base = self.build_config()
        stage1, stage2 = make_stage_evaluators(
            list(X), self.provider_factory, self.oracle, base
        )
        config, trace1, trace2 = staged_tune(
            space,
            stage1,
            stage2,
            groups=self.groups,
            iters_per_group=self.iters_per_group,
            seed=self.seed,
            base_config=base,
        )
        self.config_ = config
        self.stage1_trace_ = trace1
        self.stage2_trace_ = trace2
        return self

    def segment(self, X):
        """Full SegmentationResult per record (intermediates included)."""
        if self.provider_factory is None:
            raise ValueError("predict requires provider_factory")
        cfg = self._active_config()
        results = []
        for rec in X:
            provider = self.provider_factory(rec, cfg.layer, cfg.head)
            result, _ = segment_image(provider, rec.image, cfg)
            results.append(result)
        return results

    def predict(self, X):
        """Label rasters, in global class ids when records carry class_ids."""
        rasters = []
        for rec, result in zip(X, self.segment(X)):
            ids = getattr(rec, "class_ids", None)
            if ids is None:
                ids = tuple(range(1, len(rec.classes_present) + 1))
            rasters.append(relabel_to_global(result.labels, ids))
        return rasters

    def score(self, X, y):
        """mIoU of predictions against ground-truth rasters ``y``."""
        predictions = self.predict(X)
        n_classes = max(int(np.max(r)) for r in list(y) + predictions)
        acc = ConfusionAccumulator(max(n_classes, 1))
        for gt, pred in zip(y, predictions):
            acc.add(np.asarray(gt), pred)
        return miou(acc)
