"""Patch-grid salience to pixel-accurate masks.

Order of operations: per-class min-max normalization, thresholding at patch
resolution, nearest-neighbor upsampling to pixel resolution, Gaussian blur in
pixel space, unary construction, joint (K+1)-label dense-CRF mean field, and
final per-pixel argmax. Thresholding happens at the patch grid and blur after
upsampling because hard patch-aligned masks are jagged at patch boundaries;
the blur expresses boundary uncertainty before the CRF snaps masks to color
edges. One joint CRF is run over all classes plus background (an
interpretation; the per-class soft/binary masks are also retained, and may
overlap - overlaps are only resolved by the final argmax).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._validation import check_rgb_image, check_soft_stack, check_unit_interval
from .config import PipelineConfig
from .crf import densecrf_meanfield, labels_from_q, softmax_neg_energy
from .salience import AccumulatedSalience

__all__ = [
    "SegmentationResult",
    "normalize_salience",
    "threshold_masks",
    "upsample_nearest",
    "gaussian_blur",
    "build_unaries",
    "refine_pipeline",
    "labels_from_q",
]


@dataclass(frozen=True)
class SegmentationResult:
    """Everything the refinement produced, intermediates included.

    ``pixel_masks`` are the pre-blur, pre-CRF binary masks (the tuner's
    stage-1 currency); ``soft_masks`` are what fed the unaries (blurred when
    blur is on, the raw upsampled masks otherwise). ``labels`` uses 0 for
    background and 1..K for the classes, in class-list order.
    """

    salience: np.ndarray      # (K, P, P) normalized to [0, 1]
    patch_masks: np.ndarray   # (K, P, P) bool
    pixel_masks: np.ndarray   # (K, H, W) bool
    soft_masks: np.ndarray    # (K, H, W) float in [0, 1]
    q: np.ndarray             # (K+1, H, W) mean-field marginals
    labels: np.ndarray        # (H, W) int
    config: PipelineConfig
    final_active_patches: int


def normalize_salience(acc) -> np.ndarray:
    """Min-max normalize each class map to [0, 1]; flat maps become zeros."""
    if isinstance(acc, AccumulatedSalience):
        stack = acc.aggregate
    else:
        stack = np.asarray(acc, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError(f"expected (K, P, P) salience, got {stack.shape}")
    if not np.all(np.isfinite(stack)) or stack.min() < 0:
        raise ValueError("salience must be finite and non-negative")
    lo = stack.min(axis=(1, 2), keepdims=True)
    hi = stack.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.zeros_like(stack, dtype=np.float64)
    np.divide(stack - lo, span, out=out, where=span > 0)
    return out


def threshold_masks(soft, threshold: float) -> np.ndarray:
    """Binarize normalized salience: mask = (value >= threshold)."""
    t = check_unit_interval(threshold, "threshold")
    soft = np.asarray(soft, dtype=np.float64)
    return soft >= t


def upsample_nearest(mask, width: int, height: int) -> np.ndarray:
    """Replicate a (..., P, P) patch map to (..., height, width) pixels.

    Patch cell i spans pixel rows [floor(i*H/P), floor((i+1)*H/P)), and
    likewise for columns, so cells tile the image exactly.
    """
    mask = np.asarray(mask)
    p = mask.shape[-1]
    if mask.shape[-2] != p:
        raise ValueError(f"patch map must be square, got {mask.shape}")
    if width < p or height < p:
        raise ValueError(f"target {width}x{height} smaller than patch grid {p}")
    row_bounds = (np.arange(p) * height) // p
    col_bounds = (np.arange(p) * width) // p
    row_idx = np.searchsorted(row_bounds, np.arange(height), side="right") - 1
    col_idx = np.searchsorted(col_bounds, np.arange(width), side="right") - 1
    return mask[..., row_idx[:, None], col_idx[None, :]]


def gaussian_blur(mask, sigma_frac: float) -> np.ndarray:
    """Separable Gaussian blur; sigma is a fraction of the image short side.

    The kernel is the sampled Gaussian exp(-d^2 / (2 sigma_px^2)) for
    |d| <= ceil(3 sigma_px), normalized to sum 1. Borders fold out-of-range
    weights back onto in-range pixels (symmetric reflection), so the
    effective per-pixel weights still sum to 1 and both constants and the
    global mean are preserved.
    """
    if sigma_frac <= 0:
        raise ValueError("sigma must be positive")
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[-2], mask.shape[-1]
    sigma_px = sigma_frac * min(h, w)
    radius = int(np.ceil(3.0 * sigma_px))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(d**2) / (2.0 * sigma_px**2))
    kernel /= kernel.sum()
    out = ndimage.convolve1d(mask, kernel, axis=-2, mode="reflect")
    out = ndimage.convolve1d(out, kernel, axis=-1, mode="reflect")
    return out


def build_unaries(soft_masks, eps: float = 1e-3) -> np.ndarray:
    """Negative-log potentials over K+1 labels from per-class soft masks.

    Label 0 is background with score 1 - max_k soft[k]; the K class scores
    follow in order. Scores are clamped to [eps, 1-eps] and renormalized per
    pixel before -log.
    """
    soft = check_soft_stack(soft_masks)
    if not 0.0 < eps < 0.5:
        raise ValueError("eps must lie in (0, 0.5)")
    background = 1.0 - soft.max(axis=0, keepdims=True)
    scores = np.concatenate([background, soft], axis=0)
    np.clip(scores, eps, 1.0 - eps, out=scores)
    scores /= scores.sum(axis=0, keepdims=True)
    return -np.log(scores)


def refine_pipeline(acc, image, cfg: PipelineConfig) -> SegmentationResult:
    """Run the full refinement chain with the ablation switches in ``cfg``.

    With blur and CRF both disabled the label raster reproduces the argmax
    over the upsampled thresholded masks (background where all are empty).
    """
    image = check_rgb_image(image)
    h, w = image.shape[:2]
    salience = normalize_salience(acc)
    patch_masks = threshold_masks(salience, cfg.threshold)
    pixel_masks = upsample_nearest(patch_masks, w, h)
    if cfg.use_blur:
        soft = gaussian_blur(pixel_masks.astype(np.float64), cfg.blur_sigma)
        soft = np.clip(soft, 0.0, 1.0)
    else:
        soft = pixel_masks.astype(np.float64)
    unaries = build_unaries(soft, cfg.crf.unary_clamp)
    if cfg.use_crf:
        q = densecrf_meanfield(unaries, image, cfg.crf)
    else:
        q = softmax_neg_energy(-unaries)
    labels = labels_from_q(q)
    final_active = (
        acc.final_active.count if isinstance(acc, AccumulatedSalience) else -1
    )
    return SegmentationResult(
        salience=salience,
        patch_masks=patch_masks,
        pixel_masks=pixel_masks,
        soft_masks=soft,
        q=q,
        labels=labels,
        config=cfg,
        final_active_patches=final_active,
    )
