"""Weakly-supervised reward and grouped random hyperparameter search.

The reward needs only images and per-image class-name lists. For each
present class the pipeline's binary mask extracts the image region; a
similarity oracle scores (image, class-name) pairs; the class earns one
reward point iff the masked image's softmax probability for its own class
strictly beats that of an all-black image of the same size. Rewards over a
validation set are summed and drive a random search over the discrete
hyperparameter grid, split into contiguous layer groups; staged tuning first
searches (layer, head, threshold) on raw single-round masks, then the blur
sigma on blurred full-dropout masks with the first three fixed.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from .config import PipelineConfig
from .refine import gaussian_blur, normalize_salience, threshold_masks, upsample_nearest
from .salience import salience_dropout_run

logger = logging.getLogger(__name__)

__all__ = [
    "SimilarityOracle",
    "PlantedOracle",
    "GridAxis",
    "SearchSpace",
    "RewardReport",
    "TraceEntry",
    "class_probability",
    "reward_image",
    "reward_dataset",
    "random_search",
    "staged_tune",
    "make_stage_evaluators",
    "resize_bilinear",
    "resize_nearest",
]


class SimilarityOracle(Protocol):
    """Scores f(image, class-name); higher means more similar."""

    input_size: int | None

    def scores(self, image, names: Sequence[str]) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# reward


def _oracle_scores(oracle, image, names):
    scores = np.asarray(oracle.scores(image, list(names)), dtype=np.float64)
    if scores.shape != (len(names),) or not np.all(np.isfinite(scores)):
        raise ValueError(f"oracle returned bad scores {scores!r} for {names}")
    return scores


def _softmax(scores):
    z = scores - scores.max()
    e = np.exp(z)
    return e / e.sum()


def class_probability(oracle, masked_image, classes_present, k) -> float:
    """P(image, k) = exp(f(image, k)) / sum over present classes.

    ``k`` may be a class name or an index into ``classes_present``.
    """
    names = list(classes_present)
    if not names:
        raise ValueError("classes_present must be nonempty")
    idx = k if isinstance(k, int) else names.index(k)
    probs = _softmax(_oracle_scores(oracle, masked_image, names))
    return float(probs[idx])


def _prepare_for_oracle(image, oracle):
    size = getattr(oracle, "input_size", None)
    if size is None:
        return np.ascontiguousarray(image, dtype=np.uint8)
    return resize_bilinear(image, size, size)


def reward_image(masks, image, classes_present, oracle) -> int:
    """Count classes whose masked image beats the all-black baseline.

    ``masks`` holds one binary pixel mask per present class (may overlap).
    The black-image scores are computed once and reused for every class.
    The comparison is strict, so an image with a single present class can
    never earn reward: the softmax over one class is identically 1 on both
    sides. Validation images should carry at least two classes to be
    informative.
    """
    names = list(classes_present)
    masks = np.asarray(masks, dtype=bool)
    image = np.asarray(image)
    if masks.shape != (len(names),) + image.shape[:2]:
        raise ValueError(
            f"masks shape {masks.shape} does not match {len(names)} classes "
            f"and image {image.shape[:2]}"
        )
    black = np.zeros_like(image)
    p_black = _softmax(_oracle_scores(oracle, _prepare_for_oracle(black, oracle), names))
    reward = 0
    for i in range(len(names)):
        masked = image * masks[i][..., None]
        p = _softmax(_oracle_scores(oracle, _prepare_for_oracle(masked, oracle), names))
        if p[i] > p_black[i]:
            reward += 1
    return reward


@dataclass(frozen=True)
class RewardReport:
    config: dict
    per_image: tuple
    total: int

    def __post_init__(self):
        if self.total != sum(self.per_image):
            raise ValueError("total must equal the sum of per-image rewards")


def reward_dataset(records, config: PipelineConfig, masks_fn, oracle) -> RewardReport:
    """Total reward of ``config`` over a weakly-labeled validation set.

    ``masks_fn(record, config)`` produces the per-class binary pixel masks
    for one record. Per-image failures are logged and count as reward 0.
    """
    per_image = []
    for rec in records:
        try:
            masks = masks_fn(rec, config)
            r = reward_image(masks, rec.image, rec.classes_present, oracle)
        except Exception:  # noqa: BLE001 - tuning keeps going
            logger.warning("reward failed for %s; counting 0", getattr(rec, "name", rec), exc_info=True)
            r = 0
        per_image.append(int(r))
    return RewardReport(config=config.to_dict(), per_image=tuple(per_image), total=sum(per_image))


# ---------------------------------------------------------------------------
# search space

@dataclass(frozen=True)
class GridAxis:
    start: float
    end: float
    step: float

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.end < self.start:
            raise ValueError("end must be >= start")

    def values(self) -> tuple:
        """start + n*step for every n with the value <= end (tiny slack for
        float drift); integer axes stay integers."""
        n = int(np.floor((self.end - self.start) / self.step + 1e-9))
        vals = [self.start + i * self.step for i in range(n + 1)]
        if all(float(v).is_integer() for v in (self.start, self.end, self.step)):
            return tuple(int(round(v)) for v in vals)
        return tuple(round(v, 10) for v in vals)

    @classmethod
    def single(cls, value) -> "GridAxis":
        return cls(value, value, 1)


@dataclass(frozen=True)
class SearchSpace:
    """Discrete grid over (layer, head, threshold, blur sigma).

    Defaults cover a 12-layer, 12-head cross-attention model with thresholds
    0.05..0.45 and blur sigmas 0.01..0.11.
    """

    layer: GridAxis = field(default_factory=lambda: GridAxis(1, 12, 1))
    head: GridAxis = field(default_factory=lambda: GridAxis(1, 12, 1))
    threshold: GridAxis = field(default_factory=lambda: GridAxis(0.05, 0.5, 0.1))
    blur_sigma: GridAxis = field(default_factory=lambda: GridAxis(0.01, 0.11, 0.02))

    def axes(self):
        return {
            "layer": self.layer.values(),
            "head": self.head.values(),
            "threshold": self.threshold.values(),
            "blur_sigma": self.blur_sigma.values(),
        }

    def grid_size(self) -> int:
        return int(np.prod([len(v) for v in self.axes().values()]))

    def enumerate(self):
        """Every (layer, head, threshold, blur_sigma) tuple in the grid."""
        a = self.axes()
        return itertools.product(a["layer"], a["head"], a["threshold"], a["blur_sigma"])

    def to_dict(self) -> dict:
        return {
            name: {"start": ax.start, "end": ax.end, "step": ax.step}
            for name, ax in (
                ("layer", self.layer),
                ("head", self.head),
                ("threshold", self.threshold),
                ("blur_sigma", self.blur_sigma),
            )
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**{name: GridAxis(**spec) for name, spec in d.items()})

    @classmethod
    def from_json(cls, text: str) -> "SearchSpace":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TraceEntry:
    config: tuple      # (layer, head, threshold, blur_sigma)
    reward: float
    group: int
    index: int


def random_search(
    space: SearchSpace,
    evaluate: Callable[[tuple], float],
    groups: int = 3,
    iters_per_group: int = 34,
    seed: int = 0,
    jobs: int = 1,
):
    """Grouped uniform sampling without replacement over the grid.

    The layer axis is split into ``groups`` contiguous blocks; each group
    samples its own sub-grid uniformly without replacement for
    ``iters_per_group`` evaluations (or until exhausted). The best
    configuration by reward wins, ties going to the earliest entry in the
    merged (group-order, then draw-order) trace, which is deterministic for
    a given seed regardless of ``jobs``.
    """
    if groups < 1 or iters_per_group < 1:
        raise ValueError("groups and iters_per_group must be >= 1")
    layer_values = space.layer.values()
    if groups > len(layer_values):
        raise ValueError(
            f"cannot split {len(layer_values)} layer values into {groups} nonempty groups"
        )
    blocks = np.array_split(np.asarray(layer_values), groups)
    head_vals = space.head.values()
    t_vals = space.threshold.values()
    s_vals = space.blur_sigma.values()

    def run_group(g):
        block = blocks[g]
        grid = list(itertools.product(block.tolist(), head_vals, t_vals, s_vals))
        rng = np.random.default_rng([seed, g])
        order = rng.permutation(len(grid))
        picks = order[: min(iters_per_group, len(grid))]
        entries = []
        for i, pick in enumerate(picks):
            cfg = tuple(grid[pick])
            entries.append(TraceEntry(config=cfg, reward=float(evaluate(cfg)), group=g, index=i))
        return entries

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_group = list(pool.map(run_group, range(groups)))
    else:
        per_group = [run_group(g) for g in range(groups)]
    trace = [entry for group_entries in per_group for entry in group_entries]
    best = max(trace, key=lambda e: e.reward)  # max() keeps the first maximum
    return best.config, trace


def staged_tune(
    space: SearchSpace,
    stage1_evaluate: Callable[[tuple], float],
    stage2_evaluate: Callable[[tuple], float],
    *,
    groups: int = 3,
    iters_per_group: int = 34,
    seed: int = 0,
    jobs: int = 1,
    base_config: PipelineConfig | None = None,
):
    """Two-stage search: (layer, head, threshold) first, blur sigma second.

    Stage 1 scores raw single-round masks (cheapest pipeline) over the
    (L, H, T) grid with sigma pinned to the first grid value; stage 2 fixes
    the stage-1 winners and scores blurred pre-CRF masks over the sigma
    axis. A singleton sigma axis skips stage 2 entirely, so only stage 1
    consumes search budget. Returns (config, stage1_trace, stage2_trace).
    """
    base = base_config or PipelineConfig()
    sigma_values = space.blur_sigma.values()
    stage1_space = replace(space, blur_sigma=GridAxis.single(sigma_values[0]))
    (layer, head, threshold, _), trace1 = random_search(
        stage1_space, stage1_evaluate, groups, iters_per_group, seed, jobs
    )
    if len(sigma_values) == 1:
        sigma, trace2 = sigma_values[0], []
    else:
        stage2_space = SearchSpace(
            layer=GridAxis.single(layer),
            head=GridAxis.single(head),
            threshold=GridAxis.single(threshold),
            blur_sigma=space.blur_sigma,
        )
        (_, _, _, sigma), trace2 = random_search(
            stage2_space, stage2_evaluate, 1, iters_per_group, seed + 1, jobs
        )
    config = replace(
        base, layer=int(layer), head=int(head), threshold=float(threshold), blur_sigma=float(sigma)
    )
    return config, trace1, trace2


# ---------------------------------------------------------------------------
# pipeline-backed stage evaluators


def make_stage_evaluators(records, provider_factory, oracle, base_config=None):
    """Build the two stage evaluators from a dataset and a provider factory.

    ``provider_factory(record, layer, head)`` opens a salience provider.
    Stage 1 masks: single-round maps, normalized, thresholded, upsampled
    (no dropout accumulation beyond round 1, no blur, no CRF). Stage 2
    masks: full-dropout accumulation blurred at the candidate sigma and
    binarized at 0.5. Salience accumulations are cached per (record, layer,
    head, rounds), so threshold- and sigma-only moves are cheap.
    """
    base = base_config or PipelineConfig()
    cache = {}

    def accumulated(rec_idx, layer, head, rounds):
        key = (rec_idx, layer, head, rounds)
        if key not in cache:
            provider = provider_factory(records[rec_idx], layer, head)
            cache[key] = salience_dropout_run(provider, rounds)
        return cache[key]

    def masks_for(rec_idx, cfg_tuple, rounds, blur_sigma=None):
        layer, head, threshold, _sigma = cfg_tuple
        rec = records[rec_idx]
        acc = accumulated(rec_idx, int(layer), int(head), rounds)
        h, w = rec.image.shape[:2]
        if blur_sigma is None:
            patch = threshold_masks(normalize_salience(acc), float(threshold))
            return upsample_nearest(patch, w, h)
        patch = threshold_masks(normalize_salience(acc), float(threshold))
        soft = gaussian_blur(upsample_nearest(patch, w, h).astype(np.float64), float(blur_sigma))
        return soft >= 0.5

    def stage1_evaluate(cfg_tuple):
        total = 0
        for i, rec in enumerate(records):
            masks = masks_for(i, cfg_tuple, rounds=1)
            total += reward_image(masks, rec.image, rec.classes_present, oracle)
        return total

    def stage2_evaluate(cfg_tuple):
        total = 0
        sigma = float(cfg_tuple[3])
        for i, rec in enumerate(records):
            masks = masks_for(i, cfg_tuple, rounds=base.dropout_rounds, blur_sigma=sigma)
            total += reward_image(masks, rec.image, rec.classes_present, oracle)
        return total

    return stage1_evaluate, stage2_evaluate


# ---------------------------------------------------------------------------
# synthetic oracle and resizing


class PlantedOracle:
    """Palette-matching oracle for synthetic benchmarks.

    Scores a class by the fraction of image pixels whose color sits near the
    class's palette color, scaled to a CLIP-ish logit range. An all-black
    (or all-background) image scores 0 for every class.
    """

    input_size = None

    def __init__(self, class_names, tolerance=45.0, gain=10.0):
        from .evalkit import class_color

        self._colors = {
            name: class_color(i + 1).astype(np.float64)
            for i, name in enumerate(class_names)
        }
        self.tolerance = float(tolerance)
        self.gain = float(gain)

    def scores(self, image, names) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        total = img.shape[0] * img.shape[1]
        out = np.empty(len(names))
        for i, name in enumerate(names):
            color = self._colors[name]
            dist = np.sqrt(((img - color) ** 2).sum(axis=-1))
            out[i] = self.gain * float((dist <= self.tolerance).sum()) / total
        return out


def resize_nearest(image, height, width) -> np.ndarray:
    """Nearest-neighbor resize for masks and rasters."""
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return arr[rows[:, None], cols[None, :]]


def resize_bilinear(image, height, width) -> np.ndarray:
    """Bilinear resize for pixel content fed to an oracle; returns uint8."""
    arr = np.asarray(image, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        return arr.astype(np.uint8)
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = arr[y0[:, None], x0[None, :]] * (1 - wx) + arr[y0[:, None], x1[None, :]] * wx
    bottom = arr[y1[:, None], x0[None, :]] * (1 - wx) + arr[y1[:, None], x1[None, :]] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
