"""Evaluation substrate: confusion accumulation, IoU, and the synthetic
benchmark generator.

Label rasters use 0 for background and 1..K for classes; they are stored as
binary PGM with the pixel value equal to the class index. The synthetic
benchmark plants non-overlapping colored blobs whose ground-truth rasters
are patch-aligned, so downsampling a raster to the patch grid recovers the
provider scene's planted masks exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from .provider.synthetic import SyntheticScene
from .refine import upsample_nearest

__all__ = [
    "ConfusionAccumulator",
    "iou_per_class",
    "miou",
    "load_label_raster",
    "save_label_raster",
    "class_color",
    "BACKGROUND_COLOR",
    "CLASS_NAME_POOL",
    "SceneRecord",
    "SynthDataset",
    "synth_benchmark",
    "save_dataset",
    "load_dataset",
]

# Palette used by the synthetic generator; colors are far apart so the CRF's
# appearance kernel separates them cleanly.
_PALETTE = np.array(
    [
        (220, 50, 50),
        (50, 200, 70),
        (60, 90, 220),
        (230, 200, 40),
        (180, 60, 200),
        (40, 200, 200),
        (240, 140, 40),
        (130, 220, 120),
    ],
    dtype=np.uint8,
)
BACKGROUND_COLOR = np.array((95, 95, 95), dtype=np.uint8)
CLASS_NAME_POOL = (
    "crimson",
    "emerald",
    "azure",
    "amber",
    "violet",
    "cyan",
    "tangerine",
    "jade",
)


def class_color(class_index: int) -> np.ndarray:
    """Color of 1-based class ``class_index`` (index 0 is background)."""
    if class_index == 0:
        return BACKGROUND_COLOR
    return _PALETTE[(class_index - 1) % len(_PALETTE)]


class ConfusionAccumulator:
    """(K+1)x(K+1) counts of (ground truth, prediction) pixel pairs.

    Mergeable with ``+=`` so per-image confusion can be computed in parallel
    and reduced associatively. ``ignore_label`` pixels are skipped.
    """

    def __init__(self, n_classes: int, ignore_label: int | None = None):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        self.ignore_label = ignore_label
        self.matrix = np.zeros((n_classes + 1, n_classes + 1), dtype=np.int64)

    def add(self, ground_truth, prediction):
        gt = np.asarray(ground_truth).reshape(-1)
        pred = np.asarray(prediction).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError(f"shape mismatch: {gt.shape} vs {pred.shape}")
        keep = np.ones(gt.shape, dtype=bool)
        if self.ignore_label is not None:
            keep &= gt != self.ignore_label
            keep &= pred != self.ignore_label
        gt, pred = gt[keep], pred[keep]
        n = self.n_classes + 1
        if gt.size and (gt.min() < 0 or gt.max() >= n or pred.min() < 0 or pred.max() >= n):
            raise ValueError(f"label outside [0, {n - 1}]")
        counts = np.bincount(gt * n + pred, minlength=n * n)
        self.matrix += counts.reshape(n, n)
        return self

    def __iadd__(self, other: "ConfusionAccumulator"):
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge accumulators with different class counts")
        self.matrix += other.matrix
        return self

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def iou_per_class(acc: ConfusionAccumulator) -> np.ndarray:
    """IoU_k = TP / (TP + FP + FN); NaN where a class never occurs."""
    m = acc.matrix.astype(np.float64)
    tp = np.diag(m)
    denom = m.sum(axis=0) + m.sum(axis=1) - tp
    out = np.full(m.shape[0], np.nan)
    np.divide(tp, denom, out=out, where=denom > 0)
    return out


def miou(acc: ConfusionAccumulator, include_background: bool = False) -> float:
    """Mean IoU over defined classes; background excluded by default."""
    ious = iou_per_class(acc)
    if not include_background:
        ious = ious[1:]
    defined = ~np.isnan(ious)
    if not defined.any():
        raise ValueError("no scorable classes (every IoU is undefined)")
    return float(ious[defined].mean())


def save_label_raster(path, raster):
    raster = np.asarray(raster)
    if raster.min() < 0 or raster.max() > 255:
        raise ValueError("class indices must fit in a byte")
    netpbm.write_pgm(path, raster.astype(np.uint8))


def load_label_raster(path, n_classes: int | None = None) -> np.ndarray:
    raster = netpbm.read_pgm(path)
    if n_classes is not None and raster.max() > n_classes:
        raise ValueError(
            f"raster contains class index {raster.max()} > K={n_classes}"
        )
    return raster.astype(np.int32)


@dataclass(frozen=True)
class SceneRecord:
    """One benchmark item: scene, rendered image, ground truth, weak labels."""

    name: str
    scene: SyntheticScene
    image: np.ndarray            # (H, W, 3) uint8
    raster: np.ndarray           # (H, W) int, global class ids
    classes_present: tuple       # names, order matches scene.class_names
    class_ids: tuple             # global 1-based ids, aligned with classes_present
    image_path: str | None = None  # set when loaded from disk


@dataclass(frozen=True)
class SynthDataset:
    class_names: tuple           # global list; id k+1 <-> class_names[k]
    records: tuple

    def __len__(self):
        return len(self.records)


def _plant_blobs(rng, grid, n_blobs):
    """Non-overlapping disk masks on the patch grid; returns masks and centers.

    Radii shrink with blob count; on a crowded failure the whole layout is
    retried at 90% scale, a bounded number of times.
    """
    # Radii are sized so four dropout rounds can cover a blob: with the
    # default peaked profile each round brightens a spot of roughly 2.2
    # patches radius, so blobs much larger than ~45 patches would be left
    # partially covered and the refinement orderings would get noisy.
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    base_lo, base_hi = 0.13, 0.165
    for shrink in range(8):
        scale = 0.9**shrink
        taken = np.zeros((grid, grid), dtype=bool)
        masks, centers = [], []
        ok = True
        for _ in range(n_blobs):
            placed = False
            for _attempt in range(60):
                radius = rng.uniform(base_lo, base_hi) * grid * scale
                cy = rng.uniform(radius, grid - 1 - radius)
                cx = rng.uniform(radius, grid - 1 - radius)
                mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius**2
                if not mask.any():
                    continue
                grown = (rows - cy) ** 2 + (cols - cx) ** 2 <= (radius + 1.5) ** 2
                if not (grown & taken).any():
                    taken |= mask
                    masks.append(mask)
                    centers.append((cy, cx))
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return masks, centers
    raise RuntimeError(f"could not place {n_blobs} non-overlapping blobs on a {grid} grid")


def synth_benchmark(
    seed: int,
    n_images: int,
    n_classes: int,
    grid: int,
    image_size: int,
    *,
    noise: float = 0.1,
    decay: float = 0.3,
    image_noise: float = 3.0,
    sweet_layer: int | None = None,
    sweet_head: int | None = None,
    selectivity: float = 0.25,
) -> SynthDataset:
    """Deterministic desk-scale benchmark: scenes, images, rasters, weak labels.

    ``noise`` and ``decay`` parametrize the provider scenes (attention noise
    and peak falloff); ``image_noise`` is the pixel noise sigma on the 0-255
    scale. Each image carries 1..min(4, n_classes) planted classes.
    """
    if n_images < 1 or n_classes < 1 or grid < 1 or image_size < grid:
        raise ValueError("bad benchmark sizes")
    if n_classes > len(CLASS_NAME_POOL):
        raise ValueError(f"at most {len(CLASS_NAME_POOL)} classes supported")
    class_names = CLASS_NAME_POOL[:n_classes]
    records = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        n_blobs = int(rng.integers(1, min(4, n_classes) + 1))
        ids = rng.choice(n_classes, size=n_blobs, replace=False) + 1  # global, 1-based
        ids = np.sort(ids)
        masks, centers = _plant_blobs(rng, grid, n_blobs)
        scene = SyntheticScene(
            grid=grid,
            class_names=tuple(class_names[k - 1] for k in ids),
            masks=np.stack(masks),
            peaks=np.asarray(centers),
            decay=decay,
            noise=noise,
            seed=int(rng.integers(0, 2**31 - 1)),
            sweet_layer=sweet_layer,
            sweet_head=sweet_head,
            selectivity=selectivity,
        )
        raster = np.zeros((image_size, image_size), dtype=np.int32)
        image = np.empty((image_size, image_size, 3), dtype=np.float64)
        image[:] = BACKGROUND_COLOR
        for mask, k in zip(masks, ids):
            pix = upsample_nearest(mask, image_size, image_size)
            raster[pix] = k
            image[pix] = class_color(int(k))
        image += rng.normal(0.0, image_noise, image.shape)
        image = np.clip(image, 0, 255).astype(np.uint8)
        records.append(
            SceneRecord(
                name=f"scene{i:04d}",
                scene=scene,
                image=image,
                raster=raster,
                classes_present=scene.class_names,
                class_ids=tuple(int(k) for k in ids),
            )
        )
    return SynthDataset(class_names=tuple(class_names), records=tuple(records))


def save_dataset(dataset: SynthDataset, outdir) -> Path:
    """Materialize images (PPM), rasters (PGM), scenes, class list, manifest."""
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    (outdir / "rasters").mkdir(exist_ok=True)
    (outdir / "scenes").mkdir(exist_ok=True)
    (outdir / "classes.txt").write_text(
        "".join(f"{name}\n" for name in dataset.class_names), encoding="utf-8"
    )
    entries = []
    for rec in dataset.records:
        image_path = outdir / "images" / f"{rec.name}.ppm"
        raster_path = outdir / "rasters" / f"{rec.name}.pgm"
        scene_path = outdir / "scenes" / f"{rec.name}.json"
        netpbm.write_ppm(image_path, rec.image)
        save_label_raster(raster_path, rec.raster)
        with open(scene_path, "w", encoding="utf-8") as fh:
            json.dump(rec.scene.to_dict(), fh, indent=2)
        entries.append(
            {
                "name": rec.name,
                "image": str(image_path.relative_to(outdir)),
                "raster": str(raster_path.relative_to(outdir)),
                "scene": str(scene_path.relative_to(outdir)),
                "classes_present": list(rec.classes_present),
                "class_ids": list(rec.class_ids),
            }
        )
    manifest = outdir / "manifest.json"
    with open(manifest, "w", encoding="utf-8") as fh:
        json.dump({"class_names": list(dataset.class_names), "images": entries}, fh, indent=2)
    return manifest


def load_dataset(manifest_path) -> SynthDataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    records = []
    for entry in manifest["images"]:
        with open(root / entry["scene"], encoding="utf-8") as fh:
            scene = SyntheticScene.from_dict(json.load(fh))
        records.append(
            SceneRecord(
                name=entry["name"],
                scene=scene,
                image=netpbm.read_ppm(root / entry["image"]),
                raster=load_label_raster(root / entry["raster"]),
                classes_present=tuple(entry["classes_present"]),
                class_ids=tuple(entry["class_ids"]),
                image_path=str(root / entry["image"]),
            )
        )
    return SynthDataset(class_names=tuple(manifest["class_names"]), records=tuple(records))
