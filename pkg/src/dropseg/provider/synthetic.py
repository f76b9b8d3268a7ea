"""Fully synthetic in-process provider for desk-scale runs.

A scene plants one binary mask and one peak per class on the patch grid.
Attention for class k is the planted mask times a peaked profile
exp(-decay * d^2) in the patch distance d from the current peak, plus
non-negative noise. "Current" is the re-attention dynamic: on a full grid
the peak is the scene's planted peak; once patches are dropped, the peak
relocates to the strongest remaining support patch (the one with the
highest original profile), so successive rounds walk outward from the core
and illuminate the next stratum of the object at full brightness. The
squared falloff makes a single query concentrate on the most
discriminative region (outer mask rings sit below any sane threshold), so
dropout has real work to do.

Gradients are +1 on the planted support. Off support they sit on a small
negative base with zero-crossing jitter, and off-support attention is plain
noise, so the background carries small GradCAM values. That mass is load
bearing: each drop round removes half of all *remaining* patches, so with
an exactly-zero background the first round would swallow entire objects
(every positive value beats a zero tie) and later rounds would see nothing.
Real GradCAM maps have diffuse positive backgrounds for the same reason.
The jitter amplitude scales with the fraction of planted support still
active: once most of the object is dropped, the match signal collapses and
the background stops accumulating salience (otherwise surviving background
patches would pile up spurious salience round after round and drown the
thresholded masks in speckle).

Scenes may carry a sweet spot (sweet_layer, sweet_head): providers opened at
other extraction targets blend the planted signal toward a flat spread and
flip off-support gradients positive, degrading masks smoothly - this is what
gives the tuner a landscape to climb. Responses are a pure function of
(scene, layer, head, request): the noise stream is keyed by the request bits.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from ..salience import ActivePatchSet, SalienceResponse
from . import validate_response
from . import salt

__all__ = ["SyntheticScene", "SyntheticProvider", "load_scene", "save_scene"]


@dataclass(frozen=True)
class SyntheticScene:
    grid: int
    class_names: tuple
    masks: np.ndarray       # (K, P, P) bool
    peaks: np.ndarray       # (K, 2) float, (row, col) in patch units
    decay: float = 0.3
    noise: float = 0.1
    seed: int = 0
    sweet_layer: int | None = None
    sweet_head: int | None = None
    selectivity: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        masks = np.asarray(self.masks, dtype=bool).copy()
        peaks = np.asarray(self.peaks, dtype=np.float64).copy()
        k = len(self.class_names)
        if masks.shape != (k, self.grid, self.grid):
            raise ValueError(f"masks shape {masks.shape} != ({k}, {self.grid}, {self.grid})")
        if peaks.shape != (k, 2):
            raise ValueError(f"peaks shape {peaks.shape} != ({k}, 2)")
        if not masks.any(axis=(1, 2)).all():
            raise ValueError("every declared class needs a nonempty planted mask")
        masks.setflags(write=False)
        peaks.setflags(write=False)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "peaks", peaks)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "class_names": list(self.class_names),
            "masks_b64": base64.b64encode(
                salt.encode(self.masks.astype(np.uint8))
            ).decode("ascii"),
            "peaks": self.peaks.tolist(),
            "decay": self.decay,
            "noise": self.noise,
            "seed": self.seed,
            "sweet_layer": self.sweet_layer,
            "sweet_head": self.sweet_head,
            "selectivity": self.selectivity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        d = dict(d)
        masks = salt.decode(base64.b64decode(d.pop("masks_b64"))).astype(bool)
        return cls(masks=masks, peaks=np.asarray(d.pop("peaks")), **d)


def save_scene(scene: SyntheticScene, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene.to_dict(), fh, indent=2)


def load_scene(path) -> SyntheticScene:
    with open(path, encoding="utf-8") as fh:
        return SyntheticScene.from_dict(json.load(fh))


class SyntheticProvider:
    """SalienceProvider backed by a scene; thread-safe and deterministic."""

    # On-support attention noise is damped so planted structure dominates;
    # off-support attention rides on a small floor and off-support gradients
    # sit on a negative base with positive excursions (scaled by quality) so
    # the background competes in the drop ranking.
    ON_SUPPORT_NOISE = 0.2
    OFF_ATTENTION_FLOOR = 0.7
    OFF_GRADIENT_JITTER = 3.0

    def __init__(self, scene: SyntheticScene, layer: int | None = None, head: int | None = None):
        self.scene = scene
        self.layer = layer
        self.head = head
        self._rows, self._cols = np.meshgrid(
            np.arange(scene.grid), np.arange(scene.grid), indexing="ij"
        )
        self._planted = scene.masks * self._profile(scene.peaks)
        self._spread = self._planted.mean(axis=(1, 2))[:, None, None] * np.ones_like(
            self._planted
        )
        self._quality = self._compute_quality()

    def _profile(self, peaks) -> np.ndarray:
        """exp(-decay * squared patch distance) from per-class peak points."""
        peaks = np.asarray(peaks, dtype=np.float64)
        dist_sq = (self._rows[None] - peaks[:, 0, None, None]) ** 2 + (
            self._cols[None] - peaks[:, 1, None, None]
        ) ** 2
        return np.exp(-self.scene.decay * dist_sq)

    def _compute_quality(self) -> float:
        s = self.scene
        if s.sweet_layer is None or s.sweet_head is None or self.layer is None:
            return 1.0
        head = self.head if self.head is not None else s.sweet_head
        d2 = (self.layer - s.sweet_layer) ** 2 + (head - s.sweet_head) ** 2
        return float(np.exp(-s.selectivity * d2))

    @property
    def n_classes(self) -> int:
        return self.scene.n_classes

    @property
    def grid(self) -> int:
        return self.scene.grid

    def _rng(self, active: ActivePatchSet) -> np.random.Generator:
        h = hashlib.blake2b(digest_size=8)
        h.update(active.to_bits())
        h.update(str((self.scene.seed, self.layer, self.head)).encode())
        return np.random.default_rng(int.from_bytes(h.digest(), "little"))

    def _current_peaks(self, active: ActivePatchSet) -> np.ndarray:
        """Per-class peak under the re-attention dynamic.

        With the class's support fully active the peak is the scene's
        planted peak. After drops it moves to the remaining support patch
        with the highest original profile (ties to the first row-major
        maximum), so the bright spot walks outward stratum by stratum.
        Classes whose support is fully dropped keep the original peak (their
        mask is entirely inactive, so the profile contributes nothing).
        """
        s = self.scene
        peaks = np.array(s.peaks, dtype=np.float64)
        for k in range(s.n_classes):
            avail = active.mask & s.masks[k]
            if not avail.any() or avail.sum() == s.masks[k].sum():
                continue
            vals = np.where(avail, self._planted[k], -1.0)
            idx = int(np.argmax(vals))  # first max in row-major order
            peaks[k] = divmod(idx, s.grid)
        return peaks

    def query(self, active: ActivePatchSet) -> SalienceResponse:
        if active.grid != self.scene.grid:
            raise ValueError(f"active grid {active.grid} != scene grid {self.scene.grid}")
        s = self.scene
        q = self._quality
        rng = self._rng(active)
        planted = s.masks * self._profile(self._current_peaks(active))
        attention = q * planted + (1.0 - q) * self._spread
        if s.noise > 0:
            u = rng.random(attention.shape)
            floor = self.OFF_ATTENTION_FLOOR
            on = self.ON_SUPPORT_NOISE * u
            off = floor + (1.0 - floor) * u
            attention = attention + s.noise * np.where(s.masks, on, off)
        # off-support base runs from -0.25 (sweet spot) to +1 (far away);
        # jitter crosses zero (so background competes in the drop ranking)
        # and fades with the remaining planted support
        support = s.masks.any(axis=0)
        denom = max(int(support.sum()), 1)
        support_frac = float((active.mask & support).sum()) / denom
        off_grad = (1.0 - 1.25 * q) + (
            self.OFF_GRADIENT_JITTER * q * support_frac
        ) * rng.random(attention.shape)
        gradient = np.where(s.masks, 1.0, off_grad)
        attention = attention * active.mask
        gradient = gradient * active.mask
        return validate_response(attention, gradient, s.n_classes, s.grid, active)

    def at_target(self, layer: int, head: int) -> "SyntheticProvider":
        """New provider for the same scene at another extraction target."""
        return SyntheticProvider(self.scene, layer, head)
