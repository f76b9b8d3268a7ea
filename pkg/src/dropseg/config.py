"""Pipeline configuration objects and their JSON round-trip."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class CrfParams:
    """Dense-CRF mean-field parameters.

    Sigmas are in pixels (spatial) and 0-255 color units (appearance);
    ``unary_clamp`` is the probability floor applied before -log. ``engine``
    selects the pairwise-message implementation: "exact" (O(N^2) reference),
    "fast" (truncated kernels, see crf module), or "auto" (exact up to 4096
    pixels, fast above).
    """

    iterations: int = 10
    smooth_weight: float = 3.0
    smooth_sigma: float = 3.0
    appearance_weight: float = 4.0
    appearance_sigma_xy: float = 49.0
    appearance_sigma_rgb: float = 5.0
    unary_clamp: float = 1e-3
    engine: str = "auto"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("smooth_sigma", "appearance_sigma_xy", "appearance_sigma_rgb"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("smooth_weight", "appearance_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.unary_clamp < 0.5:
            raise ValueError("unary_clamp must lie in (0, 0.5)")
        if self.engine not in ("auto", "exact", "fast"):
            raise ValueError(f"unknown CRF engine {self.engine!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Tunable hyperparameters of the segmentation pipeline.

    Defaults follow the tuned reference solution for a 12-layer, 12-head
    cross-attention model: layer 8, head 10, threshold 0.15, blur sigma 0.05
    (fraction of the image short side), four dropout rounds.
    """

    layer: int = 8
    head: int = 10
    threshold: float = 0.15
    blur_sigma: float = 0.05
    dropout_rounds: int = 4
    use_blur: bool = True
    use_crf: bool = True
    crf: CrfParams = field(default_factory=CrfParams)

    def __post_init__(self):
        if self.layer < 1 or self.head < 1:
            raise ValueError("layer and head indices are 1-based and must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie strictly inside (0, 1)")
        if self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be > 0")
        if self.dropout_rounds < 1:
            raise ValueError("dropout_rounds must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        crf = d.pop("crf", None)
        if crf is not None and not isinstance(crf, CrfParams):
            crf = CrfParams(**crf)
        return cls(crf=crf or CrfParams(), **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        """Stable hash of the configuration, for reproducibility audits."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]
