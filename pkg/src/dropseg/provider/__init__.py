"""Provider contract: attention/gradient tensors for an active-patch set.

A provider answers ``query(active) -> SalienceResponse`` for one image and
one ordered class list. Implementations here: an in-process synthetic
provider for desk-scale work and a subprocess session speaking the
JSON-lines wire protocol. Every response passes ``validate_response`` before
reaching the core: correct shapes, finite values, non-negative attention,
and exact zeros at inactive patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..salience import ActivePatchSet, SalienceResponse

__all__ = [
    "ProviderInit",
    "ResponseValidationError",
    "validate_response",
]


class ResponseValidationError(ValueError):
    """A provider response violated the contract."""


@dataclass(frozen=True)
class ProviderInit:
    """Session parameters: image reference, class list, extraction target."""

    image: str
    classes: tuple
    layer: int
    head: int
    grid: int

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 1:
            raise ValueError("need at least one class")
        if self.layer < 1 or self.head < 1 or self.grid < 1:
            raise ValueError("layer, head, and grid are 1-based counts >= 1")

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def validate_response(attention, gradient, n_classes, grid, active: ActivePatchSet):
    """Check a provider response against the contract; returns the response.

    Raises ResponseValidationError on shape mismatch, non-finite values,
    negative attention, or nonzero salience at inactive patches.
    """
    attention = np.asarray(attention, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    expected = (n_classes, grid, grid)
    if attention.shape != expected or gradient.shape != expected:
        raise ResponseValidationError(
            f"tensor shapes {attention.shape}/{gradient.shape} != expected {expected}"
        )
    if not np.all(np.isfinite(attention)) or not np.all(np.isfinite(gradient)):
        raise ResponseValidationError("response contains non-finite values")
    if attention.min() < 0:
        raise ResponseValidationError("attention contains negative values")
    inactive = ~active.mask
    if np.any(attention[:, inactive] != 0) or np.any(gradient[:, inactive] != 0):
        raise ResponseValidationError("nonzero salience at inactive patches")
    return SalienceResponse(attention=attention, gradient=gradient)
