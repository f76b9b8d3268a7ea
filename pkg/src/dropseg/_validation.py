"""Input validation helpers shared across the package.

All helpers return a validated (and possibly cast) ``np.ndarray`` or raise
``ValueError`` with a message naming the offending argument, sklearn style.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_attention_stack",
    "check_gradient_stack",
    "check_grid_map",
    "check_soft_stack",
    "check_rgb_image",
    "check_positive",
    "check_unit_interval",
]


def _as_float_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_attention_stack(attn, name="attention"):
    """Validate a (K, P, P) stack of non-negative finite salience values."""
    arr = _as_float_array(attn, name)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"{name} must have shape (K, P, P), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} needs K >= 1 and P >= 1, got {arr.shape}")
    if np.any(arr < 0):
        raise ValueError(f"{name} must be non-negative")
    return arr


def check_gradient_stack(grad, like=None, name="gradient"):
    """Validate a finite (K, P, P) gradient stack, optionally shape-matched."""
    arr = _as_float_array(grad, name)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"{name} must have shape (K, P, P), got {arr.shape}")
    if like is not None and arr.shape != np.shape(like):
        raise ValueError(
            f"{name} shape {arr.shape} does not match attention shape {np.shape(like)}"
        )
    return arr


def check_grid_map(u, grid=None, name="salience map"):
    """Validate a finite (P, P) class-agnostic map."""
    arr = _as_float_array(u, name)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square (P, P), got {arr.shape}")
    if grid is not None and arr.shape[0] != grid:
        raise ValueError(f"{name} grid {arr.shape[0]} does not match expected {grid}")
    return arr


def check_soft_stack(soft, name="soft masks"):
    """Validate a stack of per-class maps with values in [0, 1]."""
    arr = _as_float_array(soft, name)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be 3-D (K, H, W), got {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_rgb_image(image, name="image"):
    """Validate an (H, W, 3) image; returns float64 on a 0-255 scale."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return float(value)


def check_unit_interval(value, name, *, open_ends=True):
    v = float(value)
    if open_ends and not 0.0 < v < 1.0:
        raise ValueError(f"{name} must lie strictly inside (0, 1), got {value!r}")
    if not open_ends and not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return v
