"""Attention-salience core: GradCAM weighting and iterative salience dropout.

The pipeline's first half works on a P x P patch grid. A provider (synthetic
or model-backed) answers queries with per-class attention and gradient stacks
of shape (K, P, P); this module sharpens attention with the gradient
(``gradcam_combine``), repeatedly drops the most salient half of the still
active patches (``drop_set_update``), and accumulates the per-round maps into
a single salience stack (``salience_dropout_run``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from ._validation import (
    check_attention_stack,
    check_gradient_stack,
    check_grid_map,
    check_positive,
)

__all__ = [
    "ActivePatchSet",
    "AccumulatedSalience",
    "TokenSpanMap",
    "SalienceResponse",
    "SalienceProvider",
    "SalienceDropoutError",
    "gradcam_combine",
    "aggregate_token_maps",
    "class_softmax",
    "drop_set_update",
    "salience_dropout_run",
]


class SalienceDropoutError(RuntimeError):
    """Provider or contract failure inside the dropout loop.

    ``round_index`` is the 0-based iteration at which the loop aborted.
    """

    def __init__(self, message, round_index):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


@dataclass(frozen=True)
class ActivePatchSet:
    """Set of not-yet-dropped patches on the P x P grid.

    Immutable; ``mask`` is a read-only boolean array. Dropout produces new
    sets that are always subsets of their predecessor.
    """

    grid: int
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != (self.grid, self.grid):
            raise ValueError(f"mask shape {mask.shape} != ({self.grid}, {self.grid})")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, grid: int) -> "ActivePatchSet":
        if grid < 1:
            raise ValueError("grid must be >= 1")
        return cls(grid, np.ones((grid, grid), dtype=bool))

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def is_subset_of(self, other: "ActivePatchSet") -> bool:
        return bool(np.all(~self.mask | other.mask))

    def to_bits(self) -> bytes:
        """Row-major bit packing (MSB first), zero-padded to a whole byte."""
        return np.packbits(self.mask.reshape(-1)).tobytes()

    @classmethod
    def from_bits(cls, data: bytes, grid: int) -> "ActivePatchSet":
        n = grid * grid
        expected = (n + 7) // 8
        if len(data) != expected:
            raise ValueError(f"expected {expected} bytes for grid {grid}, got {len(data)}")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n)
        return cls(grid, bits.astype(bool).reshape(grid, grid))


@dataclass(frozen=True)
class SalienceResponse:
    """One provider answer: attention plus its matching gradient stack."""

    attention: np.ndarray
    gradient: np.ndarray


class SalienceProvider(Protocol):
    """Anything that answers attention/gradient queries for an active set."""

    @property
    def n_classes(self) -> int: ...

    @property
    def grid(self) -> int: ...

    def query(self, active: ActivePatchSet) -> SalienceResponse: ...


@dataclass(frozen=True)
class TokenSpanMap:
    """Per-class token index spans within a prompt.

    ``prefix_len`` leading token indices never carry class semantics and are
    excluded; spans must be disjoint, nonempty, and avoid the prefix.
    """

    spans: tuple
    prefix_len: int = 3

    def __post_init__(self):
        spans = tuple(tuple(int(i) for i in span) for span in self.spans)
        seen = set()
        for span in spans:
            if not span:
                raise ValueError("every class span must be nonempty")
            for idx in span:
                if idx < self.prefix_len:
                    raise ValueError(
                        f"token index {idx} falls inside the excluded prefix "
                        f"(first {self.prefix_len} tokens)"
                    )
                if idx in seen:
                    raise ValueError(f"token index {idx} appears in two spans")
                seen.add(idx)
        object.__setattr__(self, "spans", spans)

    @property
    def n_classes(self) -> int:
        return len(self.spans)


@dataclass(frozen=True)
class AccumulatedSalience:
    """Sum of per-round GradCAM stacks plus the full round-by-round history.

    ``aggregate`` equals the element-wise float64 sum of ``history`` in
    iteration order, exactly. ``active_sets`` holds the active set used for
    each round's query (index 0 is the full grid), followed by the final set
    after the last drop.
    """

    aggregate: np.ndarray
    history: tuple
    active_sets: tuple

    @property
    def n_classes(self) -> int:
        return self.aggregate.shape[0]

    @property
    def grid(self) -> int:
        return self.aggregate.shape[1]

    @property
    def final_active(self) -> ActivePatchSet:
        return self.active_sets[-1]


def gradcam_combine(attn, grad) -> np.ndarray:
    """Sharpen attention with its gradient: out = max(0, grad) * attn.

    Both inputs are (K, P, P); non-positive gradient entries contribute
    nothing, so the output is non-negative wherever attention is.
    """
    attn = check_attention_stack(attn)
    grad = check_gradient_stack(grad, like=attn)
    return np.maximum(grad, 0.0) * attn


def aggregate_token_maps(token_maps, spans: TokenSpanMap) -> np.ndarray:
    """Average per-token maps into per-class maps along the span map.

    ``token_maps`` is (T, P, P); class k's map is the arithmetic mean of the
    maps at its span indices. Prefix tokens never contribute (the span map
    forbids them by construction).
    """
    maps = np.asarray(token_maps, dtype=np.float64)
    if maps.ndim != 3:
        raise ValueError(f"token_maps must be (T, P, P), got {maps.shape}")
    n_tokens = maps.shape[0]
    out = np.empty((spans.n_classes,) + maps.shape[1:], dtype=np.float64)
    for k, span in enumerate(spans.spans):
        for idx in span:
            if idx >= n_tokens:
                raise ValueError(f"span index {idx} out of range for {n_tokens} token maps")
        out[k] = maps[list(span)].mean(axis=0)
    return out


def class_softmax(attn, temperature: float = 1.0) -> np.ndarray:
    """Softmax over the class axis, per patch (attention-only baseline mode)."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 3:
        raise ValueError(f"expected (K, P, P) stack, got {attn.shape}")
    if not np.all(np.isfinite(attn)):
        raise ValueError("attention contains non-finite values")
    t = check_positive(temperature, "temperature")
    z = attn / t
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def drop_set_update(u, active: ActivePatchSet) -> ActivePatchSet:
    """Drop the floor(|active|/2) highest-salience patches from the set.

    Ties are broken by ascending row-major index, a deterministic stand-in
    for the at-least-median rule: sorting by (value desc, index asc) and
    taking the first half keeps the 50% removal arithmetic exact.
    """
    u = check_grid_map(u, grid=active.grid, name="U")
    flat_active = np.flatnonzero(active.mask.reshape(-1))
    n = flat_active.size
    if n == 0:
        raise ValueError("active set is empty")
    n_drop = n // 2
    if n_drop == 0:
        return active
    values = u.reshape(-1)[flat_active]
    # stable sort on index, then stable sort on -value => (value desc, index asc)
    order = np.argsort(-values, kind="stable")
    to_drop = flat_active[order[:n_drop]]
    mask = active.mask.copy()
    mask.reshape(-1)[to_drop] = False
    return ActivePatchSet(active.grid, mask)


def salience_dropout_run(provider: SalienceProvider, rounds: int = 4) -> AccumulatedSalience:
    """Run the iterative salience-dropout loop against a provider.

    Each round queries the provider with the current active set, applies
    ``gradcam_combine``, forcibly zeroes entries at inactive patches, records
    the round's stack, sums it over classes into the class-agnostic map U,
    and drops the top half of the active patches by U. Per-round maps are
    summed raw (no per-round renormalization) into the aggregate, in float64,
    in iteration order.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    grid = provider.grid
    n_classes = provider.n_classes
    active = ActivePatchSet.full(grid)
    history = []
    active_sets = [active]
    aggregate = np.zeros((n_classes, grid, grid), dtype=np.float64)
    for t in range(rounds):
        try:
            resp = provider.query(active)
        except Exception as exc:  # noqa: BLE001 - aborting with round index
            raise SalienceDropoutError(f"provider query failed: {exc}", t) from exc
        attn = np.asarray(resp.attention, dtype=np.float64)
        grad = np.asarray(resp.gradient, dtype=np.float64)
        if attn.shape != (n_classes, grid, grid) or grad.shape != attn.shape:
            raise SalienceDropoutError(
                f"provider returned shape {attn.shape}/{grad.shape}, "
                f"expected {(n_classes, grid, grid)}",
                t,
            )
        try:
            layer = gradcam_combine(attn, grad)
        except ValueError as exc:
            raise SalienceDropoutError(str(exc), t) from exc
        layer[:, ~active.mask] = 0.0  # previously dropped patches stay at zero
        history.append(layer)
        aggregate += layer
        u = layer.sum(axis=0)
        active = drop_set_update(u, active)
        active_sets.append(active)
    return AccumulatedSalience(
        aggregate=aggregate, history=tuple(history), active_sets=tuple(active_sets)
    )
