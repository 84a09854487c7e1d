"""Polynomial graph filters evaluated by iterated sparse shifts.

Powers of the shift operator are never materialized: a filter of length K
costs K-1 sparse multiplies, O(|E|K) total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import GraphShiftOperator


class FilterError(ValueError):
    """Dimension mismatch or invalid filter taps."""


@dataclass(frozen=True)
class FilterTaps:
    """Scalar coefficients h_0 .. h_{K-1} of a length-K graph filter."""

    h: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 1 or h.size < 1:
            raise FilterError(f"taps must be a nonempty 1-D array, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise FilterError("taps must be finite")
        h = h.copy()
        h.flags.writeable = False
        object.__setattr__(self, "h", h)

    def __len__(self) -> int:
        return self.h.size


def apply_filter(s: GraphShiftOperator, taps: FilterTaps, x: np.ndarray) -> np.ndarray:
    """y = sum_k h_k S^k x by iterated shifting."""
    x = np.asarray(x, dtype=float)
    if x.shape != (s.n,):
        raise FilterError(f"signal shape {x.shape} does not match n={s.n}")
    y = taps.h[0] * x
    z = x
    for hk in taps.h[1:]:
        z = s.matrix @ z
        y = y + hk * z
    return y


def shift_power_apply(s: GraphShiftOperator, x: np.ndarray, k: int) -> np.ndarray:
    """S^k x by k successive sparse multiplies; x may be a vector or matrix."""
    if k < 0:
        raise FilterError(f"shift power must be nonnegative, got {k}")
    x = np.asarray(x, dtype=float)
    if x.shape[0] != s.n:
        raise FilterError(f"operand leading dimension {x.shape[0]} does not match n={s.n}")
    for _ in range(k):
        x = s.matrix @ x
    return x


def mimo_shift_apply(
    s: GraphShiftOperator, h: np.ndarray, k: int, x: np.ndarray
) -> np.ndarray:
    """S^k X H: shift the N x F signal over the graph, then mix features."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    if x.ndim != 2:
        raise FilterError(f"signal must be N x F, got shape {x.shape}")
    if h.shape != (x.shape[1], x.shape[1]):
        raise FilterError(
            f"mixing matrix shape {h.shape} does not match feature count {x.shape[1]}"
        )
    return shift_power_apply(s, x, k) @ h
