"""Multidimensional signal panels and the feature-block vectorization.

A panel holds T time slices of an N-node, F-feature signal.  The slice at
time t in matrix form is an N x F array whose column f is the graph signal
of feature f; the stacked vector form places column f in block f of a
length-NF vector.  Every module in this package relies on that single
stacking convention, so the two conversion helpers live here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def vec_by_feature(x: np.ndarray) -> np.ndarray:
    """Stack an N x F matrix into a length-NF vector, one feature block at a time.

    Block f of the result (rows f*N .. f*N+N-1) is column f of the input.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {x.shape}")
    return x.reshape(-1, order="F")


def unvec_by_feature(v: np.ndarray, n_nodes: int) -> np.ndarray:
    """Inverse of :func:`vec_by_feature` for a graph with ``n_nodes`` nodes."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D array, got shape {v.shape}")
    if n_nodes <= 0 or v.size % n_nodes:
        raise ValueError(f"vector of size {v.size} is not a stack of length-{n_nodes} blocks")
    return v.reshape(n_nodes, -1, order="F")


@dataclass(frozen=True)
class SignalPanel:
    """T x N x F array of observations.

    ``data[t]`` is the N x F signal matrix at panel-local time index t; ``t0``
    records the absolute index of row 0 for provenance.  The array is frozen
    on construction: all downstream operations treat panels as immutable and
    may share them across threads.
    """

    data: np.ndarray
    t0: int = 0

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=float)
        if data.ndim != 3:
            raise ValueError(f"panel data must be T x N x F, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("panel data contains non-finite entries")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.data.shape[1]

    @property
    def n_features(self) -> int:
        return self.data.shape[2]

    def matrix_at(self, t: int) -> np.ndarray:
        """Signal matrix X_t (N x F) at panel-local index t."""
        return self.data[t]

    def vec_at(self, t: int) -> np.ndarray:
        """Stacked signal vector x_t (length NF) at panel-local index t."""
        return vec_by_feature(self.data[t])

    def window(self, start: int, stop: int) -> "SignalPanel":
        """Sub-panel over [start, stop), with t0 shifted accordingly."""
        if not 0 <= start < stop <= len(self):
            raise ValueError(f"window [{start}, {stop}) out of bounds for T={len(self)}")
        return SignalPanel(self.data[start:stop], t0=self.t0 + start)
