"""Graph shift operators: construction, validation, and product graphs.

The graph shift operator (GSO) is a sparse square matrix whose sparsity
pattern matches the edge set of the graph; adjacency and Laplacian variants
are tagged by kind.  This module builds GSOs from distance matrices and
signal correlations, normalizes them, and combines a node graph with a
feature graph into the parametrized product graph used by the product-graph
VAR models.

All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .panel import SignalPanel

# Normalized-Laplacian eigenvalue range is only verified on instances up to
# this size; larger operators carry spectrum_checked=False.
SPECTRUM_CHECK_MAX_NODES = 64
_SYM_TOL = 1e-12


class GraphError(ValueError):
    """Invalid graph input or construction parameter."""


class GsoKind(Enum):
    ADJACENCY = "adjacency"
    LAPLACIAN = "laplacian"
    NORMALIZED_LAPLACIAN = "normalized_laplacian"
    GENERIC = "generic"


@dataclass(frozen=True)
class GraphShiftOperator:
    """Sparse n x n matrix representation of a graph.

    ``spectrum_checked`` records whether the normalized-Laplacian eigenvalue
    check ([0, 2]) actually ran; it is a stored validation flag, never
    recomputed per operation.  Use the class methods to construct instances:
    they validate indices, duplicates, and (for small normalized Laplacians)
    the spectrum.
    """

    n: int
    matrix: sp.csr_array
    kind: GsoKind = GsoKind.GENERIC
    spectrum_checked: bool = False

    def __post_init__(self) -> None:
        if self.matrix.shape != (self.n, self.n):
            raise GraphError(
                f"matrix shape {self.matrix.shape} does not match node count {self.n}"
            )

    # -- construction -----------------------------------------------------

    @classmethod
    def from_triplets(
        cls,
        n: int,
        triplets,
        kind: GsoKind = GsoKind.GENERIC,
        edgeless_ok: bool = False,
    ) -> "GraphShiftOperator":
        """Build from (row, col, weight) triplets.

        Raises on out-of-range indices, duplicate (row, col) pairs, and an
        empty pattern for n > 1 unless ``edgeless_ok`` says the graph is
        explicitly edgeless.  Zero weights are dropped.
        """
        rows, cols, vals = [], [], []
        seen = set()
        for r, c, w in triplets:
            r, c, w = int(r), int(c), float(w)
            if not (0 <= r < n and 0 <= c < n):
                raise GraphError(f"entry ({r}, {c}) outside [0, {n})")
            if (r, c) in seen:
                raise GraphError(f"duplicate entry for ({r}, {c})")
            seen.add((r, c))
            if w != 0.0:
                rows.append(r)
                cols.append(c)
                vals.append(w)
        if not np.all(np.isfinite(vals)):
            raise GraphError("non-finite edge weight")
        mat = sp.csr_array(
            sp.coo_array((vals, (rows, cols)), shape=(n, n), dtype=float)
        )
        return cls._finalize(n, mat, kind, edgeless_ok)

    @classmethod
    def from_dense(
        cls,
        a: np.ndarray,
        kind: GsoKind = GsoKind.GENERIC,
        edgeless_ok: bool = False,
    ) -> "GraphShiftOperator":
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise GraphError("non-finite edge weight")
        return cls._finalize(a.shape[0], sp.csr_array(a), kind, edgeless_ok)

    @classmethod
    def identity(cls, n: int) -> "GraphShiftOperator":
        return cls._finalize(n, sp.eye_array(n, format="csr"), GsoKind.GENERIC, False)

    @classmethod
    def _finalize(
        cls, n: int, mat: sp.csr_array, kind: GsoKind, edgeless_ok: bool
    ) -> "GraphShiftOperator":
        mat = sp.csr_array(mat)
        mat.eliminate_zeros()
        mat.sum_duplicates()
        if n > 1 and mat.nnz == 0 and not edgeless_ok:
            raise GraphError(
                "empty sparsity pattern; pass edgeless_ok=True for an explicitly edgeless graph"
            )
        checked = False
        if kind is GsoKind.NORMALIZED_LAPLACIAN and n <= SPECTRUM_CHECK_MAX_NODES:
            dense = mat.toarray()
            if not np.allclose(dense, dense.T, atol=_SYM_TOL):
                raise GraphError("normalized Laplacian must be symmetric")
            eig = np.linalg.eigvalsh(dense)
            if eig.size and (eig[0] < -1e-8 or eig[-1] > 2 + 1e-8):
                raise GraphError(
                    f"normalized-Laplacian eigenvalues outside [0, 2]: [{eig[0]:.3g}, {eig[-1]:.3g}]"
                )
            checked = True
        return cls(n=n, matrix=mat, kind=kind, spectrum_checked=checked)

    # -- queries -----------------------------------------------------------

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def is_symmetric(self, tol: float = _SYM_TOL) -> bool:
        diff = self.matrix - self.matrix.T
        return diff.nnz == 0 or np.max(np.abs(diff.data)) <= tol

    def apply(self, x: np.ndarray) -> np.ndarray:
        """One graph shift: S @ x for a vector or matrix of conforming shape."""
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise GraphError(f"operand of length {x.shape[0]} does not match n={self.n}")
        return self.matrix @ x

    # -- edge-list serialization -------------------------------------------

    def save(self, path) -> None:
        """Write the edge-list text format: ``gso <n> <kind>`` then triples."""
        coo = self.matrix.tocoo()
        lines = [f"gso {self.n} {self.kind.value}"]
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            lines.append(f"{coo.row[i]} {coo.col[i]} {float(coo.data[i])!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "GraphShiftOperator":
        text = Path(path).read_text().strip().splitlines()
        if not text:
            raise GraphError(f"{path}: empty graph file")
        header = text[0].split()
        if len(header) != 3 or header[0] != "gso":
            raise GraphError(f"{path}: bad header {text[0]!r}")
        n = int(header[1])
        try:
            kind = GsoKind(header[2])
        except ValueError as exc:
            raise GraphError(f"{path}: unknown kind {header[2]!r}") from exc
        triplets = []
        for ln, line in enumerate(text[1:], start=2):
            parts = line.split()
            if len(parts) != 3:
                raise GraphError(f"{path}:{ln}: expected 'row col weight'")
            triplets.append((int(parts[0]), int(parts[1]), float(parts[2])))
        return cls.from_triplets(n, triplets, kind=kind, edgeless_ok=True)


@dataclass(frozen=True)
class ProductGraphSpec:
    """The four coefficients combining a feature graph with a node graph.

    Canonical products are binary: Kronecker (0,0,0,1), Cartesian (0,1,1,0),
    strong (0,1,1,1); general real coefficients are permitted.
    """

    s00: float = 0.0
    s01: float = 0.0
    s10: float = 0.0
    s11: float = 0.0

    def __post_init__(self) -> None:
        coeffs = (self.s00, self.s01, self.s10, self.s11)
        if not np.all(np.isfinite(coeffs)):
            raise GraphError("product coefficients must be finite")
        if all(c == 0.0 for c in coeffs):
            raise GraphError("at least one product coefficient must be nonzero")

    @classmethod
    def kronecker(cls) -> "ProductGraphSpec":
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def cartesian(cls) -> "ProductGraphSpec":
        return cls(0.0, 1.0, 1.0, 0.0)

    @classmethod
    def strong(cls) -> "ProductGraphSpec":
        return cls(0.0, 1.0, 1.0, 1.0)

    @classmethod
    def from_name(cls, name: str) -> "ProductGraphSpec":
        presets = {
            "kronecker": cls.kronecker,
            "cartesian": cls.cartesian,
            "strong": cls.strong,
        }
        try:
            return presets[name.lower()]()
        except KeyError as exc:
            raise GraphError(
                f"unknown product preset {name!r}; expected one of {sorted(presets)}"
            ) from exc

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.s00, self.s01, self.s10, self.s11)


@dataclass(frozen=True)
class DistanceMatrix:
    """Dense symmetric nonnegative pairwise distances with zero diagonal."""

    n: int
    d: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.d, dtype=float)
        if d.shape != (self.n, self.n):
            raise GraphError(f"distance matrix shape {d.shape} does not match n={self.n}")
        if not np.all(np.isfinite(d)):
            raise GraphError("non-finite distance")
        if not np.allclose(d, d.T):
            raise GraphError("distance matrix must be symmetric")
        if np.any(np.diag(d) != 0.0):
            raise GraphError("distance matrix diagonal must be zero")
        if np.any(d < 0.0):
            raise GraphError("distances must be nonnegative")
        d = d.copy()
        d.flags.writeable = False
        object.__setattr__(self, "d", d)

    @classmethod
    def from_points(cls, points: np.ndarray) -> "DistanceMatrix":
        """Euclidean distances between rows of an n x dim coordinate array."""
        pts = np.asarray(points, dtype=float)
        diff = pts[:, None, :] - pts[None, :, :]
        return cls(len(pts), np.sqrt((diff**2).sum(axis=-1)))


def knn_gaussian_graph(
    d: DistanceMatrix, k: int, sigma: float | None = None
) -> GraphShiftOperator:
    """k-nearest-neighbor adjacency with Gaussian kernel weights.

    Each node is connected to its k nearest neighbors (distance ties broken
    by lower node index) with weight exp(-d_ij^2 / sigma^2); the result is
    symmetrized by union, which can leave some rows with more than k edges.
    ``sigma=None`` sets the bandwidth to the mean selected-neighbor distance.
    """
    n = d.n
    if k <= 0:
        raise GraphError(f"k must be positive, got {k}")
    if k >= n:
        raise GraphError(f"k={k} must be smaller than the node count n={n}")
    selected: set[tuple[int, int]] = set()
    for i in range(n):
        # Stable argsort keeps lower indices first among equal distances.
        order = np.argsort(d.d[i], kind="stable")
        neighbors = [int(j) for j in order if j != i][:k]
        for j in neighbors:
            selected.add((i, j))
    if sigma is None:
        sigma = float(np.mean([d.d[i, j] for i, j in selected]))
        if sigma <= 0.0:
            raise GraphError("auto bandwidth is zero: all selected neighbor distances are 0")
    elif sigma <= 0.0:
        raise GraphError(f"sigma must be positive, got {sigma}")
    undirected = {(min(i, j), max(i, j)) for i, j in selected}
    triplets = []
    for i, j in sorted(undirected):
        w = float(np.exp(-(d.d[i, j] ** 2) / sigma**2))
        triplets.append((i, j, w))
        triplets.append((j, i, w))
    return GraphShiftOperator.from_triplets(n, triplets, kind=GsoKind.ADJACENCY)


def correlation_feature_graph(
    panel: SignalPanel, m: int, weighted: bool = True
) -> GraphShiftOperator:
    """Connect each feature to its m most correlated features.

    Pearson correlations are computed with all node-time samples pooled;
    edge weight is |correlation| (or 1.0 when ``weighted`` is off), the
    result is symmetrized by union with a zero diagonal.  Constant features
    get zero correlation everywhere and a warning; zero-weight selections
    produce no edge.
    """
    n_feat = panel.n_features
    if m <= 0 or m >= n_feat:
        raise GraphError(f"m={m} must be in [1, F) with F={n_feat}")
    if len(panel) < 2:
        raise GraphError("need at least 2 time samples to correlate features")
    samples = panel.data.reshape(-1, n_feat)
    centered = samples - samples.mean(axis=0)
    std = samples.std(axis=0)
    constant = std == 0.0
    if np.any(constant):
        warnings.warn(
            f"constant feature(s) {np.flatnonzero(constant).tolist()}: correlations set to 0",
            stacklevel=2,
        )
    safe_std = np.where(constant, 1.0, std)
    corr = (centered.T @ centered) / (samples.shape[0] * np.outer(safe_std, safe_std))
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    strength = np.abs(corr)
    np.fill_diagonal(strength, -np.inf)
    selected: set[tuple[int, int]] = set()
    for f in range(n_feat):
        order = np.argsort(-strength[f], kind="stable")
        for g in order[:m]:
            selected.add((f, int(g)))
    undirected = {(min(f, g), max(f, g)) for f, g in selected}
    triplets = []
    for f, g in sorted(undirected):
        w = float(strength[f, g]) if weighted else 1.0
        if w != 0.0:
            triplets.append((f, g, w))
            triplets.append((g, f, w))
    return GraphShiftOperator.from_triplets(
        n_feat, triplets, kind=GsoKind.ADJACENCY, edgeless_ok=True
    )


def normalized_laplacian(a: GraphShiftOperator) -> GraphShiftOperator:
    """L = I - D^{-1/2} A D^{-1/2} from a symmetric nonnegative adjacency.

    Isolated nodes (zero degree) get L_ii = 0: their D^{-1/2} term is
    treated as 0, so an edgeless graph maps to the zero matrix.
    """
    if not a.is_symmetric(tol=1e-10):
        raise GraphError("normalized Laplacian requires a symmetric adjacency")
    if a.nnz and np.any(a.matrix.data < 0.0):
        raise GraphError("normalized Laplacian requires nonnegative weights")
    deg = np.asarray(a.matrix.sum(axis=1)).ravel()
    active = deg > 0.0
    dinv_sqrt = np.where(active, 1.0 / np.sqrt(np.where(active, deg, 1.0)), 0.0)
    scale = sp.diags_array(dinv_sqrt, format="csr")
    lap = sp.diags_array(active.astype(float), format="csr") - scale @ a.matrix @ scale
    return GraphShiftOperator._finalize(
        a.n, sp.csr_array(lap), GsoKind.NORMALIZED_LAPLACIAN, edgeless_ok=True
    )


def product_gso(
    sf: GraphShiftOperator, s: GraphShiftOperator, spec: ProductGraphSpec
) -> GraphShiftOperator:
    """Combine feature and node graphs into the NF x NF product-graph GSO.

    Computes s00*(I_F (x) I_N) + s01*(I_F (x) S) + s10*(S_F (x) I_N)
    + s11*(S_F (x) S).  Index (f, v) maps to row f*N + v, matching the
    feature-block stacking of :func:`graphvar.panel.vec_by_feature`.
    """
    i_f = sp.eye_array(sf.n, format="csr")
    i_n = sp.eye_array(s.n, format="csr")
    total = None
    for coeff, left, right in (
        (spec.s00, i_f, i_n),
        (spec.s01, i_f, s.matrix),
        (spec.s10, sf.matrix, i_n),
        (spec.s11, sf.matrix, s.matrix),
    ):
        if coeff == 0.0:
            continue
        term = coeff * sp.kron(left, right, format="csr")
        total = term if total is None else total + term
    return GraphShiftOperator._finalize(
        sf.n * s.n, sp.csr_array(total), GsoKind.GENERIC, edgeless_ok=True
    )
