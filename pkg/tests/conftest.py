"""Shared builders for graphs, models, and synthetic ground truth."""

from pathlib import Path

import numpy as np
import pytest

import graphvar as gv

FIXTURE_DIR = Path(__file__).parent / "fixtures"
BEIJING_MINI = FIXTURE_DIR / "beijing_mini"


def random_dense_gso(n, rng, kind=gv.GsoKind.GENERIC):
    return gv.GraphShiftOperator.from_dense(rng.standard_normal((n, n)), kind=kind)


def laplacian_pair(n_nodes=4, n_features=3, seed=0):
    """Normalized-Laplacian station/feature graphs from seeded geometry."""
    rng = np.random.default_rng(seed)
    points = rng.random((n_nodes, 2))
    s_adj = gv.knn_gaussian_graph(
        gv.DistanceMatrix.from_points(points), k=min(3, n_nodes - 1)
    )
    pairs = sorted({(min(i, (i + 1) % n_features), max(i, (i + 1) % n_features))
                    for i in range(n_features)})
    triplets = []
    for i, j in pairs:
        w = 0.5 + rng.random()
        triplets.extend([(i, j, w), (j, i, w)])
    f_adj = gv.GraphShiftOperator.from_triplets(
        n_features, triplets, kind=gv.GsoKind.ADJACENCY
    )
    return gv.normalized_laplacian(s_adj), gv.normalized_laplacian(f_adj)


def random_coefficients(spec, n_features, rng):
    zeros = gv.CoefficientSet.zeros(spec, n_features)
    return gv.CoefficientSet(
        scalar_taps=None if zeros.scalar_taps is None
        else rng.standard_normal(zeros.scalar_taps.shape),
        feature_taps=None if zeros.feature_taps is None
        else rng.standard_normal(zeros.feature_taps.shape),
        matrix_taps=None if zeros.matrix_taps is None
        else rng.standard_normal(zeros.matrix_taps.shape),
    )


def stable_truth(spec, s, sf, seed, radius=0.9, n_features=None):
    """Random coefficients rescaled to the requested companion radius.

    Combined-family coefficients are canonicalized so they are directly
    comparable to least-squares minimum-norm refits.
    """
    rng = np.random.default_rng(seed)
    if n_features is None:
        if sf is None:
            raise ValueError("pass n_features when no feature graph is given")
        n_features = sf.n
    coeffs = random_coefficients(spec, n_features, rng)
    if spec.family is gv.Family.PG_G_VAR:
        coeffs = gv.canonical_pg_g_var(coeffs)
    model = gv.FittedModel(spec, coeffs, s, sf)
    return gv.rescaled_to_radius(model, radius)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
