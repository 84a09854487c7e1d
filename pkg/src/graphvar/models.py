"""One-step-ahead predictors for the graph-based VAR model families.

All five families share the contract predict(model, history) -> X_hat
(N x F), where history[0] is the most recent slice X_{t-1} and history[p-1]
is X_{t-p}.  Coefficients are stored so that prediction is a plain sum of
regressor terms (the "plus" sign convention); estimators fit the same
convention directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .graphs import GraphShiftOperator, ProductGraphSpec, product_gso
from .panel import SignalPanel, unvec_by_feature, vec_by_feature


class ModelError(ValueError):
    """Invalid model specification, coefficients, or prediction inputs."""


class Family(Enum):
    GVAR = "gvar"
    PER_FEATURE_GVAR = "per_feature_gvar"
    PG_VAR = "pg_var"
    PG_G_VAR = "pg_g_var"
    MIMO_GVAR = "mimo_gvar"

    @classmethod
    def from_string(cls, name: str) -> "Family":
        try:
            return cls(name.lower())
        except ValueError as exc:
            raise ModelError(
                f"unknown model family {name!r}; expected one of {[f.value for f in cls]}"
            ) from exc


# Families whose prediction involves the product-graph operator.
PRODUCT_FAMILIES = frozenset({Family.PG_VAR, Family.PG_G_VAR})


@dataclass(frozen=True)
class ModelSpec:
    """Model family plus lag order P, filter length K, and product type."""

    family: Family
    p: int
    k: int
    product: ProductGraphSpec | None = None

    def __post_init__(self) -> None:
        if self.p < 1:
            raise ModelError(f"lag order P must be >= 1, got {self.p}")
        if self.k < 1:
            raise ModelError(f"filter length K must be >= 1, got {self.k}")
        if self.family in PRODUCT_FAMILIES and self.product is None:
            raise ModelError(f"family {self.family.value} requires a product-graph spec")


def param_count(spec: ModelSpec, n_features: int) -> int:
    """Number of free coefficients of the family at P, K and F features."""
    pk = spec.p * spec.k
    if spec.family in (Family.GVAR, Family.PG_VAR):
        return pk
    if spec.family is Family.PER_FEATURE_GVAR:
        return pk * n_features
    if spec.family is Family.PG_G_VAR:
        return pk * (n_features + 1)
    if spec.family is Family.MIMO_GVAR:
        return pk * n_features**2
    raise ModelError(f"unhandled family {spec.family}")


@dataclass(frozen=True)
class CoefficientSet:
    """Estimated filter coefficients; only the family's fields are populated.

    scalar_taps  (P, K)        shared taps (GVAR, PG_VAR, product part of PG_G_VAR)
    feature_taps (P, K, F)     per-feature taps (PER_FEATURE_GVAR, PG_G_VAR)
    matrix_taps  (P, K, F, F)  full mixing matrices H_kp (MIMO_GVAR);
                               prediction right-multiplies: S^k X H_kp
    """

    scalar_taps: np.ndarray | None = None
    feature_taps: np.ndarray | None = None
    matrix_taps: np.ndarray | None = None

    def __post_init__(self) -> None:
        for name in ("scalar_taps", "feature_taps", "matrix_taps"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} contains non-finite values")
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, spec: ModelSpec, n_features: int) -> "CoefficientSet":
        p, k, f = spec.p, spec.k, n_features
        if spec.family in (Family.GVAR, Family.PG_VAR):
            return cls(scalar_taps=np.zeros((p, k)))
        if spec.family is Family.PER_FEATURE_GVAR:
            return cls(feature_taps=np.zeros((p, k, f)))
        if spec.family is Family.PG_G_VAR:
            return cls(scalar_taps=np.zeros((p, k)), feature_taps=np.zeros((p, k, f)))
        return cls(matrix_taps=np.zeros((p, k, f, f)))

    def validate(self, spec: ModelSpec, n_features: int) -> None:
        p, k, f = spec.p, spec.k, n_features
        wants = {
            Family.GVAR: {"scalar_taps": (p, k)},
            Family.PG_VAR: {"scalar_taps": (p, k)},
            Family.PER_FEATURE_GVAR: {"feature_taps": (p, k, f)},
            Family.PG_G_VAR: {"scalar_taps": (p, k), "feature_taps": (p, k, f)},
            Family.MIMO_GVAR: {"matrix_taps": (p, k, f, f)},
        }[spec.family]
        for name in ("scalar_taps", "feature_taps", "matrix_taps"):
            arr = getattr(self, name)
            if name in wants:
                if arr is None:
                    raise ModelError(f"family {spec.family.value} requires {name}")
                if arr.shape != wants[name]:
                    raise ModelError(
                        f"{name} shape {arr.shape} does not match expected {wants[name]}"
                    )
            elif arr is not None:
                raise ModelError(f"family {spec.family.value} must not populate {name}")


@dataclass
class FittedModel:
    """A model spec bound to estimated coefficients and its graphs.

    Immutable after estimation; the product-graph operator is derived lazily
    and cached.  ``sign_convention`` marks that prediction is a plain sum of
    regressor terms.
    """

    spec: ModelSpec
    coeffs: CoefficientSet
    s: GraphShiftOperator
    sf: GraphShiftOperator | None = None
    sign_convention: str = "plus"
    _product: GraphShiftOperator | None = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.spec.family in PRODUCT_FAMILIES and self.sf is None:
            raise ModelError(f"family {self.spec.family.value} requires a feature graph")
        n_features = self._n_features()
        if n_features is not None:
            self.coeffs.validate(self.spec, n_features)

    def _n_features(self) -> int | None:
        if self.sf is not None:
            return self.sf.n
        for arr in (self.coeffs.feature_taps, self.coeffs.matrix_taps):
            if arr is not None:
                return arr.shape[2]
        return None

    def product_operator(self) -> GraphShiftOperator:
        if self._product is None:
            self._product = product_gso(self.sf, self.s, self.spec.product)
        return self._product


def _history_stack(model: FittedModel, history) -> np.ndarray:
    hist = np.asarray(history, dtype=float)
    if hist.ndim != 3:
        raise ModelError(f"history must be a stack of N x F slices, got shape {hist.shape}")
    if hist.shape[0] < model.spec.p:
        raise ModelError(
            f"insufficient history: need {model.spec.p} slices, got {hist.shape[0]}"
        )
    if hist.shape[1] != model.s.n:
        raise ModelError(f"history node count {hist.shape[1]} does not match n={model.s.n}")
    return hist[: model.spec.p]


def _add_column_taps(smat, taps: np.ndarray, hist: np.ndarray, acc: np.ndarray) -> None:
    """Accumulate sum_p sum_k S^k X_{t-p} * taps[p, k, ...] into acc.

    taps of shape (P, K) applies one scalar per (p, k); shape (P, K, F)
    scales each feature column separately.
    """
    n_lags, n_taps = taps.shape[0], taps.shape[1]
    for p in range(n_lags):
        z = hist[p]
        acc += z * taps[p, 0]
        for k in range(1, n_taps):
            z = smat @ z
            acc += z * taps[p, k]


def _add_product_taps(
    prod_mat, scalar_taps: np.ndarray, hist: np.ndarray, acc_vec: np.ndarray
) -> None:
    n_lags, n_taps = scalar_taps.shape
    for p in range(n_lags):
        z = vec_by_feature(hist[p])
        acc_vec += scalar_taps[p, 0] * z
        for k in range(1, n_taps):
            z = prod_mat @ z
            acc_vec += scalar_taps[p, k] * z


def predict_gvar(model: FittedModel, history) -> np.ndarray:
    """Every feature column filtered by the same scalar-tap polynomial."""
    hist = _history_stack(model, history)
    acc = np.zeros(hist.shape[1:])
    _add_column_taps(model.s.matrix, model.coeffs.scalar_taps, hist, acc)
    return acc


def predict_per_feature_gvar(model: FittedModel, history) -> np.ndarray:
    """One independent scalar-tap filter per feature."""
    hist = _history_stack(model, history)
    acc = np.zeros(hist.shape[1:])
    _add_column_taps(model.s.matrix, model.coeffs.feature_taps, hist, acc)
    return acc


def predict_pgvar(model: FittedModel, history) -> np.ndarray:
    """Scalar-tap filter in the product-graph operator on the stacked signal."""
    hist = _history_stack(model, history)
    acc = np.zeros(hist.shape[1] * hist.shape[2])
    _add_product_taps(model.product_operator().matrix, model.coeffs.scalar_taps, hist, acc)
    return unvec_by_feature(acc, hist.shape[1])


def predict_pg_g_var(model: FittedModel, history) -> np.ndarray:
    """Sum of a per-feature filter (feature_taps) and a product-graph filter (scalar_taps)."""
    hist = _history_stack(model, history)
    acc = np.zeros(hist.shape[1:])
    _add_column_taps(model.s.matrix, model.coeffs.feature_taps, hist, acc)
    acc_vec = vec_by_feature(acc)
    _add_product_taps(model.product_operator().matrix, model.coeffs.scalar_taps, hist, acc_vec)
    return unvec_by_feature(acc_vec, hist.shape[1])


def predict_mimo_gvar(model: FittedModel, history) -> np.ndarray:
    """X_hat = sum_p sum_k S^k X_{t-p} H_kp: graph shift left, feature mix right."""
    hist = _history_stack(model, history)
    taps = model.coeffs.matrix_taps
    acc = np.zeros(hist.shape[1:])
    for p in range(taps.shape[0]):
        z = hist[p]
        acc += z @ taps[p, 0]
        for k in range(1, taps.shape[1]):
            z = model.s.matrix @ z
            acc += z @ taps[p, k]
    return acc


_PREDICTORS = {
    Family.GVAR: predict_gvar,
    Family.PER_FEATURE_GVAR: predict_per_feature_gvar,
    Family.PG_VAR: predict_pgvar,
    Family.PG_G_VAR: predict_pg_g_var,
    Family.MIMO_GVAR: predict_mimo_gvar,
}


def canonical_pg_g_var(coeffs: CoefficientSet) -> CoefficientSet:
    """Minimum-norm representative of a combined model's coefficients.

    At tap order zero both branches multiply the identity (the product
    operator's zeroth power and the per-feature diagonal), so per lag the
    direction "add c to every feature tap, subtract c from the scalar tap"
    never changes predictions.  Least squares resolves the redundancy with
    the minimum-norm solution; this projects arbitrary coefficients onto
    the same representative, so coefficient-level comparisons are
    well-defined.
    """
    if coeffs.scalar_taps is None or coeffs.feature_taps is None:
        raise ModelError("canonical form applies to combined-family coefficients")
    scalar = coeffs.scalar_taps.copy()
    feature = coeffs.feature_taps.copy()
    n_features = feature.shape[2]
    for p in range(scalar.shape[0]):
        shift = (feature[p, 0].sum() - scalar[p, 0]) / (n_features + 1)
        feature[p, 0] -= shift
        scalar[p, 0] += shift
    return CoefficientSet(scalar_taps=scalar, feature_taps=feature)


def predict(model: FittedModel, history) -> np.ndarray:
    """Dispatch to the family predictor; never reads history beyond lag P."""
    return _PREDICTORS[model.spec.family](model, history)


def predict_series(model: FittedModel, panel: SignalPanel, t_range) -> np.ndarray:
    """One-step-ahead predictions for each t in t_range using observed history."""
    ts = list(t_range)
    out = np.empty((len(ts), panel.n_nodes, panel.n_features))
    p = model.spec.p
    for i, t in enumerate(ts):
        if t < p or t >= len(panel):
            raise ModelError(f"target index {t} needs {p} past slices within the panel")
        out[i] = predict(model, panel.data[t - p : t][::-1])
    return out


def lag_matrices(model: FittedModel, n_features: int | None = None) -> np.ndarray:
    """Dense NF x NF lag operators B_p with x_hat_t = sum_p B_p x_{t-p}.

    Materializes shift powers; intended for test-scale oracles and stability
    checks, not production prediction.  Scalar-tap families apply to any
    feature count, so ``n_features`` must be given when the model itself
    does not pin one down.
    """
    n = model.s.n
    if n_features is None:
        n_features = model._n_features()
    if n_features is None:
        raise ModelError(
            "feature count is not derivable from a scalar-tap model; pass n_features"
        )
    p_ord, k_ord = model.spec.p, model.spec.k
    s_pows = [np.eye(n)]
    s_dense = model.s.to_dense()
    for _ in range(1, k_ord):
        s_pows.append(s_dense @ s_pows[-1])
    if model.spec.family in PRODUCT_FAMILIES:
        prod_pows = [np.eye(n * n_features)]
        prod_dense = model.product_operator().to_dense()
        for _ in range(1, k_ord):
            prod_pows.append(prod_dense @ prod_pows[-1])
    out = np.zeros((p_ord, n * n_features, n * n_features))
    for p in range(p_ord):
        for k in range(k_ord):
            if model.spec.family is Family.GVAR:
                out[p] += model.coeffs.scalar_taps[p, k] * np.kron(
                    np.eye(n_features), s_pows[k]
                )
            elif model.spec.family is Family.PER_FEATURE_GVAR:
                out[p] += np.kron(np.diag(model.coeffs.feature_taps[p, k]), s_pows[k])
            elif model.spec.family is Family.PG_VAR:
                out[p] += model.coeffs.scalar_taps[p, k] * prod_pows[k]
            elif model.spec.family is Family.PG_G_VAR:
                out[p] += np.kron(np.diag(model.coeffs.feature_taps[p, k]), s_pows[k])
                out[p] += model.coeffs.scalar_taps[p, k] * prod_pows[k]
            else:
                # Right-multiplication by H_kp is (H_kp^T (x) S^k) on the stacked vector.
                out[p] += np.kron(model.coeffs.matrix_taps[p, k].T, s_pows[k])
    return out


# -- JSON serialization ------------------------------------------------------


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _array_doc(arr: np.ndarray | None):
    if arr is None:
        return None
    return {"shape": list(arr.shape), "data": arr.ravel(order="C").tolist()}


def _array_from_doc(doc) -> np.ndarray | None:
    if doc is None:
        return None
    return np.asarray(doc["data"], dtype=float).reshape(doc["shape"])


def model_to_dict(model: FittedModel, s_path=None, sf_path=None) -> dict:
    """JSON document: spec, row-major coefficient arrays with explicit shapes,
    and graph references by file path plus content hash."""

    def graph_ref(path):
        if path is None:
            return None
        return {"path": str(path), "sha256": _file_sha256(path)}

    return {
        "family": model.spec.family.value,
        "p": model.spec.p,
        "k": model.spec.k,
        "product": list(model.spec.product.as_tuple()) if model.spec.product else None,
        "sign_convention": model.sign_convention,
        "coefficients": {
            "scalar_taps": _array_doc(model.coeffs.scalar_taps),
            "feature_taps": _array_doc(model.coeffs.feature_taps),
            "matrix_taps": _array_doc(model.coeffs.matrix_taps),
        },
        "station_graph": graph_ref(s_path),
        "feature_graph": graph_ref(sf_path),
    }


def save_model(model: FittedModel, path, s_path=None, sf_path=None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, s_path, sf_path), indent=2))


def load_model(
    path,
    s: GraphShiftOperator | None = None,
    sf: GraphShiftOperator | None = None,
    verify_hashes: bool = True,
) -> FittedModel:
    """Load a saved model; graphs come from the caller or from the stored refs."""
    doc = json.loads(Path(path).read_text())

    def resolve(ref, given, label):
        if given is not None:
            return given
        if ref is None:
            return None
        gpath = Path(ref["path"])
        if not gpath.is_absolute():
            gpath = Path(path).parent / gpath
        if verify_hashes and _file_sha256(gpath) != ref["sha256"]:
            raise ModelError(f"{label} graph file {gpath} does not match its stored hash")
        return GraphShiftOperator.load(gpath)

    s = resolve(doc.get("station_graph"), s, "station")
    sf = resolve(doc.get("feature_graph"), sf, "feature")
    if s is None:
        raise ModelError("no station graph available: pass s= or save with s_path")
    product = doc.get("product")
    spec = ModelSpec(
        family=Family.from_string(doc["family"]),
        p=int(doc["p"]),
        k=int(doc["k"]),
        product=ProductGraphSpec(*product) if product else None,
    )
    coeffs = CoefficientSet(
        scalar_taps=_array_from_doc(doc["coefficients"]["scalar_taps"]),
        feature_taps=_array_from_doc(doc["coefficients"]["feature_taps"]),
        matrix_taps=_array_from_doc(doc["coefficients"]["matrix_taps"]),
    )
    return FittedModel(
        spec=spec,
        coeffs=coeffs,
        s=s,
        sf=sf,
        sign_convention=doc.get("sign_convention", "plus"),
    )
