"""Coefficient estimation: multivariate least squares and joint fitting.

Every model family is linear in its coefficients, so one regression builder
serves them all: each free coefficient owns one column of the design matrix
(the signal term it multiplies), and the target stacks the observed signal
vectors.  The joint estimator alternates an exact least-squares step over
the coefficients with a support-constrained projected-gradient descent step
over the feature-graph weights, never increasing the objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .graphs import GraphShiftOperator, GsoKind
from .models import (
    PRODUCT_FAMILIES,
    CoefficientSet,
    Family,
    FittedModel,
    ModelSpec,
    param_count,
    predict_series,
)
from .panel import SignalPanel, unvec_by_feature, vec_by_feature


class EstimationError(RuntimeError):
    """Ill-posed regression input or a diverging joint fit."""


# -- regression assembly -------------------------------------------------------


@dataclass
class RegressionSystem:
    """Dense least-squares system A h = b for one model spec.

    ``column_map[j]`` names the coefficient of column j: ("scalar", p, k),
    ("feature", p, k, f), or ("matrix", p, k, f_in, f_out), with p the
    1-based lag and k the 0-based tap order.  Columns are ordered p-major,
    then k, then feature indices; for the combined family the product-branch
    scalar column follows the F per-feature columns of each (p, k).
    """

    a: np.ndarray
    b: np.ndarray
    column_map: tuple
    spec: ModelSpec
    n_features: int

    @property
    def well_posed(self) -> bool:
        return self.a.shape[0] >= self.a.shape[1]


def coefficient_columns(spec: ModelSpec, n_features: int) -> tuple:
    """Canonical coefficient ordering shared by packing and regression columns."""
    cols = []
    for p in range(1, spec.p + 1):
        for k in range(spec.k):
            if spec.family in (Family.GVAR, Family.PG_VAR):
                cols.append(("scalar", p, k))
            elif spec.family is Family.PER_FEATURE_GVAR:
                cols.extend(("feature", p, k, f) for f in range(n_features))
            elif spec.family is Family.PG_G_VAR:
                cols.extend(("feature", p, k, f) for f in range(n_features))
                cols.append(("scalar", p, k))
            else:
                cols.extend(
                    ("matrix", p, k, a, b)
                    for a in range(n_features)
                    for b in range(n_features)
                )
    return tuple(cols)


def pack_coefficients(spec: ModelSpec, coeffs: CoefficientSet, n_features: int) -> np.ndarray:
    vec = np.empty(param_count(spec, n_features))
    for j, label in enumerate(coefficient_columns(spec, n_features)):
        if label[0] == "scalar":
            vec[j] = coeffs.scalar_taps[label[1] - 1, label[2]]
        elif label[0] == "feature":
            vec[j] = coeffs.feature_taps[label[1] - 1, label[2], label[3]]
        else:
            vec[j] = coeffs.matrix_taps[label[1] - 1, label[2], label[3], label[4]]
    return vec


def unpack_coefficients(
    spec: ModelSpec, n_features: int, vector: np.ndarray
) -> CoefficientSet:
    zeros = CoefficientSet.zeros(spec, n_features)
    arrays = {
        "scalar": None if zeros.scalar_taps is None else zeros.scalar_taps.copy(),
        "feature": None if zeros.feature_taps is None else zeros.feature_taps.copy(),
        "matrix": None if zeros.matrix_taps is None else zeros.matrix_taps.copy(),
    }
    for j, label in enumerate(coefficient_columns(spec, n_features)):
        if label[0] == "scalar":
            arrays["scalar"][label[1] - 1, label[2]] = vector[j]
        elif label[0] == "feature":
            arrays["feature"][label[1] - 1, label[2], label[3]] = vector[j]
        else:
            arrays["matrix"][label[1] - 1, label[2], label[3], label[4]] = vector[j]
    return CoefficientSet(
        scalar_taps=arrays["scalar"],
        feature_taps=arrays["feature"],
        matrix_taps=arrays["matrix"],
    )


def _check_targets(spec: ModelSpec, panel: SignalPanel, t_range) -> list[int]:
    ts = list(t_range)
    if not ts:
        raise EstimationError("insufficient samples: empty target range")
    if min(ts) < spec.p:
        raise EstimationError(
            f"target range starts at {min(ts)} but needs {spec.p} slices of history"
        )
    if max(ts) >= len(panel):
        raise EstimationError(f"target index {max(ts)} outside panel of length {len(panel)}")
    return ts


def _node_shift_stacks(s, panel, sources, k_ord):
    """Map source time u -> stack [X_u, S X_u, ..., S^{K-1} X_u] of shape (K, N, F)."""
    stacks = {}
    for u in sources:
        stack = np.empty((k_ord, panel.n_nodes, panel.n_features))
        stack[0] = panel.data[u]
        for k in range(1, k_ord):
            stack[k] = s.matrix @ stack[k - 1]
        stacks[u] = stack
    return stacks


def _product_shift_stacks(prod, panel, sources, k_ord):
    stacks = {}
    dim = panel.n_nodes * panel.n_features
    for u in sources:
        stack = np.empty((k_ord, dim))
        stack[0] = vec_by_feature(panel.data[u])
        for k in range(1, k_ord):
            stack[k] = prod.matrix @ stack[k - 1]
        stacks[u] = stack
    return stacks


def build_regression(
    spec: ModelSpec,
    s: GraphShiftOperator,
    sf: GraphShiftOperator | None,
    panel: SignalPanel,
    t_range,
) -> RegressionSystem:
    """Stack one design-matrix column per free coefficient over the target range."""
    ts = _check_targets(spec, panel, t_range)
    n, n_feat = panel.n_nodes, panel.n_features
    dim = n * n_feat
    cols = coefficient_columns(spec, n_feat)
    sources = sorted({t - p for t in ts for p in range(1, spec.p + 1)})
    node_stacks = None
    prod_stacks = None
    if spec.family is not Family.PG_VAR:
        node_stacks = _node_shift_stacks(s, panel, sources, spec.k)
    if spec.family in PRODUCT_FAMILIES:
        model_stub = FittedModel(spec, CoefficientSet.zeros(spec, n_feat), s, sf)
        prod_stacks = _product_shift_stacks(model_stub.product_operator(), panel, sources, spec.k)

    a = np.zeros((len(ts) * dim, len(cols)))
    b = np.empty(len(ts) * dim)
    for i, t in enumerate(ts):
        rows = slice(i * dim, (i + 1) * dim)
        b[rows] = panel.vec_at(t)
        for j, label in enumerate(cols):
            kind, p, k = label[0], label[1], label[2]
            u = t - p
            if kind == "scalar":
                if spec.family in PRODUCT_FAMILIES:
                    a[rows, j] = prod_stacks[u][k]
                else:
                    a[rows, j] = vec_by_feature(node_stacks[u][k])
            elif kind == "feature":
                f = label[3]
                a.reshape(len(ts), n_feat, n, len(cols))[i, f, :, j] = node_stacks[u][k][:, f]
            else:
                f_in, f_out = label[3], label[4]
                a.reshape(len(ts), n_feat, n, len(cols))[i, f_out, :, j] = node_stacks[u][k][
                    :, f_in
                ]
    return RegressionSystem(a=a, b=b, column_map=cols, spec=spec, n_features=n_feat)


# -- least squares --------------------------------------------------------------


@dataclass
class LsFitResult:
    coefficients: np.ndarray
    rank: int
    rank_deficient: bool
    residual_norm: float


# Rank cutoff for the pivoted-QR solver, relative to the largest diagonal of
# R; scaled by the problem size as in numpy's lstsq default.
def _rank_cond(a: np.ndarray) -> float:
    return float(np.finfo(float).eps) * max(a.shape)


def ls_fit(system: RegressionSystem) -> LsFitResult:
    """Minimize ||b - A h||_2 by QR with column pivoting (gelsy).

    Rank-deficient systems return the minimum-norm solution with the
    diagnostic flag set; A^T A is never formed.
    """
    a, b = system.a, system.b
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise EstimationError("empty regression system")
    x, _, rank, _ = scipy.linalg.lstsq(a, b, cond=_rank_cond(a), lapack_driver="gelsy")
    residual = float(np.linalg.norm(b - a @ x))
    return LsFitResult(
        coefficients=np.asarray(x, dtype=float),
        rank=int(rank),
        rank_deficient=int(rank) < a.shape[1],
        residual_norm=residual,
    )


def _fit_mimo_blocks(spec, s, panel, ts):
    # The MIMO system is block-diagonal per output feature with one shared
    # regressor block, so a single factorization with F right-hand sides
    # replaces the (rows x PKF^2) full system.
    n, n_feat = panel.n_nodes, panel.n_features
    sources = sorted({t - p for t in ts for p in range(1, spec.p + 1)})
    stacks = _node_shift_stacks(s, panel, sources, spec.k)
    q_block = spec.p * spec.k * n_feat
    r = np.empty((len(ts) * n, q_block))
    targets = np.empty((len(ts) * n, n_feat))
    for i, t in enumerate(ts):
        rows = slice(i * n, (i + 1) * n)
        targets[rows] = panel.data[t]
        j = 0
        for p in range(1, spec.p + 1):
            for k in range(spec.k):
                r[rows, j : j + n_feat] = stacks[t - p][k]
                j += n_feat
    x, _, rank, _ = scipy.linalg.lstsq(r, targets, cond=_rank_cond(r), lapack_driver="gelsy")
    coeffs = CoefficientSet(matrix_taps=x.reshape(spec.p, spec.k, n_feat, n_feat))
    residual = float(np.linalg.norm(targets - r @ x))
    return coeffs, LsFitResult(
        coefficients=x.ravel(order="C").copy(),
        rank=int(rank) * n_feat,
        rank_deficient=int(rank) < q_block,
        residual_norm=residual,
    )


def _fit_per_feature_blocks(spec, s, panel, ts):
    # One independent (rows x PK) system per feature; same minimizer as the
    # full block-diagonal system.
    n, n_feat = panel.n_nodes, panel.n_features
    sources = sorted({t - p for t in ts for p in range(1, spec.p + 1)})
    stacks = _node_shift_stacks(s, panel, sources, spec.k)
    q_block = spec.p * spec.k
    feature_taps = np.empty((spec.p, spec.k, n_feat))
    rank_total = 0
    deficient = False
    res_sq = 0.0
    r = np.empty((len(ts) * n, q_block))
    for f in range(n_feat):
        bf = np.empty(len(ts) * n)
        for i, t in enumerate(ts):
            rows = slice(i * n, (i + 1) * n)
            bf[rows] = panel.data[t][:, f]
            j = 0
            for p in range(1, spec.p + 1):
                for k in range(spec.k):
                    r[rows, j] = stacks[t - p][k][:, f]
                    j += 1
        x, _, rank, _ = scipy.linalg.lstsq(r, bf, cond=_rank_cond(r), lapack_driver="gelsy")
        feature_taps[:, :, f] = x.reshape(spec.p, spec.k)
        rank_total += int(rank)
        deficient = deficient or int(rank) < q_block
        res_sq += float(np.sum((bf - r @ x) ** 2))
    coeffs = CoefficientSet(feature_taps=feature_taps)
    vector = pack_coefficients(spec, coeffs, n_feat)
    return coeffs, LsFitResult(
        coefficients=vector,
        rank=rank_total,
        rank_deficient=deficient,
        residual_norm=float(np.sqrt(res_sq)),
    )


def fit_model(
    spec: ModelSpec,
    s: GraphShiftOperator,
    sf: GraphShiftOperator | None,
    panel: SignalPanel,
    t_range=None,
    method: str = "auto",
) -> tuple[FittedModel, LsFitResult]:
    """Least-squares fit of one family over the target range (default [P, T)).

    ``method="auto"`` solves the MIMO and per-feature families through their
    block decompositions (identical minimizer, far smaller systems);
    ``method="full"`` always assembles the full design matrix.
    """
    if t_range is None:
        t_range = range(spec.p, len(panel))
    ts = _check_targets(spec, panel, t_range)
    if method not in ("auto", "full"):
        raise EstimationError(f"unknown fit method {method!r}")
    if method == "auto" and spec.family is Family.MIMO_GVAR:
        coeffs, fit = _fit_mimo_blocks(spec, s, panel, ts)
    elif method == "auto" and spec.family is Family.PER_FEATURE_GVAR:
        coeffs, fit = _fit_per_feature_blocks(spec, s, panel, ts)
    else:
        system = build_regression(spec, s, sf, panel, ts)
        fit = ls_fit(system)
        coeffs = unpack_coefficients(spec, panel.n_features, fit.coefficients)
    return FittedModel(spec=spec, coeffs=coeffs, s=s, sf=sf), fit


def objective_value(
    spec: ModelSpec,
    coeffs: CoefficientSet,
    s: GraphShiftOperator,
    sf: GraphShiftOperator | None,
    panel: SignalPanel,
    t_range,
) -> float:
    """Sum of squared one-step prediction errors over the target range."""
    ts = list(t_range)
    model = FittedModel(spec=spec, coeffs=coeffs, s=s, sf=sf)
    preds = predict_series(model, panel, ts)
    actual = panel.data[np.asarray(ts)]
    return float(np.sum((actual - preds) ** 2))


# -- feature-graph gradient ------------------------------------------------------


def _support_mask(sf: GraphShiftOperator, support) -> np.ndarray:
    if support is None:
        return sf.to_dense() != 0.0
    support = np.asarray(support, dtype=bool)
    if support.shape != (sf.n, sf.n):
        raise EstimationError(f"support mask shape {support.shape} does not match F={sf.n}")
    return support


def sf_objective_gradient(
    coeffs: CoefficientSet,
    sf: GraphShiftOperator,
    s: GraphShiftOperator,
    panel: SignalPanel,
    spec: ModelSpec,
    t_range=None,
    support=None,
) -> np.ndarray:
    """Analytic gradient of the squared-error objective w.r.t. S_F entries.

    Returns an F x F array that is zero off the support.  Uses the product
    rule for matrix powers, d(M^k) = sum_{r+s=k-1} M^r dM M^s, with
    dM/d(S_F)_{ab} = s10 (E_ab (x) I) + s11 (E_ab (x) S); everything is
    assembled matrix-free from shifted residuals and shifted regressors.
    """
    if spec.family not in PRODUCT_FAMILIES:
        raise EstimationError(f"family {spec.family.value} has no feature-graph dependence")
    if t_range is None:
        t_range = range(spec.p, len(panel))
    ts = _check_targets(spec, panel, t_range)
    mask = _support_mask(sf, support)
    n, n_feat = panel.n_nodes, panel.n_features
    s10, s11 = spec.product.s10, spec.product.s11
    if spec.k == 1 or (s10 == 0.0 and s11 == 0.0):
        return np.zeros((n_feat, n_feat))

    model = FittedModel(spec=spec, coeffs=coeffs, s=s, sf=sf)
    prod = model.product_operator().matrix
    prod_t = prod.T.tocsr()
    taps = coeffs.scalar_taps
    g10 = np.zeros((n_feat, n_feat))
    g11 = np.zeros((n_feat, n_feat))
    preds = predict_series(model, panel, ts)
    for i, t in enumerate(ts):
        resid = panel.vec_at(t) - vec_by_feature(preds[i])
        # U[r] = (M^T)^r residual, reused across lags.
        shifted_resid = [resid]
        for _ in range(spec.k - 2):
            shifted_resid.append(prod_t @ shifted_resid[-1])
        resid_mats = [unvec_by_feature(u, n) for u in shifted_resid]
        for p in range(1, spec.p + 1):
            v = vec_by_feature(panel.data[t - p])
            shifted_sig = [v]
            for _ in range(spec.k - 2):
                shifted_sig.append(prod @ shifted_sig[-1])
            sig_mats = [unvec_by_feature(w, n) for w in shifted_sig]
            for k in range(1, spec.k):
                hkp = taps[p - 1, k]
                if hkp == 0.0:
                    continue
                for r in range(k):
                    u_mat = resid_mats[r]
                    v_mat = sig_mats[k - 1 - r]
                    if s10 != 0.0:
                        g10 += hkp * (u_mat.T @ v_mat)
                    if s11 != 0.0:
                        g11 += hkp * (u_mat.T @ (s.matrix @ v_mat))
    grad = -2.0 * (s10 * g10 + s11 * g11)
    return np.where(mask, grad, 0.0)


def sf_objective_gradient_fd(
    coeffs: CoefficientSet,
    sf: GraphShiftOperator,
    s: GraphShiftOperator,
    panel: SignalPanel,
    spec: ModelSpec,
    t_range=None,
    support=None,
    step: float = 1e-6,
) -> np.ndarray:
    """Central finite-difference gradient over the supported S_F entries."""
    if t_range is None:
        t_range = range(spec.p, len(panel))
    ts = _check_targets(spec, panel, t_range)
    mask = _support_mask(sf, support)
    base = sf.to_dense()
    grad = np.zeros_like(base)
    for a, b in zip(*np.nonzero(mask)):
        for sign in (1.0, -1.0):
            bumped = base.copy()
            bumped[a, b] += sign * step
            gso = GraphShiftOperator.from_dense(bumped, GsoKind.GENERIC, edgeless_ok=True)
            value = objective_value(spec, coeffs, s, gso, panel, ts)
            grad[a, b] += sign * value
        grad[a, b] /= 2.0 * step
    return grad


def feature_graph_gradient(
    coeffs, sf, s, panel, spec, t_range=None, support=None, mode="analytic", fd_step=1e-6
) -> np.ndarray:
    """Gradient dispatcher; the finite-difference mode cross-validates the analytic code."""
    if mode == "analytic":
        return sf_objective_gradient(coeffs, sf, s, panel, spec, t_range, support)
    if mode in ("finite-difference", "fd"):
        return sf_objective_gradient_fd(coeffs, sf, s, panel, spec, t_range, support, fd_step)
    raise EstimationError(f"unknown gradient mode {mode!r}")


# -- feature-graph descent step --------------------------------------------------


@dataclass(frozen=True)
class SfStepConfig:
    """Inner projected-gradient configuration for the feature-graph step."""

    max_inner_iters: int = 20
    step_init: float = 1.0
    armijo_c: float = 1e-4
    max_backtracks: int = 40
    grad_tol: float = 0.0
    inner_tol: float = 1e-12
    gradient_mode: str = "analytic"
    fd_step: float = 1e-6
    enforce_symmetry: bool = False


@dataclass
class SfStepResult:
    sf: GraphShiftOperator
    f_initial: float
    f_final: float
    inner_iters: int


def sf_step(
    coeffs: CoefficientSet,
    sf: GraphShiftOperator,
    s: GraphShiftOperator,
    panel: SignalPanel,
    spec: ModelSpec,
    config: SfStepConfig | None = None,
    support=None,
    t_range=None,
) -> SfStepResult:
    """Decrease the objective over the supported entries of S_F.

    Projected gradient descent with Armijo backtracking; the accepted step
    of one iteration seeds the next at twice its size.  Guarantees
    f(output) <= f(input) and returns the input unchanged when no descent
    step is found.  Entries outside the support are never touched.
    """
    config = config or SfStepConfig()
    if t_range is None:
        t_range = range(spec.p, len(panel))
    ts = _check_targets(spec, panel, t_range)
    mask = _support_mask(sf, support)
    mat = sf.to_dense()

    def make(matrix):
        return GraphShiftOperator.from_dense(matrix, GsoKind.GENERIC, edgeless_ok=True)

    def f_of(matrix):
        return objective_value(spec, coeffs, s, make(matrix), panel, ts)

    f_cur = f_of(mat)
    f_init = f_cur
    step = config.step_init
    iters = 0
    changed = False
    for _ in range(config.max_inner_iters):
        grad = feature_graph_gradient(
            coeffs,
            make(mat),
            s,
            panel,
            spec,
            ts,
            mask,
            mode=config.gradient_mode,
            fd_step=config.fd_step,
        )
        if config.enforce_symmetry:
            grad = np.where(mask, 0.5 * (grad + grad.T), 0.0)
        grad_sq = float(np.sum(grad * grad))
        if grad_sq <= config.grad_tol**2:
            break
        alpha = step
        accepted = False
        for _ in range(config.max_backtracks):
            cand = mat - alpha * grad
            f_new = f_of(cand)
            if f_new <= f_cur - config.armijo_c * alpha * grad_sq:
                f_prev, f_cur = f_cur, f_new
                mat = cand
                step = 2.0 * alpha
                accepted = True
                changed = True
                break
            alpha *= 0.5
        if not accepted:
            break
        iters += 1
        if f_prev - f_cur <= config.inner_tol * max(f_prev, 1e-12):
            break
    return SfStepResult(
        sf=make(mat) if changed else sf,
        f_initial=f_init,
        f_final=f_cur,
        inner_iters=iters,
    )


# -- alternating minimization -----------------------------------------------------


@dataclass(frozen=True)
class JointFitConfig:
    """Outer-loop convergence control for the alternating estimator."""

    epsilon: float = 1e-6
    max_outer_iters: int = 50
    sf_step: SfStepConfig = field(default_factory=SfStepConfig)

    def __post_init__(self) -> None:
        if self.epsilon <= 0.0:
            raise EstimationError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_outer_iters < 1:
            raise EstimationError("max_outer_iters must be >= 1")


@dataclass
class JointFitResult:
    model: FittedModel
    sf: GraphShiftOperator
    trace: list
    outer_iters: int
    converged: bool
    ls_diagnostics: LsFitResult | None

    def report_dict(self) -> dict:
        return {
            "objective_trace": [float(v) for v in self.trace],
            "outer_iterations": self.outer_iters,
            "converged": self.converged,
            "final_objective": float(self.trace[-1]),
            "ls_rank": None if self.ls_diagnostics is None else self.ls_diagnostics.rank,
            "ls_rank_deficient": (
                None if self.ls_diagnostics is None else self.ls_diagnostics.rank_deficient
            ),
        }


def joint_fit(
    spec: ModelSpec,
    s: GraphShiftOperator,
    sf0: GraphShiftOperator,
    panel: SignalPanel,
    config: JointFitConfig | None = None,
    t_range=None,
) -> JointFitResult:
    """Alternate exact LS over coefficients with descent over S_F weights.

    The support of sf0 defines the feasible set; entries outside it stay
    exactly zero.  The trace starts at the zero-coefficient objective and
    appends one value per half-step; it is non-increasing by construction
    (each half-step is accepted only if it does not increase the objective).
    Terminates when the relative objective decrease between outer iterations
    drops below epsilon, or at max_outer_iters.
    """
    config = config or JointFitConfig()
    if spec.family not in PRODUCT_FAMILIES:
        raise EstimationError(
            f"joint fit applies to product-graph families, not {spec.family.value}"
        )
    if t_range is None:
        t_range = range(spec.p, len(panel))
    ts = _check_targets(spec, panel, t_range)
    support = sf0.to_dense() != 0.0
    if not support.any():
        raise EstimationError("empty feature-graph support")

    f_cur = float(sum(np.sum(panel.data[t] ** 2) for t in ts))
    trace = [f_cur]
    sf_cur = sf0
    coeffs_cur = CoefficientSet.zeros(spec, panel.n_features)
    last_fit = None
    f_outer_prev = f_cur
    converged = False
    outer = 0
    for outer in range(1, config.max_outer_iters + 1):
        model, fit = fit_model(spec, s, sf_cur, panel, ts)
        f_h = objective_value(spec, model.coeffs, s, sf_cur, panel, ts)
        if not np.isfinite(f_h):
            raise EstimationError(
                f"non-finite objective ({f_h}) after the coefficient step of outer "
                f"iteration {outer}"
            )
        if f_h <= f_cur:  # guards the exact-minimum property against fp noise
            coeffs_cur, f_cur, last_fit = model.coeffs, f_h, fit
        trace.append(f_cur)

        step_res = sf_step(coeffs_cur, sf_cur, s, panel, spec, config.sf_step, support, ts)
        sf_cur = step_res.sf
        if step_res.f_final <= f_cur:
            f_cur = step_res.f_final
        trace.append(f_cur)

        rel = abs(f_outer_prev - f_cur) / max(f_outer_prev, 1e-12)
        if rel < config.epsilon:
            converged = True
            break
        f_outer_prev = f_cur

    model = FittedModel(spec=spec, coeffs=coeffs_cur, s=s, sf=sf_cur)
    return JointFitResult(
        model=model,
        sf=sf_cur,
        trace=trace,
        outer_iters=outer,
        converged=converged,
        ls_diagnostics=last_fit,
    )
