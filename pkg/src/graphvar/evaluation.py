"""Sliding-window cross-validation, grid search, and RNMSE reporting.

Each window splits the series into an in-sample part (further split
temporally 70/30 into train and validation for the hyperparameter grid
search), an out-of-sample scoring part, and a left-out remainder; windows
advance by a fixed stride.  All forecasts are one-step-ahead with observed
history, so a prediction at time t only ever reads indices < t, and
hyperparameter selection never touches out-of-sample data.

Pooled RNMSE applies the error-energy ratio to all out-of-sample signals of
all windows jointly (not the mean of per-window values).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .estimation import JointFitConfig, fit_model, joint_fit
from .graphs import GraphShiftOperator, ProductGraphSpec
from .models import PRODUCT_FAMILIES, Family, ModelSpec, predict_series
from .panel import SignalPanel


class EvaluationError(ValueError):
    """Invalid window plan, degenerate reference signal, or empty grid."""


@dataclass(frozen=True)
class WindowPlan:
    """Sliding-window geometry; stride defaults to the out-of-sample length."""

    in_sample_len: int
    out_sample_len: int = 168
    n_iterations: int = 20
    stride: int | None = None
    train_fraction: float = 0.7

    def __post_init__(self) -> None:
        if self.stride is None:
            object.__setattr__(self, "stride", self.out_sample_len)
        if min(self.in_sample_len, self.out_sample_len, self.n_iterations, self.stride) <= 0:
            raise EvaluationError("window plan lengths must all be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise EvaluationError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}"
            )


def rnmse(predicted: np.ndarray, actual: np.ndarray) -> float:
    """sqrt(sum ||x_hat - x||^2 / sum ||x||^2) over every entry of the slices."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape:
        raise EvaluationError(
            f"shape mismatch: predicted {predicted.shape} vs actual {actual.shape}"
        )
    den = float(np.sum(actual**2))
    if den == 0.0:
        raise EvaluationError("degenerate reference signal: zero energy")
    return float(np.sqrt(np.sum((predicted - actual) ** 2) / den))


def plan_windows(t_total: int, plan: WindowPlan) -> list[tuple[range, range]]:
    """(in_range, out_range) per iteration; the left-out part is everything after."""
    windows = []
    span = plan.in_sample_len + plan.out_sample_len
    for i in range(plan.n_iterations):
        start = i * plan.stride
        if start + span > t_total:
            max_feasible = (t_total - span) // plan.stride + 1 if t_total >= span else 0
            raise EvaluationError(
                f"window plan overflows series of length {t_total}: "
                f"iteration {i + 1} needs index {start + span}; "
                f"max feasible iterations = {max_feasible}"
            )
        windows.append(
            (range(start, start + plan.in_sample_len), range(start + plan.in_sample_len, start + span))
        )
    return windows


# -- normalization ----------------------------------------------------------------


def zscore_stats(panel: SignalPanel, sample_range) -> tuple[np.ndarray, np.ndarray]:
    """Per (node, feature) mean and std over the given indices; zero stds become 1."""
    idx = np.asarray(list(sample_range))
    sample = panel.data[idx]
    mean = sample.mean(axis=0)
    std = sample.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return mean, std


def apply_zscore(panel: SignalPanel, mean: np.ndarray, std: np.ndarray) -> SignalPanel:
    return SignalPanel((panel.data - mean) / std, t0=panel.t0)


# -- grid search --------------------------------------------------------------------


@dataclass
class GridSearchResult:
    best_p: int
    best_k: int
    table: dict
    failures: dict


def _fit_for_mode(spec, s, sf, panel, targets, mode, joint_config):
    if mode == "joint" and spec.family in PRODUCT_FAMILIES:
        result = joint_fit(spec, s, sf, panel, joint_config, t_range=targets)
        return result.model, result
    model, _ = fit_model(spec, s, sf, panel, targets)
    return model, None


def grid_search(
    family: Family,
    s: GraphShiftOperator,
    sf: GraphShiftOperator | None,
    panel: SignalPanel,
    in_range: range,
    grid,
    train_fraction: float = 0.7,
    product: ProductGraphSpec | None = None,
    mode: str = "fixed",
    joint_config: JointFitConfig | None = None,
) -> GridSearchResult:
    """Pick (P, K) by one-step-ahead RNMSE on the last 30% of the in-sample part.

    The split is temporal (first 70% train) to respect serial dependence;
    regressor histories never precede the in-sample start.  A failed fit
    scores +inf and is recorded; ties break by smaller P*K, then smaller P.
    """
    cells = [(int(p), int(k)) for p, k in grid]
    if not cells:
        raise EvaluationError("empty hyperparameter grid")
    n_train = int(len(in_range) * train_fraction)
    valid = range(in_range.start + n_train, in_range.stop)
    table: dict = {}
    failures: dict = {}
    for p, k in cells:
        spec = ModelSpec(family=family, p=p, k=k, product=product)
        try:
            targets = range(in_range.start + p, in_range.start + n_train)
            if len(targets) < 1 or len(valid) < 1:
                raise EvaluationError(
                    f"in-sample window of {len(in_range)} too short for P={p}"
                )
            model, _ = _fit_for_mode(spec, s, sf, panel, targets, mode, joint_config)
            preds = predict_series(model, panel, valid)
            table[(p, k)] = rnmse(preds, panel.data[np.asarray(valid)])
        except Exception as exc:  # scored, recorded, and skipped
            table[(p, k)] = math.inf
            failures[(p, k)] = f"{type(exc).__name__}: {exc}"
    best_p, best_k = min(cells, key=lambda c: (table[c], c[0] * c[1], c[0]))
    return GridSearchResult(best_p=best_p, best_k=best_k, table=table, failures=failures)


# -- full evaluation ----------------------------------------------------------------


@dataclass
class WindowScore:
    family: str
    in_sample_len: int
    window: int
    p: int
    k: int
    rnmse_value: float
    error: str | None = None
    outer_iters: int | None = None
    final_objective: float | None = None


@dataclass
class EvaluationReport:
    """Per-window scores plus pooled RNMSE per (family, in_sample_len)."""

    rows: list = field(default_factory=list)
    pooled: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    CSV_COLUMNS = (
        "family",
        "in_sample_len",
        "window",
        "P",
        "K",
        "rnmse",
        "outer_iters",
        "final_objective",
        "error",
    )

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            for key, value in sorted(self.metadata.items()):
                fh.write(f"# {key}={value}\n")
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [
                        row.family,
                        row.in_sample_len,
                        row.window,
                        row.p,
                        row.k,
                        repr(row.rnmse_value),
                        "" if row.outer_iters is None else row.outer_iters,
                        "" if row.final_objective is None else repr(row.final_objective),
                        row.error or "",
                    ]
                )

    def to_json_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "rows": [vars(row) for row in self.rows],
            "pooled": [
                {"family": fam, "in_sample_len": length, "rnmse": value}
                for (fam, length), value in sorted(self.pooled.items())
            ],
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))


def evaluate(
    families,
    s: GraphShiftOperator,
    sf: GraphShiftOperator | None,
    panel: SignalPanel,
    plan: WindowPlan,
    grid,
    product: ProductGraphSpec | None = None,
    mode: str = "fixed",
    in_sample_lens=None,
    normalize: bool = True,
    raw_scale: bool = False,
    joint_config: JointFitConfig | None = None,
    metadata: dict | None = None,
) -> EvaluationReport:
    """Grid-search, refit, and score every family over the window sweep.

    Per window: z-score the panel with in-sample statistics (unless
    ``normalize`` is off), grid-search (P, K) inside the in-sample part,
    refit on the full in-sample part, then score one-step-ahead RNMSE on the
    out-of-sample part.  RNMSE is reported on the normalized scale unless
    ``raw_scale`` inverts the scaling first.  Fit failures become per-window
    diagnostics without aborting the sweep.
    """
    if mode not in ("fixed", "joint"):
        raise EvaluationError(f"unknown estimation mode {mode!r}")
    families = [Family.from_string(f) if isinstance(f, str) else f for f in families]
    if not families:
        raise EvaluationError("empty family list")
    grid = [(int(p), int(k)) for p, k in grid]
    lens = list(in_sample_lens) if in_sample_lens is not None else [plan.in_sample_len]
    report = EvaluationReport(metadata=dict(metadata or {}))
    for family in families:
        needs_sf = family in PRODUCT_FAMILIES
        for in_len in lens:
            plan_l = replace(plan, in_sample_len=int(in_len))
            windows = plan_windows(len(panel), plan_l)
            num = 0.0
            den = 0.0
            for w_idx, (in_range, out_range) in enumerate(windows):
                try:
                    if normalize:
                        mean, std = zscore_stats(panel, in_range)
                        work = apply_zscore(panel, mean, std)
                    else:
                        mean, std = np.zeros(panel.data.shape[1:]), np.ones(panel.data.shape[1:])
                        work = panel
                    search = grid_search(
                        family,
                        s,
                        sf if needs_sf else None,
                        work,
                        in_range,
                        grid,
                        plan_l.train_fraction,
                        product,
                        mode,
                        joint_config,
                    )
                    spec = ModelSpec(
                        family=family, p=search.best_p, k=search.best_k, product=product
                    )
                    targets = range(in_range.start + spec.p, in_range.stop)
                    model, joint_result = _fit_for_mode(
                        spec, s, sf if needs_sf else None, work, targets, mode, joint_config
                    )
                    preds = predict_series(model, work, out_range)
                    actual = work.data[np.asarray(out_range)]
                    if raw_scale:
                        preds = preds * std + mean
                        actual = actual * std + mean
                    num += float(np.sum((preds - actual) ** 2))
                    den += float(np.sum(actual**2))
                    report.rows.append(
                        WindowScore(
                            family=family.value,
                            in_sample_len=int(in_len),
                            window=w_idx,
                            p=spec.p,
                            k=spec.k,
                            rnmse_value=rnmse(preds, actual),
                            outer_iters=(
                                None if joint_result is None else joint_result.outer_iters
                            ),
                            final_objective=(
                                None if joint_result is None else float(joint_result.trace[-1])
                            ),
                        )
                    )
                except Exception as exc:
                    report.rows.append(
                        WindowScore(
                            family=family.value,
                            in_sample_len=int(in_len),
                            window=w_idx,
                            p=0,
                            k=0,
                            rnmse_value=math.inf,
                            error=f"{type(exc).__name__}: {exc}",
                        )
                    )
            report.pooled[(family.value, int(in_len))] = (
                float(np.sqrt(num / den)) if den > 0.0 else math.nan
            )
    return report
