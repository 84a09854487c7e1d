"""Window planning, grid search, and the evaluation sweep."""

import math

import numpy as np
import pytest

import graphvar as gv
from graphvar.evaluation import EvaluationError, GridSearchResult, grid_search

from conftest import laplacian_pair, stable_truth


class TestRnmse:
    def test_perfect_prediction(self, rng):
        x = rng.standard_normal((5, 3, 2))
        assert gv.rnmse(x, x) == 0.0

    def test_zero_prediction(self, rng):
        x = rng.standard_normal((5, 3, 2))
        assert gv.rnmse(np.zeros_like(x), x) == pytest.approx(1.0)

    def test_doubled_prediction(self, rng):
        x = rng.standard_normal((5, 3, 2))
        assert gv.rnmse(2.0 * x, x) == pytest.approx(1.0)

    def test_degenerate_reference(self):
        with pytest.raises(EvaluationError, match="degenerate reference"):
            gv.rnmse(np.ones((2, 2)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(EvaluationError, match="shape"):
            gv.rnmse(np.ones((2, 2)), np.ones((2, 3)))


class TestPlanWindows:
    def test_basic_arithmetic(self):
        plan = gv.WindowPlan(in_sample_len=100, out_sample_len=50, n_iterations=3, stride=50)
        windows = gv.plan_windows(500, plan)
        assert [w[0].start for w in windows] == [0, 50, 100]
        for in_r, out_r in windows:
            assert len(in_r) == 100 and len(out_r) == 50
            assert out_r.start == in_r.stop

    def test_paper_scale_arithmetic(self):
        plan = gv.WindowPlan(in_sample_len=2000, out_sample_len=168, n_iterations=20)
        assert plan.stride == 168  # default stride equals the out-of-sample length
        windows = gv.plan_windows(9918, plan)
        assert len(windows) == 20
        assert windows[-1][1].stop == 19 * 168 + 2000 + 168 == 5360

    def test_overflow_reports_max_feasible(self):
        plan = gv.WindowPlan(in_sample_len=100, out_sample_len=50, n_iterations=10, stride=50)
        with pytest.raises(EvaluationError, match="max feasible iterations = 8"):
            gv.plan_windows(500, plan)

    def test_plan_validation(self):
        with pytest.raises(EvaluationError):
            gv.WindowPlan(in_sample_len=0)
        with pytest.raises(EvaluationError):
            gv.WindowPlan(in_sample_len=10, train_fraction=1.0)


def _gvar_panel(seed=60, t_len=400, noise=0.02, p=2, k=2):
    s, sf = laplacian_pair(4, 2, seed=seed)
    spec = gv.ModelSpec(gv.Family.GVAR, p=p, k=k)
    truth = stable_truth(spec, s, None, seed=seed + 1, radius=0.93, n_features=2)
    panel = gv.generate_synthetic(
        gv.SyntheticSpec(model=truth, noise_std=noise, t_len=t_len, seed=seed + 2,
                         n_features=2)
    )
    return panel, s, sf


class TestGridSearch:
    def test_singleton_grid(self):
        panel, s, _ = _gvar_panel()
        result = grid_search(
            gv.Family.GVAR, s, None, panel, range(0, 200), [(1, 1)]
        )
        assert (result.best_p, result.best_k) == (1, 1)
        assert set(result.table) == {(1, 1)}

    def test_recovers_generating_orders(self):
        panel, s, _ = _gvar_panel(seed=62, noise=0.01)
        grid = [(p, k) for p in (1, 2, 3) for k in (1, 2, 3)]
        result = grid_search(gv.Family.GVAR, s, None, panel, range(0, 300), grid)
        assert (result.best_p, result.best_k) == (2, 2)

    def test_failed_cells_scored_infinite(self):
        panel, s, _ = _gvar_panel(seed=62, t_len=60)
        # P=40 cannot fit inside the 35-sample training part
        result = grid_search(
            gv.Family.GVAR, s, None, panel, range(0, 50), [(1, 1), (40, 1)]
        )
        assert result.table[(40, 1)] == math.inf
        assert (40, 1) in result.failures
        assert (result.best_p, result.best_k) == (1, 1)

    def test_empty_grid_rejected(self):
        panel, s, _ = _gvar_panel(seed=63, t_len=60)
        with pytest.raises(EvaluationError, match="empty"):
            grid_search(gv.Family.GVAR, s, None, panel, range(0, 50), [])

    def test_selection_ignores_out_of_sample_data(self):
        panel, s, _ = _gvar_panel(seed=64, t_len=260)
        grid = [(p, k) for p in (1, 2) for k in (1, 2)]
        in_range = range(0, 200)
        base = grid_search(gv.Family.GVAR, s, None, panel, in_range, grid)
        tampered = panel.data.copy()
        tampered[200:] = 1e3  # garbage after the in-sample part
        redo = grid_search(
            gv.Family.GVAR, s, None, gv.SignalPanel(tampered), in_range, grid
        )
        assert base.table == redo.table
        assert (base.best_p, base.best_k) == (redo.best_p, redo.best_k)

    def test_tie_break_prefers_smaller_models(self, monkeypatch):
        panel, s, _ = _gvar_panel(seed=65, t_len=80)
        calls = []

        def fake_rnmse(pred, actual):
            calls.append(None)
            return 0.25  # force exact ties across the whole grid

        monkeypatch.setattr("graphvar.evaluation.rnmse", fake_rnmse)
        grid = [(2, 2), (1, 2), (2, 1), (1, 1), (4, 1)]
        result = grid_search(gv.Family.GVAR, s, None, panel, range(0, 60), grid)
        assert (result.best_p, result.best_k) == (1, 1)


class TestEvaluate:
    def test_single_family_single_window(self):
        panel, s, _ = _gvar_panel(seed=66, t_len=160)
        plan = gv.WindowPlan(in_sample_len=100, out_sample_len=30, n_iterations=1)
        report = gv.evaluate([gv.Family.GVAR], s, None, panel, plan, [(1, 1), (2, 2)])
        assert len(report.rows) == 1
        row = report.rows[0]
        assert row.error is None
        assert row.rnmse_value >= 0.0
        assert ("gvar", 100) in report.pooled

    def test_pooled_is_energy_ratio_not_mean(self):
        panel, s, _ = _gvar_panel(seed=67, t_len=400)
        plan = gv.WindowPlan(in_sample_len=120, out_sample_len=40, n_iterations=3, stride=40)
        report = gv.evaluate([gv.Family.GVAR], s, None, panel, plan, [(2, 2)], normalize=False)
        windows = gv.plan_windows(len(panel), plan)
        num = den = 0.0
        spec = gv.ModelSpec(gv.Family.GVAR, p=2, k=2)
        for in_r, out_r in windows:
            model, _ = gv.fit_model(spec, s, None, panel, range(in_r.start + 2, in_r.stop))
            preds = gv.predict_series(model, panel, out_r)
            actual = panel.data[np.asarray(out_r)]
            num += np.sum((preds - actual) ** 2)
            den += np.sum(actual**2)
        expected = math.sqrt(num / den)
        got = report.pooled[("gvar", 120)]
        assert got == pytest.approx(expected, rel=1e-12)
        mean_of_windows = np.mean([r.rnmse_value for r in report.rows])
        assert got != pytest.approx(mean_of_windows, rel=1e-6)

    def test_deterministic(self):
        panel, s, sf = _gvar_panel(seed=68, t_len=260)
        plan = gv.WindowPlan(in_sample_len=100, out_sample_len=30, n_iterations=2, stride=30)
        kwargs = dict(
            families=[gv.Family.GVAR, gv.Family.PER_FEATURE_GVAR],
            s=s, sf=sf, panel=panel, plan=plan, grid=[(1, 1), (2, 2)],
        )
        r1, r2 = gv.evaluate(**kwargs), gv.evaluate(**kwargs)
        assert [vars(a) for a in r1.rows] == [vars(b) for b in r2.rows]
        assert r1.pooled == r2.pooled

    def test_fit_failures_become_diagnostics(self):
        panel, s, _ = _gvar_panel(seed=69, t_len=200)
        plan = gv.WindowPlan(in_sample_len=60, out_sample_len=20, n_iterations=2, stride=20)
        # a grid whose only cell cannot fit leaves inf scores but no crash
        report = gv.evaluate([gv.Family.GVAR], s, None, panel, plan, [(61, 1)])
        assert len(report.rows) == 2
        assert all(r.error is not None for r in report.rows)
        assert math.isnan(report.pooled[("gvar", 60)])

    def test_joint_mode_records_extras_and_beats_fixed(self):
        s, sf = laplacian_pair(4, 3, seed=70)
        spec = gv.ModelSpec(
            gv.Family.PG_VAR, p=1, k=2, product=gv.ProductGraphSpec.cartesian()
        )
        rng = np.random.default_rng(71)
        true_mat = sf.to_dense() * (1.0 + 0.4 * rng.standard_normal((3, 3)))
        truth = stable_truth(
            spec, s, gv.GraphShiftOperator.from_dense(true_mat), seed=72, radius=0.9
        )
        panel = gv.generate_synthetic(
            gv.SyntheticSpec(model=truth, noise_std=0.05, t_len=260, seed=73)
        )
        plan = gv.WindowPlan(in_sample_len=120, out_sample_len=30, n_iterations=2, stride=30)
        joint_cfg = gv.JointFitConfig(max_outer_iters=5)
        report = gv.evaluate(
            ["pg_var"], s, sf, panel, plan, [(1, 2)],
            product=gv.ProductGraphSpec.cartesian(), mode="joint", joint_config=joint_cfg,
        )
        for row in report.rows:
            assert row.error is None
            assert row.outer_iters is not None and row.outer_iters >= 1
            assert row.final_objective is not None

    def test_unknown_mode_rejected(self):
        panel, s, _ = _gvar_panel(seed=74, t_len=120)
        plan = gv.WindowPlan(in_sample_len=60, out_sample_len=20, n_iterations=1)
        with pytest.raises(EvaluationError, match="mode"):
            gv.evaluate([gv.Family.GVAR], s, None, panel, plan, [(1, 1)], mode="magic")

    def test_empty_family_list_rejected(self):
        panel, s, _ = _gvar_panel(seed=75, t_len=120)
        plan = gv.WindowPlan(in_sample_len=60, out_sample_len=20, n_iterations=1)
        with pytest.raises(EvaluationError, match="empty family list"):
            gv.evaluate([], s, None, panel, plan, [(1, 1)])

    def test_csv_and_json_outputs(self, tmp_path):
        panel, s, _ = _gvar_panel(seed=76, t_len=160)
        plan = gv.WindowPlan(in_sample_len=80, out_sample_len=20, n_iterations=2, stride=20)
        report = gv.evaluate(
            [gv.Family.GVAR], s, None, panel, plan, [(1, 1)],
            metadata={"config_sha256": "abc123"},
        )
        csv_path = tmp_path / "report.csv"
        json_path = tmp_path / "report.json"
        report.to_csv(csv_path)
        report.save_json(json_path)
        text = csv_path.read_text().splitlines()
        assert text[0] == "# config_sha256=abc123"
        assert text[1].startswith("family,in_sample_len,window,P,K,rnmse")
        assert len(text) == 2 + len(report.rows)
        import json

        doc = json.loads(json_path.read_text())
        assert doc["metadata"]["config_sha256"] == "abc123"
        assert len(doc["rows"]) == len(report.rows)
        assert doc["pooled"][0]["family"] == "gvar"
