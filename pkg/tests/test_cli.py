"""End-to-end command-line flows on temporary workspaces."""

import json

import numpy as np
import pytest

import graphvar as gv
from graphvar.cli import ExperimentConfig, main, parse_config_text

from conftest import BEIJING_MINI

SYNTH_CONFIG = """\
[experiment]
output_dir = "{out}"
families = ["gvar", "pg_var"]
mode = "fixed"
product = "cartesian"
seed = 3

[data]
kind = "panel"
panel_cache = "{out}/synthetic_panel.npz"

[synthetic]
family = "pg_var"
p = 1
k = 2
n_nodes = 4
n_features = 3
noise_std = 0.05
t_len = 300
seed = 9

[graphs]
station_graph = "{out}/station_gso.txt"
feature_graph = "{out}/feature_gso.txt"

[grid]
p_values = [1]
k_values = [1, 2]

[windows]
in_sample_lens = [80]
out_sample_len = 20
iterations = 2
stride = 20

[joint]
max_outer_iters = 3
inner_iters = 10
"""


def _write_synth_config(tmp_path):
    out = tmp_path / "out"
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(SYNTH_CONFIG.format(out=out))
    return cfg, out


def test_parse_config_text_values():
    values = parse_config_text(
        '# comment\n[a]\nx = 1\ny = "two"\nz = [1, 2]\nflag = true\nbare = hello\n'
    )
    assert values == {"a.x": 1, "a.y": "two", "a.z": [1, 2], "a.flag": True, "a.bare": "hello"}


def test_config_overrides(tmp_path):
    cfg_path = tmp_path / "c.cfg"
    cfg_path.write_text("[a]\nx = 1\n")
    cfg = ExperimentConfig.load(cfg_path, overrides=["a.x=5", "b.y=hi"])
    assert cfg.get("a.x") == 5
    assert cfg.get("b.y") == "hi"
    assert len(cfg.sha256) == 64


def test_synth_then_evaluate_flow(tmp_path, capsys):
    cfg, out = _write_synth_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    assert (out / "synthetic_panel.npz").exists()
    assert (out / "station_gso.txt").exists()
    assert (out / "feature_gso.txt").exists()
    truth = json.loads((out / "synthetic_truth.json").read_text())
    assert truth["family"] == "pg_var"

    assert main(["evaluate", "--config", str(cfg)]) == 0
    report = json.loads((out / "report.json").read_text())
    # one row per (family, in_sample_len, window)
    assert len(report["rows"]) == 2 * 1 * 2
    assert report["metadata"]["config_sha256"]
    assert {r["family"] for r in report["rows"]} == {"gvar", "pg_var"}
    csv_lines = (out / "report.csv").read_text().splitlines()
    data_lines = [ln for ln in csv_lines if not ln.startswith("#")]
    assert data_lines[0].startswith("family,")
    assert len(data_lines) == 1 + len(report["rows"])


def test_evaluate_joint_mode_emits_extras(tmp_path):
    cfg, out = _write_synth_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    code = main([
        "evaluate", "--config", str(cfg),
        "--set", 'experiment.families=["pg_g_var"]',
        "--set", "experiment.mode=joint",
    ])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert all(r["outer_iters"] is not None for r in report["rows"])
    assert all(r["final_objective"] is not None for r in report["rows"])


def test_fit_command_writes_model(tmp_path):
    cfg, out = _write_synth_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["fit", "--config", str(cfg), "--family", "gvar", "--p", "1", "--k", "2"]) == 0
    model_path = out / "model_gvar_p1_k2.json"
    assert model_path.exists()
    loaded = gv.load_model(model_path)
    assert loaded.spec.family is gv.Family.GVAR
    report = json.loads((out / "fit_report_gvar_p1_k2.json").read_text())
    assert "residual_norm" in report and report["config_sha256"]


def test_build_graphs_on_beijing_fixture(tmp_path, capsys):
    out = tmp_path / "out"
    cfg_path = tmp_path / "beijing.cfg"
    cfg_path.write_text(
        f"""\
[experiment]
output_dir = "{out}"

[data]
kind = "beijing"
dataset_dir = "{BEIJING_MINI}"
range_start = "2015-07-20T07:00"
range_end = "2015-07-28T14:00"

[graphs]
station_k = 3
feature_m = 2
station_graph = "{out}/station_gso.txt"
feature_graph = "{out}/feature_gso.txt"
"""
    )
    assert main(["build-graphs", "--config", str(cfg_path)]) == 0
    station = gv.GraphShiftOperator.load(out / "station_gso.txt")
    feature = gv.GraphShiftOperator.load(out / "feature_gso.txt")
    assert station.n == 12 and station.kind is gv.GsoKind.NORMALIZED_LAPLACIAN
    assert feature.n == 10 and feature.kind is gv.GsoKind.NORMALIZED_LAPLACIAN
    assert (out / "graphs_summary.txt").exists()


def test_build_graphs_pass_through_for_synthetic(tmp_path):
    cfg, out = _write_synth_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    dest = tmp_path / "copies"
    code = main([
        "build-graphs", "--config", str(cfg),
        "--set", "data.kind=synthetic",
        "--set", f"synthetic.station_graph={out}/station_gso.txt",
        "--set", f"synthetic.feature_graph={out}/feature_gso.txt",
        "--set", f"graphs.station_graph={dest}/s.txt",
        "--set", f"graphs.feature_graph={dest}/f.txt",
    ])
    assert code == 0
    assert (dest / "s.txt").read_text() == (out / "station_gso.txt").read_text()


def test_missing_dataset_path_exits_2(tmp_path, capsys):
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text(
        '[data]\nkind = "beijing"\ndataset_dir = "/nonexistent/beijing"\n'
        f'[graphs]\nstation_graph = "{tmp_path}/s.txt"\nfeature_graph = "{tmp_path}/f.txt"\n'
    )
    code = main(["build-graphs", "--config", str(cfg_path)])
    assert code == 2
    assert "/nonexistent/beijing" in capsys.readouterr().err


def test_empty_family_list_is_usage_error(tmp_path, capsys):
    cfg, out = _write_synth_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    code = main(["evaluate", "--config", str(cfg), "--set", "experiment.families=[]"])
    assert code == 2
    assert "families" in capsys.readouterr().err


def test_evaluate_requires_graphs(tmp_path, capsys):
    cfg, out = _write_synth_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    code = main([
        "evaluate", "--config", str(cfg),
        "--set", f"graphs.station_graph={tmp_path}/missing.txt",
    ])
    assert code == 2
    assert "build-graphs" in capsys.readouterr().err


def test_selftest_passes_by_default(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5
    assert "0 failure(s)" in out


def test_selftest_corrupted_gradient_mode_fails(capsys):
    code = main(["selftest", "--set", "estimation.gradient_mode=corrupted"])
    assert code == 1
    out = capsys.readouterr().out
    assert "gradient-check" in out and "FAIL" in out
