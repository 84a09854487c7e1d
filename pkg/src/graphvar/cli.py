"""Command-line front-end: graph construction, fitting, evaluation, selftest.

One declarative config file drives every command; ``--set key=value`` flags
override individual keys.  The format is plain key = value text with
[section] headers (keys flatten to "section.key"); values are parsed as
JSON scalars or lists, bare words fall back to strings.  Reports embed the
sha256 of the config file so every output is traceable to its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import shutil
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DataError, StationConfig, SyntheticSpec
from .estimation import (
    EstimationError,
    JointFitConfig,
    SfStepConfig,
    feature_graph_gradient,
    fit_model,
    joint_fit,
    sf_objective_gradient_fd,
)
from .evaluation import EvaluationError, WindowPlan, evaluate, rnmse
from .filters import mimo_shift_apply
from .graphs import (
    DistanceMatrix,
    GraphError,
    GraphShiftOperator,
    GsoKind,
    ProductGraphSpec,
    correlation_feature_graph,
    knn_gaussian_graph,
    normalized_laplacian,
)
from .models import CoefficientSet, Family, FittedModel, ModelSpec, save_model
from .panel import vec_by_feature


class ConfigError(ValueError):
    """Missing or malformed experiment configuration."""


# -- config ----------------------------------------------------------------------


def parse_config_text(text: str) -> dict:
    values: dict = {}
    section = ""
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if section:
            key = f"{section}.{key}"
        value = value.strip()
        try:
            values[key] = json.loads(value)
        except json.JSONDecodeError:
            values[key] = value
    return values


class ExperimentConfig:
    """Flat dotted-key view of a config file plus its content hash."""

    def __init__(self, values: dict, path: Path | None = None, sha256: str = ""):
        self.values = values
        self.path = path
        self.sha256 = sha256

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        values = parse_config_text(text)
        digest = hashlib.sha256(text.encode()).hexdigest()
        cfg = cls(values, path=path, sha256=digest)
        cfg.apply_overrides(overrides)
        return cfg

    @classmethod
    def empty(cls, overrides=()) -> "ExperimentConfig":
        cfg = cls({}, path=None, sha256="")
        cfg.apply_overrides(overrides)
        return cfg

    def apply_overrides(self, overrides) -> None:
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            try:
                self.values[key.strip()] = json.loads(value.strip())
            except json.JSONDecodeError:
                self.values[key.strip()] = value.strip()

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(f"config key {key!r} is required")
        return self.values[key]

    def get_path(self, key, default=None) -> Path | None:
        value = self.get(key, default)
        if value in (None, ""):
            return None
        return Path(str(value))


def _product_spec(cfg: ExperimentConfig) -> ProductGraphSpec:
    name = cfg.get("experiment.product", "cartesian")
    if isinstance(name, list):
        return ProductGraphSpec(*[float(v) for v in name])
    return ProductGraphSpec.from_name(str(name))


def _window_plan(cfg: ExperimentConfig, in_len: int) -> WindowPlan:
    stride = int(cfg.get("windows.stride", 0)) or None
    return WindowPlan(
        in_sample_len=in_len,
        out_sample_len=int(cfg.get("windows.out_sample_len", 168)),
        n_iterations=int(cfg.get("windows.iterations", 20)),
        stride=stride,
        train_fraction=float(cfg.get("windows.train_fraction", 0.7)),
    )


def _joint_config(cfg: ExperimentConfig) -> JointFitConfig:
    return JointFitConfig(
        epsilon=float(cfg.get("joint.epsilon", 1e-6)),
        max_outer_iters=int(cfg.get("joint.max_outer_iters", 50)),
        sf_step=SfStepConfig(
            max_inner_iters=int(cfg.get("joint.inner_iters", 20)),
            step_init=float(cfg.get("joint.step_init", 1.0)),
            gradient_mode=str(cfg.get("joint.gradient_mode", "analytic")),
            enforce_symmetry=bool(cfg.get("joint.enforce_symmetry", False)),
        ),
    )


def _output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(str(cfg.get("experiment.output_dir", "out")))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_when(value, default: datetime) -> datetime:
    if value in (None, ""):
        return default
    return datetime.fromisoformat(str(value))


# -- panel and graph loading --------------------------------------------------------


def _stations(cfg: ExperimentConfig) -> StationConfig:
    override = cfg.get_path("data.stations_file")
    return StationConfig.load(override) if override else StationConfig.default()


def _synthetic_graphs(cfg: ExperimentConfig):
    """Deterministic station/feature graphs for synthetic runs."""
    station_file = cfg.get_path("synthetic.station_graph")
    feature_file = cfg.get_path("synthetic.feature_graph")
    if station_file and feature_file:
        return GraphShiftOperator.load(station_file), GraphShiftOperator.load(feature_file)
    seed = int(cfg.get("synthetic.seed", 7))
    n = int(cfg.get("synthetic.n_nodes", 6))
    f = int(cfg.get("synthetic.n_features", 3))
    rng = np.random.default_rng(seed)
    points = rng.random((n, 2))
    s_adj = knn_gaussian_graph(DistanceMatrix.from_points(points), k=min(3, n - 1))
    pairs = sorted({(min(i, (i + 1) % f), max(i, (i + 1) % f)) for i in range(f)})
    triplets = []
    for i, j in pairs:
        w = 0.5 + rng.random()
        triplets.extend([(i, j, w), (j, i, w)])
    f_adj = GraphShiftOperator.from_triplets(f, triplets, kind=GsoKind.ADJACENCY)
    return normalized_laplacian(s_adj), normalized_laplacian(f_adj)


def _synthetic_model(cfg: ExperimentConfig, s, sf) -> FittedModel:
    seed = int(cfg.get("synthetic.seed", 7))
    family = Family.from_string(str(cfg.get("synthetic.family", "pg_var")))
    spec = ModelSpec(
        family=family,
        p=int(cfg.get("synthetic.p", 2)),
        k=int(cfg.get("synthetic.k", 2)),
        product=_product_spec(cfg),
    )
    rng = np.random.default_rng(seed + 1)
    zeros = CoefficientSet.zeros(spec, sf.n)
    coeffs = CoefficientSet(
        scalar_taps=None if zeros.scalar_taps is None else rng.standard_normal(zeros.scalar_taps.shape),
        feature_taps=None if zeros.feature_taps is None else rng.standard_normal(zeros.feature_taps.shape),
        matrix_taps=None if zeros.matrix_taps is None else rng.standard_normal(zeros.matrix_taps.shape),
    )
    model = FittedModel(spec=spec, coeffs=coeffs, s=s, sf=sf)
    return data_mod.rescaled_to_radius(model, float(cfg.get("synthetic.target_radius", 0.9)))


def _generate_synthetic_panel(cfg: ExperimentConfig):
    s, sf = _synthetic_graphs(cfg)
    model = _synthetic_model(cfg, s, sf)
    spec = SyntheticSpec(
        model=model,
        noise_std=float(cfg.get("synthetic.noise_std", 0.05)),
        t_len=int(cfg.get("synthetic.t_len", 1200)),
        seed=int(cfg.get("synthetic.seed", 7)),
        burn_in=int(cfg.get("synthetic.burn_in", 100)),
    )
    return data_mod.generate_synthetic(spec), model, s, sf


def _load_panel(cfg: ExperimentConfig):
    kind = str(cfg.get("data.kind", "beijing"))
    if kind == "beijing":
        dataset_dir = cfg.get_path("data.dataset_dir")
        if dataset_dir is None:
            raise ConfigError("config key 'data.dataset_dir' is required for beijing data")
        if not dataset_dir.exists():
            raise DataError(f"dataset path does not exist: {dataset_dir}")
        return data_mod.load_air_quality(
            dataset_dir,
            stations=_stations(cfg),
            start=_parse_when(cfg.get("data.range_start"), data_mod.DEFAULT_RANGE_START),
            end=_parse_when(cfg.get("data.range_end"), data_mod.DEFAULT_RANGE_END),
        )
    if kind == "panel":
        cache = cfg.get_path("data.panel_cache")
        if cache is None:
            raise ConfigError("config key 'data.panel_cache' is required for panel data")
        if not cache.exists():
            raise DataError(f"panel cache does not exist: {cache}")
        return data_mod.load_panel(cache)
    if kind == "synthetic":
        panel, _, _, _ = _generate_synthetic_panel(cfg)
        return panel
    raise ConfigError(f"unknown data.kind {kind!r}")


def _load_graphs(cfg: ExperimentConfig):
    s_path = cfg.get_path("graphs.station_graph")
    f_path = cfg.get_path("graphs.feature_graph")
    if s_path is None or f_path is None:
        raise ConfigError("graphs.station_graph and graphs.feature_graph must be set")
    for path in (s_path, f_path):
        if not path.exists():
            raise DataError(f"graph file does not exist (run build-graphs first): {path}")
    return GraphShiftOperator.load(s_path), GraphShiftOperator.load(f_path)


# -- commands ------------------------------------------------------------------------


def _graph_summary(label: str, gso: GraphShiftOperator) -> str:
    deg = np.diff(gso.matrix.indptr)
    return (
        f"{label}: n={gso.n} kind={gso.kind.value} nnz={gso.nnz} "
        f"row-nnz min/mean/max = {deg.min()}/{deg.mean():.2f}/{deg.max()}"
    )


def cmd_build_graphs(cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    s_path = cfg.get_path("graphs.station_graph") or out / "station_gso.txt"
    f_path = cfg.get_path("graphs.feature_graph") or out / "feature_gso.txt"
    kind = str(cfg.get("data.kind", "beijing"))
    if kind == "synthetic":
        src_s = cfg.get_path("synthetic.station_graph")
        src_f = cfg.get_path("synthetic.feature_graph")
        if src_s is None or src_f is None:
            raise ConfigError(
                "synthetic data without provided graphs: run 'graphvar synth' first or set "
                "synthetic.station_graph / synthetic.feature_graph"
            )
        for src, dst in ((src_s, s_path), (src_f, f_path)):
            if not src.exists():
                raise DataError(f"graph file does not exist: {src}")
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(src, dst)
        station_gso, feature_gso = GraphShiftOperator.load(s_path), GraphShiftOperator.load(f_path)
    else:
        panel = _load_panel(cfg)
        stations = _stations(cfg)
        sigma = cfg.get("graphs.sigma", 0)
        sigma = None if not sigma else float(sigma)
        adj = knn_gaussian_graph(
            data_mod.station_distances(stations), k=int(cfg.get("graphs.station_k", 3)), sigma=sigma
        )
        station_gso = normalized_laplacian(adj)
        feat_adj = correlation_feature_graph(panel, m=int(cfg.get("graphs.feature_m", 2)))
        feature_gso = normalized_laplacian(feat_adj)
        for gso, path in ((station_gso, s_path), (feature_gso, f_path)):
            path.parent.mkdir(parents=True, exist_ok=True)
            gso.save(path)
    summary = [
        _graph_summary("station graph", station_gso),
        _graph_summary("feature graph", feature_gso),
        f"station_graph_file: {s_path}",
        f"feature_graph_file: {f_path}",
    ]
    (out / "graphs_summary.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def cmd_synth(cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    panel, model, s, sf = _generate_synthetic_panel(cfg)
    cache = cfg.get_path("data.panel_cache") or out / "synthetic_panel.npz"
    cache.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_panel(panel, cache)
    s_path = cfg.get_path("graphs.station_graph") or out / "station_gso.txt"
    f_path = cfg.get_path("graphs.feature_graph") or out / "feature_gso.txt"
    for gso, path in ((s, s_path), (sf, f_path)):
        path.parent.mkdir(parents=True, exist_ok=True)
        gso.save(path)
    save_model(model, out / "synthetic_truth.json", s_path=s_path, sf_path=f_path)
    print(
        f"synthetic panel T={len(panel)} N={panel.n_nodes} F={panel.n_features} -> {cache}"
    )
    return 0


def cmd_fit(cfg: ExperimentConfig, args) -> int:
    out = _output_dir(cfg)
    panel = _load_panel(cfg)
    s, sf = _load_graphs(cfg)
    family = Family.from_string(args.family or str(cfg.require("fit.family")))
    p = int(args.p or cfg.get("fit.p", 1))
    k = int(args.k or cfg.get("fit.k", 1))
    product = _product_spec(cfg)
    spec = ModelSpec(family=family, p=p, k=k, product=product)
    mode = str(cfg.get("experiment.mode", "fixed"))
    if mode == "joint" and family in (Family.PG_VAR, Family.PG_G_VAR):
        result = joint_fit(spec, s, sf, panel, _joint_config(cfg))
        model = result.model
        report = result.report_dict()
    else:
        model, fit = fit_model(spec, s, sf, panel)
        report = {
            "residual_norm": fit.residual_norm,
            "rank": fit.rank,
            "rank_deficient": fit.rank_deficient,
        }
    report["config_sha256"] = cfg.sha256
    report["family"] = family.value
    report["p"] = p
    report["k"] = k
    model_path = out / f"model_{family.value}_p{p}_k{k}.json"
    save_model(
        model,
        model_path,
        s_path=cfg.get_path("graphs.station_graph"),
        sf_path=cfg.get_path("graphs.feature_graph"),
    )
    (out / f"fit_report_{family.value}_p{p}_k{k}.json").write_text(json.dumps(report, indent=2))
    print(f"fitted {family.value} (P={p}, K={k}) -> {model_path}")
    return 0


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    out = _output_dir(cfg)
    panel = _load_panel(cfg)
    s, sf = _load_graphs(cfg)
    families = cfg.get("experiment.families")
    if not families:
        raise ConfigError("experiment.families must list at least one model family")
    grid = [
        (p, k)
        for p in cfg.get("grid.p_values", [1, 2, 3, 4, 5])
        for k in cfg.get("grid.k_values", [1, 2, 3, 4, 5])
    ]
    lens = cfg.get("windows.in_sample_lens", [200])
    plan = _window_plan(cfg, int(lens[0]))
    mode = str(cfg.get("experiment.mode", "fixed"))
    report = evaluate(
        families,
        s,
        sf,
        panel,
        plan,
        grid,
        product=_product_spec(cfg),
        mode=mode,
        in_sample_lens=[int(v) for v in lens],
        normalize=bool(cfg.get("evaluation.normalize", True)),
        raw_scale=bool(cfg.get("evaluation.raw_scale", False)),
        joint_config=_joint_config(cfg) if mode == "joint" else None,
        metadata={
            "config_sha256": cfg.sha256,
            "seed": int(cfg.get("experiment.seed", 0)),
            "mode": mode,
            "families": ",".join(str(f) for f in families),
        },
    )
    report.to_csv(out / "report.csv")
    report.save_json(out / "report.json")
    failures = [row for row in report.rows if row.error]
    for (family, in_len), value in sorted(report.pooled.items()):
        print(f"{family:>18} in={in_len:<6} pooled RNMSE = {value:.6f}")
    if failures:
        print(f"{len(failures)}/{len(report.rows)} window fits failed; see report.csv")
    print(f"reports written to {out}")
    return 1 if report.rows and len(failures) == len(report.rows) else 0


def _selftest_checks(cfg: ExperimentConfig):
    seed = int(cfg.get("experiment.seed", 0))
    gradient_mode = str(cfg.get("estimation.gradient_mode", "analytic"))

    def kron_duality():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(25):
            n, f = rng.integers(2, 6), rng.integers(2, 5)
            k = int(rng.integers(0, 4))
            s = GraphShiftOperator.from_dense(rng.standard_normal((n, n)))
            h = rng.standard_normal((f, f))
            x = rng.standard_normal((n, f))
            direct = vec_by_feature(mimo_shift_apply(s, h, k, x))
            spow = np.linalg.matrix_power(s.to_dense(), k)
            via_kron = np.kron(h.T, spow) @ vec_by_feature(x)
            worst = max(worst, np.max(np.abs(direct - via_kron)) / max(np.max(np.abs(via_kron)), 1e-30))
        assert worst < 1e-12, f"worst relative error {worst:.3e}"
        return f"worst rel err {worst:.2e}"

    def product_presets():
        rng = np.random.default_rng(seed + 1)
        s = GraphShiftOperator.from_dense(rng.standard_normal((3, 3)))
        sf = GraphShiftOperator.from_dense(rng.standard_normal((2, 2)))
        from .graphs import product_gso

        cart = product_gso(sf, s, ProductGraphSpec.cartesian()).to_dense()
        expected = np.kron(np.eye(2), s.to_dense()) + np.kron(sf.to_dense(), np.eye(3))
        assert np.array_equal(cart, expected), "cartesian preset mismatch"
        kron = product_gso(sf, s, ProductGraphSpec.kronecker()).to_dense()
        assert np.array_equal(kron, np.kron(sf.to_dense(), s.to_dense())), "kronecker mismatch"
        return "cartesian and kronecker exact"

    def gradient_check():
        rng = np.random.default_rng(seed + 2)
        cfg_local = ExperimentConfig({"synthetic.seed": seed + 2, "synthetic.n_nodes": 4,
                                      "synthetic.n_features": 3, "synthetic.family": "pg_var",
                                      "synthetic.p": 1, "synthetic.k": 3,
                                      "synthetic.noise_std": 0.1, "synthetic.t_len": 40,
                                      "experiment.product": "cartesian"})
        panel, model, s, sf = _generate_synthetic_panel(cfg_local)
        coeffs = CoefficientSet(scalar_taps=rng.standard_normal(model.coeffs.scalar_taps.shape))
        analytic = feature_graph_gradient(
            coeffs, sf, s, panel, model.spec, mode=gradient_mode
        )
        fd = sf_objective_gradient_fd(coeffs, sf, s, panel, model.spec, step=1e-6)
        scale = max(float(np.max(np.abs(fd))), 1e-12)
        err = float(np.max(np.abs(analytic - fd))) / scale
        assert err < 1e-5, f"gradient mismatch {err:.3e}"
        return f"max rel err {err:.2e}"

    def recovery():
        # burn_in = 0: with zero noise the initial transient is the signal
        cfg_local = ExperimentConfig({"synthetic.seed": seed + 3, "synthetic.n_nodes": 5,
                                      "synthetic.n_features": 2, "synthetic.family": "gvar",
                                      "synthetic.p": 2, "synthetic.k": 2,
                                      "synthetic.noise_std": 0.0, "synthetic.t_len": 80,
                                      "synthetic.burn_in": 0,
                                      "synthetic.target_radius": 0.95,
                                      "experiment.product": "cartesian"})
        panel, truth, s, sf = _generate_synthetic_panel(cfg_local)
        fitted, _ = fit_model(truth.spec, s, None, panel)
        err = float(np.max(np.abs(fitted.coeffs.scalar_taps - truth.coeffs.scalar_taps)))
        assert err < 1e-8, f"recovery error {err:.3e}"
        return f"max coeff err {err:.2e}"

    def rnmse_facts():
        rng = np.random.default_rng(seed + 4)
        x = rng.standard_normal((7, 3, 2))
        assert rnmse(x, x) == 0.0
        assert abs(rnmse(np.zeros_like(x), x) - 1.0) < 1e-12
        assert abs(rnmse(2 * x, x) - 1.0) < 1e-12
        return "0 / 1 / 1"

    return [
        ("kronecker-duality", kron_duality),
        ("product-presets", product_presets),
        ("gradient-check", gradient_check),
        ("noise-free-recovery", recovery),
        ("rnmse-facts", rnmse_facts),
    ]


def cmd_selftest(cfg: ExperimentConfig) -> int:
    failures = 0
    print(f"{'check':<22} {'status':<6} detail")
    for name, check in _selftest_checks(cfg):
        try:
            detail = check()
            print(f"{name:<22} PASS   {detail}")
        except Exception as exc:
            failures += 1
            print(f"{name:<22} FAIL   {type(exc).__name__}: {exc}")
    print(f"{failures} failure(s)")
    return 1 if failures else 0


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphvar",
        description="Graph-based VAR forecasting: build graphs, fit, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (
        ("build-graphs", True),
        ("synth", True),
        ("fit", True),
        ("evaluate", True),
        ("selftest", False),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=needs_config, help="experiment config file")
        sp.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key",
        )
        if name == "fit":
            sp.add_argument("--family", default=None)
            sp.add_argument("--p", type=int, default=None)
            sp.add_argument("--k", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = ExperimentConfig.load(args.config, args.overrides)
        else:
            cfg = ExperimentConfig.empty(args.overrides)
        if args.command == "build-graphs":
            return cmd_build_graphs(cfg)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "fit":
            return cmd_fit(cfg, args)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "selftest":
            return cmd_selftest(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DataError, GraphError, EvaluationError, EstimationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
