"""Beijing air-quality ingestion and synthetic graph-VAR generation.

The loader consumes the UCI multi-site air-quality layout (one CSV per
station with year/month/day/hour columns) and produces a T x 12 x 10 panel
with the fixed feature order below.  Missing values are imputed per
(station, feature) series by linear interpolation, boundary gaps filled
with the nearest valid value; the categorical wind-direction column and
rainfall are not part of the feature set and are ignored.

The synthetic generator iterates a fitted-model prediction plus Gaussian
noise and refuses unstable recursions, which makes it a trustworthy oracle
for the estimation tests.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path

import numpy as np

from .graphs import DistanceMatrix
from .models import FittedModel, lag_matrices, predict
from .panel import SignalPanel

# Fixed panel feature order: six pollutants, then the four weather variables.
FEATURES = ("PM2.5", "PM10", "SO2", "NO2", "CO", "O3", "TEMP", "PRES", "DEWP", "WSPM")

# The range of hourly timestamps the evaluation setup targets (inclusive).
DEFAULT_RANGE_START = datetime(2015, 7, 20, 7)
DEFAULT_RANGE_END = datetime(2016, 9, 5, 13)

_EARTH_RADIUS_KM = 6371.0088


class DataError(ValueError):
    """Missing or malformed input data, or an unstable synthetic spec."""


@dataclass(frozen=True)
class Station:
    id: str
    name: str
    latitude: float
    longitude: float


@dataclass(frozen=True)
class StationConfig:
    """Monitoring stations in panel node order."""

    stations: tuple

    def __post_init__(self) -> None:
        ids = [st.id for st in self.stations]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate station ids in config")
        for st in self.stations:
            if not (-90.0 <= st.latitude <= 90.0 and -180.0 <= st.longitude <= 180.0):
                raise DataError(f"station {st.id}: invalid coordinates")

    def __len__(self) -> int:
        return len(self.stations)

    @classmethod
    def load(cls, path) -> "StationConfig":
        stations = []
        with Path(path).open(newline="") as fh:
            for ln, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                if row[0].strip() == "id":
                    continue
                if len(row) != 4:
                    raise DataError(f"{path}:{ln}: expected 'id,name,latitude,longitude'")
                stations.append(
                    Station(row[0].strip(), row[1].strip(), float(row[2]), float(row[3]))
                )
        if not stations:
            raise DataError(f"{path}: no stations found")
        return cls(tuple(stations))

    @classmethod
    def default(cls) -> "StationConfig":
        ref = resources.files("graphvar").joinpath("resources/beijing_stations.csv")
        with resources.as_file(ref) as path:
            return cls.load(path)


def haversine_km(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance between two (degree) coordinates in kilometers."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * _EARTH_RADIUS_KM * math.asin(math.sqrt(a))


def station_distances(config: StationConfig) -> DistanceMatrix:
    n = len(config)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            a, b = config.stations[i], config.stations[j]
            d[i, j] = d[j, i] = haversine_km(a.latitude, a.longitude, b.latitude, b.longitude)
    return DistanceMatrix(n, d)


# -- UCI air-quality ingestion ---------------------------------------------------


def _station_file(data_dir: Path, station_id: str) -> Path:
    matches = sorted(data_dir.glob(f"PRSA_Data_{station_id}_*.csv"))
    if matches:
        return matches[0]
    direct = data_dir / f"{station_id}.csv"
    if direct.exists():
        return direct
    raise DataError(f"missing station file for {station_id!r} under {data_dir}")


def _parse_station_csv(path: Path, start: datetime, end: datetime, t_len: int) -> np.ndarray:
    values = np.full((t_len, len(FEATURES)), np.nan)
    seen_min = None
    seen_max = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        col = {name.strip(): i for i, name in enumerate(header)}
        required = ["year", "month", "day", "hour", *FEATURES]
        missing = [name for name in required if name not in col]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ts = datetime(
                    int(row[col["year"]]),
                    int(row[col["month"]]),
                    int(row[col["day"]]),
                    int(row[col["hour"]]),
                )
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{ln}: malformed timestamp ({exc})") from None
            if seen_min is None or ts < seen_min:
                seen_min = ts
            if seen_max is None or ts > seen_max:
                seen_max = ts
            if not start <= ts <= end:
                continue
            idx = int((ts - start).total_seconds() // 3600)
            for f, name in enumerate(FEATURES):
                raw = row[col[name]].strip() if col[name] < len(row) else ""
                if raw in ("", "NA", "NaN", "nan"):
                    continue
                try:
                    values[idx, f] = float(raw)
                except ValueError:
                    raise DataError(
                        f"{path}:{ln}: malformed value {raw!r} for {name}"
                    ) from None
    if seen_min is None:
        raise DataError(f"{path}: no data rows")
    if seen_min > start or seen_max < end:
        raise DataError(
            f"{path}: time range not covered: file spans "
            f"[{seen_min:%Y-%m-%d %H:%M}, {seen_max:%Y-%m-%d %H:%M}], "
            f"requested [{start:%Y-%m-%d %H:%M}, {end:%Y-%m-%d %H:%M}]"
        )
    return values


def _impute_series(series: np.ndarray, label: str) -> np.ndarray:
    valid = np.isfinite(series)
    if valid.all():
        return series
    if not valid.any():
        raise DataError(f"{label}: no observations to impute from")
    idx = np.flatnonzero(valid)
    # np.interp is linear between valid samples and clamps to the nearest
    # valid value at the boundaries, which is exactly the imputation policy.
    return np.interp(np.arange(series.size), idx, series[idx])


def load_air_quality(
    data_dir,
    stations: StationConfig | None = None,
    start: datetime | None = None,
    end: datetime | None = None,
) -> SignalPanel:
    """Load the per-station CSVs into an imputed T x N x F panel.

    The range is inclusive at both ends; T = hours between start and end
    plus one.  Node order follows the station config, feature order is
    :data:`FEATURES`.
    """
    data_dir = Path(data_dir)
    stations = stations or StationConfig.default()
    start = start or DEFAULT_RANGE_START
    end = end or DEFAULT_RANGE_END
    if end < start:
        raise DataError(f"empty time range: {start} .. {end}")
    t_len = int((end - start).total_seconds() // 3600) + 1
    data = np.empty((t_len, len(stations), len(FEATURES)))
    for n, station in enumerate(stations.stations):
        path = _station_file(data_dir, station.id)
        values = _parse_station_csv(path, start, end, t_len)
        for f, name in enumerate(FEATURES):
            data[:, n, f] = _impute_series(values[:, f], f"{station.id}/{name}")
    return SignalPanel(data, t0=0)


# -- panel cache -------------------------------------------------------------------


def save_panel(panel: SignalPanel, path, feature_names=None, node_names=None) -> None:
    """Binary panel cache with shape header plus feature/node manifests."""
    np.savez(
        Path(path),
        data=panel.data,
        t0=np.asarray(panel.t0),
        shape=np.asarray(panel.data.shape),
        feature_names=np.asarray(list(feature_names or []), dtype=object),
        node_names=np.asarray(list(node_names or []), dtype=object),
    )


def load_panel(path) -> SignalPanel:
    with np.load(Path(path), allow_pickle=True) as archive:
        data = archive["data"]
        t0 = int(archive["t0"])
        stored = tuple(int(v) for v in archive["shape"])
    if data.shape != stored:
        raise DataError(f"{path}: shape header {stored} does not match data {data.shape}")
    return SignalPanel(data, t0=t0)


def load_panel_manifest(path) -> dict:
    with np.load(Path(path), allow_pickle=True) as archive:
        return {
            "feature_names": [str(v) for v in archive["feature_names"]],
            "node_names": [str(v) for v in archive["node_names"]],
        }


# -- synthetic generation ------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth model plus noise level and length for oracle panels.

    ``n_features`` is only needed for scalar-tap families, whose feature
    count the model itself does not determine.
    """

    model: FittedModel
    noise_std: float
    t_len: int
    seed: int
    burn_in: int = 100
    init_scale: float = 1.0
    n_features: int | None = None

    def __post_init__(self) -> None:
        if self.noise_std < 0.0:
            raise DataError("noise_std must be nonnegative")
        if self.t_len < 1 or self.burn_in < 0:
            raise DataError("t_len must be >= 1 and burn_in >= 0")


def companion_spectral_radius(model: FittedModel, n_features: int | None = None) -> float:
    """Spectral radius of the NF*P companion matrix of the linear recursion.

    Dense eigencheck; intended for test-scale instances.  Scalar-tap models
    have the same radius for every feature count, so it is evaluated at
    F = 1 when no feature count is derivable.
    """
    lags = lag_matrices(model, n_features=n_features or _derived_features(model) or 1)
    p, dim = lags.shape[0], lags.shape[1]
    companion = np.zeros((dim * p, dim * p))
    for i in range(p):
        companion[:dim, i * dim : (i + 1) * dim] = lags[i]
    if p > 1:
        companion[dim:, : dim * (p - 1)] = np.eye(dim * (p - 1))
    return float(np.max(np.abs(np.linalg.eigvals(companion))))


def generate_synthetic(spec: SyntheticSpec) -> SignalPanel:
    """Iterate x_t = prediction(history) + noise, discarding the burn-in.

    Verifies stability first and rejects spectral radius >= 1.  The initial
    history is seeded Gaussian noise so noise-free processes still carry
    signal; generation is deterministic given the seed.
    """
    model = spec.model
    radius = companion_spectral_radius(model, n_features=spec.n_features)
    if radius >= 1.0:
        raise DataError(f"unstable synthetic spec: companion spectral radius {radius:.6g} >= 1")
    rng = np.random.default_rng(spec.seed)
    p = model.spec.p
    n, n_feat = _model_dims(model, spec.n_features)
    total = spec.burn_in + spec.t_len
    buf = np.empty((p + total, n, n_feat))
    buf[:p] = spec.init_scale * rng.standard_normal((p, n, n_feat))
    for t in range(p, p + total):
        x = predict(model, buf[t - p : t][::-1])
        if spec.noise_std > 0.0:
            x = x + spec.noise_std * rng.standard_normal((n, n_feat))
        buf[t] = x
    return SignalPanel(buf[p + spec.burn_in :], t0=0)


def _derived_features(model: FittedModel) -> int | None:
    if model.sf is not None:
        return model.sf.n
    for arr in (model.coeffs.feature_taps, model.coeffs.matrix_taps):
        if arr is not None:
            return arr.shape[2]
    return None


def _model_dims(model: FittedModel, n_features: int | None = None) -> tuple[int, int]:
    derived = _derived_features(model)
    n_feat = n_features or derived
    if n_feat is None:
        raise DataError(
            "feature count is not derivable from a scalar-tap model; set n_features"
        )
    if derived is not None and n_features is not None and derived != n_features:
        raise DataError(f"n_features={n_features} conflicts with model feature count {derived}")
    return model.s.n, n_feat


def rescaled_to_radius(
    model: FittedModel,
    target: float,
    tol: float = 1e-9,
    n_features: int | None = None,
) -> FittedModel:
    """Uniformly scale all taps so the companion spectral radius hits target.

    Multi-lag radii are not homogeneous in the coefficient scale, so the
    scale is found by bracketing and bisection (the radius is continuous in
    the scale and zero at scale zero).  Raises for zero-dynamics models.
    """
    if not 0.0 < target < 1.0:
        raise DataError(f"target radius must be in (0, 1), got {target}")

    def scaled(alpha: float) -> FittedModel:
        coeffs = model.coeffs
        return FittedModel(
            spec=model.spec,
            coeffs=type(coeffs)(
                scalar_taps=None if coeffs.scalar_taps is None else coeffs.scalar_taps * alpha,
                feature_taps=(
                    None if coeffs.feature_taps is None else coeffs.feature_taps * alpha
                ),
                matrix_taps=None if coeffs.matrix_taps is None else coeffs.matrix_taps * alpha,
            ),
            s=model.s,
            sf=model.sf,
        )

    def radius_at(alpha: float) -> float:
        return companion_spectral_radius(scaled(alpha), n_features=n_features)

    if radius_at(1.0) == 0.0:
        raise DataError("cannot rescale a zero-dynamics model to a positive radius")
    lo, hi = 1.0, 1.0
    for _ in range(200):
        if radius_at(hi) >= target:
            break
        hi *= 2.0
    else:
        raise DataError("failed to bracket the target radius from above")
    for _ in range(200):
        if radius_at(lo) <= target:
            break
        lo /= 2.0
    else:
        raise DataError("failed to bracket the target radius from below")
    mid = 0.5 * (lo + hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        radius = radius_at(mid)
        if abs(radius - target) <= tol * target:
            break
        if radius > target:
            hi = mid
        else:
            lo = mid
    return scaled(mid)
