"""Synthetic multi-station daily weather with controllable heavy tails.

The generator is the ground truth for the statistical test suite: a
seasonal sinusoid plus a spatially correlated AR(1) anomaly field, with
regional multi-day heat excursions whose magnitudes follow a generalized
Pareto distribution. Realism is a non-goal; invariant satisfaction and
known tail parameters are the point.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .ingest import DailyRecord, StationMeta, StationSeries

SUMMER_MONTHS = (5, 6, 7, 8, 9)

# mid-July seasonal peak, matching a northern-hemisphere summer
PEAK_DOY = 196.0
BASE_MEAN_C = 10.0
# excursion days sit at seasonal peak + offset + GPD draw, independent of
# the date's own seasonal level: excesses above any higher threshold then
# stay exactly GPD (threshold stability), so tail fits recover the shape
EVENT_OFFSET_C = 6.0
# regional event persistence: P(event tomorrow | event today)
EVENT_CONTINUE_P = 0.85


class InvalidConfig(ConfigError):
    pass


class InvalidParams(ConfigError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_stations: int = 20
    n_years: int = 15
    seed: int = 0
    start_year: int = 2009
    seasonal_amp: float = 12.0
    ar1_coeff: float = 0.75
    noise_sd: float = 2.0
    gpd_xi: float = 0.2
    gpd_sigma: float = 5.0
    exceed_prob: float = 0.15
    spatial_length_scale: float = 200.0

    def validate(self) -> None:
        if self.n_stations < 1:
            raise InvalidConfig("n_stations must be >= 1")
        if self.n_years < 1:
            raise InvalidConfig("n_years must be >= 1")
        if not 0.0 <= self.ar1_coeff < 1.0:
            raise InvalidConfig("ar1_coeff must lie in [0, 1)")
        if self.noise_sd <= 0:
            raise InvalidConfig("noise_sd must be positive")
        if self.gpd_sigma <= 0:
            raise InvalidConfig("gpd_sigma must be positive")
        if not 0.0 <= self.exceed_prob <= 0.2:
            raise InvalidConfig("exceed_prob must lie in [0, 0.2]")
        if self.spatial_length_scale <= 0:
            raise InvalidConfig("spatial_length_scale must be positive")


def sample_gpd(n: int, xi: float, sigma: float,
               rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of the generalized Pareto distribution.

    For xi != 0, y = sigma * (U**(-xi) - 1) / xi with U ~ Uniform(0,1);
    the xi == 0 limit is exponential, y = -sigma * ln(U).
    """
    if sigma <= 0:
        raise InvalidParams("sigma must be positive")
    if n < 1:
        raise InvalidParams("n must be >= 1")
    u = rng.uniform(size=n)
    if xi == 0.0:
        return -sigma * np.log(u)
    return sigma * (u ** (-xi) - 1.0) / xi


def haversine_km(lon1, lat1, lon2, lat2) -> float:
    """Great-circle distance in km."""
    r = 6371.0
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * r * math.asin(math.sqrt(a))


def station_distances_km(metas: list[StationMeta]) -> np.ndarray:
    n = len(metas)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = haversine_km(
                metas[i].lon, metas[i].lat, metas[j].lon, metas[j].lat)
    return d


def _seasonal(doy: np.ndarray, amp: float) -> np.ndarray:
    return BASE_MEAN_C + amp * np.cos(2 * np.pi * (doy - PEAK_DOY) / 365.25)


def _place_stations(n: int, rng: np.random.Generator) -> list[StationMeta]:
    lons = rng.uniform(-128.0, -116.0, size=n)
    lats = rng.uniform(49.0, 55.0, size=n)
    return [StationMeta(station_id=f"S{i:03d}", name=f"SYN-{i:03d}",
                        lon=float(lons[i]), lat=float(lats[i]))
            for i in range(n)]


def generate(config: SynthConfig) -> list[StationSeries]:
    """Generate one StationSeries per station, deterministic in the seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    metas = _place_stations(config.n_stations, rng)
    n = config.n_stations

    dist = station_distances_km(metas)
    kernel = np.exp(-dist / config.spatial_length_scale)
    chol = np.linalg.cholesky(kernel + 1e-9 * np.eye(n))

    start = dt.date(config.start_year, 1, 1)
    end = dt.date(config.start_year + config.n_years, 1, 1)
    dates = [start + dt.timedelta(days=k) for k in range((end - start).days)]
    t = len(dates)
    doy = np.array([d.timetuple().tm_yday - 1 for d in dates], dtype=float)
    summer = np.array([d.month in SUMMER_MONTHS for d in dates])

    seasonal = _seasonal(doy, config.seasonal_amp)

    # spatially correlated AR(1) anomalies, stationary sd = noise_sd/sqrt(1-a^2)
    a = config.ar1_coeff
    innov = (chol @ rng.standard_normal((n, t))) * config.noise_sd
    anom = np.empty((n, t))
    anom[:, 0] = innov[:, 0] / math.sqrt(1.0 - a * a)
    for k in range(1, t):
        anom[:, k] = a * anom[:, k - 1] + innov[:, k]

    # regional event chain over summer days
    event = np.zeros(t, dtype=bool)
    if config.exceed_prob > 0:
        p = config.exceed_prob
        start_p = p * (1.0 - EVENT_CONTINUE_P) / (1.0 - p)
        u = rng.uniform(size=t)
        prev = False
        for k in range(t):
            if not summer[k]:
                prev = False
                continue
            prob = EVENT_CONTINUE_P if prev else start_p
            event[k] = u[k] < prob
            prev = event[k]

    t_max = seasonal[None, :] + anom
    n_event = int(event.sum())
    if n_event:
        draws = sample_gpd(n * n_event, config.gpd_xi, config.gpd_sigma, rng)
        peak = BASE_MEAN_C + config.seasonal_amp
        t_max[:, event] = peak + EVENT_OFFSET_C + draws.reshape(n, n_event)

    # secondary variables: affine in t_max plus clipped noise; only the
    # ingest invariants matter, not realism
    dr = np.clip(8.0 + rng.standard_normal((n, t)), 1.0, None)
    t_min = t_max - dr
    t_avg = (t_max + t_min) / 2.0
    t_dew = t_min - 2.0 + rng.standard_normal((n, t))
    rh = np.clip(70.0 - 1.5 * (t_max - seasonal[None, :])
                 + 5.0 * rng.standard_normal((n, t)), 5.0, 100.0)
    wind = np.abs(2.0 * rng.standard_normal((n, t))) + 0.5
    wet = rng.uniform(size=(n, t)) < 0.3
    precip = np.where(wet, rng.exponential(2.0, size=(n, t)), 0.0)
    pressure = 101.3 + 0.5 * rng.standard_normal((n, t))

    out = []
    for i in range(n):
        records = [
            DailyRecord(
                date=dates[k],
                t_max=float(t_max[i, k]), t_min=float(t_min[i, k]),
                t_avg=float(t_avg[i, k]), t_dew=float(t_dew[i, k]),
                rh=float(rh[i, k]), wind=float(wind[i, k]),
                precip=float(precip[i, k]), pressure=float(pressure[i, k]))
            for k in range(t)
        ]
        out.append(StationSeries(meta=metas[i], records=records))
    return out
