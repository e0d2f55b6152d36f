"""Station graph construction: Pearson base adjacency and the
tail-statistics reweighting that feeds the attention mechanism.

Negative correlations are clipped to zero before weighting: attention
needs non-negative edge mass, and anti-correlated stations should not
amplify each other's heat signal.
"""

from __future__ import annotations

import csv
import datetime as dt
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .evt import GpdDescriptors
from .ingest import StationSeries
from .synth import SUMMER_MONTHS


class ZeroVarianceStation(DataError):
    def __init__(self, station_id: str):
        super().__init__(f"station {station_id} has zero variance")
        self.station_id = station_id


class MissingDescriptors(DataError):
    pass


@dataclass
class GraphSpec:
    station_ids: list[str]
    rho: np.ndarray          # Pearson matrix, symmetric, unit diagonal
    w: np.ndarray            # station weights, all >= 1
    a: np.ndarray            # effective adjacency, symmetric, >= 0
    sparsify_threshold: float | None = None

    @property
    def n(self) -> int:
        return len(self.station_ids)


def pearson_adjacency(t_max_by_station: np.ndarray,
                      station_ids: list[str] | None = None) -> np.ndarray:
    """Correlation matrix over aligned series, one row per station.

    Uses the population normalization (divide by T); the diagonal is set
    to exactly 1.
    """
    x = np.asarray(t_max_by_station, dtype=float)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DataError("need a (stations, time) matrix with >= 2 columns")
    sd = x.std(axis=1)
    for i, s in enumerate(sd):
        if s < 1e-12:
            sid = station_ids[i] if station_ids else str(i)
            raise ZeroVarianceStation(sid)
    centered = x - x.mean(axis=1, keepdims=True)
    rho = (centered @ centered.T) / (np.outer(sd, sd) * x.shape[1])
    rho = np.clip(rho, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho


def station_weights(descriptors: dict[str, GpdDescriptors],
                    station_ids: list[str]) -> np.ndarray:
    """w_i = 1 + |shape_i| + scale_i / max_j scale_j."""
    sigmas = []
    for sid in station_ids:
        d = descriptors.get(sid)
        if d is None or not d.converged or not np.isfinite(d.sigma):
            raise MissingDescriptors(f"station {sid}: no converged fit")
        sigmas.append(d.sigma)
    sigma_max = max(sigmas)
    if sigma_max <= 0:
        raise DataError("all scales non-positive")
    return np.array([1.0 + abs(descriptors[sid].xi)
                     + descriptors[sid].sigma / sigma_max
                     for sid in station_ids])


def weighted_adjacency(rho: np.ndarray, w: np.ndarray,
                       sparsify_threshold: float | None = None) -> np.ndarray:
    """a_ij = max(rho_ij, 0) * w_i * w_j, optionally sparsified.

    Sparsification zeroes entries below the threshold but never the
    diagonal, so every node keeps its self-loop.
    """
    rho = np.asarray(rho, dtype=float)
    w = np.asarray(w, dtype=float)
    if rho.shape != (w.size, w.size):
        raise DataError("shape mismatch between rho and w")
    a = np.maximum(rho, 0.0) * np.outer(w, w)
    if sparsify_threshold is not None:
        off = np.abs(a) < sparsify_threshold
        np.fill_diagonal(off, False)
        a[off] = 0.0
        if not _connected(a):
            warnings.warn("sparsified graph is disconnected", RuntimeWarning)
    return a


def _connected(a: np.ndarray) -> bool:
    n = a.shape[0]
    seen = {0}
    frontier = [0]
    while frontier:
        i = frontier.pop()
        for j in np.nonzero(a[i] > 0)[0]:
            if j not in seen:
                seen.add(int(j))
                frontier.append(int(j))
    return len(seen) == n


def summer_training_matrix(series_list: list[StationSeries],
                           train_end: dt.date) -> np.ndarray:
    """(stations, time) matrix of summer t_max on dates where every
    station has a value, training period only."""
    common: dict[dt.date, list[float]] = {}
    for series in series_list:
        for rec in series.records:
            if (rec.date <= train_end and rec.date.month in SUMMER_MONTHS
                    and rec.t_max is not None):
                common.setdefault(rec.date, []).append(rec.t_max)
    n = len(series_list)
    cols = [vals for _, vals in sorted(common.items()) if len(vals) == n]
    if len(cols) < 2:
        raise DataError("fewer than 2 complete summer training days")
    return np.array(cols).T


def build_graph(series_list: list[StationSeries],
                descriptors: dict[str, GpdDescriptors] | None,
                train_end: dt.date, mode: str = "di",
                sparsify_threshold: float | None = None) -> GraphSpec:
    """Pipeline entry: correlation from training summers; unit weights in
    baseline mode, tail-derived weights in di mode."""
    station_ids = [s.meta.station_id for s in series_list]
    rho = pearson_adjacency(summer_training_matrix(series_list, train_end),
                            station_ids)
    if mode == "di":
        if descriptors is None:
            raise MissingDescriptors("di mode needs descriptors")
        w = station_weights(descriptors, station_ids)
    else:
        w = np.ones(len(station_ids))
    a = weighted_adjacency(rho, w, sparsify_threshold)
    return GraphSpec(station_ids=station_ids, rho=rho, w=w, a=a,
                     sparsify_threshold=sparsify_threshold)


def write_adjacency_csv(path, spec: GraphSpec) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station_id"] + spec.station_ids)
        for sid, row in zip(spec.station_ids, spec.a):
            writer.writerow([sid] + [repr(v) for v in row])


def write_weights_csv(path, spec: GraphSpec,
                      descriptors: dict[str, GpdDescriptors]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station_id", "w", "xi", "sigma"])
        for sid, w in zip(spec.station_ids, spec.w):
            d = descriptors[sid]
            writer.writerow([sid, repr(float(w)), repr(d.xi), repr(d.sigma)])
