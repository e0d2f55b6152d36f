"""Heatwave labeling, feature assembly, normalization and windowing.

Labeling follows the run-length criterion: a summer day is positive iff
it belongs to a maximal run of at least ``min_run`` consecutive summer
days whose daily maximum strictly exceeds the station's 90th-percentile
threshold. The threshold comes from training-period summers only.
"""

from __future__ import annotations

import datetime as dt
import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .evt import GpdDescriptors, TooFewObservations
from .ingest import StationSeries
from .synth import SUMMER_MONTHS

FEATURE_NAMES_BASE = [
    "beta", "t_max", "t_min", "t_avg", "t_dew", "rh", "wind",
    "precip", "pressure", "lon", "lat", "doy_sin", "doy_cos",
]
FEATURE_NAMES_AUGMENTED = FEATURE_NAMES_BASE + [
    "gpd_xi", "gpd_sigma", "gpd_mu", "gpd_variance", "gpd_q95",
]
DEFAULT_MIN_RUN = 3


class EmptyWindowSet(DataError):
    pass


class MissingDescriptors(DataError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    train_end_date: dt.date
    val_start_date: dt.date

    def __post_init__(self):
        if self.train_end_date >= self.val_start_date:
            raise DataError("train_end_date must precede val_start_date")


@dataclass
class NormStats:
    mean: np.ndarray
    sd: np.ndarray
    feature_names: list[str]


def is_summer(date: dt.date) -> bool:
    return date.month in SUMMER_MONTHS


def compute_t90(series: StationSeries, train_end: dt.date,
                quantile: float = 0.90) -> float:
    """Per-station labeling threshold: type-7 quantile of summer daily
    maxima observed in the training period. Needs at least 3 summers."""
    vals, years = [], set()
    for rec in series.records:
        if rec.date <= train_end and is_summer(rec.date) and rec.t_max is not None:
            vals.append(rec.t_max)
            years.add(rec.date.year)
    if len(years) < 3:
        raise TooFewObservations(
            f"station {series.meta.station_id}: {len(years)} summers of "
            "training data, need >= 3")
    return float(np.quantile(np.asarray(vals), quantile))


def label_pkl(series: StationSeries, t90: float,
              min_run: int = DEFAULT_MIN_RUN) -> np.ndarray:
    """Binary labels aligned with series.records.

    A run accumulates over calendar-consecutive summer days with
    t_max strictly above t90; season boundaries, calendar gaps and
    missing values all break it. Runs shorter than min_run label 0.
    """
    if not np.isfinite(t90):
        raise DataError("t90 must be finite")
    n = len(series.records)
    labels = np.zeros(n, dtype=np.int64)
    run: list[int] = []

    def flush():
        if len(run) >= min_run:
            labels[run] = 1
        run.clear()

    prev_date = None
    for idx, rec in enumerate(series.records):
        contiguous = (prev_date is not None
                      and (rec.date - prev_date).days == 1)
        hot = (is_summer(rec.date) and rec.t_max is not None
               and rec.t_max > t90)
        if not hot or not contiguous:
            flush()
        if hot:
            run.append(idx)
        prev_date = rec.date
    flush()
    return labels


def _doy_angle(date: dt.date) -> float:
    return 2.0 * np.pi * (date.timetuple().tm_yday - 1) / 365.25


def build_features(series: StationSeries, labels: np.ndarray,
                   descriptors: GpdDescriptors | None,
                   mode: str = "di") -> np.ndarray:
    """Per-day feature matrix (T, F); 13 base columns, plus the five
    station-constant GPD descriptors in di mode."""
    if mode not in ("baseline", "di"):
        raise DataError(f"unknown mode {mode!r}")
    if mode == "di" and (descriptors is None or not descriptors.converged):
        raise MissingDescriptors(
            f"station {series.meta.station_id}: di mode needs converged "
            "GPD descriptors")
    n = len(series.records)
    if labels.shape != (n,):
        raise DataError("labels not aligned with series")
    f = len(FEATURE_NAMES_AUGMENTED) if mode == "di" else len(FEATURE_NAMES_BASE)
    out = np.full((n, f), np.nan)
    lon, lat = series.meta.lon, series.meta.lat
    for i, rec in enumerate(series.records):
        ang = _doy_angle(rec.date)
        out[i, :13] = [
            float(labels[i]),
            rec.t_max if rec.t_max is not None else np.nan,
            rec.t_min if rec.t_min is not None else np.nan,
            rec.t_avg if rec.t_avg is not None else np.nan,
            rec.t_dew if rec.t_dew is not None else np.nan,
            rec.rh if rec.rh is not None else np.nan,
            rec.wind if rec.wind is not None else np.nan,
            rec.precip if rec.precip is not None else np.nan,
            rec.pressure if rec.pressure is not None else np.nan,
            lon, lat, np.sin(ang), np.cos(ang),
        ]
    if mode == "di":
        out[:, 13:] = np.asarray(descriptors.as_feature_row())
    return out


def fit_norm_stats(panel: np.ndarray, train_mask: np.ndarray,
                   feature_names: list[str]) -> NormStats:
    """Per-feature mean/sd over training-period station-days. The binary
    beta channel and zero-variance columns pass through unscaled."""
    flat = panel[train_mask].reshape(-1, panel.shape[-1])
    flat = flat[~np.isnan(flat).any(axis=1)]
    mean = flat.mean(axis=0)
    sd = flat.std(axis=0)
    beta_idx = feature_names.index("beta")
    mean[beta_idx], sd[beta_idx] = 0.0, 1.0
    low = sd < 1e-12
    if np.any(low & (np.arange(len(sd)) != beta_idx)):
        names = [feature_names[i] for i in np.nonzero(low)[0] if i != beta_idx]
        warnings.warn(f"zero-variance features pass through unscaled: {names}",
                      RuntimeWarning)
    sd = np.where(low, 1.0, sd)
    mean = np.where(low & (np.arange(len(sd)) != beta_idx), 0.0, mean)
    return NormStats(mean=mean, sd=sd, feature_names=list(feature_names))


def normalize(panel: np.ndarray, stats: NormStats) -> np.ndarray:
    return (panel - stats.mean) / stats.sd


@dataclass
class WindowSet:
    """Stride-1 sliding windows over an aligned station panel.

    Stores the panel once plus anchor indices; batches are gathered on
    demand. x covers [anchor - c_in + 1, anchor], y covers
    [anchor + 1, anchor + c_out].
    """

    x_panel: np.ndarray  # (T, N, F), normalized
    y_panel: np.ndarray  # (T, N) binary
    dates: list[dt.date]
    anchors: np.ndarray  # indices into the time axis
    c_in: int
    c_out: int

    def __len__(self) -> int:
        return len(self.anchors)

    def anchor_date(self, i: int) -> dt.date:
        return self.dates[int(self.anchors[i])]

    def batch(self, idx: np.ndarray):
        xs = np.stack([self.x_panel[a - self.c_in + 1:a + 1]
                       for a in self.anchors[idx]])
        ys = np.stack([self.y_panel[a + 1:a + 1 + self.c_out]
                       for a in self.anchors[idx]])
        return xs, ys

    def all(self):
        return self.batch(np.arange(len(self)))


def make_windows(panel: np.ndarray, labels: np.ndarray, valid: np.ndarray,
                 dates: list[dt.date], c_in: int, c_out: int,
                 split: SplitSpec) -> tuple[WindowSet, WindowSet]:
    """Split stride-1 windows chronologically.

    A window joins validation iff every target day is on or after
    val_start_date, and training iff every target day is on or before
    train_end_date; boundary-straddling windows belong to neither set.
    Windows touching an invalid day anywhere in their span are dropped.
    """
    if c_in < 1 or c_out < 1:
        raise DataError("c_in and c_out must be >= 1")
    t = panel.shape[0]
    train_anchors, val_anchors = [], []
    for a in range(c_in - 1, t - c_out):
        if not valid[a - c_in + 1:a + 1 + c_out].all():
            continue
        # windows must span contiguous calendar days
        if (dates[a + c_out] - dates[a - c_in + 1]).days != c_in + c_out - 1:
            continue
        first_target, last_target = dates[a + 1], dates[a + c_out]
        if last_target <= split.train_end_date:
            train_anchors.append(a)
        elif first_target >= split.val_start_date:
            val_anchors.append(a)
    if not train_anchors or not val_anchors:
        raise EmptyWindowSet(
            f"{len(train_anchors)} train / {len(val_anchors)} val windows")

    def mk(anchors):
        return WindowSet(x_panel=panel, y_panel=labels, dates=dates,
                         anchors=np.asarray(anchors), c_in=c_in, c_out=c_out)

    return mk(train_anchors), mk(val_anchors)


@dataclass
class Dataset:
    train: WindowSet
    val: WindowSet
    stats: NormStats
    t90: dict[str, float]
    station_ids: list[str]
    dates: list[dt.date]
    label_panel: np.ndarray  # (T, N) with -1 on invalid days
    mode: str


def align_panel(series_list: list[StationSeries]):
    """Common contiguous date axis; a day is valid iff every station has
    a complete record for it."""
    if not series_list:
        raise DataError("no stations")
    start = min(s.records[0].date for s in series_list)
    end = max(s.records[-1].date for s in series_list)
    dates = [start + dt.timedelta(days=k)
             for k in range((end - start).days + 1)]
    index = {d: i for i, d in enumerate(dates)}
    n = len(series_list)
    valid = np.zeros((len(dates), n), dtype=bool)
    for j, s in enumerate(series_list):
        for rec in s.records:
            if rec.is_complete():
                valid[index[rec.date], j] = True
    return dates, index, valid.all(axis=1)


def build_dataset(series_list: list[StationSeries],
                  descriptors: dict[str, GpdDescriptors] | None,
                  mode: str, c_in: int, c_out: int, split: SplitSpec,
                  min_run: int = DEFAULT_MIN_RUN) -> Dataset:
    """Full pipeline from per-station series to train/val window sets."""
    dates, index, valid = align_panel(series_list)
    station_ids = [s.meta.station_id for s in series_list]
    n, t = len(series_list), len(dates)
    fdim = len(FEATURE_NAMES_AUGMENTED if mode == "di" else FEATURE_NAMES_BASE)
    names = FEATURE_NAMES_AUGMENTED if mode == "di" else FEATURE_NAMES_BASE

    panel = np.full((t, n, fdim), np.nan)
    label_panel = np.full((t, n), -1, dtype=np.int64)
    t90s: dict[str, float] = {}
    for j, series in enumerate(series_list):
        sid = series.meta.station_id
        t90s[sid] = compute_t90(series, split.train_end_date)
        labels = label_pkl(series, t90s[sid], min_run)
        desc = None if descriptors is None else descriptors.get(sid)
        if mode == "di" and desc is None:
            raise MissingDescriptors(f"station {sid}: no descriptors")
        feats = build_features(series, labels, desc, mode)
        rows = [index[r.date] for r in series.records]
        panel[rows, j, :] = feats
        label_panel[rows, j] = labels

    train_mask = np.array([d <= split.train_end_date for d in dates])
    stats = fit_norm_stats(panel, train_mask & valid, names)
    panel = normalize(panel, stats)
    panel[np.isnan(panel)] = 0.0  # invalid days never enter a window

    y_panel = np.where(label_panel < 0, 0, label_panel)
    train, val = make_windows(panel, y_panel, valid, dates, c_in, c_out, split)
    return Dataset(train=train, val=val, stats=stats, t90=t90s,
                   station_ids=station_ids, dates=dates,
                   label_panel=label_panel, mode=mode)


def write_labels_csv(path, series_list: list[StationSeries],
                     t90s: dict[str, float],
                     min_run: int = DEFAULT_MIN_RUN) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station_id", "date", "label"])
        for series in series_list:
            labels = label_pkl(series, t90s[series.meta.station_id], min_run)
            for rec, lab in zip(series.records, labels):
                writer.writerow([series.meta.station_id,
                                 rec.date.isoformat(), int(lab)])


def write_manifest(path, dataset: Dataset, split: SplitSpec) -> None:
    doc = {
        "mode": dataset.mode,
        "train_end_date": split.train_end_date.isoformat(),
        "val_start_date": split.val_start_date.isoformat(),
        "feature_order": dataset.stats.feature_names,
        "norm_mean": dataset.stats.mean.tolist(),
        "norm_sd": dataset.stats.sd.tolist(),
        "t90": dataset.t90,
        "n_train_windows": len(dataset.train),
        "n_val_windows": len(dataset.val),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
