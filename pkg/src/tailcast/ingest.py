"""Station CSV parsing, hourly-to-daily aggregation and gap handling.

The on-disk schema is fixed: a header row with columns
``station_id,date,t_max,t_min,t_avg,t_dew,rh,wind,precip,pressure``,
ISO-8601 dates, empty cell = missing. Station metadata lives in a second
CSV with columns ``station_id,name,lon,lat``. Units are fixed at
ingestion: degC, m/s, mm, kPa.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import DataError

CSV_COLUMNS = [
    "station_id", "date", "t_max", "t_min", "t_avg", "t_dew",
    "rh", "wind", "precip", "pressure",
]
VALUE_FIELDS = CSV_COLUMNS[2:]

# a day needs this many of 24 hourly temperature readings, else it is missing
HOURLY_COMPLETENESS = 18


class MissingColumn(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class DuplicateDate(DataError):
    def __init__(self, date: dt.date):
        super().__init__(f"duplicate date {date.isoformat()}")
        self.date = date


class EmptyInput(DataError):
    pass


class GapTooLarge(DataError):
    def __init__(self, station_id: str, start: dt.date, end: dt.date):
        super().__init__(f"station {station_id}: gap {start} .. {end} too long")
        self.station_id = station_id
        self.start = start
        self.end = end


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    lon: float
    lat: float
    name: str = ""

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise DataError(f"lon out of range: {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise DataError(f"lat out of range: {self.lat}")


@dataclass(frozen=True)
class DailyRecord:
    """One day of a station's record; ``None`` marks a missing value."""

    date: dt.date
    t_max: float | None = None
    t_min: float | None = None
    t_avg: float | None = None
    t_dew: float | None = None
    rh: float | None = None
    wind: float | None = None
    precip: float | None = None
    pressure: float | None = None

    def validate(self) -> None:
        if self.rh is not None and not 0.0 <= self.rh <= 100.0:
            raise DataError(f"{self.date}: rh={self.rh} outside [0, 100]")
        if self.wind is not None and self.wind < 0:
            raise DataError(f"{self.date}: wind={self.wind} negative")
        if self.precip is not None and self.precip < 0:
            raise DataError(f"{self.date}: precip={self.precip} negative")
        if self.pressure is not None and self.pressure <= 0:
            raise DataError(f"{self.date}: pressure={self.pressure} not positive")
        if (self.t_min is not None and self.t_avg is not None
                and self.t_max is not None
                and not self.t_min <= self.t_avg <= self.t_max):
            raise DataError(
                f"{self.date}: t_min <= t_avg <= t_max violated "
                f"({self.t_min}, {self.t_avg}, {self.t_max})")

    def is_complete(self) -> bool:
        return all(getattr(self, name) is not None for name in VALUE_FIELDS)


@dataclass
class StationSeries:
    meta: StationMeta
    records: list[DailyRecord] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.records, self.records[1:]):
            if a.date >= b.date:
                if a.date == b.date:
                    raise DuplicateDate(b.date)
                raise DataError(f"dates not increasing at {b.date}")

    def dates(self) -> list[dt.date]:
        return [r.date for r in self.records]


@dataclass(frozen=True)
class HourlyRecord:
    timestamp: dt.datetime
    temp: float | None = None
    t_dew: float | None = None
    rh: float | None = None
    wind: float | None = None
    precip: float | None = None
    pressure: float | None = None


@dataclass(frozen=True)
class ImputePolicy:
    """``drop_day`` removes incomplete days; ``linear_interpolate`` fills
    gaps up to ``max_gap_days``. With ``forbid_drop`` set, a gap that
    cannot be interpolated raises instead of being excluded."""

    kind: str = "linear_interpolate"
    max_gap_days: int = 3
    forbid_drop: bool = False

    def __post_init__(self):
        if self.kind not in ("drop_day", "linear_interpolate"):
            raise DataError(f"unknown imputation policy {self.kind!r}")


def _parse_float(cell: str, column: str, line: int) -> float | None:
    cell = cell.strip()
    if cell == "":
        return None
    try:
        v = float(cell)
    except ValueError:
        raise MalformedRow(line, f"column {column}: not a number: {cell!r}")
    if not math.isfinite(v):
        raise MalformedRow(line, f"column {column}: non-finite value")
    return v


def parse_station_csv(path: str | Path, meta: StationMeta,
                      schema: dict[str, str] | None = None) -> StationSeries:
    """Read one station's daily CSV into a date-sorted StationSeries.

    ``schema`` maps canonical column names to the file's header names
    (identity by default). Rows failing range checks or date parsing are
    rejected with their line number.
    """
    schema = schema or {c: c for c in CSV_COLUMNS}
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for canon in CSV_COLUMNS:
            if schema.get(canon, canon) not in header:
                raise MissingColumn(f"{path.name}: missing column "
                                    f"{schema.get(canon, canon)!r}")
        records = []
        seen: set[dt.date] = set()
        for lineno, row in enumerate(reader, start=2):
            raw_date = (row[schema["date"]] or "").strip()
            try:
                date = dt.date.fromisoformat(raw_date)
            except ValueError:
                raise MalformedRow(lineno, f"bad date {raw_date!r}")
            if date in seen:
                raise DuplicateDate(date)
            seen.add(date)
            values = {name: _parse_float(row[schema[name]], name, lineno)
                      for name in VALUE_FIELDS}
            rec = DailyRecord(date=date, **values)
            try:
                rec.validate()
            except DataError as exc:
                raise MalformedRow(lineno, str(exc)) from exc
            records.append(rec)
    records.sort(key=lambda r: r.date)
    return StationSeries(meta=meta, records=records)


def write_station_csv(path: str | Path, series: StationSeries) -> None:
    """Write the exact schema parse_station_csv reads (round-trip safe)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for rec in series.records:
            row = [series.meta.station_id, rec.date.isoformat()]
            for name in VALUE_FIELDS:
                v = getattr(rec, name)
                row.append("" if v is None else repr(v))
            writer.writerow(row)


def parse_metadata_csv(path: str | Path) -> list[StationMeta]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("station_id", "name", "lon", "lat"):
            if col not in (reader.fieldnames or []):
                raise MissingColumn(f"{path.name}: missing column {col!r}")
        metas = []
        ids: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            sid = row["station_id"].strip()
            if sid in ids:
                raise MalformedRow(lineno, f"duplicate station_id {sid!r}")
            ids.add(sid)
            metas.append(StationMeta(
                station_id=sid, name=row["name"].strip(),
                lon=float(row["lon"]), lat=float(row["lat"])))
    return metas


def write_metadata_csv(path: str | Path, metas: list[StationMeta]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station_id", "name", "lon", "lat"])
        for m in metas:
            writer.writerow([m.station_id, m.name, repr(m.lon), repr(m.lat)])


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def aggregate_hourly_to_daily(hourly: list[HourlyRecord]) -> list[DailyRecord]:
    """Collapse hourly observations to daily records.

    Temperature aggregates to max/min/mean, wind/rh/pressure/t_dew to the
    mean, precipitation to the daily sum. Days with fewer than
    HOURLY_COMPLETENESS temperature readings come back with all fields
    missing. Within-day ordering of the input does not matter.
    """
    if not hourly:
        raise EmptyInput("no hourly records")
    by_day: dict[dt.date, list[HourlyRecord]] = {}
    for rec in hourly:
        by_day.setdefault(rec.timestamp.date(), []).append(rec)

    out = []
    for date in sorted(by_day):
        rows = by_day[date]
        temps = [r.temp for r in rows if r.temp is not None]
        if len(temps) < HOURLY_COMPLETENESS:
            out.append(DailyRecord(date=date))
            continue

        def mean_of(attr):
            vals = [getattr(r, attr) for r in rows if getattr(r, attr) is not None]
            return _mean(vals) if vals else None

        precs = [r.precip for r in rows if r.precip is not None]
        rec = DailyRecord(
            date=date,
            t_max=max(temps), t_min=min(temps), t_avg=_mean(temps),
            t_dew=mean_of("t_dew"), rh=mean_of("rh"), wind=mean_of("wind"),
            precip=sum(precs) if precs else None,
            pressure=mean_of("pressure"))
        rec.validate()
        out.append(rec)
    return out


def impute_missing(series: StationSeries,
                   policy: ImputePolicy = ImputePolicy()) -> StationSeries:
    """Resolve missing values per the policy.

    Output records are all complete; days that could not be filled are
    removed entirely (leaving calendar gaps for the windowing stage to
    exclude), or raise GapTooLarge when dropping is forbidden.
    """
    if policy.kind == "drop_day":
        kept = [r for r in series.records if r.is_complete()]
        if policy.forbid_drop and len(kept) != len(series.records):
            bad = next(r for r in series.records if not r.is_complete())
            raise GapTooLarge(series.meta.station_id, bad.date, bad.date)
        return StationSeries(meta=series.meta, records=kept)

    records = series.records
    out: list[DailyRecord] = []
    i = 0
    while i < len(records):
        rec = records[i]
        if rec.is_complete():
            out.append(rec)
            i += 1
            continue
        # extend over the run of consecutive incomplete days
        j = i
        while j < len(records) and not records[j].is_complete():
            j += 1
        gap_start, gap_end = records[i].date, records[j - 1].date
        gap_days = (gap_end - gap_start).days + 1
        have_anchors = (out and j < len(records)
                        and (records[i].date - out[-1].date).days == 1
                        and (records[j].date - records[j - 1].date).days == 1)
        if gap_days <= policy.max_gap_days and have_anchors:
            left, right = out[-1], records[j]
            span = (right.date - left.date).days
            for k in range(i, j):
                frac = (records[k].date - left.date).days / span
                filled = {}
                for name in VALUE_FIELDS:
                    lo, hi = getattr(left, name), getattr(right, name)
                    filled[name] = lo + frac * (hi - lo)
                newrec = DailyRecord(date=records[k].date, **filled)
                newrec.validate()
                out.append(newrec)
        elif policy.forbid_drop:
            raise GapTooLarge(series.meta.station_id, gap_start, gap_end)
        # else: drop the gap days, downstream windows exclude the span
        i = j
    return StationSeries(meta=series.meta, records=out)


def fill_value_gaps(series: StationSeries) -> StationSeries:
    """Insert explicitly-missing records for absent calendar days, so a
    series covers a contiguous date range (used before imputation when a
    source file simply omits bad days)."""
    if not series.records:
        return series
    records = []
    prev = None
    for rec in series.records:
        if prev is not None:
            day = prev + dt.timedelta(days=1)
            while day < rec.date:
                records.append(DailyRecord(date=day))
                day += dt.timedelta(days=1)
        records.append(rec)
        prev = rec.date
    return StationSeries(meta=series.meta, records=records)
