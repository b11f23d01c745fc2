"""Reading and writing datasets, chain archives and forecast grids.

All formats are plain CSV so results can be inspected and diffed by hand.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ArchiveError, DataError
from .model import CovariateTransform, ObservedData

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_WET_THRESHOLD = 0.1
DEFAULT_COVARIATES = ("x", "y", "elevation")


def _fmt(x: float) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------------------
# station + daily ingestion

@dataclass(frozen=True)
class StationRecord:
    id: str
    covariates: tuple


def read_stations(path, covariates: Sequence[str] = DEFAULT_COVARIATES) -> list:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty stations file")
        missing = [c for c in ("id", *covariates) if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        out, seen = [], set()
        for row in reader:
            line = reader.line_num
            sid = row["id"].strip()
            if not sid:
                raise DataError(f"{path}:{line}: empty station id")
            if sid in seen:
                raise DataError(f"{path}:{line}: duplicate station id {sid!r}")
            try:
                cov = tuple(float(row[c]) for c in covariates)
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line}: non-numeric covariate for station {sid!r}") from None
            if not all(math.isfinite(c) for c in cov):
                raise DataError(f"{path}:{line}: non-finite covariate for station {sid!r}")
            seen.add(sid)
            out.append(StationRecord(sid, cov))
    if not out:
        raise DataError(f"{path}: no stations")
    return out


def read_daily(path, station_ids) -> dict:
    """Map ``(station id, date) -> rain_mm``; rejects bad rows with their line number."""
    path = Path(path)
    known = set(station_ids)
    records = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return records
        missing = [c for c in ("id", "date", "rain_mm") if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row in reader:
            line = reader.line_num
            sid = (row["id"] or "").strip()
            if sid not in known:
                raise DataError(f"{path}:{line}: unknown station id {sid!r}")
            try:
                date = _dt.date.fromisoformat((row["date"] or "").strip())
            except ValueError:
                raise DataError(f"{path}:{line}: malformed date {row['date']!r}") from None
            try:
                rain = float(row["rain_mm"])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line}: non-numeric rain_mm {row['rain_mm']!r}") from None
            if not math.isfinite(rain):
                raise DataError(f"{path}:{line}: non-finite rain_mm")
            if rain < 0:
                raise DataError(f"{path}:{line}: negative rain_mm {rain}")
            if (sid, date) in records:
                raise DataError(f"{path}:{line}: duplicate record for {sid} on {date}")
            records[(sid, date)] = rain
    return records


def load_dataset(stations_csv, daily_csv, wet_threshold_mm: float = DEFAULT_WET_THRESHOLD,
                 year_range: Optional[tuple] = None,
                 covariates: Sequence[str] = DEFAULT_COVARIATES) -> ObservedData:
    """Aggregate daily records into yearly wet-day counts and wet-day amounts.

    A day is wet when ``rain_mm > wet_threshold_mm``. The number of trials of a
    station-year is its number of recorded days; station-years without any
    record get zero trials (and so carry no likelihood) and are logged.
    Covariates are mapped onto [-1, 1] and the map is kept on the result.
    """
    if wet_threshold_mm < 0:
        raise DataError("wet-day threshold must be >= 0")
    stations = read_stations(stations_csv, covariates)
    ids = [s.id for s in stations]
    records = read_daily(daily_csv, ids)
    if year_range is None:
        yrs = sorted({d.year for (_, d) in records})
        year_range = (yrs[0], yrs[-1]) if yrs else (0, 0)
    y0, y1 = int(year_range[0]), int(year_range[1])
    if y1 < y0:
        raise DataError(f"empty year range {year_range}")
    years = tuple(range(y0, y1 + 1))
    M, T = len(ids), len(years)
    row_of = {sid: m for m, sid in enumerate(ids)}

    trials = np.zeros((M, T), dtype=np.int64)
    wet = defaultdict(list)
    # sorting makes the result independent of the row order in the file
    for (sid, date), rain in sorted(records.items()):
        if not y0 <= date.year <= y1:
            continue
        m, j = row_of[sid], date.year - y0
        trials[m, j] += 1
        if rain > wet_threshold_mm:
            wet[(m, j)].append(rain)

    empty = [(ids[m], years[j]) for m in range(M) for j in range(T) if trials[m, j] == 0]
    if empty and records:
        log.warning("%d station-years have no records and are excluded from the likelihood: %s",
                    len(empty), ", ".join(f"{s}/{y}" for s, y in empty[:10]))
    counts = np.array([[len(wet[(m, j)]) for j in range(T)] for m in range(M)], dtype=np.int64)
    flat = [w for m in range(M) for j in range(T) for w in wet[(m, j)]]
    raw = np.array([s.covariates for s in stations], dtype=float)
    transform = CovariateTransform.fit(raw)
    return ObservedData(transform.apply(raw), counts, np.log(np.asarray(flat, dtype=float)),
                        trials, station_ids=tuple(ids), years=years, transform=transform)


# ---------------------------------------------------------------------------
# native data directory: stations.csv, cells.csv, events.csv, meta.json

def write_observed(data: ObservedData, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "stations.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"s{k + 1}" for k in range(data.p)])
        for sid, pt in zip(data.station_ids, data.points):
            w.writerow([sid] + [_fmt(v) for v in pt])
    with (d / "cells.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "year", "n_trials", "count"])
        for m, sid in enumerate(data.station_ids):
            for j, yr in enumerate(data.years):
                w.writerow([sid, yr, int(data.n_trials[m, j]), int(data.counts[m, j])])
    with (d / "events.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "year", "log_magnitude"])
        cells = data.cell_index
        for c, lw in zip(cells, data.log_magnitudes):
            m, j = divmod(int(c), data.T)
            w.writerow([data.station_ids[m], data.years[j], _fmt(lw)])
    meta = {"schema_version": SCHEMA_VERSION,
            "transform": data.transform.as_dict() if data.transform is not None else None}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return d


def read_observed(directory) -> ObservedData:
    d = Path(directory)
    for name in ("stations.csv", "cells.csv", "events.csv"):
        if not (d / name).exists():
            raise DataError(f"{d}: missing {name}")
    meta = {}
    if (d / "meta.json").exists():
        meta = json.loads((d / "meta.json").read_text())
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"{d}: unsupported schema version {meta.get('schema_version')}")
    with (d / "stations.csv").open(newline="") as fh:
        rows = list(csv.reader(fh))
    try:
        ids = tuple(r[0] for r in rows[1:])
        points = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float)
    except (ValueError, IndexError):
        raise DataError(f"{d / 'stations.csv'}: malformed row") from None
    row_of = {s: m for m, s in enumerate(ids)}
    with (d / "cells.csv").open(newline="") as fh:
        cells = list(csv.DictReader(fh))
    years = tuple(sorted({int(c["year"]) for c in cells}))
    col_of = {y: j for j, y in enumerate(years)}
    counts = np.zeros((len(ids), len(years)), dtype=np.int64)
    trials = np.zeros_like(counts)
    for c in cells:
        m, j = row_of[c["id"]], col_of[int(c["year"])]
        counts[m, j], trials[m, j] = int(c["count"]), int(c["n_trials"])
    with (d / "events.csv").open(newline="") as fh:
        events = list(csv.DictReader(fh))
    logw = np.array([float(e["log_magnitude"]) for e in events], dtype=float)
    order = np.array([row_of[e["id"]] * len(years) + col_of[int(e["year"])] for e in events],
                     dtype=np.int64)
    # stable sort keeps the within-cell event order
    logw = logw[np.argsort(order, kind="stable")] if len(order) else logw
    transform = meta.get("transform")
    return ObservedData(points, counts, logw, trials, station_ids=ids, years=years,
                        transform=CovariateTransform.from_dict(transform) if transform else None)


def data_digest(data: ObservedData) -> str:
    h = hashlib.sha256()
    for arr in (data.points, data.counts, data.n_trials, data.log_magnitudes):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# chain archives

@dataclass
class ChainArchive:
    """Stored draws plus the header needed to interpret and reproduce them.

    ``header`` holds at least: model, seed, M, T, p, n_rows, config, config_hash,
    points and transform.
    """

    header: dict
    names: list
    iterations: np.ndarray
    draws: np.ndarray

    @property
    def model(self) -> str:
        return self.header["model"]

    @property
    def points(self) -> np.ndarray:
        return np.asarray(self.header["points"], dtype=float)

    @property
    def transform(self) -> Optional[CovariateTransform]:
        t = self.header.get("transform")
        return CovariateTransform.from_dict(t) if t else None


def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def write_chain(archive: ChainArchive, path) -> Path:
    path = Path(path)
    draws = np.atleast_2d(archive.draws)
    if draws.shape[0] != len(archive.iterations) or (draws.size and draws.shape[1] != len(archive.names)):
        raise ArchiveError("draws, iterations and names disagree in shape")
    header = dict(archive.header, schema_version=SCHEMA_VERSION, n_rows=int(draws.shape[0]))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write(",".join(["iteration", *archive.names]) + "\n")
        for it, row in zip(archive.iterations, draws):
            fh.write(str(int(it)) + "," + ",".join(_fmt(v) for v in row) + "\n")
    return path


def read_chain(path) -> ChainArchive:
    path = Path(path)
    text = path.read_text()
    if not text.endswith("\n"):
        raise ArchiveError(f"{path}: truncated (no trailing newline)")
    lines = text.split("\n")[:-1]
    if len(lines) < 2 or not lines[0].startswith("# "):
        raise ArchiveError(f"{path}: missing header")
    try:
        header = json.loads(lines[0][2:])
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: unreadable header ({exc})") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ArchiveError(f"{path}: unsupported schema version {header.get('schema_version')}")
    cols = lines[1].split(",")
    if cols[0] != "iteration":
        raise ArchiveError(f"{path}: bad column header")
    names = cols[1:]
    rows = lines[2:]
    if len(rows) != header.get("n_rows"):
        raise ArchiveError(f"{path}: header promises {header.get('n_rows')} rows, found {len(rows)}")
    config = header.get("config", {})
    if config:
        expected = (config["n_iterations"] - config["burn_in"]) // config["thin"]
        if expected != len(rows):
            raise ArchiveError(f"{path}: config implies {expected} stored draws, found {len(rows)}")
    draws = np.empty((len(rows), len(names)))
    iters = np.empty(len(rows), dtype=int)
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != len(names) + 1:
            raise ArchiveError(f"{path}:{i + 3}: expected {len(names) + 1} fields, got {len(parts)}")
        try:
            iters[i] = int(parts[0])
            draws[i] = [float(v) for v in parts[1:]]
        except ValueError:
            raise ArchiveError(f"{path}:{i + 3}: non-numeric field") from None
    return ChainArchive(header, names, iters, draws)


# ---------------------------------------------------------------------------
# grids and tables

def export_grid(grid, path, transform: Optional[CovariateTransform] = None) -> Path:
    """Write ``x,y,median,q05,q95`` per target; coordinates are mapped back if a transform is given."""
    path = Path(path)
    pts = grid.points if transform is None else transform.invert(grid.points)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "median", "q05", "q95"])
        for pt, med, lo, hi in zip(pts, grid.median, grid.q05, grid.q95):
            w.writerow([_fmt(pt[0]), _fmt(pt[1]) if len(pt) > 1 else "", _fmt(med), _fmt(lo), _fmt(hi)])
    return path


def write_table(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, float) else v for v in r])
    return path


def read_points(path, columns: Optional[Sequence[str]] = None) -> np.ndarray:
    """Read target or layout coordinates from a CSV (default: all numeric columns but ``id``)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        cols = list(columns) if columns else [c for c in reader.fieldnames if c != "id"]
        out = []
        for row in reader:
            try:
                out.append([float(row[c]) for c in cols])
            except (KeyError, TypeError, ValueError):
                raise DataError(f"{path}:{reader.line_num}: bad coordinate row") from None
    if not out:
        raise DataError(f"{path}: no points")
    return np.asarray(out, dtype=float)
