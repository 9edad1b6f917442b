"""Observation ingest, the thin-plate-spline baseline m(x), centering and splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
import pandas as pd
import scipy.linalg

from . import InvalidInput

OBS_COLUMNS = ("lon", "lat", "age_bp", "value_c", "source")
CENTERED_COLUMN = "value_centered_c"
SLICE_COLUMNS = ("lon", "lat", "value_c")
DEFAULT_MAX_NODES = 5000


@dataclass(frozen=True)
class ObservationRecord:
    lon: float
    lat: float
    age: float  # years BP
    value: float  # degC
    source: str
    value_centered: float = math.nan

    def __post_init__(self):
        reason = _record_problem(self.lon, self.lat, self.age, self.value, self.source)
        if reason:
            raise InvalidInput(reason)

    @property
    def t(self):
        return -self.age / 1000.0


def _record_problem(lon, lat, age, value, source):
    for name, x in (("lon", lon), ("lat", lat), ("age_bp", age), ("value_c", value)):
        if not np.isfinite(x):
            return f"non-finite {name}"
    if not -180.0 <= lon <= 180.0:
        return "lon out of range"
    if not -90.0 <= lat <= 90.0:
        return "lat out of range"
    if age < 0:
        return "age negative"
    if not source or "," in source:
        return "bad source tag"
    return None


@dataclass(eq=False)
class ObservationTable:
    """Columnar collection of records; iterating yields ObservationRecord."""

    lon: np.ndarray
    lat: np.ndarray
    age: np.ndarray
    value: np.ndarray
    source: np.ndarray  # object array of str
    value_centered: np.ndarray = None

    def __post_init__(self):
        self.lon = np.asarray(self.lon, dtype=float).reshape(-1)
        n = len(self.lon)
        self.lat = np.asarray(self.lat, dtype=float).reshape(-1)
        self.age = np.asarray(self.age, dtype=float).reshape(-1)
        self.value = np.asarray(self.value, dtype=float).reshape(-1)
        self.source = np.asarray(self.source, dtype=object).reshape(-1)
        if self.value_centered is None:
            self.value_centered = np.full(n, np.nan)
        self.value_centered = np.asarray(self.value_centered, dtype=float).reshape(-1)
        if any(len(c) != n for c in (self.lat, self.age, self.value, self.source, self.value_centered)):
            raise InvalidInput("observation columns differ in length")

    @classmethod
    def from_records(cls, records: Iterable[ObservationRecord]) -> "ObservationTable":
        rs = list(records)
        return cls([r.lon for r in rs], [r.lat for r in rs], [r.age for r in rs], [r.value for r in rs],
                   [r.source for r in rs], [r.value_centered for r in rs])

    @classmethod
    def concat(cls, tables) -> "ObservationTable":
        tables = list(tables)
        if not tables:
            return cls([], [], [], [], [])
        return cls(*(np.concatenate([getattr(t, c) for t in tables]) for c in _FIELDS))

    def __len__(self):
        return len(self.lon)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return ObservationRecord(float(self.lon[i]), float(self.lat[i]), float(self.age[i]),
                                     float(self.value[i]), str(self.source[i]), float(self.value_centered[i]))
        return ObservationTable(*(getattr(self, c)[i] for c in _FIELDS))

    def __iter__(self) -> Iterator[ObservationRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def t(self):
        return -self.age / 1000.0

    @property
    def is_centered(self):
        return bool(np.all(np.isfinite(self.value_centered)))

    def to_batch(self):
        from .sparse_gp import Batch

        if not self.is_centered:
            raise InvalidInput("records must be centered before modelling")
        return Batch(np.column_stack([self.lon, self.lat]), self.t, self.value_centered.copy())


_FIELDS = ("lon", "lat", "age", "value", "source", "value_centered")


@dataclass
class IngestReport:
    path: str
    rows_read: int = 0
    rows_accepted: int = 0
    rejects: dict = field(default_factory=dict)  # reason -> count
    rejected_rows: list = field(default_factory=list)  # (1-based data row, reason)

    @property
    def rows_rejected(self):
        return sum(self.rejects.values())

    def to_text(self, max_rows=20):
        lines = [f"file: {self.path}", f"rows_read: {self.rows_read}", f"rows_accepted: {self.rows_accepted}",
                 f"rows_rejected: {self.rows_rejected}"]
        lines += [f"reject[{reason}]: {count}" for reason, count in sorted(self.rejects.items())]
        lines += [f"  row {row}: {reason}" for row, reason in self.rejected_rows[:max_rows]]
        if len(self.rejected_rows) > max_rows:
            lines.append(f"  ... {len(self.rejected_rows) - max_rows} more")
        return "\n".join(lines) + "\n"


def _parse_float_column(col: pd.Series):
    """Correctly rounded str -> float; entries that do not parse become NaN plus a flag."""
    raw = col.fillna("").str.strip().to_numpy(dtype=object)
    try:
        return np.array(raw, dtype=float), np.zeros(len(raw), dtype=bool)
    except ValueError:
        out = np.empty(len(raw))
        bad = np.zeros(len(raw), dtype=bool)
        for i, s in enumerate(raw):
            try:
                out[i] = float(s)
            except ValueError:
                out[i], bad[i] = np.nan, True
        return out, bad


def _read_csv(path, required):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise InvalidInput(f"{path}: empty file, header required") from e
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise InvalidInput(f"{path}: missing header column(s) {', '.join(missing)}")
    return df


def load_observations(path) -> tuple[ObservationTable, IngestReport]:
    """Read ``lon,lat,age_bp,value_c,source`` (optionally ``value_centered_c``)."""
    df = _read_csv(path, OBS_COLUMNS)
    n = len(df)
    report = IngestReport(str(path), rows_read=n)
    reason = np.full(n, None, dtype=object)
    cols = {}
    for name in ("lon", "lat", "age_bp", "value_c"):
        vals, bad = _parse_float_column(df[name])
        cols[name] = vals
        reason[bad & (reason == None)] = f"unparseable {name}"  # noqa: E711
    for name in ("lon", "lat", "age_bp", "value_c"):
        reason[~np.isfinite(cols[name]) & (reason == None)] = f"non-finite {name}"  # noqa: E711
    checks = (
        ("lon out of range", (cols["lon"] < -180) | (cols["lon"] > 180)),
        ("lat out of range", (cols["lat"] < -90) | (cols["lat"] > 90)),
        ("age negative", cols["age_bp"] < 0),
    )
    for label, mask in checks:
        reason[mask & (reason == None)] = label  # noqa: E711
    source = df["source"].str.strip().to_numpy(dtype=object)
    reason[(source == "") & (reason == None)] = "bad source tag"  # noqa: E711
    centered = None
    if CENTERED_COLUMN in df.columns:
        centered, _ = _parse_float_column(df[CENTERED_COLUMN])
    ok = reason == None  # noqa: E711
    for i in np.flatnonzero(~ok):
        report.rejects[reason[i]] = report.rejects.get(reason[i], 0) + 1
        report.rejected_rows.append((int(i) + 1, reason[i]))
    report.rows_accepted = int(ok.sum())
    table = ObservationTable(cols["lon"][ok], cols["lat"][ok], cols["age_bp"][ok], cols["value_c"][ok], source[ok],
                             None if centered is None else centered[ok])
    return table, report


def _fmt(x):
    return repr(float(x))


def save_observations(table: ObservationTable, path, include_centered=None):
    """Write records with shortest round-trip float text, so load(save(x)) == x exactly."""
    if include_centered is None:
        include_centered = table.is_centered and len(table) > 0
    header = list(OBS_COLUMNS) + ([CENTERED_COLUMN] if include_centered else [])
    cols = [table.lon, table.lat, table.age, table.value]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(table)):
            row = [_fmt(c[i]) for c in cols] + [table.source[i]]
            if include_centered:
                row.append(_fmt(table.value_centered[i]))
            w.writerow(row)


# -- gridded slices -------------------------------------------------------------


@dataclass(eq=False)
class GriddedSlice:
    lon: np.ndarray
    lat: np.ndarray
    value: np.ndarray
    age_bp: float
    simulation_id: str

    def to_table(self) -> ObservationTable:
        n = len(self.lon)
        return ObservationTable(self.lon, self.lat, np.full(n, float(self.age_bp)), self.value,
                                np.full(n, self.simulation_id, dtype=object))


def load_slice(path, age_bp, simulation_id) -> GriddedSlice:
    df = _read_csv(path, SLICE_COLUMNS)
    cols = {}
    for name in SLICE_COLUMNS:
        vals, bad = _parse_float_column(df[name])
        if (bad | ~np.isfinite(vals)).any():
            row = int(np.flatnonzero(bad | ~np.isfinite(vals))[0]) + 1
            raise InvalidInput(f"{path}: row {row}: non-finite or unparseable {name}")
        cols[name] = vals
    if age_bp < 0:
        raise InvalidInput(f"{path}: age_bp must be non-negative")
    return GriddedSlice(cols["lon"], cols["lat"], cols["value_c"], float(age_bp), str(simulation_id))


def save_slice(s: GriddedSlice, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SLICE_COLUMNS)
        for row in zip(s.lon, s.lat, s.value):
            w.writerow([_fmt(x) for x in row])


# -- thin-plate-spline baseline ---------------------------------------------------


def _tps_kernel(r2):
    # r^2 log r, written in r^2 to avoid the square root; zero at r = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r2 > 0, 0.5 * r2 * np.log(np.where(r2 > 0, r2, 1.0)), 0.0)


def _sqdist(A, B):
    return np.maximum((A[:, None, 0] - B[None, :, 0]) ** 2 + (A[:, None, 1] - B[None, :, 1]) ** 2, 0.0)


@dataclass(frozen=True, eq=False)
class ThinPlateSpline:
    """s(x) = sum_j w_j phi(|x - x_j|) + c0 + c1 u + c2 v on normalized coordinates (u, v)."""

    nodes: np.ndarray  # (n, 2) lon/lat
    weights: np.ndarray  # (n,)
    affine: np.ndarray  # (3,)
    center: np.ndarray  # (2,)
    scale: float
    slice_id: str = ""

    def __call__(self, lon, lat, chunk=2000):
        lon = np.asarray(lon, dtype=float)
        shape = lon.shape
        P = (np.column_stack([lon.reshape(-1), np.asarray(lat, dtype=float).reshape(-1)]) - self.center) / self.scale
        U = (self.nodes - self.center) / self.scale
        out = np.empty(len(P))
        for s in range(0, len(P), chunk):
            part = P[s:s + chunk]
            # row-wise reductions: a point's value does not depend on where it sits in the batch
            radial = (_tps_kernel(_sqdist(part, U)) * self.weights).sum(axis=1)
            out[s:s + chunk] = radial + self.affine[0] + part[:, 0] * self.affine[1] + part[:, 1] * self.affine[2]
        return out.reshape(shape)


def subsample_nodes(n, max_nodes=DEFAULT_MAX_NODES):
    """Indices of every k-th node, k chosen so that at most ``max_nodes`` remain."""
    if max_nodes < 3:
        raise InvalidInput("max_nodes must be at least 3")
    return np.arange(0, n, max(1, math.ceil(n / max_nodes)))


def fit_tps(lon, lat, values, slice_id="", max_nodes=DEFAULT_MAX_NODES) -> ThinPlateSpline:
    X = np.column_stack([np.asarray(lon, dtype=float), np.asarray(lat, dtype=float)])
    y = np.asarray(values, dtype=float)
    idx = subsample_nodes(len(X), max_nodes)
    X, y = X[idx], y[idx]
    n = len(X)
    center = X.mean(axis=0) if n else np.zeros(2)
    scale = float(np.max(np.abs(X - center))) if n else 1.0
    scale = scale if scale > 0 else 1.0
    U = (X - center) / scale
    P = np.column_stack([np.ones(n), U])
    if n < 3 or np.linalg.matrix_rank(P) < 3:
        raise InvalidInput(f"slice {slice_id!r}: need at least 3 non-collinear nodes")
    A = np.zeros((n + 3, n + 3))
    A[:n, :n] = _tps_kernel(_sqdist(U, U))
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.concatenate([y, np.zeros(3)])
    try:
        sol = scipy.linalg.solve(A, rhs, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise InvalidInput(f"slice {slice_id!r}: singular interpolation system ({e})") from e
    if not np.all(np.isfinite(sol)):
        raise InvalidInput(f"slice {slice_id!r}: singular interpolation system")
    return ThinPlateSpline(X, sol[:n], sol[n:], center, scale, str(slice_id))


@dataclass(frozen=True, eq=False)
class BaselineModel:
    """m(x): arithmetic mean of one interpolant per simulation slice."""

    interpolants: tuple

    def __post_init__(self):
        if len(self.interpolants) < 1:
            raise InvalidInput("baseline needs at least one interpolant")
        object.__setattr__(self, "interpolants", tuple(self.interpolants))

    @property
    def count(self):
        return len(self.interpolants)

    def __call__(self, lon, lat):
        # fixed summation order keeps the result independent of evaluation chunking
        total = sum(f(lon, lat) for f in self.interpolants)
        return total / self.count


def fit_baseline(slices, max_nodes=DEFAULT_MAX_NODES) -> BaselineModel:
    slices = list(slices)
    if not slices:
        raise InvalidInput("fit_baseline needs at least one slice")
    fits = [fit_tps(s.lon, s.lat, s.value, slice_id=f"{s.simulation_id}@{s.age_bp:g}", max_nodes=max_nodes)
            for s in slices]
    # canonical order so the averaged field does not depend on the order slices were listed
    fits.sort(key=lambda f: (f.slice_id, f.nodes.tobytes(), f.weights.tobytes()))
    return BaselineModel(tuple(fits))


def center(table: ObservationTable, baseline) -> ObservationTable:
    m = np.asarray(baseline(table.lon, table.lat), dtype=float)
    return ObservationTable(table.lon, table.lat, table.age, table.value, table.source, table.value - m)


def uncenter(values_centered, lon, lat, baseline):
    return np.asarray(values_centered, dtype=float) + np.asarray(baseline(lon, lat), dtype=float)


def split_leave_time_slice_out(table: ObservationTable, held_out_age, simulation_id):
    """Test = the simulation's records at that age; every other record (pollen included) trains."""
    test_mask = (table.source == simulation_id) & (table.age == float(held_out_age))
    if not test_mask.any():
        raise InvalidInput(f"no records for simulation {simulation_id!r} at age {held_out_age} BP")
    return table[~test_mask], table[test_mask]


def slice_ages(table: ObservationTable, simulation_id) -> np.ndarray:
    return np.unique(table.age[table.source == simulation_id])


def bounding_box(table: ObservationTable, pad=0.0) -> Optional[tuple]:
    if len(table) == 0:
        return None
    return (float(table.lon.min() - pad), float(table.lon.max() + pad),
            float(table.lat.min() - pad), float(table.lat.max() + pad))
