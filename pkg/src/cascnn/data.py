"""Smart-card (AFC) records to OD tensors, flow series and training samples."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import date, datetime, time
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

AFC_HEADER = ["card_id", "entry_station", "entry_time", "exit_station", "exit_time"]
MAX_REJECT_FRACTION = 0.01


@dataclass(frozen=True)
class AfcRecord:
    card_id: str
    entry_station: int
    entry_time: datetime
    exit_station: int
    exit_time: datetime


@dataclass
class ParseResult:
    records: list
    rejected_lines: list = field(default_factory=list)

    @property
    def rejected(self):
        return len(self.rejected_lines)


def _parse_clock(value):
    if isinstance(value, time):
        return value
    return time.fromisoformat(value)


@dataclass(frozen=True)
class TimeGrid:
    """Service-day grid: ``dates`` x fixed-length intervals between start and end."""

    dates: tuple
    service_start: time = time(5, 0)
    service_end: time = time(23, 0)
    interval_minutes: int = 30

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(d if isinstance(d, date) else date.fromisoformat(d) for d in self.dates))
        object.__setattr__(self, "service_start", _parse_clock(self.service_start))
        object.__setattr__(self, "service_end", _parse_clock(self.service_end))
        span = self._span_seconds()
        if self.interval_minutes <= 0 or span <= 0 or span % (self.interval_minutes * 60):
            raise ConfigError(
                f"service window {self.service_start}-{self.service_end} is not a positive "
                f"multiple of {self.interval_minutes} min"
            )

    def _span_seconds(self):
        start = self.service_start.hour * 3600 + self.service_start.minute * 60 + self.service_start.second
        end = self.service_end.hour * 3600 + self.service_end.minute * 60 + self.service_end.second
        return end - start

    @property
    def intervals_per_day(self):
        return self._span_seconds() // (self.interval_minutes * 60)

    @property
    def n_days(self):
        return len(self.dates)

    def interval_start(self, day, t):
        base = datetime.combine(self.dates[day], self.service_start)
        return np.datetime64(base, "s") + np.timedelta64(t * self.interval_minutes * 60, "s")

    def locate(self, stamps):
        """Map datetime64[s] stamps to (day index, interval, in_grid mask)."""
        stamps = np.asarray(stamps, dtype="datetime64[s]")
        days = stamps.astype("datetime64[D]")
        grid_days = np.array(self.dates, dtype="datetime64[D]")
        day_idx = np.searchsorted(grid_days, days)
        known = (day_idx < len(grid_days)) & (grid_days[np.minimum(day_idx, len(grid_days) - 1)] == days)
        start = np.timedelta64(self.service_start.hour * 3600 + self.service_start.minute * 60
                               + self.service_start.second, "s")
        offset = (stamps - days - start).astype(np.int64)
        width = self.interval_minutes * 60
        interval = np.floor_divide(offset, width)
        ok = known & (offset >= 0) & (interval < self.intervals_per_day)
        return day_idx, interval, ok


def parse_afc(stream, n=None):
    """Parse AFC CSV text (file object or string) into records.

    Malformed rows are skipped and their line numbers collected; more than 1%
    malformed rows is a hard :class:`FormatError`.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != AFC_HEADER:
        raise FormatError(f"AFC CSV header must be {','.join(AFC_HEADER)!r}, got {header!r}")
    records, rejected = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            card, s_in, t_in, s_out, t_out = row
            rec = AfcRecord(card, int(s_in), datetime.fromisoformat(t_in), int(s_out), datetime.fromisoformat(t_out))
        except ValueError:
            rejected.append(lineno)
            continue
        if rec.exit_time <= rec.entry_time or rec.entry_station < 0 or rec.exit_station < 0:
            rejected.append(lineno)
            continue
        if n is not None and (rec.entry_station >= n or rec.exit_station >= n):
            rejected.append(lineno)
            continue
        records.append(rec)
    total = len(records) + len(rejected)
    if rejected and len(rejected) > MAX_REJECT_FRACTION * total:
        shown = ", ".join(map(str, rejected[:20]))
        raise FormatError(f"{len(rejected)} of {total} rows malformed (lines {shown}{' ...' if len(rejected) > 20 else ''})")
    return ParseResult(records, rejected)


@dataclass(frozen=True)
class TripArrays:
    entry_station: np.ndarray
    entry_time: np.ndarray
    exit_station: np.ndarray
    exit_time: np.ndarray

    @classmethod
    def from_records(cls, records):
        return cls(
            np.array([r.entry_station for r in records], dtype=np.int64),
            np.array([r.entry_time for r in records], dtype="datetime64[s]"),
            np.array([r.exit_station for r in records], dtype=np.int64),
            np.array([r.exit_time for r in records], dtype="datetime64[s]"),
        )

    def __len__(self):
        return len(self.entry_station)


def _trips(records):
    return records if isinstance(records, TripArrays) else TripArrays.from_records(records)


def _check_stations(trips, n):
    for name, arr in (("entry_station", trips.entry_station), ("exit_station", trips.exit_station)):
        if len(arr) and (arr.max() >= n or arr.min() < 0):
            raise DataError(f"{name} out of range [0, {n}): found {int(arr.max()) if arr.max() >= n else int(arr.min())}")


@dataclass
class OdTensor:
    counts: np.ndarray  # day x interval x origin x destination
    grid: TimeGrid
    dropped: int = 0

    @property
    def n(self):
        return self.counts.shape[-1]


@dataclass
class FlowSeries:
    inflow: np.ndarray  # day x interval x station
    outflow: np.ndarray
    convention: str = "exit_time"
    outflow_dropped: int = 0


def extract_od(records, grid, n):
    """Count trips by (day, entry interval, entry station, exit station)."""
    trips = _trips(records)
    _check_stations(trips, n)
    counts = np.zeros((grid.n_days, grid.intervals_per_day, n, n), dtype=np.int64)
    if len(trips):
        day, t, ok = grid.locate(trips.entry_time)
        np.add.at(counts, (day[ok], t[ok], trips.entry_station[ok], trips.exit_station[ok]), 1)
        dropped = int((~ok).sum())
    else:
        dropped = 0
    return OdTensor(counts, grid, dropped)


def extract_flows(records, grid, n, convention="exit_time"):
    """Inflow by entry time/station; outflow by exit time/station or OD column sums.

    Trips entering outside the grid are ignored entirely. Under the exit-time
    convention, trips whose exit falls outside the grid are dropped from the
    outflow and counted in ``outflow_dropped``.
    """
    if convention not in ("exit_time", "column_sum"):
        raise ConfigError(f"outflow_convention must be exit_time or column_sum, got {convention!r}")
    trips = _trips(records)
    _check_stations(trips, n)
    shape = (grid.n_days, grid.intervals_per_day, n)
    inflow = np.zeros(shape, dtype=np.int64)
    outflow = np.zeros(shape, dtype=np.int64)
    dropped = 0
    if len(trips):
        day, t, ok = grid.locate(trips.entry_time)
        np.add.at(inflow, (day[ok], t[ok], trips.entry_station[ok]), 1)
        if convention == "exit_time":
            xday, xt, xok = grid.locate(trips.exit_time)
            keep = ok & xok
            np.add.at(outflow, (xday[keep], xt[keep], trips.exit_station[keep]), 1)
            dropped = int((ok & ~xok).sum())
        else:
            np.add.at(outflow, (day[ok], t[ok], trips.exit_station[ok]), 1)
    return FlowSeries(inflow, outflow, convention, dropped)


@dataclass(frozen=True)
class Scaler:
    min: float
    max: float

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.max == self.min:
            return np.zeros_like(x)
        return (x - self.min) / (self.max - self.min)

    def invert(self, u):
        return np.asarray(u, dtype=np.float64) * (self.max - self.min) + self.min

    @property
    def range(self):
        return self.max - self.min


def fit_scaler(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ConfigError("cannot fit a scaler on no values")
    return Scaler(float(values.min()), float(values.max()))


@dataclass
class Sample:
    history: np.ndarray  # x x n x n, same interval on days d-x .. d-1
    inflow_win: np.ndarray  # y x n, intervals t-y .. t-1 of day d
    outflow_win: np.ndarray
    target: np.ndarray  # n x n
    day: int
    interval: int


def build_samples(od, flows, od_scaler, flow_scaler, x=5, y=5, days=None):
    """One normalized sample per (d, t) with d >= x and t >= y.

    ``days`` restricts the target days (history may still reach earlier days).
    """
    if x < 1 or y < 1:
        raise ConfigError(f"history_days and flow_steps must be >= 1 (got x={x}, y={y})")
    n_days, n_int = od.counts.shape[:2]
    if n_days < x + 1:
        raise ConfigError(f"need at least {x + 1} days for x={x}, have {n_days}")
    if n_int <= y:
        raise ConfigError(f"need more than {y} intervals per day, have {n_int}")
    od_norm = od_scaler.apply(od.counts)
    inflow = flow_scaler.apply(flows.inflow)
    outflow = flow_scaler.apply(flows.outflow)
    wanted = range(x, n_days) if days is None else [d for d in days if d >= x]
    samples = []
    for d in wanted:
        for t in range(y, n_int):
            samples.append(Sample(
                history=od_norm[d - x:d, t].copy(),
                inflow_win=inflow[d, t - y:t].copy(),
                outflow_win=outflow[d, t - y:t].copy(),
                target=od_norm[d, t].copy(),
                day=d,
                interval=t,
            ))
    return samples


def held_out_days(n_days, test_fraction=0.2):
    """The trailing fifth of days (at least one) is held out for testing."""
    n_test = max(1, int(round(n_days * test_fraction)))
    if n_days < 2:
        raise ConfigError("need at least two days to hold out a test period")
    return list(range(n_days - n_test, n_days))


def split_train_val_test(samples, n_days, val_fraction=0.1, test_fraction=0.2, seed=0):
    test_days = set(held_out_days(n_days, test_fraction))
    test = [s for s in samples if s.day in test_days]
    rest = [s for s in samples if s.day not in test_days]
    n_val = int(round(val_fraction * len(rest)))
    order = np.random.default_rng(seed).permutation(len(rest))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(rest) if i not in val_idx]
    val = [s for i, s in enumerate(rest) if i in val_idx]
    return train, val, test


# -- dataset directories ---------------------------------------------------------

def read_manifest(dataset_dir):
    path = Path(dataset_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing manifest {path}") from exc
    if "n" not in manifest or "dates" not in manifest:
        raise FormatError(f"{path} must contain 'n' and 'dates'")
    return manifest


def load_dataset(dataset_dir, interval_minutes=30, service_start="05:00", service_end="23:00"):
    """Read ``afc.csv`` plus ``manifest.json`` from a dataset directory."""
    manifest = read_manifest(dataset_dir)
    grid = TimeGrid(tuple(manifest["dates"]), service_start, service_end, interval_minutes)
    path = Path(dataset_dir) / "afc.csv"
    if not path.exists():
        raise DataError(f"missing {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        parsed = parse_afc(fh, n=manifest["n"])
    return manifest, grid, parsed


@dataclass
class Ingested:
    """OD counts and flow series on one grid, as stored by ``ingest``."""

    od: OdTensor
    flows: FlowSeries
    outflow_column_sum: np.ndarray
    report: dict

    def save(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(
            out_dir / "tensors.npz",
            od=self.od.counts,
            inflow=self.flows.inflow,
            outflow=self.flows.outflow,
            outflow_column_sum=self.outflow_column_sum,
        )
        grid = self.od.grid
        meta = {
            "n": self.od.n,
            "dates": [d.isoformat() for d in grid.dates],
            "service_start": grid.service_start.strftime("%H:%M"),
            "service_end": grid.service_end.strftime("%H:%M"),
            "interval_minutes": grid.interval_minutes,
            "outflow_convention": self.flows.convention,
            **self.report,
        }
        (out_dir / "ingest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, out_dir, outflow_convention=None):
        out_dir = Path(out_dir)
        try:
            meta = json.loads((out_dir / "ingest.json").read_text())
            arrays = np.load(out_dir / "tensors.npz")
        except FileNotFoundError as exc:
            raise DataError(f"{out_dir} is not an ingest directory ({exc.filename} missing)") from exc
        grid = TimeGrid(tuple(meta["dates"]), meta["service_start"], meta["service_end"], meta["interval_minutes"])
        convention = outflow_convention or meta["outflow_convention"]
        outflow = arrays["outflow"] if convention == "exit_time" else arrays["outflow_column_sum"]
        od = OdTensor(arrays["od"], grid, meta.get("dropped_entry", 0))
        flows = FlowSeries(arrays["inflow"], outflow, convention, meta.get("dropped_exit", 0))
        return cls(od, flows, arrays["outflow_column_sum"], meta)


def ingest(dataset_dir, interval_minutes=30, service_start="05:00", service_end="23:00",
           outflow_convention="exit_time"):
    manifest, grid, parsed = load_dataset(dataset_dir, interval_minutes, service_start, service_end)
    n = manifest["n"]
    trips = TripArrays.from_records(parsed.records)
    od = extract_od(trips, grid, n)
    flows = extract_flows(trips, grid, n, outflow_convention)
    column_sum = od.counts.sum(axis=2)
    report = {
        "records": len(parsed.records),
        "rejected_rows": parsed.rejected,
        "rejected_lines": parsed.rejected_lines[:100],
        "dropped_entry": od.dropped,
        "dropped_exit": flows.outflow_dropped,
        "total_od": int(od.counts.sum()),
        "total_inflow": int(flows.inflow.sum()),
        "total_outflow": int(flows.outflow.sum()),
    }
    return Ingested(od, flows, column_sum, report)


def conservation_violations(od, flows):
    """Cells where inflow differs from the OD row sum, plus the global totals."""
    row_sum = od.counts.sum(axis=3)
    bad = np.argwhere(row_sum != flows.inflow)
    return {
        "row_sum_mismatches": len(bad),
        "first_mismatch": bad[0].tolist() if len(bad) else None,
        "total_od": int(od.counts.sum()),
        "total_inflow": int(flows.inflow.sum()),
        "total_outflow": int(flows.outflow.sum()),
    }


def weekdays(start, count):
    """``count`` consecutive weekdays from ``start`` (inclusive)."""
    out, day = [], start if isinstance(start, date) else date.fromisoformat(start)
    while len(out) < count:
        if day.weekday() < 5:
            out.append(day)
        day = date.fromordinal(day.toordinal() + 1)
    return out
