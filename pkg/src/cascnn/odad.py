"""OD attraction degree (ODAD): per-interval multi-day mean OD flow, its
five-level classification, the loss masks derived from it, and sparsity reports."""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError


class Level(enum.Enum):
    LOWEST = "Lowest"
    LOW = "Low"
    MIDDLE = "Middle"
    HIGH = "High"
    HIGHEST = "Highest"


LEVEL_ORDER = list(Level)
BUCKET_LABELS = ["=0", "(0,2]", "(2,4]", "(4,6]", ">6"]


@dataclass
class OdadTable:
    a: np.ndarray  # interval x origin x destination
    n_days: int


@dataclass
class MaskSet:
    mask: np.ndarray  # bool, interval x origin x destination; True = kept
    threshold: float

    @property
    def kept_count(self):
        return self.mask.sum(axis=(1, 2))

    def for_interval(self, t):
        return self.mask[t]


def compute_odad(od, days):
    """Mean OD count per interval over ``days`` (should be training days only)."""
    days = list(days)
    if not days:
        raise ConfigError("ODAD needs at least one day")
    counts = od.counts if hasattr(od, "counts") else np.asarray(od)
    a = counts[days].sum(axis=0) / len(days)
    return OdadTable(a.astype(np.float64), len(days))


def classify_level(a):
    if a < 0:
        raise ValueError(f"ODAD value must be non-negative, got {a}")
    if a == 0:
        return Level.LOWEST
    if a <= 2:
        return Level.LOW
    if a <= 4:
        return Level.MIDDLE
    if a <= 6:
        return Level.HIGH
    return Level.HIGHEST


def level_index(a):
    """Vectorized level code 0..4 (Lowest..Highest)."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValueError("ODAD values must be non-negative")
    return np.where(a == 0, 0, np.searchsorted([2.0, 4.0, 6.0], a, side="left") + 1)


def build_masks(table, threshold=2.0):
    """Keep a cell iff its ODAD is strictly above ``threshold``."""
    return MaskSet(table.a > threshold, float(threshold))


def full_mask(n_intervals, n):
    return MaskSet(np.ones((n_intervals, n, n), dtype=bool), float("-inf"))


def bucket_fractions(matrix):
    """Fractions of cells in {=0, (0,2], (2,4], (4,6], >6}."""
    m = np.asarray(matrix, dtype=np.float64)
    codes = level_index(m)
    return np.bincount(codes.ravel(), minlength=5) / m.size


def sparsity_report(od, table, intervals=None):
    """Per-interval bucket fractions of instantaneous flow (averaged over days)
    and per-interval OD-pair counts at each ODAD level."""
    counts = od.counts
    n_days, n_int = counts.shape[:2]
    intervals = range(n_int) if intervals is None else intervals
    grid = getattr(od, "grid", None)
    rows = []
    for t in intervals:
        fractions = np.mean([bucket_fractions(counts[d, t]) for d in range(n_days)], axis=0)
        levels = np.bincount(level_index(table.a[t]).ravel(), minlength=5)
        label = str(t)
        if grid is not None:
            start = grid.interval_start(0, t).astype(object).time()
            label = start.strftime("%H:%M")
        rows.append({
            "interval": int(t),
            "start": label,
            **{f"flow{b}": float(f) for b, f in zip(BUCKET_LABELS, fractions)},
            **{f"level_{lv.value}": int(c) for lv, c in zip(LEVEL_ORDER, levels)},
        })
    return {"n": int(counts.shape[-1]), "days": int(n_days), "odad_days": table.n_days, "intervals": rows}


def write_sparsity_report(report, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sparsity.json").write_text(json.dumps(report, indent=2) + "\n")
    rows = report["intervals"]
    with open(out_dir / "sparsity.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["interval"])
        writer.writeheader()
        writer.writerows(rows)


def write_mask_file(masks, csv_path, json_path=None):
    """Kept cells as ``interval,origin,destination,mask`` rows plus a JSON header."""
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    n_int, n, _ = masks.mask.shape
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["interval", "origin", "destination", "mask"])
        for t, i, j in np.argwhere(masks.mask):
            writer.writerow([int(t), int(i), int(j), 1])
    header = {"n": int(n), "intervals": int(n_int), "threshold": masks.threshold,
              "kept_count": [int(k) for k in masks.kept_count]}
    json_path.write_text(json.dumps(header, indent=2) + "\n")


def read_mask_file(csv_path, json_path=None):
    csv_path = Path(csv_path)
    json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
    header = json.loads(json_path.read_text())
    mask = np.zeros((header["intervals"], header["n"], header["n"]), dtype=bool)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["interval", "origin", "destination", "mask"]:
            raise FormatError(f"{csv_path}: bad mask header")
        for t, i, j, m in reader:
            mask[int(t), int(i), int(j)] = m == "1"
    return MaskSet(mask, float(header["threshold"]))
