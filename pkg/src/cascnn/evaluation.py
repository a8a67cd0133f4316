"""Masked RMSE / MAE / WMAPE on the raw count scale, plus grouped reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["RMSE", "MAE", "WMAPE"]


class EmptyScopeError(DataError):
    pass


@dataclass
class MetricReport:
    rmse: float
    mae: float
    wmape: float  # nan when the scope has no positive target
    mape: float
    cells: int
    positive_cells: int
    scope: str = "overall"

    def __post_init__(self):
        # power-mean inequality; tolerance covers rounding in the two sums, and
        # errors below ~1e-154 square to zero, so they are exempt
        assert self.rmse >= self.mae * (1 - 1e-12) or self.mae < 1e-150, (self.rmse, self.mae)

    def as_dict(self):
        return {
            "scope": self.scope,
            "RMSE": self.rmse,
            "MAE": self.mae,
            "WMAPE": None if math.isnan(self.wmape) else self.wmape,
            "MAPE": None if math.isnan(self.mape) else self.mape,
            "cells": self.cells,
            "positive_cells": self.positive_cells,
        }


@dataclass
class ErrorSums:
    """Additive sufficient statistics; pooled metrics are ratios of these."""

    sq: float = 0.0
    abs: float = 0.0
    abs_pos: float = 0.0
    target_pos: float = 0.0
    rel_pos: float = 0.0
    cells: int = 0
    positive_cells: int = 0

    def add(self, pred, target, mask):
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        err = (pred - target)[mask]
        tgt = target[mask]
        pos = tgt > 0
        self.sq += float(np.sum(err * err))
        self.abs += float(np.sum(np.abs(err)))
        self.abs_pos += float(np.sum(np.abs(err[pos])))
        self.target_pos += float(np.sum(tgt[pos]))
        self.rel_pos += float(np.sum(np.abs(err[pos]) / tgt[pos]))
        self.cells += int(mask.sum())
        self.positive_cells += int(pos.sum())
        return self

    def report(self, scope="overall"):
        if self.cells == 0:
            raise EmptyScopeError(f"no unmasked cells in scope {scope!r}")
        wmape = self.abs_pos / self.target_pos if self.target_pos > 0 else math.nan
        mape = self.rel_pos / self.positive_cells if self.positive_cells else math.nan
        return MetricReport(
            rmse=math.sqrt(self.sq / self.cells),
            mae=self.abs / self.cells,
            wmape=wmape,
            mape=mape,
            cells=self.cells,
            positive_cells=self.positive_cells,
            scope=scope,
        )


def metrics(preds, targets, masks, scope="overall"):
    """Pooled metrics over every unmasked cell of every sample in scope.

    Inputs are raw-scale arrays (or sequences of n x n matrices). WMAPE only
    counts cells whose target is positive.
    """
    preds, targets, masks = np.asarray(preds, float), np.asarray(targets, float), np.asarray(masks, bool)
    if preds.shape != targets.shape or masks.shape != targets.shape:
        raise DataError(f"shape mismatch: preds {preds.shape}, targets {targets.shape}, masks {masks.shape}")
    return ErrorSums().add(preds, targets, masks).report(scope)


# -- predictions on the raw scale -------------------------------------------------

@dataclass
class PredictionSet:
    """Raw-scale predictions for a list of samples, aligned by index."""

    days: np.ndarray
    intervals: np.ndarray
    preds: np.ndarray  # s x n x n, clipped at zero
    targets: np.ndarray
    masks: np.ndarray
    clipped: int = 0

    def __len__(self):
        return len(self.days)


def predict_samples(model, samples, od_scaler, masks):
    """Run the model and denormalize; negative predictions are clipped to zero."""
    preds, targets, mask_list = [], [], []
    for s in samples:
        preds.append(od_scaler.invert(model.predict(s)))
        targets.append(od_scaler.invert(s.target))
        mask_list.append(masks.for_interval(s.interval))
    return _prediction_set(samples, preds, targets, mask_list)


def _prediction_set(samples, preds, targets, mask_list):
    preds = np.array(preds)
    clipped = int((preds < 0).sum())
    if clipped:
        log.info("clipped %d negative predictions to zero", clipped)
    return PredictionSet(
        days=np.array([s.day for s in samples], dtype=int),
        intervals=np.array([s.interval for s in samples], dtype=int),
        preds=np.maximum(preds, 0.0),
        targets=np.rint(np.array(targets)),
        masks=np.array(mask_list, dtype=bool),
        clipped=clipped,
    )


def usable(pset):
    """Samples whose mask keeps at least one cell."""
    return pset.masks.any(axis=(1, 2))


def overall_metrics(pset):
    keep = usable(pset)
    return metrics(pset.preds[keep], pset.targets[keep], pset.masks[keep])


def per_interval_metrics(pset):
    """Pooled metrics per interval-of-day, sorted by interval."""
    reports = {}
    for t in sorted(set(pset.intervals.tolist())):
        sel = (pset.intervals == t) & usable(pset)
        if not sel.any():
            continue
        reports[t] = metrics(pset.preds[sel], pset.targets[sel], pset.masks[sel], scope=f"interval {t}")
    return reports


def od_pair_series(pset, pairs):
    """Chronological (day, interval, actual, predicted) per requested pair,
    restricted to samples where the pair is unmasked."""
    n = pset.targets.shape[-1]
    order = np.lexsort((pset.intervals, pset.days))
    out = {}
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise KeyError(f"unknown OD pair ({i}, {j}) for n={n}")
        rows = [
            (int(pset.days[k]), int(pset.intervals[k]), float(pset.targets[k, i, j]), float(pset.preds[k, i, j]))
            for k in order
            if pset.masks[k, i, j]
        ]
        if not rows:
            log.warning("OD pair (%d, %d) is masked in every test sample", i, j)
        out[(i, j)] = rows
    return out


def pearson(xs, ys):
    """Pearson r, or None when either side has zero variance."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    dx, dy = xs - xs.mean(), ys - ys.mean()
    denom = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if denom == 0.0:
        return None
    return float(np.clip(np.sum(dx * dy) / denom, -1.0, 1.0))


def _minmax(v):
    v = np.asarray(v, float)
    span = v.max() - v.min()
    return np.zeros_like(v) if span == 0 else (v - v.min()) / span


def interpretability_report(model, inflow, train_days=None):
    """Per-station (normalized total inflow, normalized gate weight) and Pearson r."""
    if "gate.w" not in model.params:
        raise DataError("model has no gate vector w")
    inflow = np.asarray(inflow)
    if train_days is not None:
        inflow = inflow[list(train_days)]
    volume = inflow.reshape(-1, inflow.shape[-1]).sum(axis=0).astype(float)
    w = model.params["gate.w"].values.copy()
    r = pearson(volume, w)
    return {
        "stations": [
            {"station": i, "inflow_volume": float(a), "w": float(b), "inflow_norm": float(c), "w_norm": float(d)}
            for i, (a, b, c, d) in enumerate(zip(volume, w, _minmax(volume), _minmax(w)))
        ],
        "pearson_r": r,
        "pearson_r_text": "n/a" if r is None else f"{r:.6f}",
        "sign": "n/a" if r is None else ("negative" if r < 0 else "positive" if r > 0 else "zero"),
    }


class HistoricalAverage:
    """Predicts the training-day mean OD matrix at the sample's interval."""

    def __init__(self, od_counts, train_days):
        days = list(train_days)
        self.table = np.asarray(od_counts)[days].sum(axis=0) / len(days)

    def predict_raw(self, t):
        return self.table[t]


def historical_average_predictor(od_counts, train_days):
    return HistoricalAverage(od_counts, train_days)


def predict_historical_average(ha, samples, od_scaler, masks):
    preds = [ha.predict_raw(s.interval) for s in samples]
    targets = [od_scaler.invert(s.target) for s in samples]
    return _prediction_set(samples, preds, targets, [masks.for_interval(s.interval) for s in samples])


# -- files ------------------------------------------------------------------------

def write_metrics_csv(reports, path, key_name="interval"):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([key_name, "RMSE", "MAE", "WMAPE", "cells"])
        for key, r in reports.items():
            writer.writerow([key, _fmt(r.rmse), _fmt(r.mae), _fmt(r.wmape), r.cells])


def write_pair_series(series, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["origin", "destination", "day", "interval", "actual", "predicted"])
        for (i, j), rows in series.items():
            for d, t, a, p in rows:
                writer.writerow([i, j, d, t, _fmt(a), _fmt(p)])


def write_interpretability(report, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["station", "inflow_volume", "w", "inflow_norm", "w_norm"])
        for s in report["stations"]:
            writer.writerow([s["station"], _fmt(s["inflow_volume"]), _fmt(s["w"]),
                             _fmt(s["inflow_norm"]), _fmt(s["w_norm"])])
        writer.writerow([])
        writer.writerow(["pearson_r", report["pearson_r_text"]])


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def compare_runs(run_dirs, out_path):
    """Merge ``metrics.json`` files into one model x {RMSE, MAE, WMAPE} table."""
    rows = []
    for run in run_dirs:
        path = Path(run) / "metrics.json"
        if not path.exists():
            raise DataError(f"{path} not found; run `eval` on {run} first")
        doc = json.loads(path.read_text())
        o = doc["overall"]
        rows.append([doc.get("label", Path(run).name), o["RMSE"], o["MAE"], o["WMAPE"]])
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", *METRIC_COLUMNS])
        for row in rows:
            writer.writerow([row[0], *(_fmt(v) for v in row[1:])])
    return rows
