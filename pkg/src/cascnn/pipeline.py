"""Turn ingested tensors into normalized, masked, split training data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import build_samples, fit_scaler, held_out_days, split_train_val_test
from .odad import build_masks, compute_odad


@dataclass
class Prepared:
    train: list
    val: list
    test: list
    od_scaler: object
    flow_scaler: object
    odad: object
    masks: object
    fit_days: list
    test_days: list


def prepare(ingested, x=5, y=5, threshold=2.0, val_fraction=0.1, test_fraction=0.2, seed=0):
    """Fit scalers and ODAD on the non-test days only, then build and split samples."""
    od, flows = ingested.od, ingested.flows
    n_days = od.counts.shape[0]
    test_days = held_out_days(n_days, test_fraction)
    fit_days = [d for d in range(n_days) if d not in set(test_days)]
    od_scaler = fit_scaler(od.counts[fit_days])
    flow_scaler = fit_scaler(np.concatenate([flows.inflow[fit_days].ravel(), flows.outflow[fit_days].ravel()]))
    table = compute_odad(od, fit_days)
    masks = build_masks(table, threshold)
    samples = build_samples(od, flows, od_scaler, flow_scaler, x, y)
    train, val, test = split_train_val_test(samples, n_days, val_fraction, test_fraction, seed)
    return Prepared(train, val, test, od_scaler, flow_scaler, table, masks, fit_days, test_days)
