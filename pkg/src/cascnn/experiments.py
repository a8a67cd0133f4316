"""End-to-end steps: synthesize, ingest, train a variant, evaluate, compare."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig
from .data import Ingested, Scaler, ingest
from .errors import ConfigError, DataError
from .model import BaselineConfig, BaselineCnn, CasCnn, ModelConfig, load_checkpoint, save_checkpoint
from .odad import read_mask_file, write_mask_file
from .pipeline import prepare
from .synth import DemandProfile, NetworkSpec, generate
from .training import TrainConfig, evaluate_loss, fit

log = logging.getLogger("cascnn")

VARIANT_LABELS = {
    "full": "CAS-CNN",
    "no_split": "CAS-CNN (No S-CNN)",
    "no_mask": "CAS-CNN (No Mask)",
    "no_ca": "CAS-CNN (No CA)",
    "no_inflow": "CAS-CNN (No Inflow)",
    "no_outflow": "CAS-CNN (No Outflow)",
    "cnn2d": "2D CNN",
}


def synthesize(cfg, out_dir):
    spec = NetworkSpec(cfg.n_stations, cfg.residential_fraction, cfg.per_hop_minutes, cfg.duration_noise_minutes)
    profile = DemandProfile(
        base_rate=cfg.base_rate, decay_hops=cfg.decay_hops, am_peak=cfg.am_peak, pm_peak=cfg.pm_peak,
        day_sd=cfg.day_sd, day_persistence=cfg.day_persistence, origin_sd=cfg.origin_sd,
    )
    return generate(spec, profile, cfg.n_days, cfg.seed, out_dir, cfg.start_date,
                    cfg.service_start, cfg.service_end, cfg.interval_minutes)


def ingest_dataset(cfg, dataset_dir, out_dir):
    ingested = ingest(dataset_dir, cfg.interval_minutes, cfg.service_start, cfg.service_end, cfg.outflow_convention)
    ingested.save(out_dir)
    return ingested


def prepare_from(cfg, ingest_dir):
    ingested = Ingested.load(ingest_dir, cfg.outflow_convention)
    prepared = prepare(ingested, cfg.history_days, cfg.flow_steps, cfg.mask_threshold,
                       cfg.val_fraction, cfg.test_fraction, cfg.seed)
    return ingested, prepared


def model_config(cfg, n, variant):
    return ModelConfig(
        n=n, x=cfg.history_days, y=cfg.flow_steps, kernels=cfg.kernel_sizes(),
        filters_layer1=cfg.filters_layer1, filters_layer2=cfg.filters_layer2, reduction=cfg.reduction,
        no_split=variant == "no_split", no_channel_attention=variant == "no_ca",
        no_inflow=variant == "no_inflow", no_outflow=variant == "no_outflow",
        ca_after_layer2=cfg.ca_after_layer2,
    )


def build_variant(cfg, n, variant):
    rng = np.random.default_rng(cfg.seed)
    if variant == "cnn2d":
        return BaselineCnn(BaselineConfig(n=n, x=cfg.history_days), rng)
    return CasCnn(model_config(cfg, n, variant), rng)


def train_config(cfg, variant):
    if variant == "cnn2d":
        return TrainConfig(cfg.lr, cfg.baseline_batch_size, cfg.max_epochs, cfg.patience, cfg.seed,
                           cfg.baseline_loss, cfg.optimizer)
    loss = "plain_mse" if variant == "no_mask" else "masked_mse"
    return TrainConfig(cfg.lr, cfg.batch_size, cfg.max_epochs, cfg.patience, cfg.seed, loss, cfg.optimizer)


def _write_scalers(prepared, path):
    doc = {"od": vars(prepared.od_scaler), "flow": vars(prepared.flow_scaler)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def train_variant(cfg, ingest_dir, variant, run_dir):
    """Train one variant and write checkpoint, masks, scalers, loss history and report."""
    if variant not in VARIANT_LABELS:
        raise ConfigError(f"unknown variant {variant!r}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ingested, prepared = prepare_from(cfg, ingest_dir)
    n = ingested.od.n
    model = build_variant(cfg, n, variant)
    tcfg = train_config(cfg, variant)
    log.info("training %s (%d parameters) on %d samples, %d validation", variant, model.n_parameters(),
             len(prepared.train), len(prepared.val))
    model, state = fit(model, prepared.train, prepared.val, prepared.masks, tcfg, log=log.info)
    save_checkpoint(model, run_dir / "checkpoint")
    write_mask_file(prepared.masks, run_dir / "mask.csv", run_dir / "mask.json")
    _write_scalers(prepared, run_dir / "scalers.json")
    (run_dir / "config.txt").write_text(cfg.dump())
    with open(run_dir / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for e, (tr, va) in enumerate(zip(state.train_loss, state.val_loss), start=1):
            writer.writerow([e, repr(tr), repr(va)])
    report = {
        "variant": variant,
        "label": VARIANT_LABELS[variant],
        "ingest_dir": str(Path(ingest_dir).resolve()),
        "config": {k: v for k, v in vars(cfg).items()},
        "train_config": vars(tcfg),
        "n_parameters": model.n_parameters(),
        "samples": {"train": len(prepared.train), "val": len(prepared.val), "test": len(prepared.test)},
        "fit_days": prepared.fit_days,
        "test_days": prepared.test_days,
        **state.as_dict(),
    }
    (run_dir / "run_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return model, state, prepared


def load_run(run_dir, cfg=None):
    """Checkpoint, config, masks, scalers and prepared data for a training run."""
    run_dir = Path(run_dir)
    report_path = run_dir / "run_report.json"
    if not report_path.exists():
        raise DataError(f"{run_dir} is not a training run directory (no run_report.json)")
    report = json.loads(report_path.read_text())
    if cfg is None:
        cfg = RunConfig(**report["config"]).validate()
    model = load_checkpoint(run_dir / "checkpoint")
    _, prepared = prepare_from(cfg, report["ingest_dir"])
    masks = read_mask_file(run_dir / "mask.csv", run_dir / "mask.json")
    scalers = json.loads((run_dir / "scalers.json").read_text())
    prepared.masks = masks
    prepared.od_scaler = Scaler(**scalers["od"])
    prepared.flow_scaler = Scaler(**scalers["flow"])
    return report, cfg, model, prepared


def evaluate_run(run_dir, per_interval=False, pairs=(), interpret=False):
    """Write metrics.json (+ optional CSVs) into ``run_dir``; return the summary dict."""
    run_dir = Path(run_dir)
    report, cfg, model, prepared = load_run(run_dir)
    ingested = Ingested.load(report["ingest_dir"], cfg.outflow_convention)
    pset = ev.predict_samples(model, prepared.test, prepared.od_scaler, prepared.masks)
    overall = ev.overall_metrics(pset)
    ha = ev.historical_average_predictor(ingested.od.counts, prepared.fit_days)
    ha_set = ev.predict_historical_average(ha, prepared.test, prepared.od_scaler, prepared.masks)
    ha_overall = ev.overall_metrics(ha_set)
    summary = {
        "label": report["label"],
        "variant": report["variant"],
        "overall": overall.as_dict(),
        "historical_average": ha_overall.as_dict(),
        "test_masked_mse_normalized": evaluate_loss(model, prepared.test, prepared.masks),
        "ha_test_masked_mse_normalized": ha_masked_mse(ha, prepared.test, prepared.od_scaler, prepared.masks),
        "test_samples": len(prepared.test),
        "skipped_empty_mask": int((~ev.usable(pset)).sum()),
        "clipped_predictions": pset.clipped,
    }
    if per_interval:
        reports = ev.per_interval_metrics(pset)
        ev.write_metrics_csv(reports, run_dir / "per_interval.csv")
        summary["per_interval"] = {int(t): r.as_dict() for t, r in reports.items()}
    if pairs:
        series = ev.od_pair_series(pset, pairs)
        ev.write_pair_series(series, run_dir / "od_pairs.csv")
        summary["pairs"] = {f"{i}-{j}": len(rows) for (i, j), rows in series.items()}
    if interpret:
        interp = ev.interpretability_report(model, ingested.flows.inflow, prepared.fit_days)
        ev.write_interpretability(interp, run_dir / "interpretability.csv")
        summary["interpretability"] = {"pearson_r": interp["pearson_r_text"], "sign": interp["sign"]}
    (run_dir / "metrics.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def ha_masked_mse(ha, samples, od_scaler, masks):
    """Historical-average masked MSE on the normalized scale (same scale as the loss)."""
    values = []
    for s in samples:
        mask = masks.for_interval(s.interval)
        if mask.any():
            err = od_scaler.apply(ha.predict_raw(s.interval)) - s.target
            values.append(float(np.sum(np.where(mask, err, 0.0) ** 2) / mask.sum()))
    return float(np.mean(values)) if values else float("nan")


def predict_matrix(run_dir, day, interval):
    """Raw-scale (clipped) prediction for the sample at (day, interval)."""
    report, cfg, model, prepared = load_run(run_dir)
    for s in prepared.train + prepared.val + prepared.test:
        if s.day == day and s.interval == interval:
            pred = np.maximum(prepared.od_scaler.invert(model.predict(s)), 0.0)
            return pred, np.rint(prepared.od_scaler.invert(s.target))
    raise DataError(f"no sample at day {day}, interval {interval} (needs day >= {cfg.history_days} "
                    f"and interval >= {cfg.flow_steps})")


def run_ablation_suite(cfg, ingest_dir, out_root, log_fn=None):
    """Train and evaluate every configured variant; write comparison.csv."""
    out_root = Path(out_root)
    runs = []
    for variant in cfg.variant_list():
        run_dir = out_root / variant
        if log_fn:
            log_fn(f"== {variant}")
        train_variant(cfg, ingest_dir, variant, run_dir)
        evaluate_run(run_dir)
        runs.append(run_dir)
    ev.compare_runs(runs, out_root / "comparison.csv")
    return runs

