"""Flat ``key = value`` run configuration shared by every CLI subcommand."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

VARIANTS = ("full", "no_split", "no_mask", "no_ca", "no_inflow", "no_outflow", "cnn2d")


def _key(default, help):
    return field(default=default, metadata={"help": help})


@dataclass
class RunConfig:
    seed: int = _key(0, "master seed for generation, splitting, initialization and shuffling")
    runs_root: str = _key("runs", "parent directory for timestamped run directories")
    # synthetic data
    n_stations: int = _key(20, "stations on the synthetic line")
    n_days: int = _key(15, "synthetic weekdays to generate")
    start_date: str = _key("2024-03-04", "first synthetic service date (YYYY-MM-DD)")
    residential_fraction: float = _key(0.5, "share of (outer) stations that are residential")
    per_hop_minutes: float = _key(3.0, "travel time per hop in minutes")
    duration_noise_minutes: float = _key(4.0, "upper bound of uniform extra trip time in minutes")
    base_rate: float = _key(6.0, "gravity scale: mean trips per interval for an adjacent res->com pair")
    decay_hops: float = _key(3.0, "distance decay length in hops")
    am_peak: float = _key(4.0, "morning residential->commercial boost")
    pm_peak: float = _key(4.0, "evening commercial->residential boost")
    day_sd: float = _key(0.25, "log-sd of the network-wide daily demand factor")
    day_persistence: float = _key(0.7, "AR(1) coefficient of the daily factor")
    origin_sd: float = _key(0.2, "log-sd of the per-origin daily factor")
    # time grid and ingest
    service_start: str = _key("05:00", "service day start (HH:MM)")
    service_end: str = _key("23:00", "service day end (HH:MM)")
    interval_minutes: int = _key(30, "interval length in minutes")
    outflow_convention: str = _key("exit_time", "outflow series: exit_time or column_sum")
    # samples and masks
    history_days: int = _key(5, "x: OD matrices at the same interval on the previous x days")
    flow_steps: int = _key(5, "y: inflow/outflow intervals earlier the same day")
    mask_threshold: float = _key(2.0, "keep OD cells whose ODAD is strictly above this")
    val_fraction: float = _key(0.1, "validation share of non-test samples")
    test_fraction: float = _key(0.2, "trailing share of days held out for testing")
    # model
    kernels: str = _key("3,5", "split-CNN kernel sizes, comma separated")
    filters_layer1: int = _key(16, "filters in the first split CNN")
    filters_layer2: int = _key(1, "filters in the second split CNN")
    reduction: int = _key(2, "channel-attention reduction R")
    ca_after_layer2: bool = _key(False, "also attend after the second split CNN")
    ablation: str = _key("full", "variant: " + " | ".join(VARIANTS))
    ablations: str = _key(",".join(VARIANTS), "variants run by the ablation suite")
    baseline_batch_size: int = _key(8, "batch size for the plain 2-D CNN baseline")
    baseline_loss: str = _key("plain_mse", "loss for the 2-D CNN baseline: plain_mse or masked_mse")
    # training
    lr: float = _key(0.001, "learning rate")
    batch_size: int = _key(16, "mini-batch size")
    max_epochs: int = _key(200, "epoch cap")
    patience: int = _key(10, "early-stopping patience in epochs")
    optimizer: str = _key("adam", "adam or sgd")

    def validate(self):
        problems = []
        if self.ablation not in VARIANTS:
            problems.append(f"ablation: {self.ablation!r} not in {VARIANTS}")
        bad = [v for v in self.variant_list() if v not in VARIANTS]
        if bad:
            problems.append(f"ablations: unknown variants {bad}")
        if self.outflow_convention not in ("exit_time", "column_sum"):
            problems.append(f"outflow_convention: {self.outflow_convention!r}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer: {self.optimizer!r}")
        if self.baseline_loss not in ("plain_mse", "masked_mse"):
            problems.append(f"baseline_loss: {self.baseline_loss!r}")
        try:
            ks = self.kernel_sizes()
            if not ks or any(k % 2 == 0 or k < 1 for k in ks):
                problems.append(f"kernels: need odd sizes, got {self.kernels!r}")
        except ValueError:
            problems.append(f"kernels: not a comma separated list of integers: {self.kernels!r}")
        for name in ("n_stations", "n_days", "history_days", "flow_steps", "filters_layer1", "filters_layer2",
                     "reduction", "batch_size", "baseline_batch_size", "max_epochs", "patience", "interval_minutes"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        if self.lr < 0:
            problems.append("lr: must be >= 0")
        if not 0 <= self.val_fraction < 1:
            problems.append("val_fraction: must lie in [0, 1)")
        if not 0 < self.test_fraction < 1:
            problems.append("test_fraction: must lie in (0, 1)")
        if problems:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
        return self

    def kernel_sizes(self):
        return tuple(int(k) for k in str(self.kernels).split(",") if k.strip())

    def variant_list(self):
        return [v.strip() for v in self.ablations.split(",") if v.strip()]

    def dump(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _convert(name, raw, typ):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        raw = raw[1:-1]
    if typ in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    return raw


def parse_pairs(pairs):
    """Apply ``key=value`` strings to a fresh RunConfig, reporting every bad key at once."""
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values, problems = {}, []
    for item in pairs:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep:
            problems.append(f"{item!r}: expected key = value")
            continue
        if key not in fields:
            problems.append(f"{key}: unknown key")
            continue
        try:
            values[key] = _convert(key, raw, fields[key].type)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return values


def read_config_lines(path):
    lines = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return lines


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``overrides`` (``key=value``)."""
    items = []
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        items.extend(read_config_lines(path))
    items.extend(overrides)
    return RunConfig(**parse_pairs(items)).validate()


def describe_keys():
    rows = []
    for f in dataclasses.fields(RunConfig):
        rows.append(f"  {f.name} = {_format(f.default)}\n      {f.metadata['help']}")
    return "\n".join(rows)
