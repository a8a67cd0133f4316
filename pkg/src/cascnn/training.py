"""Masked-loss training: mini-batch Adam with early stopping."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, UsageError
from .optim import make_optimizer


class DegenerateMaskError(UsageError):
    """Raised for a mask that keeps no cell."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    loss: str = "masked_mse"  # or plain_mse
    optimizer: str = "adam"

    def __post_init__(self):
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.patience < 1:
            problems.append("patience must be >= 1")
        if self.max_epochs < 1:
            problems.append("max_epochs must be >= 1")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.loss not in ("masked_mse", "plain_mse"):
            problems.append(f"loss must be masked_mse or plain_mse, got {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            problems.append(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    stop_reason: str = ""
    skipped_samples: int = 0
    wall_clock_s: float = 0.0

    def as_dict(self):
        return {
            "epochs": self.epoch,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "skipped_samples": self.skipped_samples,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "wall_clock_s": self.wall_clock_s,
        }


def masked_mse(pred, target, mask):
    """Mean squared error over kept cells only.

    Masked cells are excluded from the forward sum and receive an exact +0.0
    gradient, so neither their target value nor their prediction can influence
    any parameter update.
    """
    pred = T.constant(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or mask.shape != target.shape:
        raise T.DimensionError("masked_mse", "matrix shape", target.shape, (pred.shape, mask.shape))
    kept = int(mask.sum())
    if kept == 0:
        raise DegenerateMaskError("mask keeps no cell")
    diff = np.where(mask, pred.values - np.where(mask, target, 0.0), 0.0)
    loss = np.array(np.sum(diff * diff) / kept)
    return T.make_node(loss, (pred,), lambda g: (np.where(mask, (2.0 * float(g) / kept) * diff, 0.0),))


def sample_mask(sample, masks, loss="masked_mse"):
    if loss == "plain_mse" or masks is None:
        return np.ones(sample.target.shape, dtype=bool)
    return masks.for_interval(sample.interval)


def sample_loss(model, sample, mask):
    return masked_mse(model.forward(sample), sample.target, mask)


def verify_masked_gradient(model, sample, mask, probe_values=(0.0, 1.0, -3.5, 1e6)):
    """Check that masked cells neither receive gradient nor affect the loss.

    Returns a report dict; ``violations`` names every offending cell.
    """
    mask = np.asarray(mask, dtype=bool)
    pred = model.forward(sample)
    leaf = T.Tensor(pred.values, requires_grad=True)
    masked_mse(leaf, sample.target, mask).backward()
    violations = [
        {"cell": [int(i), int(j)], "kind": "gradient", "value": float(leaf.grad[i, j])}
        for i, j in np.argwhere(~mask)
        if leaf.grad[i, j] != 0.0
    ]
    base = masked_mse(pred.values, sample.target, mask).values.tobytes()
    for value in probe_values:
        perturbed = np.where(mask, sample.target, value)
        if masked_mse(pred.values, perturbed, mask).values.tobytes() != base:
            violations.append({"cell": None, "kind": "loss", "value": float(value)})
    return {"masked_cells": int((~mask).sum()), "violations": violations, "ok": not violations}


def batch_loss(model, batch, masks, loss="masked_mse"):
    """Unweighted mean of per-sample masked losses."""
    return T.mean([sample_loss(model, s, sample_mask(s, masks, loss)) for s in batch])


def evaluate_loss(model, samples, masks, loss="masked_mse"):
    """Mean per-sample loss over samples whose mask keeps at least one cell."""
    samples, _ = usable_samples(samples, masks, loss)
    if not samples:
        return math.nan
    values = []
    for s in samples:
        pred = model.forward(s).values
        values.append(float(masked_mse(pred, s.target, sample_mask(s, masks, loss)).values))
    return float(np.mean(values))


def usable_samples(samples, masks, loss="masked_mse"):
    """Drop samples whose interval mask keeps nothing; return (kept, skipped)."""
    kept = [s for s in samples if sample_mask(s, masks, loss).any()]
    return kept, len(samples) - len(kept)


class EarlyStopping:
    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch, value):
        """Record ``value``; return (improved, should_stop)."""
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


def fit(model, train, val, masks, config, log=None):
    """Train in place and restore the best-validation weights.

    Returns ``(model, TrainState)``. Validation falls back to the training
    loss when ``val`` is empty.
    """
    started = time.perf_counter()
    state = TrainState()
    train, skipped = usable_samples(train, masks, config.loss)
    val, skipped_val = usable_samples(val, masks, config.loss)
    state.skipped_samples = skipped + skipped_val
    if not train:
        raise ConfigError("no usable training samples (every mask is empty)")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    optimizer = make_optimizer(config.optimizer, params, config.lr)
    stopper = EarlyStopping(config.patience)
    best_state = model.state()
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        running = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            loss = batch_loss(model, batch, masks, config.loss)
            value = float(loss.values)
            if not math.isfinite(value):
                raise NumericError(f"training loss became {value} at epoch {epoch}, batch starting {start}")
            loss.backward()
            optimizer.step()
            running.append(value * len(batch))
        train_loss = float(np.sum(running) / len(train))
        val_loss = evaluate_loss(model, val, masks, config.loss) if val else train_loss
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss became {val_loss} at epoch {epoch}")
        state.epoch = epoch
        state.train_loss.append(train_loss)
        state.val_loss.append(val_loss)
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = model.state()
        state.best_val_loss, state.best_epoch = stopper.best, stopper.best_epoch
        state.epochs_since_improvement = stopper.stale
        if log is not None:
            log(f"epoch {epoch:3d} train {train_loss:.6g} val {val_loss:.6g}{' *' if improved else ''}")
        if stop:
            state.stop_reason = f"early stopping: no improvement for {config.patience} epochs"
            break
    else:
        state.stop_reason = f"reached max_epochs={config.max_epochs}"
    model.load_state(best_state)
    state.wall_clock_s = time.perf_counter() - started
    return model, state
