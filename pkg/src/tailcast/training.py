"""Losses, Adam, and the epoch loop with early stopping.

The rare-event loss is a differentiable relaxation of one minus the
station-weighted F-beta score: confusion counts are accumulated from
probabilities rather than thresholded labels, pooled over the whole
batch before the score is formed (the F1 of a union is not the mean of
F1s). The baseline trains on binary cross-entropy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import WindowSet
from .errors import DataError, NumericError
from .metrics import confusion, scalar_metrics
from .model import TrainedModel, forward


class EmptyDataset(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "weighted_f1"
    beta: float = 1.0
    station_weights: np.ndarray | None = None  # None = unit weights
    smoothing_eps: float = 1e-7

    def __post_init__(self):
        if self.kind not in ("weighted_f1", "bce"):
            raise DataError(f"unknown loss kind {self.kind!r}")
        if not np.isfinite(self.beta) or self.beta < 0:
            raise DataError("beta must be finite and >= 0")


@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class TrainSchedule:
    max_epochs: int = 100
    batch_size: int = 64
    patience: int = 10
    min_delta: float = 1e-4
    shuffle_seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_ba: float
    val_precision: float
    val_recall: float
    val_f1: float
    val_accuracy: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stopping_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.epochs[self.best_epoch].val_loss


def weighted_counts(y: np.ndarray, y_hat: Tensor,
                    w: np.ndarray | None = None):
    """Soft confusion counts (tp, fp, fn) as differentiable scalars.

    y and y_hat are (..., N) with station weights broadcast over every
    leading axis. Hard 0/1 probabilities reduce to the discrete counts.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != y_hat.shape:
        raise DataError(f"shape mismatch: y {y.shape} vs y_hat {y_hat.shape}")
    n = y.shape[-1]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise DataError(f"station weights must have shape ({n},)")
    tp = ad.tsum(ad.mul(y_hat, Tensor(w * y)))
    fp = ad.tsum(ad.mul(y_hat, Tensor(w * (1.0 - y))))
    fn = ad.sub(Tensor(float(np.sum(w * y))), tp)
    return tp, fp, fn


def weighted_f1_loss(tp: Tensor, fp: Tensor, fn: Tensor,
                     beta: float = 1.0, eps: float = 1e-7) -> Tensor:
    """One minus the weighted F-beta score; beta > 1 favors recall."""
    b2 = beta * beta
    num = ad.mul(tp, Tensor(1.0 + b2))
    den = ad.add(ad.add(num, ad.mul(fn, Tensor(b2))), ad.add(fp, Tensor(eps)))
    return ad.sub(Tensor(1.0), ad.div(num, den))


def bce_loss(y: np.ndarray, y_hat: Tensor, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with epsilon-guarded logs."""
    y = np.asarray(y, dtype=float)
    if y.shape != y_hat.shape:
        raise DataError(f"shape mismatch: y {y.shape} vs y_hat {y_hat.shape}")
    pos = ad.mul(Tensor(y), ad.log(ad.add(y_hat, Tensor(eps))))
    neg = ad.mul(Tensor(1.0 - y),
                 ad.log(ad.add(ad.sub(Tensor(1.0), y_hat), Tensor(eps))))
    return ad.neg(ad.tmean(ad.add(pos, neg)))


def batch_loss(y: np.ndarray, y_hat: Tensor, config: LossConfig) -> Tensor:
    if config.kind == "bce":
        return bce_loss(y, y_hat, config.smoothing_eps)
    tp, fp, fn = weighted_counts(y, y_hat, config.station_weights)
    return weighted_f1_loss(tp, fp, fn, config.beta, config.smoothing_eps)


def soft_f1_value(y: np.ndarray, probs: np.ndarray,
                  config: LossConfig) -> float:
    """Non-differentiable twin of the weighted F1 loss for validation."""
    n = y.shape[-1]
    w = (np.ones(n) if config.station_weights is None
         else np.asarray(config.station_weights, dtype=float))
    tp = float(np.sum(w * y * probs))
    fp = float(np.sum(w * (1.0 - y) * probs))
    fn = float(np.sum(w * y)) - tp
    b2 = config.beta * config.beta
    num = (1.0 + b2) * tp
    return 1.0 - num / (num + b2 * fn + fp + config.smoothing_eps)


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = state.m[name] / (1 - state.beta1 ** t)
        v_hat = state.v[name] / (1 - state.beta2 ** t)
        p.value = p.value - state.learning_rate * m_hat / (
            np.sqrt(v_hat) + state.eps)


def _validation_scores(model: TrainedModel, windows: WindowSet,
                       chunk: int = 128):
    ys, ps = [], []
    for start in range(0, len(windows), chunk):
        idx = np.arange(start, min(start + chunk, len(windows)))
        x, y = windows.batch(idx)
        probs = forward(model, x)
        ys.append(y)
        ps.append(probs.value)
    return np.concatenate(ys), np.concatenate(ps)


def train(model: TrainedModel, train_set: WindowSet, val_set: WindowSet,
          loss_config: LossConfig,
          schedule: TrainSchedule = TrainSchedule(),
          optimizer: OptimizerState | None = None
          ) -> tuple[TrainedModel, TrainReport]:
    """Mini-batch loop with seeded shuffling and early stopping.

    Stops once validation loss has failed to improve by min_delta for
    more than ``patience`` consecutive epochs; the returned model holds
    the parameters of the best validation epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("need non-empty train and validation sets")
    opt = optimizer or OptimizerState()
    rng = np.random.default_rng(schedule.shuffle_seed)
    report = TrainReport()
    best_loss = np.inf
    best_params = model.copy_params()
    bad_epochs = 0

    for epoch in range(schedule.max_epochs):
        order = rng.permutation(len(train_set))
        batch_losses = []
        for start in range(0, len(order), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            x, y = train_set.batch(idx)
            for p in model.params.values():
                p.grad = None
            probs = forward(model, x)
            loss = batch_loss(y, probs, loss_config)
            value = float(loss.value)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"epoch {epoch}: loss is {value}")
            loss.backward()
            adam_step(model.params, opt)
            batch_losses.append(value)

        y_val, p_val = _validation_scores(model, val_set)
        if loss_config.kind == "bce":
            eps = loss_config.smoothing_eps
            val_loss = float(np.mean(
                -(y_val * np.log(p_val + eps)
                  + (1 - y_val) * np.log(1 - p_val + eps))))
        else:
            val_loss = soft_f1_value(y_val, p_val, loss_config)
        scalars = scalar_metrics(confusion(y_val, p_val))
        report.epochs.append(EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            val_loss=val_loss,
            val_ba=scalars["balanced_accuracy"],
            val_precision=scalars["precision"],
            val_recall=scalars["recall"],
            val_f1=scalars["f1"],
            val_accuracy=scalars["accuracy"]))

        if best_loss - val_loss > schedule.min_delta:
            best_loss = val_loss
            best_params = model.copy_params()
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > schedule.patience:
                report.stopping_reason = (
                    f"no val improvement > {schedule.min_delta} "
                    f"for {bad_epochs} epochs")
                break
    else:
        report.stopping_reason = f"reached max_epochs={schedule.max_epochs}"

    if report.best_epoch < 0:
        report.best_epoch = 0
    model.load_param_values(best_params)
    return model, report


def write_report_csv(path: str | Path, report: TrainReport) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_ba",
                         "val_precision", "val_recall", "val_f1",
                         "val_accuracy"])
        for rec in report.epochs:
            writer.writerow([rec.epoch, repr(rec.train_loss),
                             repr(rec.val_loss), repr(rec.val_ba),
                             repr(rec.val_precision), repr(rec.val_recall),
                             repr(rec.val_f1), repr(rec.val_accuracy)])
