"""Optimisation loop: virtual batches, plateau schedule, early stopping, best-weight restore."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig, augment_epoch_stream
from .data_model import OUTPUTS, Sample
from .errors import ConfigError, NonFiniteLossError
from .losses import LOSS_NAMES, MultiTaskLoss, weights_from_split

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    initial_lr: float = 1e-5
    weight_decay: float = 1e-5
    max_epochs: int = 150
    plateau_patience: int = 5
    plateau_factor: float = 0.25
    min_lr: float = 1e-11
    early_stop_window: int = 5
    virtual_batch: int = 8
    micro_batch: int = 1
    seed: int = 0
    reduced_precision: bool = False
    monitor: str = "train"
    min_improvement: float = 1e-6
    dice_reduction: str = "sum"

    def __post_init__(self):
        if self.virtual_batch % self.micro_batch:
            raise ConfigError(
                f"virtual_batch ({self.virtual_batch}) must be divisible by "
                f"micro_batch ({self.micro_batch})")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_window < 1:
            raise ConfigError("plateau_patience and early_stop_window must be >= 1")
        if self.monitor not in ("train", "val"):
            raise ConfigError(f"monitor must be 'train' or 'val', got {self.monitor!r}")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be > 0")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_output_losses: dict
    val_loss: Optional[float] = None
    val_output_losses: dict = field(default_factory=dict)

    def monitored(self, monitor):
        value = self.val_loss if monitor == "val" else self.train_loss
        if value is None:
            raise ConfigError("monitor='val' needs a validation split")
        return value


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list
    best_epoch: int
    best_loss: float
    loss_fn: MultiTaskLoss


# -- batching ----------------------------------------------------------------------

def collate(samples: Sequence[Sample], heads=OUTPUTS, dtype=torch.float32):
    """Stack samples into ``(x, targets)`` tensors for the loss."""
    x = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    targets = {name: torch.as_tensor(np.stack([s.labels.row(name) for s in samples]), dtype=dtype)
               for name in heads}
    known = np.array([s.mask is not None for s in samples])
    shape = samples[0].image.shape[1:]
    seg = np.stack([s.mask if s.mask is not None else np.zeros(shape, np.uint8) for s in samples])
    targets["seg"] = torch.as_tensor(seg, dtype=dtype)
    targets["seg_known"] = torch.as_tensor(known)
    return x, targets


def _chunks(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _autocast(enabled):
    if enabled:
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


def make_optimizer(model, config: TrainConfig):
    """AdamW whose decoupled decay per step is ``weight_decay * lr / initial_lr``.

    The decay follows the learning-rate schedule multiplier rather than being
    multiplied by the raw learning rate.
    """
    return torch.optim.AdamW(model.parameters(), lr=config.initial_lr,
                             weight_decay=config.weight_decay / config.initial_lr, eps=1e-7)


def virtual_batch_step(model, optimizer, micro_batches, loss_fn: MultiTaskLoss,
                       batch_index=0, reduced_precision=False):
    """Accumulate gradients over micro-batches, then take one optimizer step.

    Every micro-batch loss is normalised by the label counts of the whole
    virtual batch, so the accumulated gradient equals that of a single batch
    holding all samples. Returns the summed per-output losses and the total.
    """
    dtype = next(model.parameters()).dtype
    collated = [collate(mb, loss_fn.heads, dtype) for mb in micro_batches]
    all_targets = {k: torch.cat([t[k] for _, t in collated]) for k in collated[0][1]}
    norms = loss_fn.normalizers(all_targets)
    optimizer.zero_grad(set_to_none=False)
    totals = {name: 0.0 for name in loss_fn.loss_weights}
    total = 0.0
    for x, targets in collated:
        with _autocast(reduced_precision):
            outputs = model(x)
        loss, per_output = loss_fn(outputs, targets, norms)
        for name, value in per_output.items():
            v = float(value.detach())
            if not math.isfinite(v):
                raise NonFiniteLossError(name, batch_index, v)
            totals[name] += v
        loss.backward()
        total += float(loss.detach())
    penalty = model.l2_penalty() if hasattr(model, "l2_penalty") else None
    if penalty is not None:
        penalty.backward()
        total += float(penalty.detach())
    optimizer.step()
    return total, totals


@torch.no_grad()
def evaluate_loss(model, samples, loss_fn: MultiTaskLoss, batch_size=8):
    """Mean total loss over fixed batches in inference mode (no augmentation)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    totals, per = [], {name: [] for name in loss_fn.loss_weights}
    try:
        for chunk in _chunks(list(samples), batch_size):
            x, targets = collate(chunk, loss_fn.heads, dtype)
            loss, per_output = loss_fn(model(x), targets)
            totals.append(float(loss))
            for name, value in per_output.items():
                per[name].append(float(value.detach()))
    finally:
        model.train(was_training)
    return float(np.mean(totals)), {k: float(np.mean(v)) for k, v in per.items() if v}


# -- schedule and stopping --------------------------------------------------------------

def lr_schedule_step(history, config: TrainConfig = TrainConfig()):
    """Learning rate for the next epoch.

    Reduce by ``plateau_factor`` (floored at ``min_lr``) when none of the last
    ``plateau_patience`` epochs improved on the best loss before them by more
    than ``min_improvement``. After a reduction the next one waits another
    full patience window.
    """
    if not history:
        raise ValueError("history is empty")
    p = config.plateau_patience
    lr = history[-1].lr
    if len(history) <= p:
        return lr
    losses = [r.monitored(config.monitor) for r in history]
    best_before = min(losses[:-p])
    if min(losses[-p:]) < best_before - config.min_improvement:
        return lr
    if any(r.lr != lr for r in history[-p:]):
        return lr
    return max(lr * config.plateau_factor, config.min_lr)


def early_stop_check(losses, window=5, min_improvement=1e-6):
    """True when the mean of the last ``window`` losses is no better than the
    best mean of any earlier window that ended before the current one began."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 2 * window:
        return False
    means = np.convolve(losses, np.ones(window) / window, mode="valid")
    previous = means[: means.size - window]
    return not means[-1] < previous.min() - min_improvement


# -- the loop ----------------------------------------------------------------------

def train(model, train_samples, val_samples=None, config: TrainConfig = TrainConfig(),
          augment: AugmentConfig = AugmentConfig(probability=0.0, factor=1),
          loss_fn: Optional[MultiTaskLoss] = None, callback=None) -> TrainResult:
    """Train ``model`` in place and restore the weights of the best epoch.

    ``loss_fn`` defaults to a :class:`MultiTaskLoss` with class and loss
    weights computed from ``train_samples`` for the heads the model has.
    """
    if not train_samples:
        raise ConfigError("training split is empty")
    if val_samples:
        overlap = {s.case_id for s in train_samples} & {s.case_id for s in val_samples}
        if overlap:
            raise ConfigError(f"train and validation splits share cases: {sorted(overlap)[:5]}")
    if config.monitor == "val" and not val_samples:
        raise ConfigError("monitor='val' needs a validation split")
    torch.manual_seed(config.seed)
    if loss_fn is None:
        heads = tuple(getattr(model, "heads", {}).keys())
        cw, lw = weights_from_split(train_samples, heads)
        loss_fn = MultiTaskLoss(cw, lw, config.dice_reduction)
    optimizer = make_optimizer(model, config)
    history = []
    best_loss, best_epoch, best_state = math.inf, -1, None
    for epoch in range(config.max_epochs):
        model.train()
        stream = list(augment_epoch_stream(train_samples, augment, epoch))
        batch_losses, per_sum = [], {name: 0.0 for name in loss_fn.loss_weights}
        for b, vbatch in enumerate(_chunks(stream, config.virtual_batch)):
            micro = _chunks(vbatch, config.micro_batch)
            total, per = virtual_batch_step(model, optimizer, micro, loss_fn,
                                            batch_index=b,
                                            reduced_precision=config.reduced_precision)
            batch_losses.append(total)
            for name, v in per.items():
                per_sum[name] += v
        n_batches = len(batch_losses)
        record = EpochRecord(epoch, optimizer.param_groups[0]["lr"], float(np.mean(batch_losses)),
                             {k: v / n_batches for k, v in per_sum.items()})
        if val_samples:
            record.val_loss, record.val_output_losses = evaluate_loss(
                model, val_samples, loss_fn, config.virtual_batch)
        history.append(record)
        monitored = record.monitored(config.monitor)
        if monitored < best_loss - config.min_improvement or best_state is None:
            best_loss, best_epoch = monitored, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.info("epoch %d lr %.3g train %.5f val %s", epoch, record.lr, record.train_loss,
                 "-" if record.val_loss is None else f"{record.val_loss:.5f}")
        if callback is not None:
            callback(record, model)
        new_lr = lr_schedule_step(history, config)
        for group in optimizer.param_groups:
            group["lr"] = new_lr
        if early_stop_check([r.monitored(config.monitor) for r in history],
                            config.early_stop_window, config.min_improvement):
            log.info("early stop after epoch %d", epoch)
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_loss, loss_fn)


HISTORY_COLUMNS = ("epoch", "lr", "train_loss") + tuple(f"train_{n}" for n in LOSS_NAMES) + (
    "val_loss",) + tuple(f"val_{n}" for n in LOSS_NAMES)


def history_rows(history):
    rows = []
    for r in history:
        row = {"epoch": r.epoch, "lr": r.lr, "train_loss": r.train_loss, "val_loss": r.val_loss}
        for n in LOSS_NAMES:
            row[f"train_{n}"] = r.train_output_losses.get(n)
            row[f"val_{n}"] = r.val_output_losses.get(n)
        rows.append(row)
    return rows
