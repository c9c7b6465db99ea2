"""
Deterministic training loop: Adam, per-epoch learning-rate schedules, early
stopping on validation MSE with best-checkpoint restoration, wall-clock
timing, and test-set evaluation.
"""

import copy
import logging
import math
import time
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader

from dataset import ChannelScaler, WindowBatch, WindowDataset, WindowSample, collate_windows
from errors import ContractError, DivergenceError
from metrics import ErrorAccumulator
from models import TrainConfig, TrainRecord
from numerics import seed_everything


logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
STEP_DECAY_FACTOR = 0.5
EVAL_BATCH_SIZE = 64


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    if not 1 <= epoch <= cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if cfg.schedule == 'step_decay':
        return cfg.learning_rate * STEP_DECAY_FACTOR ** (epoch - 1)
    if cfg.epochs == 1:
        return cfg.learning_rate
    return cfg.learning_rate * (1 + math.cos(math.pi * (epoch - 1) / (cfg.epochs - 1))) / 2


def early_stop_check(val_history: Sequence[float], patience: int) -> bool:
    """
    True when each of the last ``patience`` losses fails to strictly improve
    on the best loss recorded before it.
    """
    if not val_history:
        raise ContractError("early_stop_check needs a non-empty history")
    if len(val_history) <= patience:
        return False
    return min(val_history[-patience:]) >= min(val_history[:-patience])


def _loader(samples: Sequence[WindowSample], batch_size: int, shuffle: bool,
            generator: Optional[torch.Generator] = None) -> DataLoader:
    return DataLoader(
        WindowDataset(samples),
        batch_size=batch_size,
        shuffle=shuffle,
        drop_last=False,
        collate_fn=collate_windows,
        generator=generator,
    )


def _predict(model: nn.Module, batch: WindowBatch) -> torch.Tensor:
    forecast, _ = model(batch.lookback, batch.origins)
    return forecast


def _validation_loss(model: nn.Module, samples: Sequence[WindowSample]) -> float:
    accumulator = ErrorAccumulator()
    model.eval()
    with torch.no_grad():
        for batch in _loader(samples, EVAL_BATCH_SIZE, shuffle=False):
            accumulator.update(_predict(model, batch), batch.target)
    return accumulator.mse


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group['lr'] = lr


def train(
    model: nn.Module,
    train_windows: Sequence[WindowSample],
    val_windows: Sequence[WindowSample],
    cfg: TrainConfig,
) -> TrainRecord:
    """
    Fit ``model`` with Adam on MSE over standardized values.

    Epoch order is shuffled by a generator seeded with ``cfg.seed``; the
    incomplete last batch is kept. When ``cfg.micro_batch_size`` is set, each
    batch is processed in micro-batches with accumulated gradients, which
    gives the same batch gradient. The best-validation weights are restored
    at the end when ``cfg.restore_best`` is set.

    Raises:
        ContractError: empty train or validation windows
        DivergenceError: non-finite training loss
    """
    if not train_windows or not val_windows:
        raise ContractError(
            f"train needs non-empty windows, got {len(train_windows)} train / {len(val_windows)} val"
        )
    generator = seed_everything(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    loader = _loader(train_windows, cfg.batch_size, shuffle=True, generator=generator)
    micro = cfg.micro_batch_size or cfg.batch_size

    record = TrainRecord()
    best_state = None
    started = time.perf_counter()

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at(cfg, epoch)
        _set_lr(optimizer, lr)
        model.train()
        epoch_loss, epoch_count = 0.0, 0

        for batch_index, batch in enumerate(loader):
            optimizer.zero_grad()
            batch_loss = 0.0
            for start in range(0, len(batch), micro):
                part = batch.slice(start, start + micro)
                loss = torch.mean((_predict(model, part) - part.target) ** 2)
                if not torch.isfinite(loss):
                    raise DivergenceError(epoch, batch_index, float(loss))
                (loss * (len(part) / len(batch))).backward()
                batch_loss += loss.item() * len(part)
            optimizer.step()
            epoch_loss += batch_loss
            epoch_count += len(batch)
            logger.debug(f"epoch {epoch} batch {batch_index}: loss {batch_loss / len(batch):.6f}")

        train_loss = epoch_loss / epoch_count
        val_loss = _validation_loss(model, val_windows)
        record.train_losses.append(train_loss)
        record.val_losses.append(val_loss)
        record.learning_rates.append(lr)
        record.stopped_epoch = epoch
        logger.info(f"Epoch {epoch}/{cfg.epochs}: lr {lr:.3g}, train {train_loss:.6f}, val {val_loss:.6f}")

        if val_loss < record.best_val_loss:
            record.best_val_loss = val_loss
            record.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

        if early_stop_check(record.val_losses, cfg.patience):
            record.early_stopped = True
            logger.info(f"Early stopping at epoch {epoch}: no improvement for {cfg.patience} epochs")
            break

    if cfg.restore_best and best_state is not None:
        model.load_state_dict(best_state)
        record.restored_best = True
    record.wall_seconds = time.perf_counter() - started
    model.eval()
    logger.info(
        f"Training finished in {record.wall_seconds:.1f}s: best val {record.best_val_loss:.6f} "
        f"at epoch {record.best_epoch}"
    )
    return record


def evaluate(
    model: nn.Module,
    test_windows: Sequence[WindowSample],
    scaler: Optional[ChannelScaler] = None,
    raw_units: bool = False,
    per_channel: bool = False,
) -> Tuple[float, ...]:
    """
    MSE and MAE over every test window, horizon step and channel.

    Errors are on standardized values unless ``raw_units`` is set, which
    needs ``scaler``. With ``per_channel`` a third element holds the
    per-channel MSE array.
    """
    if not test_windows:
        raise ContractError("evaluate needs at least one test window")
    if raw_units and scaler is None:
        raise ContractError("raw_units evaluation needs the fitted scaler")
    accumulator = ErrorAccumulator(n_channels=test_windows[0].target.shape[-1])
    model.eval()
    with torch.no_grad():
        for batch in _loader(test_windows, EVAL_BATCH_SIZE, shuffle=False):
            pred = _predict(model, batch).cpu().numpy()
            truth = batch.target.cpu().numpy()
            if raw_units:
                pred, truth = scaler.inverse_transform(pred), scaler.inverse_transform(truth)
            accumulator.update(pred, truth)
    if per_channel:
        return accumulator.mse, accumulator.mae, accumulator.per_channel_mse
    return accumulator.mse, accumulator.mae


class PersistenceForecaster(nn.Module):
    """Repeats the last lookback row over the horizon."""
    kind = 'persistence'

    def __init__(self, pred_len: int):
        super().__init__()
        self.pred_len = pred_len

    def forward(self, lookback: torch.Tensor, origins=None, record: bool = False):
        return lookback[:, -1:, :].expand(-1, self.pred_len, -1), []


def evaluate_persistence(test_windows: Sequence[WindowSample]) -> Tuple[float, float]:
    """Closed-form sanity baseline for a window set."""
    if not test_windows:
        raise ContractError("evaluate_persistence needs at least one window")
    return evaluate(PersistenceForecaster(test_windows[0].target.shape[0]), test_windows)
