"""
Forecast error metrics and degradation arithmetic.
"""

from typing import Union

import numpy as np
import torch

from errors import ContractError, DimensionError


ArrayLike = Union[np.ndarray, torch.Tensor]


def _pair(pred: ArrayLike, truth: ArrayLike):
    p = pred.detach().cpu().numpy() if isinstance(pred, torch.Tensor) else np.asarray(pred)
    t = truth.detach().cpu().numpy() if isinstance(truth, torch.Tensor) else np.asarray(truth)
    if p.shape != t.shape:
        raise DimensionError(f"Prediction shape {p.shape} does not match truth shape {t.shape}")
    return p.astype(np.float64), t.astype(np.float64)


def mse(pred: ArrayLike, truth: ArrayLike) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mae(pred: ArrayLike, truth: ArrayLike) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def per_channel_mse(pred: ArrayLike, truth: ArrayLike) -> np.ndarray:
    """MSE per channel (last axis), averaged over every other axis."""
    p, t = _pair(pred, truth)
    return ((p - t) ** 2).reshape(-1, p.shape[-1]).mean(axis=0)


def degradation(base: float, extended: float) -> float:
    """Percent change of ``extended`` over ``base``: ``100 * (extended - base) / base``."""
    if base <= 0:
        raise ContractError(f"Degradation needs a positive base error, got {base}")
    return 100.0 * (extended - base) / base


class ErrorAccumulator:
    """Running squared/absolute error sums over batches, kept in float64."""

    def __init__(self, n_channels: int = 0):
        self.squared = 0.0
        self.absolute = 0.0
        self.count = 0
        self.channel_squared = np.zeros(n_channels) if n_channels else None
        self.channel_count = 0

    def update(self, pred: ArrayLike, truth: ArrayLike) -> None:
        p, t = _pair(pred, truth)
        diff = p - t
        self.squared += float(np.sum(diff ** 2))
        self.absolute += float(np.sum(np.abs(diff)))
        self.count += diff.size
        if self.channel_squared is not None:
            self.channel_squared += (diff ** 2).reshape(-1, diff.shape[-1]).sum(axis=0)
            self.channel_count += diff.size // diff.shape[-1]

    @property
    def mse(self) -> float:
        if self.count == 0:
            raise ContractError("No predictions accumulated")
        return self.squared / self.count

    @property
    def mae(self) -> float:
        if self.count == 0:
            raise ContractError("No predictions accumulated")
        return self.absolute / self.count

    @property
    def per_channel_mse(self) -> np.ndarray:
        if self.channel_squared is None or self.channel_count == 0:
            raise ContractError("Per-channel errors were not tracked")
        return self.channel_squared / self.channel_count
