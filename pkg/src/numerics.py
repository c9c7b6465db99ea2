"""
Dense tensor operations on top of torch autograd.

Each operation validates its inputs and raises the workbench error types, so
shape problems surface with both shapes in the message instead of a bare
torch RuntimeError. Attention can record its post-softmax weights as an
``AttentionMap`` for the entropy diagnostics.
"""

import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
import torch

from errors import ContractError, DimensionError, NumericError


logger = logging.getLogger(__name__)

DTYPES = {'f32': torch.float32, 'f64': torch.float64}
ROW_SUM_TOLERANCE = 1e-6


# ------------------------------------------------------------------
# Precision and seeding
# ------------------------------------------------------------------

def use_precision(precision: str) -> torch.dtype:
    """Set torch's default floating dtype from ``'f32'`` / ``'f64'``."""
    try:
        dtype = DTYPES[precision]
    except KeyError:
        raise ContractError(f"Unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None
    torch.set_default_dtype(dtype)
    return dtype


def seed_everything(seed: int) -> torch.Generator:
    """
    Seed python, numpy and torch and switch torch to deterministic kernels.

    Returns a fresh generator seeded with ``seed`` for data shuffling.
    """
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def as_tensor(values, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    """Convert an array-like to a tensor in the default (or given) dtype."""
    return torch.as_tensor(np.asarray(values), dtype=dtype or torch.get_default_dtype())


# ------------------------------------------------------------------
# Attention maps
# ------------------------------------------------------------------

@dataclass
class AttentionMap:
    """
    Post-softmax attention weights of one attention layer.

    ``weights`` has shape ``(..., heads, queries, keys)``; leading dimensions
    (batch, or batch x channel for channel-independent models) are allowed.
    """
    weights: torch.Tensor
    layer_index: int
    kind: str = 'encoder'

    @property
    def n_heads(self) -> int:
        return self.weights.shape[-3]

    @property
    def n_keys(self) -> int:
        return self.weights.shape[-1]

    def validate(self, tolerance: float = ROW_SUM_TOLERANCE) -> None:
        """Raise ContractError unless every row is a probability distribution."""
        if self.weights.dim() < 3:
            raise ContractError(
                f"Attention weights need (heads, queries, keys), got shape {tuple(self.weights.shape)}"
            )
        w = self.weights.detach()
        if torch.any(w < 0) or torch.any(w > 1):
            raise ContractError(f"Attention weights of layer {self.layer_index} leave [0, 1]")
        deviation = (w.sum(dim=-1) - 1).abs().max().item()
        if deviation > tolerance:
            raise ContractError(
                f"Attention rows of layer {self.layer_index} sum to 1 +/- {deviation:.3g}, "
                f"outside tolerance {tolerance}"
            )


# ------------------------------------------------------------------
# Operations
# ------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product with broadcasting over leading dimensions."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise DimensionError(
            f"matmul batch dimensions do not broadcast: {tuple(a.shape)} x {tuple(b.shape)}"
        ) from None
    return torch.matmul(a, b)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-stabilised softmax along ``axis``; NaN input is rejected."""
    if torch.isnan(x).any():
        raise NumericError(f"softmax received NaN input of shape {tuple(x.shape)}")
    return torch.softmax(x, dim=axis)


def scaled_dot_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    record: bool = False,
    *,
    mask: Optional[torch.Tensor] = None,
    temperature: float = 1.0,
    layer_index: int = 0,
    kind: str = 'encoder',
) -> Tuple[torch.Tensor, Optional[AttentionMap]]:
    """
    softmax(q k^T / sqrt(d)) v.

    ``mask`` is a boolean tensor broadcastable to the score matrix; ``True``
    entries are blocked. ``temperature`` divides the scores further, and an
    infinite temperature gives uniform weights. With ``record`` set, the
    detached weights are returned as an :class:`AttentionMap`.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(
            f"Query and key head dimensions differ: {tuple(q.shape)} vs {tuple(k.shape)}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"Key and value lengths differ: {tuple(k.shape)} vs {tuple(v.shape)}"
        )
    scale = 1.0 / (math.sqrt(q.shape[-1]) * temperature)
    scores = matmul(q, k.transpose(-2, -1)) * scale
    if mask is not None:
        scores = scores.masked_fill(mask, float('-inf'))
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    attention_map = AttentionMap(weights.detach(), layer_index, kind) if record else None
    return out, attention_map


def causal_mask(length: int, device=None) -> torch.Tensor:
    """Boolean mask blocking keys after each query position."""
    return torch.triu(torch.ones(length, length, dtype=torch.bool, device=device), diagonal=1)


# ------------------------------------------------------------------
# Gradient check
# ------------------------------------------------------------------

def numerical_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float) -> torch.Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    base = x.detach().clone()
    grad = torch.zeros_like(base)
    flat = base.view(-1)
    grad_flat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            f_plus = f(base).item()
            flat[i] = original - eps
            f_minus = f(base).item()
            flat[i] = original
            grad_flat[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def grad_check(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, eps: float = 1e-5) -> float:
    """
    Compare the autograd gradient of scalar ``f`` at ``x`` with central
    differences.

    Returns max over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    xa = x.detach().clone().requires_grad_(True)
    y = f(xa)
    if not isinstance(y, torch.Tensor) or y.numel() != 1:
        shape = tuple(y.shape) if isinstance(y, torch.Tensor) else type(y).__name__
        raise ContractError(f"grad_check needs a scalar-valued function, got output {shape}")
    (analytic,) = torch.autograd.grad(y, xa, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(xa)
    numeric = numerical_grad(f, x, eps)

    analytic = analytic.detach()
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, 1e-8))
    error = ((analytic - numeric).abs() / denom).max().item()
    logger.debug(f"grad_check over {x.numel()} coordinates: max relative error {error:.3e}")
    return error
