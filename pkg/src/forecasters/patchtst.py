"""
Channel-independent patch Transformer.

Every channel goes through the same weights on its own: instance
normalization, replication padding by one stride, unfolding into
overlapping patches, a linear patch embedding with learned positions, the
encoder stack, and a flatten + linear head. An optional exogenous sequence
per channel (used by the retrieval forecaster) is patched the same way and
appended to the token sequence.
"""

import logging
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from dataset import WindowSample
from errors import ConfigurationError, DimensionError
from forecasters.layers import EncoderLayer, init_glorot
from models import PatchConfig
from numerics import AttentionMap, as_tensor


logger = logging.getLogger(__name__)


def patch_count(length: int, patch_len: int, stride: int) -> int:
    return (length + stride - patch_len) // stride + 1


def patchify(x: torch.Tensor, patch_len: int, stride: int) -> torch.Tensor:
    """
    ``(..., L)`` -> ``(..., N, patch_len)``.

    The series is right-padded by repeating its last value ``stride`` times
    before unfolding, giving ``N = L / stride`` patches when ``stride``
    divides ``L``.
    """
    length = x.shape[-1]
    if patch_len > length + stride:
        raise ConfigurationError(
            f"patch_len={patch_len} exceeds series length + stride ({length} + {stride})"
        )
    lead = x.shape[:-1]
    flat = x.reshape(-1, 1, length)
    padded = F.pad(flat, (0, stride), mode='replicate').squeeze(1)
    patches = padded.unfold(-1, patch_len, stride)
    return patches.reshape(*lead, patches.shape[-2], patch_len)


class InstanceNorm(nn.Module):
    """Per-window, per-channel mean/std removal, re-applied at the output."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def statistics(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        mean = x.mean(dim=1, keepdim=True)
        std = torch.sqrt(x.var(dim=1, keepdim=True, unbiased=False) + self.eps)
        return mean, std


class PatchTST(nn.Module):
    kind = 'patchtst'

    def __init__(self, config: PatchConfig, exogenous_len: int = 0):
        super().__init__()
        self.config = config
        c = config
        self.n_patches = c.n_patches
        self.exogenous_len = exogenous_len
        self.n_exogenous_patches = patch_count(exogenous_len, c.patch_len, c.stride) if exogenous_len else 0

        self.instance_norm = InstanceNorm(c.layer_norm_eps)
        self.patch_embedding = nn.Linear(c.patch_len, c.d_model)
        self.position = nn.Parameter(torch.empty(self.n_patches, c.d_model))
        if exogenous_len:
            self.exogenous_embedding = nn.Linear(c.patch_len, c.d_model)
            self.exogenous_position = nn.Parameter(torch.empty(self.n_exogenous_patches, c.d_model))
        self.dropout = nn.Dropout(c.dropout)
        self.encoder_layers = nn.ModuleList([
            EncoderLayer(c.d_model, c.n_heads, c.d_ff, c.dropout, i, c.layer_norm_eps)
            for i in range(c.e_layers)
        ])
        self.head = nn.Linear((self.n_patches + self.n_exogenous_patches) * c.d_model, c.pred_len)
        self.head_dropout = nn.Dropout(c.dropout)

        init_glorot(self)
        nn.init.uniform_(self.position, -0.02, 0.02)
        if exogenous_len:
            nn.init.uniform_(self.exogenous_position, -0.02, 0.02)

    def _check(self, lookback: torch.Tensor) -> None:
        if lookback.dim() != 3 or lookback.shape[1] != self.config.seq_len:
            raise DimensionError(
                f"PatchTST expects lookback (batch, {self.config.seq_len}, channels), "
                f"got {tuple(lookback.shape)}"
            )

    def forward(
        self,
        lookback: torch.Tensor,
        origins: Optional[torch.Tensor] = None,
        record: bool = False,
        exogenous: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, List[AttentionMap]]:
        """
        ``lookback`` is ``(B, L, C)``; ``exogenous``, when the model was built
        with ``exogenous_len``, is ``(B, exogenous_len, C)`` in the same
        standardized units. Returns the ``(B, H, C)`` forecast and the encoder
        attention maps (leading dimension ``B * C``).
        """
        self._check(lookback)
        c = self.config
        batch, _, n_channels = lookback.shape

        x = lookback
        if c.instance_norm:
            mean, std = self.instance_norm.statistics(x)
            x = (x - mean) / std

        # (B, L, C) -> (B * C, L): channels become independent sequences
        series = x.permute(0, 2, 1).reshape(batch * n_channels, c.seq_len)
        tokens = self.patch_embedding(patchify(series, c.patch_len, c.stride)) + self.position

        if self.exogenous_len:
            if exogenous is None or tuple(exogenous.shape) != (batch, self.exogenous_len, n_channels):
                raise DimensionError(
                    f"Exogenous input must be ({batch}, {self.exogenous_len}, {n_channels}), "
                    f"got {None if exogenous is None else tuple(exogenous.shape)}"
                )
            e = (exogenous - mean) / std if c.instance_norm else exogenous
            e = e.permute(0, 2, 1).reshape(batch * n_channels, self.exogenous_len)
            exo_tokens = self.exogenous_embedding(patchify(e, c.patch_len, c.stride)) + self.exogenous_position
            tokens = torch.cat([tokens, exo_tokens], dim=1)

        z = self.dropout(tokens)
        maps: List[AttentionMap] = []
        for layer in self.encoder_layers:
            z, attention_map = layer(z, record)
            if attention_map is not None:
                maps.append(attention_map)

        y = self.head_dropout(self.head(z.flatten(start_dim=1)))
        forecast = y.reshape(batch, n_channels, c.pred_len).permute(0, 2, 1)
        if c.instance_norm:
            forecast = forecast * std + mean
        return forecast, maps


def patchtst_forward(
    model: PatchTST,
    sample: WindowSample,
    record: bool = False,
) -> Tuple[torch.Tensor, List[AttentionMap]]:
    """Forecast one window; returns the ``(H, C)`` forecast and attention maps."""
    lookback = as_tensor(sample.lookback).unsqueeze(0)
    forecast, maps = model(lookback, torch.tensor([sample.origin_index]), record)
    return forecast[0], maps
