"""
Encoder-decoder Transformer forecaster.

The encoder reads the whole lookback; the decoder reads the last
``label_len`` lookback rows followed by ``pred_len`` zero placeholders, with
causal self-attention, and the last ``pred_len`` decoder positions are
projected back to the channels.
"""

import logging
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from dataset import WindowSample
from errors import DimensionError
from forecasters.layers import DecoderLayer, EncoderLayer, SinusoidalPositionalEncoding, init_glorot
from models import VanillaConfig
from numerics import AttentionMap, as_tensor, causal_mask


logger = logging.getLogger(__name__)


class DataEmbedding(nn.Module):
    """Linear value embedding plus sinusoidal position."""

    def __init__(self, n_channels: int, d_model: int, max_len: int, dropout: float):
        super().__init__()
        self.value = nn.Linear(n_channels, d_model)
        self.position = SinusoidalPositionalEncoding(d_model, max_len)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.value(x) + self.position(x.shape[1]))


class VanillaTransformer(nn.Module):
    kind = 'vanilla'

    def __init__(self, config: VanillaConfig):
        super().__init__()
        self.config = config
        c = config
        self.enc_embedding = DataEmbedding(c.n_channels, c.d_model, c.seq_len, c.dropout)
        self.dec_embedding = DataEmbedding(c.n_channels, c.d_model, c.label_len + c.pred_len, c.dropout)
        self.encoder_layers = nn.ModuleList([
            EncoderLayer(c.d_model, c.n_heads, c.d_ff, c.dropout, i, c.layer_norm_eps)
            for i in range(c.e_layers)
        ])
        self.encoder_norm = nn.LayerNorm(c.d_model, eps=c.layer_norm_eps)
        self.decoder_layers = nn.ModuleList([
            DecoderLayer(c.d_model, c.n_heads, c.d_ff, c.dropout, i, c.layer_norm_eps)
            for i in range(c.d_layers)
        ])
        self.decoder_norm = nn.LayerNorm(c.d_model, eps=c.layer_norm_eps)
        self.projection = nn.Linear(c.d_model, c.n_channels)
        init_glorot(self)

    def _check(self, lookback: torch.Tensor) -> None:
        expected = (self.config.seq_len, self.config.n_channels)
        if lookback.dim() != 3 or tuple(lookback.shape[1:]) != expected:
            raise DimensionError(
                f"Vanilla Transformer expects lookback (batch, {expected[0]}, {expected[1]}), "
                f"got {tuple(lookback.shape)}"
            )

    def decoder_input(self, lookback: torch.Tensor) -> torch.Tensor:
        c = self.config
        seed = lookback[:, c.seq_len - c.label_len:, :]
        placeholders = torch.zeros(lookback.shape[0], c.pred_len, c.n_channels, dtype=lookback.dtype)
        return torch.cat([seed, placeholders], dim=1)

    def forward(
        self,
        lookback: torch.Tensor,
        origins: Optional[torch.Tensor] = None,
        record: bool = False,
    ) -> Tuple[torch.Tensor, List[AttentionMap]]:
        self._check(lookback)
        maps: List[AttentionMap] = []

        memory = self.enc_embedding(lookback)
        for layer in self.encoder_layers:
            memory, attention_map = layer(memory, record)
            if attention_map is not None:
                maps.append(attention_map)
        memory = self.encoder_norm(memory)

        x = self.dec_embedding(self.decoder_input(lookback))
        mask = causal_mask(x.shape[1], device=x.device)
        for layer in self.decoder_layers:
            x, layer_maps = layer(x, memory, mask, record)
            maps.extend(layer_maps)
        x = self.decoder_norm(x)
        forecast = self.projection(x)[:, -self.config.pred_len:, :]
        return forecast, maps


def vanilla_forward(
    model: VanillaTransformer,
    sample: WindowSample,
    record: bool = False,
) -> Tuple[torch.Tensor, List[AttentionMap]]:
    """Forecast one window; returns the ``(H, C)`` forecast and attention maps."""
    lookback = as_tensor(sample.lookback).unsqueeze(0)
    forecast, maps = model(lookback, torch.tensor([sample.origin_index]), record)
    return forecast[0], maps
