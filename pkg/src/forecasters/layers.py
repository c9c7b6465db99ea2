"""
Transformer building blocks shared by the forecasters.

Attention goes through ``numerics.scaled_dot_attention`` so every layer can
hand its post-softmax weights to the entropy probe.
"""

import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import DimensionError
from numerics import AttentionMap, scaled_dot_attention


class MultiHeadAttention(nn.Module):
    """Multi-head attention with optional weight recording."""

    def __init__(self, d_model: int, n_heads: int, layer_index: int = 0, kind: str = 'encoder'):
        super().__init__()
        if d_model % n_heads != 0:
            raise DimensionError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.layer_index = layer_index
        self.kind = kind
        # infinity forces uniform weights
        self.temperature = 1.0
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key_value: torch.Tensor,
        mask: Optional[torch.Tensor] = None,
        record: bool = False,
    ) -> Tuple[torch.Tensor, Optional[AttentionMap]]:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key_value))
        v = self._split(self.v_proj(key_value))
        out, attention_map = scaled_dot_attention(
            q, k, v, record,
            mask=mask,
            temperature=self.temperature,
            layer_index=self.layer_index,
            kind=self.kind,
        )
        batch, _, length, _ = out.shape
        out = out.transpose(1, 2).reshape(batch, length, self.n_heads * self.d_head)
        return self.out_proj(out), attention_map


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.linear1 = nn.Linear(d_model, d_ff)
        self.linear2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear2(self.dropout(F.gelu(self.linear1(x))))


class EncoderLayer(nn.Module):
    """Post-norm self-attention block."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float,
                 layer_index: int = 0, eps: float = 1e-5):
        super().__init__()
        self.attention = MultiHeadAttention(d_model, n_heads, layer_index, 'encoder')
        self.feed_forward = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, record: bool = False) -> Tuple[torch.Tensor, Optional[AttentionMap]]:
        attended, attention_map = self.attention(x, x, record=record)
        x = self.norm1(x + self.dropout(attended))
        x = self.norm2(x + self.dropout(self.feed_forward(x)))
        return x, attention_map


class DecoderLayer(nn.Module):
    """Causal self-attention, cross-attention over the encoder output, then FFN."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float,
                 layer_index: int = 0, eps: float = 1e-5):
        super().__init__()
        self.self_attention = MultiHeadAttention(d_model, n_heads, layer_index, 'decoder_self')
        self.cross_attention = MultiHeadAttention(d_model, n_heads, layer_index, 'decoder_cross')
        self.feed_forward = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model, eps=eps)
        self.norm2 = nn.LayerNorm(d_model, eps=eps)
        self.norm3 = nn.LayerNorm(d_model, eps=eps)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, memory: torch.Tensor, mask: torch.Tensor,
                record: bool = False) -> Tuple[torch.Tensor, List[AttentionMap]]:
        attended, self_map = self.self_attention(x, x, mask=mask, record=record)
        x = self.norm1(x + self.dropout(attended))
        crossed, cross_map = self.cross_attention(x, memory, record=record)
        x = self.norm2(x + self.dropout(crossed))
        x = self.norm3(x + self.dropout(self.feed_forward(x)))
        return x, [m for m in (self_map, cross_map) if m is not None]


class SinusoidalPositionalEncoding(nn.Module):
    def __init__(self, d_model: int, max_len: int):
        super().__init__()
        position = torch.arange(max_len, dtype=torch.float64).unsqueeze(1)
        div_term = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
        pe = torch.zeros(max_len, d_model, dtype=torch.float64)
        pe[:, 0::2] = torch.sin(position * div_term)
        pe[:, 1::2] = torch.cos(position * div_term)[:, : d_model // 2]
        self.register_buffer('pe', pe.to(torch.get_default_dtype()))

    def forward(self, length: int) -> torch.Tensor:
        return self.pe[:length]


def init_glorot(module: nn.Module) -> None:
    """Glorot-uniform weights and zero biases for every linear layer."""
    for child in module.modules():
        if isinstance(child, nn.Linear):
            nn.init.xavier_uniform_(child.weight)
            if child.bias is not None:
                nn.init.zeros_(child.bias)
