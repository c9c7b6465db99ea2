"""
Attention entropy instrumentation.

Normalized entropy of an attention row over N keys is
``-sum(p ln p) / ln N`` (1 for uniform, 0 for one-hot); effective rank is
``exp(-sum(p ln p))``, the number of equally attended keys.
"""

import logging
from typing import Dict, List, Sequence

import numpy as np
import torch
import torch.nn as nn

from dataset import WindowSample, collate_windows
from errors import ContractError
from models import AttentionStats
from numerics import AttentionMap


logger = logging.getLogger(__name__)

DEFAULT_PROBE_SAMPLES = 64


def _row_entropy(attention_map: AttentionMap) -> torch.Tensor:
    attention_map.validate()
    if attention_map.n_keys < 2:
        raise ContractError(f"Entropy needs at least 2 keys, layer {attention_map.layer_index} has {attention_map.n_keys}")
    p = attention_map.weights.detach().to(torch.float64)
    # xlogy gives 0 * ln 0 = 0
    return -torch.special.xlogy(p, p).sum(dim=-1)


def attention_entropy(attention_map: AttentionMap) -> torch.Tensor:
    """Per-row normalized entropy, shape ``(..., heads, queries)``."""
    return _row_entropy(attention_map) / np.log(attention_map.n_keys)


def effective_rank(attention_map: AttentionMap) -> torch.Tensor:
    """Per-row perplexity ``exp(H)``, in ``[1, N]``."""
    return torch.exp(_row_entropy(attention_map))


def probe(
    model: nn.Module,
    windows: Sequence[WindowSample],
    seq_len: int,
    max_samples: int = DEFAULT_PROBE_SAMPLES,
    batch_size: int = 8,
    kinds: Sequence[str] = ('encoder',),
) -> AttentionStats:
    """
    Average entropy and effective rank over up to ``max_samples`` windows.

    Windows are taken evenly spaced across ``windows``. Means are taken over
    samples and query rows per head, then over heads per layer, then over
    layers.
    """
    if not windows:
        raise ContractError("probe needs at least one window")
    if len(windows) > max_samples:
        picks = np.linspace(0, len(windows) - 1, max_samples).round().astype(int)
        windows = [windows[i] for i in picks]

    was_training = model.training
    model.eval()
    head_sums: Dict[int, torch.Tensor] = {}
    rank_sums: Dict[int, torch.Tensor] = {}
    counts: Dict[int, int] = {}
    n_keys = None
    try:
        with torch.no_grad():
            for start in range(0, len(windows), batch_size):
                batch = collate_windows(windows[start:start + batch_size])
                _, maps = model(batch.lookback, batch.origins, record=True)
                maps = [m for m in maps if m.kind in kinds]
                if not maps:
                    raise ContractError(f"{type(model).__name__} recorded no {list(kinds)} attention maps")
                for attention_map in maps:
                    n_keys = attention_map.n_keys
                    entropy = attention_entropy(attention_map)
                    rank = effective_rank(attention_map)
                    # (..., heads, queries) -> per-head sums over everything but heads
                    heads = attention_map.n_heads
                    layer = attention_map.layer_index
                    flat_entropy = entropy.reshape(-1, heads, entropy.shape[-1]).transpose(0, 1).reshape(heads, -1)
                    flat_rank = rank.reshape(-1, heads, rank.shape[-1]).transpose(0, 1).reshape(heads, -1)
                    head_sums[layer] = head_sums.get(layer, 0) + flat_entropy.sum(dim=1)
                    rank_sums[layer] = rank_sums.get(layer, 0) + flat_rank.sum(dim=1)
                    counts[layer] = counts.get(layer, 0) + flat_entropy.shape[1]
    finally:
        model.train(was_training)

    layers = sorted(head_sums)
    layer_head_entropy: List[List[float]] = [(head_sums[l] / counts[l]).tolist() for l in layers]
    layer_entropy = [float(np.mean(h)) for h in layer_head_entropy]
    layer_rank = [float((rank_sums[l] / counts[l]).mean()) for l in layers]
    stats = AttentionStats(
        context_length=seq_len,
        n_keys=int(n_keys),
        samples=len(windows),
        layer_head_entropy=layer_head_entropy,
        layer_entropy=layer_entropy,
        layer_effective_rank=layer_rank,
        mean_entropy=float(np.mean(layer_entropy)),
        mean_effective_rank=float(np.mean(layer_rank)),
    )
    logger.info(
        f"Attention probe L={seq_len}: N={stats.n_keys}, mean normalized entropy "
        f"{stats.mean_entropy:.4f}, mean effective rank {stats.mean_effective_rank:.2f}"
    )
    return stats
