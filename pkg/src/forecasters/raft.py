"""
Retrieval-augmented forecaster.

For each window the top-k most similar training segments are retrieved. Their
similarity-weighted window and future form an exogenous sequence that the
patch encoder sees next to the lookback, and the weighted future is blended
with the encoder's forecast through a learned per-horizon-step gate:

    forecast = g * base + (1 - g) * retrieved_future,   g = sigmoid(gate_logits)

Windows without any eligible candidate use the base forecast alone.
"""

import hashlib
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from dataset import WindowSample
from errors import ConfigurationError, ContractError, DimensionError
from forecasters.patchtst import PatchTST
from models import RaftConfig
from numerics import AttentionMap, as_tensor
from retrieval import RetrievalIndex, aggregate_futures, aggregate_windows, cosine_topk_batch


logger = logging.getLogger(__name__)

_Retrieved = Tuple[np.ndarray, np.ndarray, bool]
_CacheKey = Tuple[int, str]


def _digest(query: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(query).tobytes(), digest_size=8).hexdigest()


class RaftForecaster(nn.Module):
    """
    Patch encoder plus a gated retrieval branch over ``index``.

    Retrieval results are cached per window, keyed on the origin and a digest
    of the query rows, so the same origin seen with other values (another
    dataset or another scaling) is retrieved again.
    """
    kind = 'raft'

    def __init__(self, config: RaftConfig, index: RetrievalIndex):
        super().__init__()
        if index.m != config.query_len or index.horizon != config.base.pred_len:
            raise ConfigurationError(
                f"Index (m={index.m}, H={index.horizon}) does not match RAFT config "
                f"(m={config.query_len}, H={config.base.pred_len})"
            )
        self.config = config
        self.index = index
        self.base = PatchTST(config.base, exogenous_len=config.query_len + config.base.pred_len)
        self.gate_logits = nn.Parameter(torch.zeros(config.base.pred_len))
        # (origin, query digest) -> (exogenous sequence, aggregated future, retrieval found)
        self._cache: Dict[_CacheKey, _Retrieved] = {}
        self.use_cache = True
        self._fallbacks_logged = 0

    def clear_cache(self) -> None:
        self._cache.clear()

    def retrieve(self, lookback: torch.Tensor, origins: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Retrieval branch for a batch; no gradient flows through it.

        Returns the exogenous sequence ``(B, m + H, C)``, the aggregated
        future ``(B, H, C)`` and a boolean mask of windows that found at least
        one eligible candidate.
        """
        c = self.config
        origin_list = [int(o) for o in origins.tolist()]
        all_queries = lookback.detach()[:, -c.query_len:, :].to(torch.float64).cpu().numpy()
        keys = [(o, _digest(q)) for o, q in zip(origin_list, all_queries)]
        missing = [i for i, key in enumerate(keys) if not (self.use_cache and key in self._cache)]
        results: Dict[int, _Retrieved] = {}

        if missing:
            queries = all_queries[missing]
            retrieved = cosine_topk_batch(
                self.index, queries, [origin_list[i] for i in missing], c.top_k,
                channel_independent=c.channel_independent_retrieval,
            )
            for i, rs in zip(missing, retrieved):
                if len(rs) == 0:
                    entry = (
                        np.zeros((c.query_len + c.base.pred_len, self.index.n_channels)),
                        np.zeros((c.base.pred_len, self.index.n_channels)),
                        False,
                    )
                    if self._fallbacks_logged < 5:
                        logger.info(f"No eligible retrieval candidates for origin {origin_list[i]}; using base forecast")
                    self._fallbacks_logged += 1
                else:
                    future = aggregate_futures(rs, c.temperature)
                    window = aggregate_windows(rs, c.temperature)
                    entry = (np.concatenate([window, future], axis=0), future, True)
                results[i] = entry
                if self.use_cache:
                    self._cache[keys[i]] = entry

        rows = [results[i] if i in results else self._cache[key] for i, key in enumerate(keys)]
        dtype = lookback.dtype
        exogenous = torch.as_tensor(np.stack([r[0] for r in rows]), dtype=dtype)
        future = torch.as_tensor(np.stack([r[1] for r in rows]), dtype=dtype)
        found = torch.as_tensor([r[2] for r in rows], dtype=torch.bool)
        return exogenous, future, found

    def gate(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_logits)

    def forward(
        self,
        lookback: torch.Tensor,
        origins: Optional[torch.Tensor] = None,
        record: bool = False,
    ) -> Tuple[torch.Tensor, List[AttentionMap]]:
        if origins is None:
            raise ContractError("RAFT needs window origins to keep retrieval leakage-safe")
        if lookback.dim() != 3 or lookback.shape[2] != self.index.n_channels:
            raise DimensionError(
                f"RAFT expects lookback (batch, {self.config.base.seq_len}, {self.index.n_channels}), "
                f"got {tuple(lookback.shape)}"
            )
        exogenous, retrieved_future, found = self.retrieve(lookback, origins)
        base_forecast, maps = self.base(lookback, record=record, exogenous=exogenous)

        g = self.gate().view(1, -1, 1)
        g = torch.where(found.view(-1, 1, 1), g, torch.ones_like(g))
        forecast = g * base_forecast + (1 - g) * retrieved_future
        return forecast, maps


def raft_forward(model: RaftForecaster, sample: WindowSample) -> torch.Tensor:
    """Forecast one window; returns the ``(H, C)`` forecast."""
    lookback = as_tensor(sample.lookback).unsqueeze(0)
    forecast, _ = model(lookback, torch.tensor([sample.origin_index]))
    return forecast[0]
