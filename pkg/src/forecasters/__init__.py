"""
Forecasters package

The three models share one call signature,
``model(lookback, origins=None, record=False) -> (forecast, attention_maps)``,
and are built from a model kind plus config overrides by ``build_model``.
"""

import logging
from dataclasses import fields
from typing import Any, Dict, Optional

import torch
import torch.nn as nn

from errors import ConfigurationError
from models import PatchConfig, RaftConfig, VanillaConfig
from retrieval import RetrievalIndex

from .checkpoint import load_checkpoint, save_checkpoint
from .patchtst import PatchTST, patchify, patchtst_forward
from .raft import RaftForecaster, raft_forward
from .vanilla import VanillaTransformer, vanilla_forward


logger = logging.getLogger(__name__)

__all__ = [
    'PatchTST', 'RaftForecaster', 'VanillaTransformer',
    'build_model', 'make_config', 'model_from_checkpoint',
    'patchify', 'patchtst_forward', 'raft_forward', 'vanilla_forward',
    'load_checkpoint', 'save_checkpoint',
]

_PATCH_KEYS = {f.name for f in fields(PatchConfig)}
_RAFT_KEYS = {f.name for f in fields(RaftConfig)} - {'base'}


def make_config(kind: str, seq_len: int, pred_len: int, n_channels: int,
                overrides: Optional[Dict[str, Any]] = None, label_len: int = 48):
    """Build the config dataclass for ``kind`` from Table-A1 defaults plus overrides."""
    overrides = dict(overrides or {})
    if kind == 'vanilla':
        known = {f.name for f in fields(VanillaConfig)}
        params = {k: v for k, v in overrides.items() if k in known}
        params.update(seq_len=seq_len, pred_len=pred_len, n_channels=n_channels)
        params.setdefault('label_len', label_len)
        return VanillaConfig(**params)
    if kind == 'patchtst':
        params = {k: v for k, v in overrides.items() if k in _PATCH_KEYS}
        params.update(seq_len=seq_len, pred_len=pred_len, n_channels=n_channels)
        return PatchConfig(**params)
    if kind == 'raft':
        base_params = dict(seq_len=seq_len, pred_len=pred_len, n_channels=n_channels,
                           d_model=128, n_heads=8, e_layers=2, d_ff=256)
        base_params.update({k: v for k, v in overrides.items() if k in _PATCH_KEYS - {'seq_len', 'pred_len', 'n_channels'}})
        raft_params = {k: v for k, v in overrides.items() if k in _RAFT_KEYS}
        return RaftConfig(base=PatchConfig(**base_params), **raft_params)
    raise ConfigurationError(f"Unknown model kind {kind!r}")


def build_model(kind: str, config, seed: int, index: Optional[RetrievalIndex] = None) -> nn.Module:
    """Instantiate a forecaster with seeded Glorot initialisation."""
    torch.manual_seed(seed)
    if kind == 'vanilla':
        model = VanillaTransformer(config)
    elif kind == 'patchtst':
        model = PatchTST(config)
    elif kind == 'raft':
        if index is None:
            raise ConfigurationError("RAFT needs a retrieval index")
        model = RaftForecaster(config, index)
    else:
        raise ConfigurationError(f"Unknown model kind {kind!r}")
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built {kind} model with {n_params:,} parameters")
    return model


def model_from_checkpoint(payload: Dict[str, Any], index: Optional[RetrievalIndex] = None) -> nn.Module:
    """Rebuild a forecaster from :func:`load_checkpoint` output and load its weights."""
    kind = payload['model_kind']
    raw = payload['model_config']
    if kind == 'vanilla':
        config = VanillaConfig(**raw)
    elif kind == 'patchtst':
        config = PatchConfig(**raw)
    elif kind == 'raft':
        config = RaftConfig(**raw)
    else:
        raise ConfigurationError(f"Unknown model kind {kind!r} in checkpoint")
    model = build_model(kind, config, seed=0, index=index)
    model.load_state_dict(payload['state_dict'])
    return model
