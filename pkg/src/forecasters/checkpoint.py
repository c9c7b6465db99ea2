"""
Versioned model checkpoints: named parameter tensors plus a config echo.
"""

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Optional

import torch
import torch.nn as nn

from errors import ConfigurationError


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(model: nn.Module, path: Path, spec: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'model_kind': model.kind,
        'model_config': asdict(model.config),
        'spec': spec or {},
        'state_dict': model.state_dict(),
    }, path)
    logger.info(f"Saved {model.kind} checkpoint to {path}")
    return path


def load_checkpoint(path: Path) -> Dict[str, Any]:
    """Read a checkpoint dict; the caller rebuilds the model from ``model_config``."""
    try:
        payload = torch.load(Path(path), map_location='cpu', weights_only=False)
    except FileNotFoundError:
        raise ConfigurationError(f"Checkpoint not found: {path}") from None
    version = payload.get('format_version')
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigurationError(
            f"Checkpoint {path} has format version {version}; expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload
