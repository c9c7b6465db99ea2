"""
Runtime settings loaded from the environment (and a ``.env`` file).
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv

from errors import ConfigurationError
from models import PRECISIONS


logger = logging.getLogger(__name__)

# dataset name -> file name and date column, relative to the data directory
DEFAULT_REGISTRY: Dict[str, Dict[str, str]] = {
    'ETTh1': {'path': 'ETTh1.csv', 'date_column': 'date'},
    'ETTh2': {'path': 'ETTh2.csv', 'date_column': 'date'},
    'ETTm1': {'path': 'ETTm1.csv', 'date_column': 'date'},
    'ETTm2': {'path': 'ETTm2.csv', 'date_column': 'date'},
    'exchange_rate': {'path': 'exchange_rate.csv', 'date_column': 'date'},
    'weather': {'path': 'weather.csv', 'date_column': 'date'},
}


@dataclass
class Settings:
    """Resolved workbench settings; CLI flags override these."""
    data_dir: Path = Path('data')
    out_dir: Path = Path('results')
    seed: int = 2021
    # overrides the precision of every spec when set
    precision: Optional[str] = None
    parallelism: int = 1
    num_threads: Optional[int] = None
    log_level: str = 'INFO'
    registry: Dict[str, Dict[str, str]] = field(default_factory=lambda: dict(DEFAULT_REGISTRY))

    def __post_init__(self):
        if self.precision is not None and self.precision not in PRECISIONS:
            raise ConfigurationError(f"Unknown precision {self.precision!r}; expected one of {PRECISIONS}")
        if self.parallelism < 1:
            raise ConfigurationError(f"parallelism must be >= 1, got {self.parallelism}")

    def dataset_entry(self, name: str) -> Dict[str, str]:
        """Return ``{path, date_column}`` for a registered dataset, path resolved."""
        try:
            entry = self.registry[name]
        except KeyError:
            raise ConfigurationError(
                f"Dataset {name!r} is not registered; known: {sorted(self.registry)}"
            ) from None
        path = Path(entry['path'])
        if not path.is_absolute():
            path = self.data_dir / path
        return {'path': str(path), 'date_column': entry.get('date_column', 'date')}


def _int_env(name: str, default: Optional[int]) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{name} must be an integer, got {raw!r}") from None


def load_settings(env_file: Optional[Path] = None) -> Settings:
    """Load ``.env`` (if present) and build :class:`Settings` from the environment."""
    load_dotenv(env_file)

    registry = dict(DEFAULT_REGISTRY)
    registry_file = os.getenv('WORKBENCH_REGISTRY')
    if registry_file:
        try:
            registry.update(json.loads(Path(registry_file).read_text(encoding='utf-8')))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read dataset registry {registry_file}: {e}") from e
        logger.debug(f"Loaded dataset registry from {registry_file}")

    return Settings(
        data_dir=Path(os.getenv('WORKBENCH_DATA_DIR', 'data')),
        out_dir=Path(os.getenv('WORKBENCH_OUT_DIR', 'results')),
        seed=_int_env('WORKBENCH_SEED', 2021),
        precision=os.getenv('WORKBENCH_PRECISION') or None,
        parallelism=_int_env('WORKBENCH_PARALLELISM', 1),
        num_threads=_int_env('WORKBENCH_NUM_THREADS', None),
        log_level=os.getenv('LOG_LEVEL', 'INFO').upper(),
        registry=registry,
    )
