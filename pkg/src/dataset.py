"""
Time-series ingestion: CSV loading, 60/20/20 splits, per-channel
standardization fitted on the training split, and window cutting.

Windows are numpy views into the standardized matrix; ``WindowDataset`` and
``collate_windows`` turn them into torch batches for the training loop.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from sklearn.preprocessing import StandardScaler
from torch.utils.data import Dataset

from errors import ConfigurationError, ContractError, ParseError


logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
# split fractions in tenths, so bounds are exact integer floors
TRAIN_TENTHS = 6
VAL_TENTHS = 2


def split_bounds(length: int) -> Tuple[int, int]:
    """Return ``(train_end, val_end)`` for a series of ``length`` rows."""
    return TRAIN_TENTHS * length // 10, (TRAIN_TENTHS + VAL_TENTHS) * length // 10


@dataclass(frozen=True)
class ChannelScaler:
    """Per-channel z-score parameters fitted on the training rows."""
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass(frozen=True)
class TimeSeriesDataset:
    """
    A multichannel series with its split boundaries.

    ``values`` keeps raw units; ``scaled`` is filled by :func:`fit_transform`
    and is what windows are cut from.
    """
    name: str
    channel_names: List[str]
    values: np.ndarray
    split_bounds: Tuple[int, int]
    scaler: Optional[ChannelScaler] = None
    scaled: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def is_standardized(self) -> bool:
        return self.scaled is not None

    def split_range(self, split: str) -> Tuple[int, int]:
        """Row range ``[start, end)`` owned by ``split``."""
        train_end, val_end = self.split_bounds
        ranges = {'train': (0, train_end), 'val': (train_end, val_end), 'test': (val_end, self.n_timesteps)}
        try:
            return ranges[split]
        except KeyError:
            raise ContractError(f"Unknown split {split!r}; expected one of {SPLITS}") from None

    def matrix(self) -> np.ndarray:
        """The standardized matrix windows are cut from."""
        if self.scaled is None:
            raise ContractError(f"Dataset {self.name!r} has not been standardized; call fit_transform first")
        return self.scaled

    def inverse_transform(self, values: np.ndarray) -> np.ndarray:
        if self.scaler is None:
            raise ContractError(f"Dataset {self.name!r} has no fitted scaler")
        return self.scaler.inverse_transform(values)


@dataclass(frozen=True)
class WindowSample:
    """One (lookback, decoder seed, target) triple; ``origin_index`` is the first target row."""
    lookback: np.ndarray
    decoder_seed: np.ndarray
    target: np.ndarray
    origin_index: int


# ------------------------------------------------------------------
# Ingestion
# ------------------------------------------------------------------

def from_array(
    values: np.ndarray,
    channel_names: Optional[Sequence[str]] = None,
    name: str = 'array',
) -> TimeSeriesDataset:
    """Wrap an in-memory ``(T, C)`` matrix as an unscaled dataset."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise ContractError(f"Expected a (timesteps, channels) matrix, got shape {values.shape}")
    names = list(channel_names) if channel_names is not None else [f"ch{i}" for i in range(values.shape[1])]
    if len(names) != values.shape[1]:
        raise ContractError(f"{len(names)} channel names for {values.shape[1]} channels")
    return TimeSeriesDataset(
        name=name,
        channel_names=names,
        values=values,
        split_bounds=split_bounds(values.shape[0]),
    )


def load_csv(path: Path, date_column: str = 'date', name: Optional[str] = None) -> TimeSeriesDataset:
    """
    Read an ETT-style CSV: a header row, one date column, numeric channels.

    Raises:
        ParseError: missing file, missing date column, or a missing /
            non-numeric cell (reported with its file line number)
    """
    path = Path(path)
    try:
        df = pd.read_csv(path, encoding='utf-8')
    except FileNotFoundError:
        raise ParseError(f"Dataset file not found: {path}") from None
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"Cannot parse {path}: {e}") from e

    if date_column not in df.columns:
        raise ParseError(f"{path} has no date column {date_column!r}; columns are {list(df.columns)}")

    channels = [c for c in df.columns if c != date_column]
    if not channels:
        raise ParseError(f"{path} has no value columns besides {date_column!r}")

    numeric = df[channels].apply(pd.to_numeric, errors='coerce')
    bad = numeric.isna().any(axis=1).to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        column = numeric.columns[numeric.iloc[row].isna().to_numpy()][0]
        # +2: one for the header line, one for 1-based numbering
        raise ParseError(f"{path}: missing or non-numeric value in column {column!r} at line {row + 2}")

    stamps = pd.to_datetime(df[date_column], errors='coerce')
    if stamps.isna().any():
        logger.warning(f"{path}: {int(stamps.isna().sum())} unparseable timestamps in {date_column!r}")
    elif not stamps.is_monotonic_increasing:
        logger.warning(f"{path}: timestamps are not monotone; row order is kept as in the file")

    dataset = from_array(numeric.to_numpy(dtype=np.float64), channels, name=name or path.stem)
    train_end, val_end = dataset.split_bounds
    logger.info(
        f"Loaded {dataset.name}: {dataset.n_timesteps} timesteps x {dataset.n_channels} channels "
        f"(train {train_end}, val {val_end - train_end}, test {dataset.n_timesteps - val_end})"
    )
    return dataset


def synthetic_dataset(
    kind: str = 'periodic',
    length: int = 1000,
    n_channels: int = 2,
    period: int = 24,
    noise: float = 0.1,
    seed: int = 2021,
) -> TimeSeriesDataset:
    """
    Deterministic synthetic series for tests and smoke runs.

    ``periodic`` is exactly periodic with ``period``; ``noisy_periodic`` adds
    Gaussian noise; ``random_walk`` is a cumulative Gaussian sum.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    columns = []
    for c in range(n_channels):
        phase = 2 * np.pi * c / max(n_channels, 1)
        if kind in ('periodic', 'noisy_periodic'):
            wave = np.sin(2 * np.pi * (t % period) / period + phase) + 0.5 * np.cos(4 * np.pi * (t % period) / period)
            if kind == 'noisy_periodic':
                wave = wave + noise * rng.standard_normal(length)
            columns.append(wave + c)
        elif kind == 'random_walk':
            columns.append(np.cumsum(rng.standard_normal(length)))
        else:
            raise ConfigurationError(f"Unknown synthetic series kind {kind!r}")
    return from_array(np.stack(columns, axis=1), name=f"synthetic_{kind}")


# ------------------------------------------------------------------
# Standardization
# ------------------------------------------------------------------

def fit_transform(ds: TimeSeriesDataset) -> TimeSeriesDataset:
    """
    Fit per-channel mean/std on ``[0, train_end)`` and z-score every row.

    Returns a new dataset; a dataset that is already standardized is rejected
    so the transform is never applied twice.
    """
    if ds.is_standardized:
        raise ContractError(f"Dataset {ds.name!r} is already standardized")
    train_end, _ = ds.split_bounds
    if train_end < 2:
        raise ConfigurationError(f"Dataset {ds.name!r} has only {train_end} training rows")

    scaler = StandardScaler().fit(ds.values[:train_end])
    flat = np.flatnonzero(scaler.var_ == 0)
    if flat.size:
        names = [ds.channel_names[i] for i in flat]
        raise ConfigurationError(f"Dataset {ds.name!r}: zero-variance training channel(s) {names}")

    channel_scaler = ChannelScaler(mean=scaler.mean_.copy(), std=scaler.scale_.copy())
    scaled = channel_scaler.transform(ds.values)
    logger.debug(f"Standardized {ds.name}: means {np.round(channel_scaler.mean, 4).tolist()}")
    return replace(ds, scaler=channel_scaler, scaled=scaled)


# ------------------------------------------------------------------
# Windows
# ------------------------------------------------------------------

def window_origins(
    ds: TimeSeriesDataset,
    split: str,
    seq_len: int,
    pred_len: int,
    stride: int = 1,
    strict_split_lookback: bool = False,
) -> range:
    """
    First-target-row indices of every valid window in ``split``.

    Targets always lie inside the split. Train lookbacks stay inside the
    train split; val/test lookbacks may reach into earlier rows unless
    ``strict_split_lookback`` is set.
    """
    if seq_len < 1 or pred_len < 1:
        raise ConfigurationError(f"seq_len and pred_len must be >= 1, got {seq_len}, {pred_len}")
    start, end = ds.split_range(split)
    if split == 'train' or strict_split_lookback:
        first = start + seq_len
        max_feasible = end - start - pred_len
    else:
        first = max(start, seq_len)
        max_feasible = end - pred_len
    last = end - pred_len
    if first > last:
        raise ConfigurationError(
            f"seq_len={seq_len} with pred_len={pred_len} leaves no {split} window in "
            f"{ds.name!r}; max feasible seq_len is {max(max_feasible, 0)}"
        )
    return range(first, last + 1, stride)


def make_windows(
    ds: TimeSeriesDataset,
    split: str,
    seq_len: int,
    pred_len: int,
    label_len: int = 48,
    stride: int = 1,
    strict_split_lookback: bool = False,
) -> List[WindowSample]:
    """Cut every (lookback, decoder seed, target) window of ``split``."""
    if not 0 <= label_len <= seq_len:
        raise ConfigurationError(f"label_len={label_len} must lie in [0, seq_len={seq_len}]")
    matrix = ds.matrix()
    samples = []
    for origin in window_origins(ds, split, seq_len, pred_len, stride, strict_split_lookback):
        lookback = matrix[origin - seq_len:origin]
        samples.append(WindowSample(
            lookback=lookback,
            decoder_seed=lookback[seq_len - label_len:],
            target=matrix[origin:origin + pred_len],
            origin_index=origin,
        ))
    logger.debug(f"{ds.name} {split}: {len(samples)} windows (L={seq_len}, H={pred_len})")
    return samples


@dataclass
class WindowBatch:
    """Stacked windows: lookback ``(B, L, C)``, target ``(B, H, C)``, origins ``(B,)``."""
    lookback: torch.Tensor
    target: torch.Tensor
    origins: torch.Tensor

    def __len__(self) -> int:
        return self.lookback.shape[0]

    def slice(self, start: int, stop: int) -> 'WindowBatch':
        return WindowBatch(self.lookback[start:stop], self.target[start:stop], self.origins[start:stop])


class WindowDataset(Dataset):
    """Indexable view over a list of windows for ``torch.utils.data.DataLoader``."""

    def __init__(self, samples: Sequence[WindowSample]):
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> WindowSample:
        return self.samples[index]


def collate_windows(samples: Sequence[WindowSample]) -> WindowBatch:
    """Stack samples into a :class:`WindowBatch` in the default torch dtype."""
    dtype = torch.get_default_dtype()
    return WindowBatch(
        lookback=torch.as_tensor(np.stack([s.lookback for s in samples]), dtype=dtype),
        target=torch.as_tensor(np.stack([s.target for s in samples]), dtype=dtype),
        origins=torch.as_tensor([s.origin_index for s in samples], dtype=torch.long),
    )


def load_registered(name: str, entry: Dict[str, str]) -> TimeSeriesDataset:
    """Load and standardize a dataset from a registry entry or a synthetic name."""
    if name.startswith('synthetic_'):
        return fit_transform(synthetic_dataset(kind=name[len('synthetic_'):]))
    return fit_transform(load_csv(Path(entry['path']), entry.get('date_column', 'date'), name=name))
