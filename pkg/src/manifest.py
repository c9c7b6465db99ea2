"""
Experiment matrix manifests.

A manifest is a plain ``key = value`` file read with python-dotenv. Axis keys
expand into the cell grid; the remaining keys use the hyperparameter names
of the configuration dataclasses and apply to every cell, or to one model
kind when written with a ``<model>.`` prefix. ``seq_len`` gives the context
length of cells listed by model name alone and ``pred_len`` is the single-horizon
form of ``pred_lens``::

    datasets = ETTh1
    cells = vanilla:720, vanilla:1440, vanilla:3000, patchtst:720, raft:720
    pred_lens = 96
    seeds = 2021
    epochs = 10
    vanilla.d_model = 512
"""

import logging
from dataclasses import fields
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import dotenv_values

from errors import ConfigurationError
from models import MODEL_KINDS, ExperimentSpec, PatchConfig, RaftConfig, TrainConfig, VanillaConfig


logger = logging.getLogger(__name__)

RAFT_SEQ_LEN = 720

AXIS_KEYS = {'datasets', 'cells', 'pred_lens', 'seeds'}
# single-value forms of the cell and horizon axes
SCALAR_AXIS_KEYS = {'seq_len', 'pred_len'}
SPEC_KEYS = {'label_len', 'probe_entropy', 'probe_samples', 'precision', 'window_stride'}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {'seed'}
MODEL_KEYS = (
    {f.name for f in fields(VanillaConfig)}
    | {f.name for f in fields(PatchConfig)}
    | {f.name for f in fields(RaftConfig)}
) - {'seq_len', 'pred_len', 'n_channels', 'base', 'label_len'}
KNOWN_KEYS = AXIS_KEYS | SCALAR_AXIS_KEYS | SPEC_KEYS | TRAIN_KEYS | MODEL_KEYS

_TRUE = {'true', 'yes', 'on'}
_FALSE = {'false', 'no', 'off'}


def parse_value(raw: Optional[str]) -> Any:
    """Coerce a manifest string to bool, int, float, ``None`` or leave it a string."""
    if raw is None:
        return None
    text = raw.strip()
    lowered = text.lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    if lowered in ('none', 'null', ''):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _split_list(raw: Optional[str]) -> List[str]:
    return [item.strip() for item in (raw or '').split(',') if item.strip()]


def _int_list(key: str, raw: Optional[str]) -> List[int]:
    try:
        return [int(item) for item in _split_list(raw)]
    except ValueError:
        raise ConfigurationError(f"Manifest key {key!r} must be a comma-separated list of integers, got {raw!r}") from None


def _scalar_int(key: str, values: Dict[str, Optional[str]]) -> Optional[int]:
    raw = values.get(key)
    if raw is None or not raw.strip():
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"Manifest key {key!r} must be an integer, got {raw!r}") from None


def parse_cells(raw: Optional[str], default_seq_len: Optional[int] = None) -> List[Tuple[str, int]]:
    """
    ``"patchtst:720, raft:720"`` -> ``[('patchtst', 720), ('raft', 720)]``.

    A bare model name takes ``default_seq_len`` when one is given.
    """
    cells = []
    for item in _split_list(raw):
        model, sep, length = item.partition(':')
        model = model.strip().lower()
        if not sep and default_seq_len is not None and model in MODEL_KINDS:
            cells.append((model, default_seq_len))
            continue
        if not sep or model not in MODEL_KINDS:
            raise ConfigurationError(f"Cell {item!r} must be <model>:<seq_len> with model in {MODEL_KINDS}")
        try:
            cells.append((model, int(length)))
        except ValueError:
            raise ConfigurationError(f"Cell {item!r} has a non-integer seq_len") from None
    return cells


def _bucket(values: Dict[str, Any]) -> Tuple[Dict[str, Any], Dict[str, Any], Dict[str, Any]]:
    spec, train, model = {}, {}, {}
    for key, value in values.items():
        if key in SPEC_KEYS:
            spec[key] = value
        elif key in TRAIN_KEYS:
            train[key] = value
        else:
            model[key] = value
    return spec, train, model


def expand_manifest(
    values: Dict[str, Optional[str]],
    default_seed: int = 2021,
    out_dir: str = 'results',
    precision: Optional[str] = None,
) -> List[ExperimentSpec]:
    """
    Expand parsed manifest values into one :class:`ExperimentSpec` per
    (dataset, cell, horizon, seed), in manifest order.

    Raises:
        ConfigurationError: unknown key, malformed list, or a model/context
            combination the model does not support
    """
    shared: Dict[str, Any] = {}
    per_model: Dict[str, Dict[str, Any]] = {kind: {} for kind in MODEL_KINDS}
    for key, raw in values.items():
        key = key.strip()
        if key in AXIS_KEYS or key in SCALAR_AXIS_KEYS:
            continue
        prefix, dot, name = key.partition('.')
        if dot:
            if prefix not in MODEL_KINDS or name not in KNOWN_KEYS - AXIS_KEYS - SCALAR_AXIS_KEYS:
                raise ConfigurationError(f"Unknown manifest key {key!r}")
            per_model[prefix][name] = parse_value(raw)
        elif key in KNOWN_KEYS:
            shared[key] = parse_value(raw)
        else:
            raise ConfigurationError(f"Unknown manifest key {key!r}")

    datasets = _split_list(values.get('datasets'))
    seq_len = _scalar_int('seq_len', values)
    cells = parse_cells(values.get('cells'), default_seq_len=seq_len)
    if seq_len is not None and all(':' in item for item in _split_list(values.get('cells'))):
        logger.warning(f"seq_len = {seq_len} is unused; every cell names its own context length")
    pred_lens = _int_list('pred_lens', values.get('pred_lens'))
    pred_len = _scalar_int('pred_len', values)
    if pred_len is not None:
        if pred_lens:
            raise ConfigurationError("A manifest sets either 'pred_len' or 'pred_lens', not both")
        pred_lens = [pred_len]
    pred_lens = pred_lens or [96]
    seeds = _int_list('seeds', values.get('seeds')) or [default_seed]
    if not datasets or not cells:
        if datasets or cells:
            raise ConfigurationError("A manifest needs both 'datasets' and 'cells'")
        logger.info("Manifest declares no cells")
        return []

    specs = []
    for dataset, (model, seq_len), pred_len, seed in product(datasets, cells, pred_lens, seeds):
        if model == 'raft' and seq_len != RAFT_SEQ_LEN and not dataset.startswith('synthetic_'):
            raise ConfigurationError(
                f"RAFT runs at seq_len={RAFT_SEQ_LEN} on benchmark datasets; got {model}:{seq_len} for {dataset}"
            )
        spec_kw, train_kw, model_kw = _bucket({**shared, **per_model[model]})
        if precision is not None:
            spec_kw['precision'] = precision
        specs.append(ExperimentSpec(
            dataset=dataset,
            model=model,
            seq_len=seq_len,
            pred_len=pred_len,
            train=TrainConfig(seed=seed, **train_kw),
            model_overrides=model_kw,
            out_dir=str(out_dir),
            **spec_kw,
        ))
    logger.info(
        f"Manifest expanded to {len(specs)} cells "
        f"({len(datasets)} datasets x {len(cells)} cells x {len(pred_lens)} horizons x {len(seeds)} seeds)"
    )
    return specs


def load_manifest(
    path: Path,
    default_seed: int = 2021,
    out_dir: str = 'results',
    precision: Optional[str] = None,
) -> List[ExperimentSpec]:
    """Read and expand a manifest file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Manifest not found: {path}")
    return expand_manifest(dotenv_values(path), default_seed=default_seed, out_dir=out_dir, precision=precision)
