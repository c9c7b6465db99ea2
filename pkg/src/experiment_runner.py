"""
Experiment matrix runner.

Each cell trains, evaluates and optionally probes one model on one dataset.
Finished cells are written to ``<out>/cells/<cell_id>.json`` straight away, so
a rerun of the same matrix skips every cell already recorded as ``ok`` with
the same spec fingerprint; a cell recorded under another configuration is
retrained and its record replaced. A failing cell is recorded with its error and the matrix carries on.
"""

import asyncio
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import aiofiles
import torch

from dataset import TimeSeriesDataset, WindowSample, load_registered, make_windows
from diagnostics import probe
from errors import ConfigurationError
from forecasters import build_model, load_checkpoint, make_config, model_from_checkpoint, save_checkpoint
from models import CellResult, ExperimentReport, ExperimentSpec, TrainRecord
from numerics import use_precision
from report_writer import build_report, literature_rows
from retrieval import RetrievalIndex, build_index
from settings import Settings
from training import evaluate, evaluate_persistence, train


logger = logging.getLogger(__name__)

CELLS_DIR = 'cells'
RECORDS_DIR = 'records'
CHECKPOINTS_DIR = 'checkpoints'
INDEX_DIR = 'index'

_datasets: Dict[Tuple[str, str], TimeSeriesDataset] = {}


# ------------------------------------------------------------------
# Cell preparation
# ------------------------------------------------------------------

def load_dataset(name: str, settings: Settings) -> TimeSeriesDataset:
    """Load and standardize a registered (or ``synthetic_*``) dataset, once per process."""
    entry = {} if name.startswith('synthetic_') else settings.dataset_entry(name)
    key = (name, entry.get('path', ''))
    if key not in _datasets:
        _datasets[key] = load_registered(name, entry)
        ds = _datasets[key]
        logger.info(f"Loaded {name}: {ds.n_timesteps} timesteps, {ds.n_channels} channels")
    return _datasets[key]


def cell_windows(spec: ExperimentSpec, ds: TimeSeriesDataset) -> Dict[str, List[WindowSample]]:
    return {
        split: make_windows(ds, split, spec.seq_len, spec.pred_len, spec.label_len, stride=spec.window_stride)
        for split in ('train', 'val', 'test')
    }


def retrieval_index(spec: ExperimentSpec, config, ds: TimeSeriesDataset, out_dir: Path) -> RetrievalIndex:
    """Build the training-split index for a RAFT cell, reusing a cached archive when present."""
    m, stride = config.query_len, config.retrieval_stride
    path = out_dir / INDEX_DIR / f"{ds.name}_m{m}_H{spec.pred_len}_r{stride}.npz"
    if path.exists():
        try:
            index = RetrievalIndex.load(path)
            if index.m == m and index.horizon == spec.pred_len:
                logger.info(f"Reusing retrieval index {path}")
                return index
        except (ConfigurationError, OSError, KeyError) as e:
            logger.warning(f"Ignoring unreadable retrieval index {path}: {e}")
    index = build_index(ds, m, spec.pred_len, stride)
    path.parent.mkdir(parents=True, exist_ok=True)
    index.save(path)
    return index


def build_cell_model(spec: ExperimentSpec, ds: TimeSeriesDataset, out_dir: Path):
    config = make_config(spec.model, spec.seq_len, spec.pred_len, ds.n_channels,
                         spec.model_overrides, label_len=spec.label_len)
    index = retrieval_index(spec, config, ds, out_dir) if spec.model == 'raft' else None
    return build_model(spec.model, config, seed=spec.train.seed, index=index)


# ------------------------------------------------------------------
# Single cell
# ------------------------------------------------------------------

def run_cell(spec: ExperimentSpec, settings: Settings) -> Tuple[CellResult, TrainRecord]:
    """
    Train, evaluate and (optionally) probe one cell in this process.

    Errors propagate; :func:`execute_cell` turns them into failed results.
    """
    use_precision(spec.precision)
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)
    out_dir = Path(spec.out_dir)
    logger.info(f"Cell {spec.cell_id}: starting")

    ds = load_dataset(spec.dataset, settings)
    windows = cell_windows(spec, ds)
    model = build_cell_model(spec, ds, out_dir)

    record = train(model, windows['train'], windows['val'], spec.train)
    checkpoint = save_checkpoint(model, out_dir / CHECKPOINTS_DIR / f"{spec.cell_id}.pt", spec.to_dict())
    record.checkpoint_path = str(checkpoint)

    mse, mae, per_channel = evaluate(model, windows['test'], per_channel=True)
    baseline_mse, baseline_mae = evaluate_persistence(windows['test'])
    stats = probe(model, windows['test'], spec.seq_len, spec.probe_samples) if spec.probe_entropy else None

    result = CellResult(
        cell_id=spec.cell_id,
        model=spec.model,
        dataset=spec.dataset,
        seq_len=spec.seq_len,
        pred_len=spec.pred_len,
        seed=spec.train.seed,
        mse=mse,
        mae=mae,
        train_seconds=record.wall_seconds,
        stopped_epoch=record.stopped_epoch,
        best_epoch=record.best_epoch,
        baseline_mse=baseline_mse,
        baseline_mae=baseline_mae,
        precision=spec.precision,
        entropy=stats,
        per_channel_mse=[float(v) for v in per_channel],
        spec_fingerprint=spec.fingerprint,
    )
    logger.info(
        f"Cell {spec.cell_id}: MSE {mse:.4f}, MAE {mae:.4f} "
        f"(persistence {baseline_mse:.4f}), {record.wall_seconds:.1f}s"
    )
    return result, record


def execute_cell(spec_data: Dict[str, Any], settings: Settings) -> Tuple[Dict[str, Any], Optional[Dict[str, Any]]]:
    """
    Process-pool entry point: run one cell from its dict form and return
    plain dicts. Any exception becomes a ``failed`` result.
    """
    spec = ExperimentSpec.from_dict(spec_data)
    try:
        result, record = run_cell(spec, settings)
        return result.to_dict(), record.to_dict()
    except Exception as e:
        logger.error(f"Cell {spec.cell_id} failed: {type(e).__name__}: {e}")
        logger.debug(traceback.format_exc())
        failed = CellResult(
            cell_id=spec.cell_id,
            model=spec.model,
            dataset=spec.dataset,
            seq_len=spec.seq_len,
            pred_len=spec.pred_len,
            seed=spec.train.seed,
            status='failed',
            error=f"{type(e).__name__}: {e}",
            precision=spec.precision,
            spec_fingerprint=spec.fingerprint,
        )
        return failed.to_dict(), None


# ------------------------------------------------------------------
# Ledger I/O
# ------------------------------------------------------------------

async def write_json(path: Path, data: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path, 'w', encoding='utf-8') as f:
        await f.write(json.dumps(data, indent=2))


async def read_cell(out_dir: Path, cell_id: str) -> Optional[CellResult]:
    """Return the recorded result for ``cell_id``, or None when absent or unreadable."""
    path = out_dir / CELLS_DIR / f"{cell_id}.json"
    if not path.exists():
        return None
    try:
        async with aiofiles.open(path, 'r', encoding='utf-8') as f:
            return CellResult.from_dict(json.loads(await f.read()))
    except (json.JSONDecodeError, TypeError) as e:
        logger.warning(f"Ignoring corrupt cell record {path}: {e}")
        return None


async def read_cells(out_dir: Path) -> List[CellResult]:
    """Every cell recorded under ``out_dir``, sorted by cell id."""
    cell_dir = Path(out_dir) / CELLS_DIR
    if not cell_dir.is_dir():
        return []
    cells = [await read_cell(Path(out_dir), p.stem) for p in sorted(cell_dir.glob('*.json'))]
    return [c for c in cells if c is not None]


# ------------------------------------------------------------------
# Public API
# ------------------------------------------------------------------

async def run_matrix(
    specs: Sequence[ExperimentSpec],
    parallelism: int = 1,
    settings: Optional[Settings] = None,
    out_dir: Optional[Path] = None,
    resume: bool = True,
) -> ExperimentReport:
    """
    Run every cell of the matrix and assemble the report.

    With ``parallelism`` 1 cells run one after another in a worker thread;
    above 1 they run in a process pool of that size. Results are persisted
    per cell as they complete.
    """
    if parallelism < 1:
        raise ConfigurationError(f"parallelism must be >= 1, got {parallelism}")
    settings = settings or Settings()
    out_dir = Path(out_dir or settings.out_dir)
    specs = [replace(spec, out_dir=str(out_dir)) for spec in specs]

    cells: Dict[str, CellResult] = {}
    pending: List[ExperimentSpec] = []
    for spec in specs:
        if spec.cell_id in cells or any(p.cell_id == spec.cell_id for p in pending):
            logger.warning(f"Duplicate cell {spec.cell_id} in matrix; running it once")
            continue
        existing = await read_cell(out_dir, spec.cell_id) if resume else None
        if existing is not None and existing.ok and existing.spec_fingerprint == spec.fingerprint:
            logger.info(f"Cell {spec.cell_id}: already complete, skipping")
            cells[spec.cell_id] = existing
            continue
        if existing is not None and existing.ok:
            logger.info(f"Cell {spec.cell_id}: recorded under a different configuration, rerunning")
        pending.append(spec)

    logger.info(f"Matrix: {len(specs)} cells, {len(cells)} complete, {len(pending)} to run")

    async def finish(spec: ExperimentSpec, outcome) -> None:
        result_data, record_data = outcome
        await write_json(out_dir / CELLS_DIR / f"{spec.cell_id}.json", result_data)
        if record_data is not None:
            await write_json(out_dir / RECORDS_DIR / f"{spec.cell_id}.json", record_data)
        cells[spec.cell_id] = CellResult.from_dict(result_data)

    if parallelism == 1:
        for spec in pending:
            await finish(spec, await asyncio.to_thread(execute_cell, spec.to_dict(), settings))
    elif pending:
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            async def submit(spec: ExperimentSpec) -> None:
                await finish(spec, await loop.run_in_executor(pool, execute_cell, spec.to_dict(), settings))
            await asyncio.gather(*(submit(spec) for spec in pending))

    ordered = [cells[spec.cell_id] for spec in specs if spec.cell_id in cells]
    report = build_report(ordered, await literature_rows())
    if report.failed_cells:
        logger.warning(f"{len(report.failed_cells)} of {len(ordered)} cells failed")
    return report


def load_cell_model(checkpoint_path: Path, settings: Settings):
    """
    Rebuild a trained model from its checkpoint together with the cell spec
    and the dataset it was trained on.
    """
    payload = load_checkpoint(checkpoint_path)
    spec = ExperimentSpec.from_dict(payload['spec'])
    use_precision(spec.precision)
    ds = load_dataset(spec.dataset, settings)
    index = None
    if spec.model == 'raft':
        config = make_config('raft', spec.seq_len, spec.pred_len, ds.n_channels,
                             spec.model_overrides, label_len=spec.label_len)
        index = retrieval_index(spec, config, ds, Path(spec.out_dir))
    model = model_from_checkpoint(payload, index)
    model.eval()
    return spec, model, ds
