"""
Command-line entry point.

    python src/main.py ingest ETTh1
    python src/main.py matrix manifests/default_grid.env --out results
    python src/main.py report results

Exit codes: 0 success, 1 configuration error, 2 one or more failed cells.
"""

import argparse
import asyncio
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from dataset import make_windows
from diagnostics import probe
from errors import ConfigurationError, ParseError, WorkbenchError
from experiment_runner import load_cell_model, load_dataset, read_cells, run_matrix
from manifest import load_manifest
from models import ExperimentReport, ExperimentSpec
from report_writer import REPORT_FORMATS, build_report, emit_report, literature_rows
from settings import Settings, load_settings
from training import evaluate


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CELL_FAILURES = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='workbench',
        description='Context-length forecasting workbench: train, evaluate and compare forecasters.',
    )
    parser.add_argument('--seed', type=int, default=None, help='Default seed (2021)')
    parser.add_argument('--precision', choices=['f32', 'f64'], default=None, help='Floating precision')
    parser.add_argument('--parallelism', type=int, default=None, help='Cells run concurrently in separate processes')
    parser.add_argument('--out', type=Path, default=None, help='Output directory')
    parser.add_argument('--env-file', type=Path, default=None, help='Settings file (default: .env)')
    sub = parser.add_subparsers(dest='command', required=True)

    ingest = sub.add_parser('ingest', help='Load a dataset and print its shape and splits')
    ingest.add_argument('dataset')

    train = sub.add_parser('train', help='Train the cells of a spec JSON or manifest without resuming')
    train.add_argument('spec', type=Path)

    ev = sub.add_parser('evaluate', help='Evaluate a checkpoint on its test split')
    ev.add_argument('checkpoint', type=Path)
    ev.add_argument('--per-channel', action='store_true', help='Also print per-channel MSE')
    ev.add_argument('--raw-units', action='store_true', help='Errors in original units instead of standardized')

    pr = sub.add_parser('probe', help='Attention entropy of a checkpoint on its test split')
    pr.add_argument('checkpoint', type=Path)
    pr.add_argument('--samples', type=int, default=64, help='Maximum probe windows')

    matrix = sub.add_parser('matrix', help='Run (or resume) a manifest and emit the report')
    matrix.add_argument('manifest', type=Path)
    matrix.add_argument('--formats', default=','.join(REPORT_FORMATS), help='Comma-separated subset of csv,json,svg')
    matrix.add_argument('--per-channel', action='store_true', help='Add per-channel MSE to the CSV')

    report = sub.add_parser('report', help='Rebuild the report from recorded cells in a directory')
    report.add_argument('directory', type=Path)
    report.add_argument('--formats', default=','.join(REPORT_FORMATS))
    report.add_argument('--per-channel', action='store_true')
    return parser


def apply_overrides(settings: Settings, args: argparse.Namespace) -> Settings:
    changes = {
        'seed': args.seed,
        'precision': args.precision,
        'parallelism': args.parallelism,
        'out_dir': args.out,
    }
    return replace(settings, **{k: v for k, v in changes.items() if v is not None})


def _formats(raw: str) -> List[str]:
    return [f.strip() for f in raw.split(',') if f.strip()]


def _load_specs(path: Path, settings: Settings, precision: Optional[str] = None) -> List[ExperimentSpec]:
    """Specs from a JSON file (one spec or a list) or a manifest; ``precision`` overrides both."""
    if path.suffix == '.json':
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read spec {path}: {e}") from e
        specs = [ExperimentSpec.from_dict(item) for item in (data if isinstance(data, list) else [data])]
        return [replace(s, precision=precision) for s in specs] if precision else specs
    return load_manifest(path, default_seed=settings.seed, out_dir=str(settings.out_dir), precision=precision)


async def _emit(report: ExperimentReport, formats: List[str], out_dir: Path, per_channel: bool) -> None:
    if 'svg' in formats and not any(c.ok for c in report.cells):
        logger.warning("No successful cells; skipping SVG output")
        formats = [f for f in formats if f != 'svg']
    await emit_report(report, formats, out_dir, per_channel=per_channel)


def _print_cells(report: ExperimentReport) -> None:
    for cell in report.cells:
        if cell.ok:
            print(f"{cell.cell_id}: MSE {cell.mse:.4f}  MAE {cell.mae:.4f}  ({cell.train_seconds:.1f}s)")
        else:
            print(f"{cell.cell_id}: FAILED {cell.error}")


# ------------------------------------------------------------------
# Commands
# ------------------------------------------------------------------

async def cmd_ingest(args, settings: Settings) -> int:
    ds = load_dataset(args.dataset, settings)
    train_end, val_end = ds.split_bounds
    print(f"{ds.name}: {ds.n_timesteps} timesteps, {ds.n_channels} channels")
    print(f"channels: {', '.join(ds.channel_names)}")
    print(f"splits: train {train_end}, val {val_end - train_end}, test {ds.n_timesteps - val_end}")
    return EXIT_OK


async def cmd_train(args, settings: Settings) -> int:
    specs = _load_specs(args.spec, settings, settings.precision)
    report = await run_matrix(specs, settings.parallelism, settings, settings.out_dir, resume=False)
    _print_cells(report)
    return EXIT_CELL_FAILURES if report.failed_cells else EXIT_OK


async def cmd_evaluate(args, settings: Settings) -> int:
    spec, model, ds = load_cell_model(args.checkpoint, settings)
    windows = make_windows(ds, 'test', spec.seq_len, spec.pred_len, spec.label_len, stride=spec.window_stride)
    scaler = ds.scaler if args.raw_units else None
    result = evaluate(model, windows, scaler=scaler, raw_units=args.raw_units, per_channel=args.per_channel)
    print(f"{spec.cell_id}: MSE {result[0]:.6f}  MAE {result[1]:.6f}")
    if args.per_channel:
        for name, value in zip(ds.channel_names, result[2]):
            print(f"  {name}: MSE {value:.6f}")
    return EXIT_OK


async def cmd_probe(args, settings: Settings) -> int:
    spec, model, ds = load_cell_model(args.checkpoint, settings)
    windows = make_windows(ds, 'test', spec.seq_len, spec.pred_len, spec.label_len, stride=spec.window_stride)
    stats = probe(model, windows, spec.seq_len, max_samples=args.samples)
    print(json.dumps(stats.to_dict(), indent=2))
    return EXIT_OK


async def cmd_matrix(args, settings: Settings) -> int:
    specs = _load_specs(args.manifest, settings, settings.precision)
    report = await run_matrix(specs, settings.parallelism, settings, settings.out_dir)
    await _emit(report, _formats(args.formats), settings.out_dir, args.per_channel)
    _print_cells(report)
    return EXIT_CELL_FAILURES if report.failed_cells else EXIT_OK


async def cmd_report(args, settings: Settings) -> int:
    report = build_report(await read_cells(args.directory), await literature_rows())
    await _emit(report, _formats(args.formats), args.directory, args.per_channel)
    print(f"{len(report.cells)} cells, {len(report.degradation)} degradation rows")
    return EXIT_CELL_FAILURES if report.failed_cells else EXIT_OK


COMMANDS = {
    'ingest': cmd_ingest,
    'train': cmd_train,
    'evaluate': cmd_evaluate,
    'probe': cmd_probe,
    'matrix': cmd_matrix,
    'report': cmd_report,
}


async def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = apply_overrides(load_settings(args.env_file), args)
    except ConfigurationError as e:
        logging.basicConfig(level=logging.INFO)
        logger.error(str(e))
        return EXIT_CONFIG
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        return await COMMANDS[args.command](args, settings)
    except (ConfigurationError, ParseError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except WorkbenchError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
