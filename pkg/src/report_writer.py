"""
Report assembly and emission: degradation table, cell CSV, JSON report and
MSE-vs-context SVG charts.
"""

import io
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence

import aiofiles
import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from errors import ConfigurationError, ContractError  # noqa: E402
from metrics import degradation  # noqa: E402
from models import CellResult, DegradationRow, ExperimentReport  # noqa: E402


logger = logging.getLogger(__name__)

LITERATURE_FILE = Path(__file__).resolve().parent / 'literature_values.json'
REPORT_FORMATS = ('csv', 'json', 'svg')
TIMING_COLUMNS = ('train_seconds',)
CSV_COLUMNS = (
    'cell_id', 'model', 'dataset', 'seq_len', 'pred_len', 'seed', 'status',
    'mse', 'mae', 'baseline_mse', 'baseline_mae', 'stopped_epoch', 'best_epoch',
    'precision', 'entropy_mean', 'effective_rank_mean', 'n_keys', 'error',
) + TIMING_COLUMNS

RANK_NOTE = (
    "Effective rank is exp(entropy) and lies in [1, N]; a reported value "
    "below 1 cannot be a perplexity and is listed as a literature value only."
)


async def literature_rows(path: Path = LITERATURE_FILE) -> List[Dict[str, Any]]:
    """Static comparison rows; never computed by the workbench."""
    try:
        async with aiofiles.open(path, 'r', encoding='utf-8') as f:
            data = json.loads(await f.read())
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Literature values unavailable ({path}): {e}")
        return []
    return [dict(row, table=table) for table, rows in data.items() for row in rows]


def degradation_table(cells: Iterable[CellResult]) -> List[DegradationRow]:
    """
    For each (model, dataset, horizon, seed) group of successful cells, the
    shortest context is the base and every longer context yields one row.
    """
    groups: Dict[tuple, List[CellResult]] = defaultdict(list)
    for cell in cells:
        if cell.ok and cell.mse is not None:
            groups[(cell.model, cell.dataset, cell.pred_len, cell.seed)].append(cell)

    rows = []
    for (model, dataset, pred_len, seed), group in sorted(groups.items()):
        group.sort(key=lambda c: c.seq_len)
        base = group[0]
        for extended in group[1:]:
            if extended.seq_len == base.seq_len:
                continue
            rows.append(DegradationRow(
                model=model,
                dataset=dataset,
                pred_len=pred_len,
                seed=seed,
                base_cell=base.cell_id,
                extended_cell=extended.cell_id,
                base_seq_len=base.seq_len,
                extended_seq_len=extended.seq_len,
                base_mse=base.mse,
                extended_mse=extended.mse,
                degradation_pct=degradation(base.mse, extended.mse),
            ))
    return rows


def build_report(
    cells: Sequence[CellResult],
    reference_rows: Sequence[Dict[str, Any]] = (),
) -> ExperimentReport:
    """Assemble cells, degradation rows, entropy stats and the given literature rows."""
    cells = list(cells)
    entropy = {c.cell_id: c.entropy for c in cells if c.ok and c.entropy is not None}
    notes = []
    if entropy:
        notes.append(RANK_NOTE)
        logger.warning(RANK_NOTE)
    return ExperimentReport(
        cells=cells,
        degradation=degradation_table(cells),
        entropy=entropy,
        reference_rows=list(reference_rows),
        notes=notes,
    )


# ------------------------------------------------------------------
# Renderers
# ------------------------------------------------------------------

def cells_frame(cells: Sequence[CellResult], per_channel: bool = False) -> pd.DataFrame:
    rows = []
    for cell in cells:
        row = {k: v for k, v in cell.to_dict().items() if k not in ('entropy', 'per_channel_mse')}
        stats = cell.entropy
        row['entropy_mean'] = stats.mean_entropy if stats else None
        row['effective_rank_mean'] = stats.mean_effective_rank if stats else None
        row['n_keys'] = stats.n_keys if stats else None
        if per_channel:
            row['per_channel_mse'] = (
                ';'.join(repr(v) for v in cell.per_channel_mse) if cell.per_channel_mse else None
            )
        rows.append(row)
    columns = list(CSV_COLUMNS) + (['per_channel_mse'] if per_channel else [])
    frame = pd.DataFrame(rows, columns=columns)
    return frame.sort_values('cell_id', kind='stable').reset_index(drop=True)


def render_csv(report: ExperimentReport, per_channel: bool = False) -> str:
    return cells_frame(report.cells, per_channel).to_csv(index=False)


def render_json(report: ExperimentReport) -> str:
    return json.dumps(report.to_dict(), indent=2)


def render_svgs(report: ExperimentReport) -> Dict[str, str]:
    """
    One chart per (dataset, horizon): mean test MSE over seeds against
    context length, one line per model. Each line carries the element id
    ``model-<name>``.
    """
    ok = [c for c in report.cells if c.ok and c.mse is not None]
    if not ok:
        raise ContractError("SVG output needs at least one successful cell")

    charts: Dict[str, str] = {}
    panels: Dict[tuple, Dict[str, Dict[int, List[float]]]] = defaultdict(lambda: defaultdict(lambda: defaultdict(list)))
    for cell in ok:
        panels[(cell.dataset, cell.pred_len)][cell.model][cell.seq_len].append(cell.mse)

    with plt.rc_context({'svg.hashsalt': 'workbench', 'svg.fonttype': 'none', 'path.simplify': False}):
        for (dataset, pred_len), models in sorted(panels.items()):
            fig, ax = plt.subplots(figsize=(6, 4))
            for model, by_len in sorted(models.items()):
                lengths = sorted(by_len)
                values = [sum(by_len[length]) / len(by_len[length]) for length in lengths]
                ax.plot(lengths, values, marker='o', label=model, gid=f"model-{model}")
            ax.set_xlabel('Context length L')
            ax.set_ylabel('Test MSE')
            ax.set_title(f"{dataset}, H={pred_len}")
            ax.legend()
            ax.grid(True, alpha=0.3)
            buffer = io.StringIO()
            fig.savefig(buffer, format='svg', metadata={'Date': None})
            plt.close(fig)
            charts[f"mse_vs_context_{dataset}_H{pred_len}.svg"] = buffer.getvalue()
    return charts


# ------------------------------------------------------------------
# Public API
# ------------------------------------------------------------------

async def _write(path: Path, text: str) -> Path:
    async with aiofiles.open(path, 'w', encoding='utf-8') as f:
        await f.write(text)
    logger.info(f"Wrote {path}")
    return path


async def emit_report(
    report: ExperimentReport,
    formats: Iterable[str] = REPORT_FORMATS,
    out_dir: Path = Path('results'),
    per_channel: bool = False,
) -> List[Path]:
    """
    Write the requested report formats into ``out_dir``.

    Raises:
        ConfigurationError: unknown format
        ContractError: SVG requested for a report with no successful cell
        OSError: the output directory cannot be created or written
    """
    formats = set(formats)
    unknown = formats - set(REPORT_FORMATS)
    if unknown:
        raise ConfigurationError(f"Unknown report formats {sorted(unknown)}; expected {REPORT_FORMATS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    if 'csv' in formats:
        written.append(await _write(out_dir / 'cells.csv', render_csv(report, per_channel)))
    if 'json' in formats:
        written.append(await _write(out_dir / 'report.json', render_json(report)))
    if 'svg' in formats:
        for name, svg in render_svgs(report).items():
            written.append(await _write(out_dir / name, svg))
    return written
