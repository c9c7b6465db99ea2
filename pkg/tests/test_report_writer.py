"""
Tests for report assembly and the CSV / JSON / SVG renderers.
"""

import io
import json
import xml.etree.ElementTree as ET

import pandas as pd
import pytest

from errors import ConfigurationError, ContractError
from metrics import degradation
from models import AttentionStats, CellResult, ExperimentReport
from report_writer import (
    CSV_COLUMNS,
    RANK_NOTE,
    build_report,
    degradation_table,
    emit_report,
    literature_rows,
    render_csv,
    render_json,
    render_svgs,
)


def cell(model, seq_len, mse, dataset='ETTh1', pred_len=96, seed=2021, seconds=1.0, **extra) -> CellResult:
    return CellResult(
        cell_id=f"{dataset}_{model}_L{seq_len}_H{pred_len}_s{seed}",
        model=model, dataset=dataset, seq_len=seq_len, pred_len=pred_len, seed=seed,
        mse=mse, mae=mse / 2, train_seconds=seconds, **extra,
    )


def stats(seq_len, n_keys, entropy) -> AttentionStats:
    return AttentionStats(
        context_length=seq_len, n_keys=n_keys, samples=4,
        layer_head_entropy=[[entropy, entropy]], layer_entropy=[entropy],
        layer_effective_rank=[2.0], mean_entropy=entropy, mean_effective_rank=2.0,
    )


@pytest.fixture
def cells():
    """A small grid: three PatchTST contexts, two vanilla contexts and one failure."""
    return [
        cell('vanilla', 1440, 0.647, seconds=30.0),
        cell('patchtst', 3000, 0.48, entropy=stats(3000, 375, 0.98)),
        cell('patchtst', 336, 0.40, entropy=stats(336, 42, 0.95)),
        cell('vanilla', 720, 0.385, seconds=12.0),
        cell('patchtst', 720, 0.42, entropy=stats(720, 90, 0.97)),
        CellResult(cell_id='ETTh1_raft_L720_H96_s2021', model='raft', dataset='ETTh1',
                   seq_len=720, pred_len=96, seed=2021, status='failed', error='DivergenceError: boom'),
    ]


@pytest.fixture
def report(cells):
    """Report built from the cell grid."""
    return build_report(cells)


class TestDegradationTable:
    """Test cases for degradation_table."""

    def test_rows_against_shortest_context(self, cells):
        """Test each longer context is compared with the group's shortest one."""
        rows = degradation_table(cells)
        assert [(r.model, r.base_seq_len, r.extended_seq_len) for r in rows] == [
            ('patchtst', 336, 720), ('patchtst', 336, 3000), ('vanilla', 720, 1440),
        ]
        vanilla = rows[-1]
        assert vanilla.degradation_pct == pytest.approx(68.05, abs=0.005)
        assert (vanilla.base_cell, vanilla.extended_cell) == ('ETTh1_vanilla_L720_H96_s2021', 'ETTh1_vanilla_L1440_H96_s2021')

    def test_failed_cells_excluded(self, cells):
        """Test failed cells never appear in degradation rows."""
        assert all('raft' not in r.base_cell + r.extended_cell for r in degradation_table(cells))

    def test_groups_by_seed_and_horizon(self):
        """Test different seeds and horizons form separate groups."""
        rows = degradation_table([
            cell('patchtst', 336, 0.4, seed=1), cell('patchtst', 720, 0.5, seed=1),
            cell('patchtst', 720, 0.3, seed=2), cell('patchtst', 720, 0.6, pred_len=336),
        ])
        assert len(rows) == 1 and rows[0].seed == 1

    def test_rows_reference_existing_cells(self, report):
        """Test every row names two cells of the report."""
        ids = {c.cell_id for c in report.cells}
        assert all(r.base_cell in ids and r.extended_cell in ids for r in report.degradation)


class TestBuildReport:
    """Test cases for build_report."""

    def test_entropy_and_note(self, report):
        """Test entropy stats are keyed by cell and the effective-rank note is attached."""
        assert set(report.entropy) == {'ETTh1_patchtst_L336_H96_s2021', 'ETTh1_patchtst_L720_H96_s2021',
                                       'ETTh1_patchtst_L3000_H96_s2021'}
        assert report.notes == [RANK_NOTE]

    def test_no_entropy_no_note(self):
        """Test the note is omitted without entropy measurements."""
        assert build_report([cell('vanilla', 720, 0.4)]).notes == []

    @pytest.mark.asyncio
    async def test_literature_rows_marked(self, cells):
        """Test reference rows are all marked as literature values."""
        rows = await literature_rows()
        assert rows
        report = build_report(cells, rows)
        assert report.reference_rows == rows
        assert all(row['source'] == 'literature' for row in report.reference_rows)
        assert {row['table'] for row in rows} == {'zero_shot', 'entropy'}

    def test_no_reference_rows_by_default(self, report):
        """Test a report built without literature rows carries none."""
        assert report.reference_rows == []

    @pytest.mark.asyncio
    async def test_missing_literature_file(self, tmp_path):
        """Test a missing literature file yields no rows."""
        assert await literature_rows(tmp_path / 'absent.json') == []


class TestRenderers:
    """Test cases for the CSV, JSON and SVG renderers."""

    def test_csv_sorted_with_timing_last(self, report):
        """Test the CSV is sorted by cell id and ends with the timing column."""
        frame = pd.read_csv(io.StringIO(render_csv(report)))
        assert list(frame.columns) == list(CSV_COLUMNS)
        assert list(frame.columns)[-1] == 'train_seconds'
        assert list(frame['cell_id']) == sorted(frame['cell_id'])
        assert frame.loc[frame['model'] == 'raft', 'status'].item() == 'failed'

    def test_csv_stable_except_timing(self, cells):
        """Test two reports differing only in wall time agree outside the timing column."""
        slower = [CellResult.from_dict({**c.to_dict(), 'train_seconds': 99.0}) for c in cells]

        def without_timing(report):
            return [line.rsplit(',', 1)[0] for line in render_csv(report).splitlines()]

        assert without_timing(build_report(cells)) == without_timing(build_report(slower))

    def test_csv_per_channel(self):
        """Test per-channel errors are joined into one column on request."""
        report = build_report([cell('patchtst', 336, 0.4, per_channel_mse=[0.3, 0.5])])
        frame = pd.read_csv(io.StringIO(render_csv(report, per_channel=True)))
        assert frame['per_channel_mse'].item() == '0.3;0.5'

    def test_degradation_recomputable_from_csv(self, report):
        """Test every degradation row follows from the CSV's MSE values."""
        frame = pd.read_csv(io.StringIO(render_csv(report))).set_index('cell_id')
        for row in report.degradation:
            expected = degradation(frame.loc[row.base_cell, 'mse'], frame.loc[row.extended_cell, 'mse'])
            assert row.degradation_pct == pytest.approx(expected, rel=1e-12)

    def test_json_round_trip(self, report):
        """Test the JSON report parses back into the same report."""
        restored = ExperimentReport.from_dict(json.loads(render_json(report)))
        assert restored.to_dict() == report.to_dict()

    def test_svg_lines_per_model(self, report):
        """Test one chart per dataset and horizon, with one tagged line per model."""
        charts = render_svgs(report)
        assert list(charts) == ['mse_vs_context_ETTh1_H96.svg']
        root = ET.fromstring(charts['mse_vs_context_ETTh1_H96.svg'])
        groups = {}
        for g in root.iter('{http://www.w3.org/2000/svg}g'):
            groups.setdefault(g.get('id'), g)
        assert 'model-patchtst' in groups and 'model-vanilla' in groups
        assert 'model-raft' not in groups
        markers = [e for e in groups['model-patchtst'].iter() if e.tag.endswith('use')]
        assert len(markers) == 3

    def test_svg_deterministic(self, report):
        """Test rendering twice gives identical SVG text."""
        assert render_svgs(report) == render_svgs(report)

    def test_svg_needs_successful_cells(self):
        """Test an SVG of only failed cells is refused."""
        failed = CellResult(cell_id='x', model='raft', dataset='d', seq_len=1, pred_len=1, seed=0, status='failed')
        with pytest.raises(ContractError):
            render_svgs(build_report([failed]))


class TestEmitReport:
    """Test cases for emit_report."""

    @pytest.mark.asyncio
    async def test_writes_all_formats(self, report, tmp_path):
        """Test CSV, JSON and SVG files land in the output directory."""
        written = await emit_report(report, out_dir=tmp_path / 'out')
        assert sorted(p.name for p in written) == ['cells.csv', 'mse_vs_context_ETTh1_H96.svg', 'report.json']
        assert all(p.is_file() for p in written)

    @pytest.mark.asyncio
    async def test_selected_formats(self, report, tmp_path):
        """Test only the requested formats are written."""
        written = await emit_report(report, formats=['json'], out_dir=tmp_path)
        assert [p.name for p in written] == ['report.json']

    @pytest.mark.asyncio
    async def test_unknown_format(self, report, tmp_path):
        """Test unknown formats are configuration errors."""
        with pytest.raises(ConfigurationError):
            await emit_report(report, formats=['xlsx'], out_dir=tmp_path)

    @pytest.mark.asyncio
    async def test_unwritable_directory(self, report, tmp_path):
        """Test an output path under a regular file surfaces as OSError."""
        blocker = tmp_path / 'file'
        blocker.write_text('x')
        with pytest.raises(OSError):
            await emit_report(report, formats=['csv'], out_dir=blocker / 'out')
