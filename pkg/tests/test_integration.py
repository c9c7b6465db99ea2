"""
Benchmark runs on the real datasets.

These train the shipped manifests end to end and check the published trends
at desk scale. They take hours on CPU, so they only run when the dataset
CSVs are present and WORKBENCH_RUN_BENCHMARKS=1. Finished cells are resumed
from the results directory on reruns.
"""

import asyncio
import os
from pathlib import Path
from typing import Dict, Tuple

import pytest

from experiment_runner import run_cell, run_matrix
from manifest import load_manifest
from models import CellResult
from settings import load_settings


MANIFESTS = Path(__file__).resolve().parent.parent / 'manifests'

pytestmark = pytest.mark.integration


@pytest.fixture(scope='module')
def settings():
    """Settings from the environment; skips unless benchmarks are enabled and ETTh1 is present."""
    if os.getenv('WORKBENCH_RUN_BENCHMARKS') != '1':
        pytest.skip('set WORKBENCH_RUN_BENCHMARKS=1 to run benchmarks')
    settings = load_settings()
    if not Path(settings.dataset_entry('ETTh1')['path']).is_file():
        pytest.skip('ETTh1.csv not found in the data directory')
    return settings


def run_manifest(name: str, settings) -> Dict[Tuple[str, int, int], CellResult]:
    specs = load_manifest(MANIFESTS / f"{name}.env", out_dir=str(settings.out_dir))
    report = asyncio.run(run_matrix(specs, settings.parallelism, settings, settings.out_dir))
    failed = [c.cell_id for c in report.failed_cells]
    assert not failed, f"failed cells: {failed}"
    return {(c.model, c.seq_len, c.pred_len): c for c in report.cells}


@pytest.fixture(scope='module')
def default_grid(settings):
    """ETTh1 grid at H=96."""
    return run_manifest('default_grid', settings)


class TestContextLength:
    """Test cases for error against context length on ETTh1."""

    def test_patchtst_degrades_with_long_context(self, default_grid):
        """Test PatchTST at L=3000 is at least 25% worse than at L=720."""
        short = default_grid[('patchtst', 720, 96)].mse
        long = default_grid[('patchtst', 3000, 96)].mse
        assert long >= 1.25 * short

    def test_vanilla_monotone(self, default_grid):
        """Test vanilla Transformer error never falls as L grows."""
        errors = [default_grid[('vanilla', length, 96)].mse for length in (720, 1440, 3000)]
        assert errors[0] <= errors[1] <= errors[2]

    def test_retrieval_matches_patchtst(self, default_grid):
        """Test RAFT at L=720 is within 3% of PatchTST at L=720 or better."""
        assert default_grid[('raft', 720, 96)].mse <= default_grid[('patchtst', 720, 96)].mse * 1.03

    def test_retrieval_trains_faster(self, default_grid):
        """Test RAFT trains in at most a fifth of the vanilla L=3000 time."""
        raft = default_grid[('raft', 720, 96)].train_seconds
        vanilla = default_grid[('vanilla', 3000, 96)].train_seconds
        assert raft <= vanilla / 5


class TestEntropy:
    """Test cases for attention entropy against context length."""

    def test_entropy_rises_with_context(self, settings):
        """Test trained PatchTST entropy strictly increases over L = 336, 720, 3000."""
        grid = run_manifest('entropy', settings)
        values = [grid[('patchtst', length, 96)].entropy.mean_entropy for length in (336, 720, 3000)]
        assert values[0] < values[1] < values[2]
        assert all(0.85 < v <= 1.0 for v in values)


class TestHorizons:
    """Test cases for the longer horizons."""

    @pytest.mark.parametrize('horizon', [336, 720])
    def test_ordering(self, settings, horizon):
        """Test RAFT < PatchTST-720 < PatchTST-3000 at long horizons."""
        grid = run_manifest('multi_horizon', settings)
        raft = grid[('raft', 720, horizon)].mse
        short = grid[('patchtst', 720, horizon)].mse
        long = grid[('patchtst', 3000, horizon)].mse
        assert raft < short < long

    @pytest.mark.parametrize('horizon', [336, 720])
    def test_vanilla_degrades(self, settings, horizon):
        """Test the vanilla Transformer is no better at L=3000 than at L=720 at long horizons."""
        grid = run_manifest('multi_horizon', settings)
        assert grid[('vanilla', 720, horizon)].mse <= grid[('vanilla', 3000, horizon)].mse


class TestDeterminism:
    """Test cases for run-to-run reproducibility on real data."""

    def test_same_seed_same_trajectory(self, settings, tmp_path):
        """Test two runs of one cell give identical losses and test MSE."""
        spec = next(s for s in load_manifest(MANIFESTS / 'default_grid.env', out_dir=str(tmp_path))
                    if s.model == 'patchtst' and s.seq_len == 720)
        first, first_record = run_cell(spec, settings)
        second, second_record = run_cell(spec, settings)
        assert first_record.train_losses == second_record.train_losses
        assert first_record.val_losses == second_record.val_losses
        assert first.mse == second.mse
