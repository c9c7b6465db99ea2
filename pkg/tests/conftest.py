"""
Shared fixtures: 64-bit default precision and small standardized datasets.
"""

import numpy as np
import pytest
import torch

from dataset import fit_transform, from_array, synthetic_dataset


@pytest.fixture(autouse=True)
def float64_default():
    """Run every test in 64-bit and restore the previous default dtype afterwards."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def periodic_ds():
    """Standardized exactly periodic 2-channel series, 1000 rows, period 24."""
    return fit_transform(synthetic_dataset('periodic', length=1000, n_channels=2, period=24))


@pytest.fixture
def noisy_ds():
    """Standardized noisy periodic 2-channel series, 400 rows."""
    return fit_transform(synthetic_dataset('noisy_periodic', length=400, n_channels=2, period=12, noise=0.3))


@pytest.fixture
def ramp_ds():
    """Standardized 100-row, 2-channel random series with split bounds (60, 80)."""
    rng = np.random.default_rng(0)
    return fit_transform(from_array(rng.standard_normal((100, 2)), ['a', 'b'], name='ramp'))
