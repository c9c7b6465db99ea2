"""
Tests for learning-rate schedules, early stopping, the training loop and
evaluation.
"""

import numpy as np
import pytest
import torch
import torch.nn as nn

from dataset import WindowSample, make_windows
from errors import ContractError, DivergenceError
from forecasters import build_model
from models import PatchConfig, TrainConfig
from training import (
    PersistenceForecaster,
    early_stop_check,
    evaluate,
    evaluate_persistence,
    lr_at,
    make_optimizer,
    train,
)


class LinearForecaster(nn.Module):
    """Per-channel linear map from the lookback to the horizon."""
    kind = 'linear'

    def __init__(self, seq_len: int, pred_len: int, bias: bool = True):
        super().__init__()
        self.linear = nn.Linear(seq_len, pred_len, bias=bias)

    def forward(self, lookback, origins=None, record=False):
        return self.linear(lookback.transpose(1, 2)).transpose(1, 2), []


class EchoForecaster(nn.Module):
    """Returns the lookback unchanged; forecasts are perfect when target equals lookback."""
    kind = 'echo'

    def forward(self, lookback, origins=None, record=False):
        return lookback, []


class NanForecaster(nn.Module):
    kind = 'nan'

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.ones(1))

    def forward(self, lookback, origins=None, record=False):
        return lookback * self.w * float('nan'), []


def sample(lookback, target, origin=0) -> WindowSample:
    lookback = np.asarray(lookback, dtype=float)
    return WindowSample(lookback, lookback[:0], np.asarray(target, dtype=float), origin)


@pytest.fixture
def doubling_windows():
    """64 windows of the map y = 2x with one step and one channel."""
    xs = np.random.default_rng(0).uniform(-1, 1, 64)
    return [sample([[x]], [[2 * x]], i) for i, x in enumerate(xs)]


@pytest.fixture
def noisy_windows(noisy_ds):
    """Train / val / test windows with L=32, H=8 on the noisy periodic series."""
    return {
        split: make_windows(noisy_ds, split, 32, 8, label_len=0, stride=2)
        for split in ('train', 'val', 'test')
    }


class TestLearningRateSchedule:
    """Test cases for lr_at."""

    def test_step_decay(self):
        """Test step decay halves every epoch from 1e-4."""
        cfg = TrainConfig()
        assert lr_at(cfg, 1) == 1e-4
        assert lr_at(cfg, 2) == pytest.approx(5e-5)
        assert lr_at(cfg, 4) == pytest.approx(1.25e-5)

    def test_cosine_endpoints(self):
        """Test cosine annealing starts at the base rate and ends at 0."""
        cfg = TrainConfig(epochs=100, schedule='cosine')
        assert lr_at(cfg, 1) == pytest.approx(1e-4)
        assert lr_at(cfg, 100) == pytest.approx(0.0, abs=1e-20)
        assert lr_at(cfg, 50) == pytest.approx(0.5e-4, rel=0.05)

    def test_cosine_monotone(self):
        """Test cosine rates never increase."""
        cfg = TrainConfig(epochs=100, schedule='cosine')
        rates = [lr_at(cfg, e) for e in range(1, 101)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_single_epoch_cosine(self):
        """Test a one-epoch cosine schedule keeps the base rate."""
        assert lr_at(TrainConfig(epochs=1, patience=0, schedule='cosine'), 1) == 1e-4

    @pytest.mark.parametrize('epoch', [0, 11])
    def test_out_of_range(self, epoch):
        """Test epochs outside [1, E] are contract errors."""
        with pytest.raises(ContractError):
            lr_at(TrainConfig(), epoch)


class TestEarlyStopCheck:
    """Test cases for early_stop_check."""

    def test_stalled_history_stops(self):
        """Test three non-improving epochs after the best trigger a stop."""
        assert early_stop_check([0.5, 0.49, 0.50, 0.50, 0.50], 3)

    def test_late_improvement_continues(self):
        """Test a new best inside the window keeps training."""
        assert not early_stop_check([0.5, 0.49, 0.495, 0.48], 3)

    def test_short_history(self):
        """Test histories no longer than patience never stop."""
        assert not early_stop_check([0.5, 0.6, 0.7], 3)

    def test_equal_loss_is_not_improvement(self):
        """Test a tie with the best counts as no improvement."""
        assert early_stop_check([0.4, 0.4, 0.4], 2)

    def test_empty_history(self):
        """Test an empty history is a contract error."""
        with pytest.raises(ContractError):
            early_stop_check([], 3)


class TestTrain:
    """Test cases for the training loop."""

    def test_learns_doubling(self, doubling_windows):
        """Test a linear model fits y = 2x to an MSE below 1e-6."""
        model = LinearForecaster(1, 1, bias=False)
        cfg = TrainConfig(learning_rate=0.05, batch_size=16, epochs=200, patience=199, schedule='cosine')
        record = train(model, doubling_windows, doubling_windows, cfg)
        mse, _ = evaluate(model, doubling_windows)
        assert mse < 1e-6
        assert model.linear.weight.item() == pytest.approx(2.0, abs=1e-3)
        assert len(record.train_losses) == record.stopped_epoch

    def test_zero_learning_rate_keeps_parameters(self, noisy_windows):
        """Test lr = 0 leaves every parameter bitwise unchanged."""
        torch.manual_seed(0)
        model = LinearForecaster(32, 8)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(model, noisy_windows['train'], noisy_windows['val'], TrainConfig(learning_rate=0.0, epochs=2, patience=1))
        for name, value in model.state_dict().items():
            assert torch.equal(value, before[name])

    @pytest.mark.parametrize('learning_rate', [1e-4, 0.5])
    def test_zero_gradient_step_keeps_parameters(self, learning_rate):
        """Test one Adam step on all-zero gradients leaves a fresh model bitwise unchanged."""
        config = PatchConfig(seq_len=32, pred_len=8, n_channels=2, d_model=8, n_heads=2,
                             e_layers=1, d_ff=16, dropout=0.0)
        model = build_model('patchtst', config, seed=2021)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        optimizer = make_optimizer(model, TrainConfig(learning_rate=learning_rate))
        for param in model.parameters():
            param.grad = torch.zeros_like(param)
        optimizer.step()
        for name, value in model.state_dict().items():
            assert torch.equal(value, before[name]), name

    def test_constant_validation_stops_early(self, noisy_windows):
        """Test a flat validation curve stops after patience + 1 epochs."""
        model = LinearForecaster(32, 8)
        cfg = TrainConfig(learning_rate=0.0, epochs=5, patience=2)
        record = train(model, noisy_windows['train'], noisy_windows['val'], cfg)
        assert record.early_stopped
        assert record.stopped_epoch == 3
        assert record.best_epoch == 1
        assert record.restored_best

    def test_deterministic(self, noisy_windows):
        """Test identical seeds give bitwise-identical losses and weights."""
        config = PatchConfig(seq_len=32, pred_len=8, n_channels=2, d_model=8, n_heads=2,
                             e_layers=1, d_ff=16, dropout=0.1)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=2, patience=1)

        def run():
            model = build_model('patchtst', config, seed=2021)
            record = train(model, noisy_windows['train'], noisy_windows['val'], cfg)
            return record, model.state_dict()

        record_a, state_a = run()
        record_b, state_b = run()
        assert record_a.train_losses == record_b.train_losses
        assert record_a.val_losses == record_b.val_losses
        for name in state_a:
            assert torch.equal(state_a[name], state_b[name])

    def test_micro_batches_match_full_batches(self, noisy_windows):
        """Test gradient accumulation over micro-batches reproduces full-batch training."""
        def run(micro):
            torch.manual_seed(3)
            model = LinearForecaster(32, 8)
            cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=2, patience=1, micro_batch_size=micro)
            train(model, noisy_windows['train'], noisy_windows['val'], cfg)
            return model.state_dict()

        full, micro = run(None), run(2)
        for name in full:
            assert torch.allclose(full[name], micro[name], atol=1e-12)

    def test_wall_time_recorded(self, doubling_windows):
        """Test the record carries a positive wall time."""
        record = train(LinearForecaster(1, 1), doubling_windows, doubling_windows,
                       TrainConfig(epochs=2, patience=1))
        assert record.wall_seconds > 0

    def test_divergence(self, doubling_windows):
        """Test a NaN loss raises DivergenceError with its position."""
        with pytest.raises(DivergenceError) as info:
            train(NanForecaster(), doubling_windows, doubling_windows, TrainConfig(epochs=2, patience=1))
        assert (info.value.epoch, info.value.batch_index) == (1, 0)

    def test_empty_windows(self, doubling_windows):
        """Test training without validation windows is refused."""
        with pytest.raises(ContractError):
            train(LinearForecaster(1, 1), doubling_windows, [], TrainConfig())


class TestEvaluate:
    """Test cases for evaluate and the persistence baseline."""

    @pytest.fixture
    def echo_windows(self):
        """Windows whose target equals their lookback."""
        rng = np.random.default_rng(1)
        return [sample(x, x, i) for i, x in enumerate(rng.standard_normal((10, 4, 2)))]

    def test_perfect_predictor(self, echo_windows):
        """Test a perfect forecaster scores exactly zero."""
        assert evaluate(EchoForecaster(), echo_windows) == (0.0, 0.0)

    def test_zero_predictor(self, echo_windows):
        """Test an all-zero forecast scores the mean squared target."""
        model = LinearForecaster(4, 4)
        with torch.no_grad():
            model.linear.weight.zero_()
            model.linear.bias.zero_()
        targets = np.stack([w.target for w in echo_windows])
        mse, mae = evaluate(model, echo_windows)
        assert mse == pytest.approx(np.mean(targets ** 2), rel=1e-12)
        assert mae == pytest.approx(np.mean(np.abs(targets)), rel=1e-12)

    def test_per_channel(self, echo_windows):
        """Test per-channel MSE averages back to the total."""
        model = LinearForecaster(4, 4)
        mse, _, channels = evaluate(model, echo_windows, per_channel=True)
        assert channels.shape == (2,)
        assert channels.mean() == pytest.approx(mse)

    def test_raw_units_needs_scaler(self, echo_windows):
        """Test raw-unit evaluation without a scaler is refused."""
        with pytest.raises(ContractError):
            evaluate(EchoForecaster(), echo_windows, raw_units=True)

    def test_raw_units_scale(self, noisy_ds, noisy_windows):
        """Test raw-unit per-channel MSE scales by the channel variances."""
        model = PersistenceForecaster(8)
        _, _, channels = evaluate(model, noisy_windows['test'], per_channel=True)
        _, _, raw_channels = evaluate(model, noisy_windows['test'], noisy_ds.scaler, raw_units=True, per_channel=True)
        np.testing.assert_allclose(raw_channels, channels * noisy_ds.scaler.std ** 2, rtol=1e-9)

    def test_persistence_by_hand(self):
        """Test the last-value baseline on a hand-computed window."""
        window = sample([[0.0, 0.0], [1.0, 2.0]], [[3.0, 2.0], [1.0, 2.0]])
        assert evaluate_persistence([window]) == (1.0, 0.5)

    def test_empty_test_set(self):
        """Test evaluating nothing is a contract error."""
        with pytest.raises(ContractError):
            evaluate(EchoForecaster(), [])
