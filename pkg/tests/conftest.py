import numpy as np
import pytest

from termcast.components import prepare_dataset
from termcast.config import SYNTH_START_TIME, ModelConfig, TrainConfig
from termcast.flow_grid import FlowSeries, RegionGrid
from termcast.training import synth_generate


@pytest.fixture
def grid4():
    return RegionGrid(4, 4, (0.0, 4.0, 0.0, 4.0))


@pytest.fixture
def tiny_config():
    """4x4 grid, 6-hour intervals, narrow layers."""
    return ModelConfig(height=4, width=4, intervals_per_day=4, d_relation=8, heads=2,
                       conv_filters=4, conv_layers=2, transformer_depth=1, mlp_extra_hidden=8)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(epochs=2, batch_size=8, lr=1e-3, seed=0)


@pytest.fixture
def small_series():
    # 3 weeks of 6-hour intervals: L = 84
    return synth_generate(seed=0, height=4, width=4, weeks=3, interval_hours=6,
                          daily_amp=3.0, weekly_amp=2.0, noise_std=0.5)


@pytest.fixture
def small_dataset(small_series):
    return prepare_dataset(small_series)


def hourly_series(length: int, height: int = 1, width: int = 1) -> FlowSeries:
    """Series whose every entry equals its interval index, starting Monday 00:00 UTC."""
    values = np.broadcast_to(np.arange(length, dtype=np.float64)[:, None, None, None], (length, 2, height, width))
    return FlowSeries(values, 3600, SYNTH_START_TIME)
