import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mlfci import simulate
from mlfci.panel import Panel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_sim_panel(n_assets=30, n_periods=40, n_features=4, seed=7):
    cfg = simulate.SimConfig(n_assets=n_assets, n_periods=n_periods,
                             n_features=n_features, seed=seed)
    gen = np.random.default_rng(seed)
    return simulate.gen_returns(cfg, simulate.gen_characteristics(cfg, gen), gen), cfg


def make_linear_panel(n_assets=100, n_periods=50, n_features=3, slope=0.5,
                      noise=0.0, seed=0):
    """Panel with returns equal to slope * first characteristic (+ noise)."""
    gen = np.random.default_rng(seed)
    features = gen.uniform(0.0, 1.0, size=(n_assets, n_periods, n_features))
    latest = gen.uniform(0.0, 1.0, size=(n_assets, n_features))
    returns = slope * features[:, :, 0]
    if noise > 0:
        returns = returns + noise * gen.standard_normal(returns.shape)
    return Panel(returns=returns, features=features, latest_features=latest)


@pytest.fixture
def small_sim_panel():
    return make_sim_panel()
