"""Shared fixtures: small deterministic price tables and configs."""
import numpy as np
import pytest

from trials.market_data import (PriceTable, SyntheticSpec,
                                gen_synthetic_universe, split_periods)


def make_table(n_assets=4, n_days=60, seed=0) -> PriceTable:
    """Small random-walk table, positive prices, deterministic."""
    rng = np.random.default_rng(seed)
    close = 100.0 * np.exp(np.cumsum(
        rng.normal(0.0, 0.01, size=(n_assets, n_days)), axis=1))
    opn = close * np.exp(rng.normal(0.0, 0.002, size=close.shape))
    vol = np.exp(rng.normal(13.0, 0.3, size=close.shape))
    assets = [f"A{k:02d}" for k in range(n_assets)]
    return PriceTable(assets=assets,
                      dates=[f"{t:06d}" for t in range(n_days)],
                      open=opn, close=close, volume=vol)


@pytest.fixture
def small_table():
    return make_table()


@pytest.fixture
def small_split(small_table):
    return split_periods(small_table.n_days)


@pytest.fixture
def synth_table():
    return gen_synthetic_universe(SyntheticSpec(n_assets=4, n_days=300, seed=5))
