import numpy as np
import pytest

from impalloc.market import Contract, Contracts, Dataset


def worked_instance(unit_price=0.0):
    """One contract (d=1, p=0.5, lambda=1) and two impressions in one step."""
    ds = Dataset([1, 1], [0.4, 0.7], [0.3, 0.6], [[0.2], [0.1]], horizon=1)
    cs = Contracts([Contract(0, 1, unit_price, 0.5, 1.0)])
    return ds, cs


def random_instance(rng, n, m, horizon=4, demand_hi=None):
    """Small random day with continuous draws, so ties have probability zero."""
    step = np.sort(rng.integers(1, horizon + 1, size=n))
    bids = np.sort(rng.lognormal(0.0, 0.5, size=(n, 2)), axis=1)[:, ::-1]
    q = rng.random((n, m))
    ds = Dataset(step, bids[:, 0], bids[:, 1], q, horizon=horizon)
    hi = demand_hi if demand_hi is not None else max(1, n // max(m, 1))
    cs = Contracts([
        Contract(j, int(rng.integers(0, hi + 1)), float(rng.uniform(0, 1)),
                 float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.2, 2.0)))
        for j in range(m)
    ])
    return ds, cs


@pytest.fixture
def worked():
    return worked_instance()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
