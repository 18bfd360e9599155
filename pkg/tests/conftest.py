import numpy as np
import pytest

from lqmfg.model import ModelParams, TimeGrid, benchmark_params
from lqmfg.limit import solve_limit


def random_instance(rng, n, *, m=1, T=1.0, psd=True, sigma_scale=0.3):
    """Random well-posed game with Q, Qf PSD (when ``psd``) and R positive definite."""
    def spd(k, shift):
        X = rng.normal(size=(k, k))
        return X @ X.T / k + shift * np.eye(k)

    def sym(k):
        X = rng.normal(size=(k, k))
        return 0.5 * (X + X.T)

    Q = spd(n, 0.2) if psd else sym(n)
    Qf = spd(n, 0.1) if psd else sym(n)
    return ModelParams(
        A=0.5 * rng.normal(size=(n, n)), G=0.5 * rng.normal(size=(n, n)), B=rng.normal(size=(n, m)),
        sigma=sigma_scale * rng.normal(size=n), Q=Q, R=spd(m, 0.5), Gamma=0.5 * rng.normal(size=(n, n)),
        eta=rng.normal(size=n), Qf=Qf, Gammaf=0.5 * rng.normal(size=(n, n)), etaf=rng.normal(size=n),
        T=T, x0_mean=rng.normal(size=n), x0_cov=spd(n, 0.0) * 0.1,
    )


def scalar_game(**kw):
    data = dict(A=0.0, G=0.0, B=1.0, sigma=0.0, Q=0.0, R=1.0, Gamma=0.0, eta=0.0,
                Qf=0.0, Gammaf=0.0, etaf=0.0, T=1.0, x0_mean=0.0, x0_cov=0.0)
    data.update(kw)
    return ModelParams(**data)


@pytest.fixture(scope="session")
def bench():
    return benchmark_params()


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(1.0, 200)


@pytest.fixture(scope="session")
def bench_limit(bench, grid):
    return solve_limit(bench, grid)
