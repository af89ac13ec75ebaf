import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pilotdesign.fpca_pace import FpcaModel, trapezoid_weights

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_model(rng, v=10, M=3, sigma2=0.5, grid=None):
    """A model with quadrature-orthonormal eigenfunctions and decreasing eigenvalues."""
    grid = np.linspace(0.0, 1.0, v) if grid is None else grid
    w = trapezoid_weights(grid)
    q, _ = np.linalg.qr(rng.standard_normal((v, M)))
    psi = q / np.sqrt(w)[:, None]
    # re-orthonormalise under the weighted inner product
    g = psi.T @ (w[:, None] * psi)
    psi = psi @ np.linalg.inv(np.linalg.cholesky(g)).T
    lam = np.sort(rng.uniform(0.2, 5.0, M))[::-1]
    mu = rng.standard_normal(v)
    return FpcaModel.from_components(grid, mu, lam, psi, sigma2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
