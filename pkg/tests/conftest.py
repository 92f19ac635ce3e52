import numpy as np
import pytest

from covariance import AsymmetricExpKernel, NonstationaryCovariance, SeparableExpKernel
from dataset import Dataset
from warping import AXES, AxialWarpUnit, RbfWarpUnit, WarpingMap, rbf_grid, safe_weight_bound


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_coords(rng):
    """Distinct random space-time points in [-0.5, 0.5]^3."""
    def make(n):
        return rng.uniform(-0.5, 0.5, size=(n, 3))
    return make


@pytest.fixture
def separable_cov():
    return NonstationaryCovariance(WarpingMap.identity(), SeparableExpKernel(1.0, 3.0, 2.0), 0.1)


@pytest.fixture
def asymmetric_cov():
    return NonstationaryCovariance(WarpingMap.identity(), AsymmetricExpKernel(1.2, 4.0, (0.3, -0.1)), 0.05)


@pytest.fixture
def random_rbf(rng):
    """RBF unit on the default 4x4 grid with weights well inside the safe interval."""
    def make():
        centers, radius = rbf_grid()
        bound = safe_weight_bound(centers, radius)
        return RbfWarpUnit(centers, radius, rng.uniform(-0.9, 0.9, len(centers)) * bound, bound)
    return make


@pytest.fixture
def random_axial(rng):
    def make(axis, r=10):
        return AxialWarpUnit(AXES[axis], np.concatenate([[1.0], rng.uniform(0.01, 1.0, r - 1)]))
    return make


@pytest.fixture
def warped_cov(random_rbf, random_axial):
    warp = WarpingMap((random_axial("s1"), random_rbf()), random_axial("t"))
    return NonstationaryCovariance(warp, SeparableExpKernel(0.9, 4.0, 3.0), 0.2)


@pytest.fixture
def make_dataset(rng, random_coords):
    """Random dataset with z drawn from the given covariance (dense)."""
    def make(cov, n, q=0):
        coords = random_coords(n)
        sigma = cov.matrix(coords, with_nugget=True)
        z = np.linalg.cholesky(sigma) @ rng.standard_normal(n)
        x = None
        if q:
            x = np.column_stack([np.ones(n)] + [coords[:, j] for j in range(q - 1)])
            z = z + x @ np.arange(1, q + 1)
        return Dataset(coords, z, x)
    return make
