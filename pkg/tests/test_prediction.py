import numpy as np
import pytest

from covariance import NonstationaryCovariance, SeparableExpKernel
from dataset import Dataset, SpaceTimePoint
from errors import DataError
from inference import FitResult
from prediction import kriging_exact, predict
from warping import AXES, AxialWarpUnit, WarpingMap


def fixed_fit(cov, beta=()):
    return FitResult(covariance=cov, beta=np.asarray(beta, dtype=float), loglik=0.0, objective_trace=[],
                     converged=True, covariate_names=tuple(f"x{j + 1}" for j in range(len(beta))),
                     plan={"time_scale": 1.0})


def test_interpolates_without_nugget(make_dataset, random_coords):
    cov = NonstationaryCovariance(WarpingMap.identity(), SeparableExpKernel(1.0, 3.0, 2.0), 0.0)
    data = make_dataset(cov, 50)
    pred = predict(fixed_fit(cov), None, data, data.coords[:10], m=8)
    np.testing.assert_allclose(pred.means, data.z[:10], atol=1e-8)
    np.testing.assert_allclose(pred.variances, 0.0, atol=1e-8)


def test_all_neighbors_match_exact(warped_cov, make_dataset, random_coords):
    data = make_dataset(warped_cov, 60)
    targets = random_coords(15)
    pred = predict(fixed_fit(warped_cov), None, data, targets, m=60)
    exact = kriging_exact(warped_cov, data, targets)
    np.testing.assert_allclose(pred.means, exact.means, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(pred.variances, exact.variances, rtol=1e-8, atol=1e-10)


def test_all_neighbors_match_exact_with_trend(separable_cov, make_dataset, random_coords):
    data = make_dataset(separable_cov, 40, q=2)
    tc = random_coords(8)
    targets = Dataset(tc, None, np.column_stack([np.ones(8), tc[:, 0]]))
    beta = [1.0, 2.0]
    pred = predict(fixed_fit(separable_cov, beta), None, data, targets, m=40)
    exact = kriging_exact(separable_cov, data, targets, beta=np.array(beta))
    np.testing.assert_allclose(pred.means, exact.means, rtol=1e-8, atol=1e-10)


def test_far_target_reverts_to_prior(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 30)
    pred = predict(fixed_fit(separable_cov), None, data, [[100.0, 100.0, 100.0]], m=5)
    assert pred.means[0] == pytest.approx(0.0, abs=1e-12)
    assert pred.variances[0] == pytest.approx(1.0)


def test_variance_bounds(warped_cov, make_dataset, random_coords):
    data = make_dataset(warped_cov, 80)
    pred = predict(fixed_fit(warped_cov), None, data, random_coords(40), m=10)
    assert np.all(pred.variances >= 0)
    assert np.all(pred.variances <= warped_cov.sigma2 + 1e-12)
    noisy = predict(fixed_fit(warped_cov), None, data, pred.coords, m=10, noisy=True)
    np.testing.assert_allclose(noisy.variances, pred.variances + warped_cov.tau2)


def test_more_data_never_increases_exact_variance(separable_cov, make_dataset, random_coords):
    data = make_dataset(separable_cov, 40)
    targets = random_coords(10)
    fewer = kriging_exact(separable_cov, data.take(np.arange(20)), targets)
    more = kriging_exact(separable_cov, data, targets)
    assert np.all(more.variances <= fewer.variances + 1e-12)


def test_identity_warp_same_on_both_domains(separable_cov, make_dataset, random_coords):
    data = make_dataset(separable_cov, 70)
    targets = random_coords(20)
    on_g = predict(fixed_fit(separable_cov), None, data, targets, "G", m=6)
    on_d = predict(fixed_fit(separable_cov), None, data, targets, "D", m=6)
    np.testing.assert_array_equal(on_g.neighbors, on_d.neighbors)
    np.testing.assert_allclose(on_g.means, on_d.means)


def test_strong_warp_changes_neighbors(make_dataset, random_coords):
    warp = WarpingMap((AxialWarpUnit(AXES["s1"], [1.0, 30.0], [40.0], [0.0]),), normalize=False)
    cov = NonstationaryCovariance(warp, SeparableExpKernel(1.0, 2.0, 2.0), 0.1)
    data = make_dataset(cov, 100)
    targets = random_coords(30)
    on_g = predict(fixed_fit(cov), None, data, targets, "G", m=5)
    on_d = predict(fixed_fit(cov), None, data, targets, "D", m=5)
    assert not np.array_equal(on_g.neighbors, on_d.neighbors)


def test_points_and_iteration(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 20)
    targets = [SpaceTimePoint(0.0, 0.0, 0.0), SpaceTimePoint(0.1, -0.1, 0.2)]
    pred = predict(fixed_fit(separable_cov), None, data, targets, m=4)
    assert len(pred) == 2
    items = list(pred)
    assert items[1].point == targets[1]
    assert items[0].sd == pytest.approx(np.sqrt(pred.variances[0]))
    assert len(items[0].neighbor_indices) == 4


def test_argument_errors(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 10)
    with pytest.raises(ValueError):
        predict(fixed_fit(separable_cov), None, data, [[0.0, 0.0, 0.0]], m=11)
    with pytest.raises(ValueError):
        predict(fixed_fit(separable_cov), None, data, [[0.0, 0.0, 0.0]], "X", m=3)


def test_covariate_mismatch(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 20, q=1)
    with pytest.raises(DataError):
        predict(fixed_fit(separable_cov, [0.5]), None, data, [[0.0, 0.0, 0.0]], m=3)
