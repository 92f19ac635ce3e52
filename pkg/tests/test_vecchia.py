import numpy as np
import pytest

from covariance import NonstationaryCovariance, SeparableExpKernel
from errors import SingularNeighborhoodError
from vecchia import VecchiaPlan, build_factors, build_plan, default_time_scale, find_neighbors, maxmin_order, \
    query_neighbors, sparse_precision
from warping import AXES, AxialWarpUnit, WarpingMap


def ordered_sigma(cov, coords, plan):
    return cov.matrix(coords[plan.permutation], with_nugget=True)


# ── Ordering ────────────────────────────────────────────────────────────────

def test_maxmin_single_point():
    np.testing.assert_array_equal(maxmin_order(np.zeros((1, 3))), [0])


def test_maxmin_square_with_center():
    coords = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.5, 0]], dtype=float)
    for seed in range(5):
        order = maxmin_order(coords, seed=seed)
        assert order[0] == 4
        second, third = coords[order[1]], coords[order[2]]
        np.testing.assert_allclose(second + third, [1, 1, 0])


def test_maxmin_is_permutation(random_coords):
    order = maxmin_order(random_coords(200), seed=3)
    np.testing.assert_array_equal(np.sort(order), np.arange(200))


def test_maxmin_deterministic(random_coords):
    coords = random_coords(150)
    np.testing.assert_array_equal(maxmin_order(coords, seed=7), maxmin_order(coords, seed=7))


def test_maxmin_spreads_early_points(random_coords):
    coords = random_coords(400)
    order = maxmin_order(coords)
    head = coords[order[:20]]
    d = np.sqrt(((head[:, None] - head[None]) ** 2).sum(axis=2))
    d[np.diag_indices(20)] = np.inf
    rand = coords[:20]
    dr = np.sqrt(((rand[:, None] - rand[None]) ** 2).sum(axis=2))
    dr[np.diag_indices(20)] = np.inf
    assert d.min() > dr.min()


def test_default_time_scale():
    coords = np.array([[0, 0, 0], [3, 4, 2]], dtype=float)
    assert default_time_scale(coords) == pytest.approx(2.5)
    assert default_time_scale(np.array([[0, 0, 1], [3, 4, 1]], dtype=float)) == 1.0


# ── Neighbors ───────────────────────────────────────────────────────────────

def test_neighbor_shape_and_padding(random_coords):
    nn = find_neighbors(random_coords(40), 5)
    assert nn.shape == (40, 5)
    for i in range(40):
        valid = nn[i][nn[i] >= 0]
        assert len(valid) == min(i, 5)
        assert np.all(valid < i)
        assert np.all(nn[i, len(valid):] == -1)


def test_neighbors_shrink_for_tiny_n():
    assert find_neighbors(np.zeros((1, 3)), 10).shape == (1, 0)
    coords = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
    assert find_neighbors(coords, 10).shape == (3, 2)


def test_neighbors_match_brute_force(random_coords):
    coords = random_coords(500)
    coords[:, 2] *= 0.3
    nn = find_neighbors(coords, 10, time_scale=2.0)
    x = coords * [1.0, 1.0, 2.0]
    for i in range(1, 500):
        d = np.sqrt(((x[:i] - x[i]) ** 2).sum(axis=1))
        k = min(i, 10)
        expected = np.sort(d)[:k]
        np.testing.assert_allclose(np.sort(d[nn[i, :k]]), expected)


def test_neighbors_on_warped_domain(random_coords):
    coords = random_coords(100)
    warp = WarpingMap((AxialWarpUnit(AXES["s1"], [1.0, 30.0], [40.0], [0.0]),), normalize=False)
    on_g = find_neighbors(coords, 4)
    on_d = find_neighbors(coords, 4, "D", warp)
    assert not np.array_equal(on_g, on_d)
    with pytest.raises(ValueError):
        find_neighbors(coords, 4, "D")


def test_query_neighbors(random_coords):
    obs = random_coords(60)
    nn = query_neighbors(obs, obs[:5] + 1e-9, 3)
    np.testing.assert_array_equal(nn[:, 0], np.arange(5))
    with pytest.raises(ValueError):
        query_neighbors(obs, obs[:1], 61)


def test_plan_validation(random_coords):
    coords = random_coords(10)
    with pytest.raises(ValueError):
        build_plan(coords, 3, order="sorted")
    with pytest.raises(ValueError):
        build_plan(coords, 3, domain="D")
    with pytest.raises(ValueError):
        VecchiaPlan(np.array([0, 0, 1]), np.zeros((3, 1)), 1)


def test_plan_orders(random_coords):
    coords = random_coords(30)
    assert np.array_equal(build_plan(coords, 3, order="input").permutation, np.arange(30))
    random_plan = build_plan(coords, 3, order="random", seed=2)
    np.testing.assert_array_equal(np.sort(random_plan.permutation), np.arange(30))
    assert build_plan(coords, 3).summary()["order"] == "maxmin"


# ── Factors ─────────────────────────────────────────────────────────────────

def test_single_observation(separable_cov):
    coords = np.zeros((1, 3))
    f = build_factors(separable_cov, coords, build_plan(coords, 5))
    np.testing.assert_allclose(f.d, [1.1])
    assert f.a.nnz == 0


def test_three_points_exact(separable_cov, random_coords):
    coords = random_coords(3)
    plan = build_plan(coords, 2)
    q = sparse_precision(build_factors(separable_cov, coords[plan.permutation], plan)).toarray()
    np.testing.assert_allclose(q, np.linalg.inv(ordered_sigma(separable_cov, coords, plan)), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("batch_size", [7, 512])
def test_full_conditioning_is_exact(warped_cov, random_coords, batch_size):
    coords = random_coords(40)
    plan = build_plan(coords, 39)
    f = build_factors(warped_cov, coords[plan.permutation], plan, batch_size=batch_size)
    sigma = ordered_sigma(warped_cov, coords, plan)
    np.testing.assert_allclose(f.precision().toarray() @ sigma, np.eye(40), atol=1e-8)


def test_logdet_precision(separable_cov, random_coords):
    coords = random_coords(50)
    plan = build_plan(coords, 49)
    f = build_factors(separable_cov, coords[plan.permutation], plan)
    _, logdet = np.linalg.slogdet(ordered_sigma(separable_cov, coords, plan))
    assert f.logdet_precision() == pytest.approx(-logdet, rel=1e-10)


def test_conditional_variances_bounded(warped_cov, random_coords):
    coords = random_coords(120)
    plan = build_plan(coords, 6)
    f = build_factors(warped_cov, coords[plan.permutation], plan)
    assert np.all(f.d > 0)
    assert np.all(f.d <= warped_cov.sigma2 + warped_cov.tau2 + 1e-12)


def test_precision_is_sparse_and_positive_definite(warped_cov, random_coords):
    coords = random_coords(80)
    plan = build_plan(coords, 5)
    f = build_factors(warped_cov, coords[plan.permutation], plan, threads=2, batch_size=16)
    assert f.a.nnz <= 80 * 5
    q = f.precision().toarray()
    np.testing.assert_allclose(q, q.T, atol=1e-12)
    assert np.linalg.eigvalsh(q).min() > 0


def test_pure_nugget_gives_scaled_identity(random_coords):
    cov = NonstationaryCovariance(WarpingMap.identity(), SeparableExpKernel(0.0, 1.0, 1.0), 0.5)
    coords = random_coords(25)
    plan = build_plan(coords, 4)
    f = build_factors(cov, coords[plan.permutation], plan)
    np.testing.assert_allclose(f.precision().toarray(), 2.0 * np.eye(25))


def test_whitening_quad_form(separable_cov, random_coords, rng):
    coords = random_coords(30)
    plan = build_plan(coords, 29)
    f = build_factors(separable_cov, coords[plan.permutation], plan)
    y = rng.normal(size=30)
    sigma = ordered_sigma(separable_cov, coords, plan)
    assert f.quad_form(y) == pytest.approx(y @ np.linalg.solve(sigma, y), rel=1e-9)


def test_zero_covariance_is_singular(random_coords):
    cov = NonstationaryCovariance(WarpingMap.identity(), SeparableExpKernel(0.0, 1.0, 1.0), 0.0)
    coords = random_coords(10)
    plan = build_plan(coords, 3)
    with pytest.raises(SingularNeighborhoodError) as exc:
        build_factors(cov, coords[plan.permutation], plan)
    assert exc.value.index == 0
