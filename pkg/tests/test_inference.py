import time

import numpy as np
import pytest

from covariance import AsymmetricExpKernel, NonstationaryCovariance, SeparableExpKernel
from dataset import Dataset
from errors import NonFiniteObjectiveError, RankDeficientError
from inference import FitConfig, ModelSpec, ParameterVector, fit, frozen_mask, gls_beta, gls_beta_dense, \
    gradient_check, load_fit, max_relative_discrepancy, reml_gradient, reml_loglik, reml_loglik_dense
from simulation import simulate_gp
from vecchia import build_plan
from warping import AXES, AxialWarpUnit, RbfWarpUnit, WarpingMap, rbf_grid, safe_weight_bound


def stationary(sigma2=1.0, a_s=3.0, a_t=2.0, tau2=0.1):
    return NonstationaryCovariance(WarpingMap.identity(), SeparableExpKernel(sigma2, a_s, a_t), tau2)


# ── Objective ───────────────────────────────────────────────────────────────

def test_single_observation_value():
    data = Dataset(np.zeros((1, 3)), [0.0])
    plan = build_plan(data.coords, 5)
    assert reml_loglik(stationary(0.5, tau2=0.5), data, plan) == pytest.approx(-0.918939, abs=1e-6)


def test_full_conditioning_matches_dense(warped_cov, make_dataset):
    data = make_dataset(warped_cov, 40, q=2)
    plan = build_plan(data.coords, 39)
    assert reml_loglik(warped_cov, data, plan) == pytest.approx(reml_loglik_dense(warped_cov, data), rel=1e-9)


def test_no_covariates_matches_dense(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 35)
    plan = build_plan(data.coords, 34)
    assert reml_loglik(separable_cov, data, plan) == pytest.approx(reml_loglik_dense(separable_cov, data), rel=1e-9)


def test_ordering_does_not_matter_when_exact(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 30, q=1)
    maxmin = build_plan(data.coords, 29)
    shuffled = build_plan(data.coords, 29, order="random", seed=4)
    assert reml_loglik(separable_cov, data, maxmin) == pytest.approx(reml_loglik(separable_cov, data, shuffled),
                                                                      rel=1e-10)


def test_trend_shift_invariance(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 60, q=1)
    shifted = Dataset(data.coords, data.z + 17.0, data.x)
    plan = build_plan(data.coords, 8)
    assert reml_loglik(separable_cov, data, plan) == pytest.approx(reml_loglik(separable_cov, shifted, plan),
                                                                   rel=1e-10)


def test_rank_deficient_covariates(separable_cov, random_coords, rng):
    coords = random_coords(20)
    x = np.column_stack([np.ones(20), 2 * np.ones(20)])
    data = Dataset(coords, rng.normal(size=20), x)
    with pytest.raises(RankDeficientError):
        reml_loglik(separable_cov, data, build_plan(coords, 5))


# ── GLS ─────────────────────────────────────────────────────────────────────

def test_gls_pure_noise_is_mean(random_coords, rng):
    coords = random_coords(25)
    data = Dataset(coords, rng.normal(size=25), np.ones(25))
    beta = gls_beta(stationary(1e-12, tau2=1.0), data, build_plan(coords, 5))
    assert beta[0] == pytest.approx(data.z.mean(), abs=1e-8)


def test_gls_matches_dense(warped_cov, make_dataset):
    data = make_dataset(warped_cov, 30, q=2)
    beta = gls_beta(warped_cov, data, build_plan(data.coords, 29))
    np.testing.assert_allclose(beta, gls_beta_dense(warped_cov, data), rtol=1e-8)


def test_gls_exact_trend(separable_cov, random_coords):
    coords = random_coords(40)
    x = np.column_stack([np.ones(40), coords[:, 0]])
    data = Dataset(coords, x @ [1.0, 2.0], x)
    np.testing.assert_allclose(gls_beta(separable_cov, data, build_plan(coords, 6)), [1.0, 2.0], atol=1e-10)


def test_gls_without_covariates_is_empty(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 10)
    assert gls_beta(separable_cov, data, build_plan(data.coords, 3)).shape == (0,)


# ── Gradients ───────────────────────────────────────────────────────────────

def test_toy_discrepancy():
    x = np.linspace(-1, 1, 5)
    assert max_relative_discrepancy(lambda v: np.sin(v).sum(), np.cos, x, 1e-5) <= 1e-10
    coarse = max_relative_discrepancy(lambda v: np.sin(v).sum(), np.cos, x, 1e-1)
    fine = max_relative_discrepancy(lambda v: np.sin(v).sum(), np.cos, x, 1e-2)
    assert fine < coarse
    assert max_relative_discrepancy(lambda v: np.sin(v).sum(), lambda v: np.cos(v) + 1, x, 1e-5) > 0.3


def test_discrepancy_needs_positive_step():
    with pytest.raises(ValueError):
        max_relative_discrepancy(np.sum, np.ones_like, np.zeros(2), 0.0)


def test_stationary_gradient(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 120, q=1)
    assert gradient_check(separable_cov, data, build_plan(data.coords, 10)) <= 1e-4


def test_warped_gradient(warped_cov, make_dataset):
    data = make_dataset(warped_cov, 150, q=2)
    assert gradient_check(warped_cov, data, build_plan(data.coords, 10)) <= 1e-4


def random_covariance(draw):
    """Stationary or warped, separable or asymmetric, cycling with the draw."""
    rng = np.random.default_rng(draw)
    warp = WarpingMap.identity()
    if draw % 2:
        centers, radius = rbf_grid()
        bound = safe_weight_bound(centers, radius)
        rbf = RbfWarpUnit(centers, radius, rng.uniform(-0.9, 0.9, len(centers)) * bound, bound)
        s1 = AxialWarpUnit(AXES["s1"], np.concatenate([[1.0], rng.uniform(0.01, 1.0, 9)]))
        t = AxialWarpUnit(AXES["t"], np.concatenate([[1.0], rng.uniform(0.01, 1.0, 9)]))
        warp = WarpingMap((s1, rbf), t)
    if draw % 4 >= 2:
        kernel = AsymmetricExpKernel(rng.uniform(0.5, 2.0), rng.uniform(1.0, 8.0), rng.uniform(-0.4, 0.4, 2))
    else:
        kernel = SeparableExpKernel(rng.uniform(0.5, 2.0), rng.uniform(1.0, 8.0), rng.uniform(1.0, 8.0))
    return NonstationaryCovariance(warp, kernel, rng.uniform(0.01, 0.5))


@pytest.mark.parametrize("draw", range(20))
def test_gradient_random_draws(draw, make_dataset):
    cov = random_covariance(draw)
    data = make_dataset(cov, 40, q=1)
    plan = build_plan(data.coords, 10, order=("maxmin", "random")[draw // 4 % 2], seed=draw)
    assert gradient_check(cov, data, plan) <= 1e-4


def test_asymmetric_gradient(asymmetric_cov, make_dataset):
    data = make_dataset(asymmetric_cov, 120)
    assert gradient_check(asymmetric_cov, data, build_plan(data.coords, 10)) <= 1e-4


def test_frozen_entries_have_zero_gradient(warped_cov, make_dataset):
    data = make_dataset(warped_cov, 60)
    pv = ParameterVector.from_covariance(warped_cov, frozen=("warp",))
    grad = reml_gradient(pv, data, build_plan(data.coords, 6))
    assert np.all(grad[pv.frozen] == 0)
    assert np.any(grad[~pv.frozen] != 0)


# ── Parameters ──────────────────────────────────────────────────────────────

def test_parameter_vector_round_trip(warped_cov):
    pv = ParameterVector.from_covariance(warped_cov)
    np.testing.assert_allclose(pv.covariance().free_params(), pv.free, atol=1e-10)
    assert len(pv.names) == len(pv.free)


def test_frozen_groups(warped_cov):
    names = warped_cov.param_names()
    mask = frozen_mask(names, ("kernel", "temporal"))
    assert mask[:3].all()
    assert not mask[3]
    assert all(m == (n.startswith("kernel.") or n.startswith("temporal.")) for n, m in zip(names, mask))
    assert frozen_mask(names, ("nugget.log_tau2",)).sum() == 1


def test_with_active_only_touches_active(warped_cov):
    pv = ParameterVector.from_covariance(warped_cov, frozen=("warp",))
    moved = pv.with_active(pv.free[pv.active] + 1.0)
    np.testing.assert_array_equal(moved.free[pv.frozen], pv.free[pv.frozen])
    np.testing.assert_allclose(moved.free[pv.active], pv.free[pv.active] + 1.0)


# ── Fitting ─────────────────────────────────────────────────────────────────

def test_pure_noise_nugget(random_coords, rng):
    coords = random_coords(2000)
    data = Dataset(coords, rng.normal(scale=np.sqrt(2.0), size=2000))
    spec = ModelSpec(name="noise", kernel_init={"sigma2": 1e-6, "a_s": 5.0, "a_t": 5.0}, frozen=("kernel",))
    result = fit(data, spec, FitConfig(m=10))
    assert result.covariance.tau2 == pytest.approx(2.0, rel=0.15)


def test_frozen_identity_warp_matches_stationary(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 300)
    config = FitConfig(m=15)
    plain = fit(data, ModelSpec(name="plain"), config)
    warp = WarpingMap((AxialWarpUnit.identity(AXES["s1"]), AxialWarpUnit.identity(AXES["s2"])),
                      AxialWarpUnit.identity(AXES["t"]))
    frozen = fit(data, ModelSpec(name="frozen", warp=warp, frozen=("warp",)), config)
    assert frozen.loglik == pytest.approx(plain.loglik, rel=1e-5)
    assert frozen.covariance.sigma2 == pytest.approx(plain.covariance.sigma2, rel=1e-4)


def test_fit_records_trace(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 150, q=1)
    result = fit(data, ModelSpec(), FitConfig(m=10))
    assert result.objective_trace[-1] <= result.objective_trace[0]
    assert -result.loglik <= result.objective_trace[-1] + 1e-9 * abs(result.loglik)
    assert result.plan["m"] == 10
    assert result.beta.shape == (1,)


def test_fit_is_reproducible(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 120)
    a = fit(data, ModelSpec(), FitConfig(m=8, seed=3))
    b = fit(data, ModelSpec(), FitConfig(m=8, seed=3))
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.covariance.free_params(), b.covariance.free_params())


def test_dense_and_vecchia_objectives_agree(separable_cov, make_dataset):
    data = make_dataset(separable_cov, 60)
    vecchia = fit(data, ModelSpec(), FitConfig(m=59, gradient="fd", scale_coords=False))
    dense = fit(data, ModelSpec(), FitConfig(objective="dense", gradient="fd", scale_coords=False))
    assert vecchia.loglik == pytest.approx(dense.loglik, rel=1e-5)
    cov = vecchia.covariance
    assert reml_loglik(cov, data, build_plan(data.coords, 59)) == pytest.approx(reml_loglik_dense(cov, data), rel=1e-9)


def test_zero_covariance_start_is_rejected(make_dataset, separable_cov):
    data = make_dataset(separable_cov, 30)
    spec = ModelSpec(kernel_init={"sigma2": 0.0}, tau2=0.0, frozen=("nugget",))
    with pytest.raises(NonFiniteObjectiveError):
        fit(data, spec, FitConfig(m=5))


def test_save_and_load(tmp_path, separable_cov, make_dataset):
    data = make_dataset(separable_cov, 80, q=1)
    result = fit(data, ModelSpec(name="saved"), FitConfig(m=6, max_iter=20))
    path = tmp_path / "fit.json"
    result.save(str(path))
    back = load_fit(str(path))
    np.testing.assert_allclose(back.covariance.free_params(), result.covariance.free_params(), rtol=1e-12)
    np.testing.assert_array_equal(back.beta, result.beta)
    assert back.loglik == result.loglik
    assert back.covariate_names == ("x1",)
    assert back.scaling == result.scaling
    assert back.model == "saved"


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(optimizer="Nelder-Mead")
    with pytest.raises(ValueError):
        FitConfig(m=0)


@pytest.mark.slow
def test_recovers_stationary_parameters(rng):
    ticks = np.linspace(-0.5, 0.5, 21)
    tt, ss2, ss1 = np.meshgrid(np.linspace(-0.5, 0.5, 10), ticks, ticks, indexing="ij")
    coords = np.column_stack([ss1.ravel(), ss2.ravel(), tt.ravel()])
    truth = stationary(1.0, 6.0, 3.0, 0.1)
    data = Dataset(coords, simulate_gp(truth, coords, seed=11))
    result = fit(data, ModelSpec(), FitConfig(m=30, scale_coords=False))
    assert result.converged
    kernel = result.covariance.kernel
    assert kernel.sigma2 == pytest.approx(1.0, rel=0.5)
    assert kernel.a_s == pytest.approx(6.0, rel=0.25)
    assert kernel.a_t == pytest.approx(3.0, rel=0.25)
    assert result.covariance.tau2 == pytest.approx(0.1, rel=0.5)


@pytest.mark.slow
def test_reml_time_scales_linearly(rng):
    cov = stationary(1.0, 6.0, 3.0, 0.1)
    times = []
    for n in (5_000, 10_000, 20_000):
        data = Dataset(rng.uniform(-0.5, 0.5, size=(n, 3)), rng.normal(size=n))
        plan = build_plan(data.coords, 30)
        reml_loglik(cov, data, plan)
        start = time.perf_counter()
        reml_loglik(cov, data, plan)
        times.append(time.perf_counter() - start)
    assert times[1] / times[0] <= 2.6
    assert times[2] / times[1] <= 2.6
