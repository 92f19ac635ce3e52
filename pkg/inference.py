"""
REML estimation on the Vecchia sparse precision.

The restricted log-likelihood is

    L = -(n-q)/2 log 2pi + 1/2 log|X'X| + 1/2 log|Q| - 1/2 log|X'QX| - 1/2 Z' P Z

with P = Q - QX (X'QX)^-1 X'Q, evaluated from per-row block sums so nothing
n x n is ever formed. Gradients are accumulated block-wise alongside.

Usage:
    result = fit(data, ModelSpec(family="separable"), FitConfig(m=30))
    result.save("fit.json")
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from covariance import AsymmetricExpKernel, NonstationaryCovariance, SeparableExpKernel
from dataset import CoordinateScaling, Dataset
from errors import DataError, NonFiniteObjectiveError, NumericalError, RankDeficientError
from vecchia import DEFAULT_BATCH_SIZE, block_statistics, build_plan
from warping import WarpingMap

LOGGER = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
OPTIMIZERS = ("L-BFGS-B", "BFGS")
FROZEN_GROUPS = {
    "kernel": ("kernel.",),
    "nugget": ("nugget.",),
    "warp": ("spatial[", "temporal."),
    "spatial": ("spatial[",),
    "temporal": ("temporal.",),
    "velocity": ("kernel.v1", "kernel.v2"),
}
WARP_STEP = 1e-6
INIT_CORRELATION = 0.05


# ── Specs ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ModelSpec:
    """What to fit: kernel family, starting values, warping architecture.

    kernel_init values are numbers or "auto"; frozen lists groups
    (kernel, nugget, warp, spatial, temporal, velocity) or parameter-name
    prefixes held at their starting values.
    """

    name: str = "model"
    family: str = "separable"
    kernel_init: dict = field(default_factory=dict)
    tau2: object = "auto"
    warp: WarpingMap = field(default_factory=WarpingMap.identity)
    frozen: tuple = ()

    def __post_init__(self):
        if self.family not in ("separable", "asymmetric"):
            raise ValueError(f"unknown kernel family '{self.family}'")

    def to_dict(self):
        return {
            "name": self.name,
            "family": self.family,
            "kernel_init": dict(self.kernel_init),
            "tau2": self.tau2,
            "warp": self.warp.to_dict(),
            "frozen": list(self.frozen),
        }


@dataclass(frozen=True)
class FitConfig:
    optimizer: str = "L-BFGS-B"
    max_iter: int = 500
    gtol: float = 1e-5
    ftol: float = 1e-8
    m: int = 30
    order: str = "maxmin"
    neighbor_domain: str = "G"
    time_scale: float = None
    seed: int = 0
    threads: int = 1
    batch_size: int = DEFAULT_BATCH_SIZE
    objective: str = "vecchia"
    gradient: str = "analytic"
    refit_on_warped: bool = False
    scale_coords: bool = True

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if self.objective not in ("vecchia", "dense"):
            raise ValueError(f"objective must be vecchia or dense, got '{self.objective}'")
        if self.gradient not in ("analytic", "fd"):
            raise ValueError(f"gradient must be analytic or fd, got '{self.gradient}'")
        if self.m < 1:
            raise ValueError(f"m must be at least 1, got {self.m}")

    def to_dict(self):
        return dict(self.__dict__)


# ── Parameters ──────────────────────────────────────────────────────────────

def frozen_mask(names, frozen):
    prefixes = []
    for item in frozen:
        prefixes += FROZEN_GROUPS.get(item, (item,))
    return np.array([any(n.startswith(p) for p in prefixes) for n in names], dtype=bool)


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Unconstrained optimizer vector over a covariance template."""

    template: NonstationaryCovariance
    free: np.ndarray
    frozen: np.ndarray = None

    def __post_init__(self):
        free = np.asarray(self.free, dtype=float)
        if free.shape != (len(self.template.param_names()),):
            raise ValueError(f"free vector has {free.size} entries, template expects {len(self.template.param_names())}")
        mask = np.zeros(free.size, dtype=bool) if self.frozen is None else np.asarray(self.frozen, dtype=bool)
        object.__setattr__(self, "free", free)
        object.__setattr__(self, "frozen", mask)

    @classmethod
    def from_covariance(cls, cov, frozen=()):
        return cls(cov, cov.free_params(), frozen_mask(cov.param_names(), frozen))

    @property
    def names(self):
        return self.template.param_names()

    @property
    def active(self):
        return np.flatnonzero(~self.frozen)

    def covariance(self):
        return self.template.with_free(self.free)

    def natural(self):
        return self.covariance().natural()

    def with_active(self, values):
        free = self.free.copy()
        free[self.active] = values
        return replace(self, free=free)


def _as_covariance(theta):
    return theta.covariance() if isinstance(theta, ParameterVector) else theta


def _as_parameters(theta):
    return theta if isinstance(theta, ParameterVector) else ParameterVector.from_covariance(theta)


# ── Objective ───────────────────────────────────────────────────────────────

def check_rank(x):
    """Full column rank of X, checked before any factorization."""
    q = x.shape[1]
    if q and np.linalg.matrix_rank(x) < q:
        raise RankDeficientError(f"covariate matrix X (n x {q}) is rank deficient")


def _logdet_xtx(x):
    if not x.shape[1]:
        return 0.0
    _, logdet = np.linalg.slogdet(x.T @ x)
    return float(logdet)


def _profile(stats, n, q, logdet_xtx, grad=False):
    """REML value, GLS beta and (optionally) gradient from block sums."""
    S = stats.S
    szz, sxz, sxx = S[0, 0], S[1:, 0], S[1:, 1:]
    if q:
        try:
            cf = cho_factor(sxx, lower=True)
        except np.linalg.LinAlgError:
            raise NumericalError("X'QX is not positive definite") from None
        beta = cho_solve(cf, sxz)
        logdet_sxx = 2 * float(np.log(np.diag(cf[0])).sum())
    else:
        beta = np.zeros(0)
        logdet_sxx = 0.0
    quad = szz - sxz @ beta
    value = -(n - q) / 2 * LOG_2PI + logdet_xtx / 2 - stats.logd / 2 - logdet_sxx / 2 - quad / 2
    if not grad:
        return float(value), beta, None
    dS = stats.dS
    d_quad = dS[:, 0, 0]
    trace = np.zeros(len(dS))
    if q:
        d_sxx = dS[:, 1:, 1:]
        trace = np.einsum("ij,pji->p", cho_solve(cf, np.eye(q)), d_sxx)
        d_quad = d_quad - 2 * dS[:, 1:, 0] @ beta + np.einsum("i,pij,j->p", beta, d_sxx, beta)
    gradient = -(stats.dlogd + trace + d_quad) / 2
    return float(value), beta, gradient


def _fd_gradient(f, v, active, step):
    g = np.zeros(len(v))
    for j in active:
        h = step * max(1.0, abs(v[j]))
        e = np.zeros(len(v))
        e[j] = h
        g[j] = (f(v + e) - f(v - e)) / (2 * h)
    return g


class RemlObjective:
    """REML as a function of the free parameter vector, for a fixed plan.

    All inputs are permuted into plan order once, up front.
    """

    def __init__(self, template, data, plan, threads=1, batch_size=DEFAULT_BATCH_SIZE):
        if data.z is None:
            raise DataError("REML needs observations z")
        check_rank(data.x)
        perm = plan.permutation
        self.template = template
        self.plan = plan
        self.coords = data.coords[perm]
        self.y = np.column_stack([data.z[perm], data.x[perm]])
        self.n, self.q = data.n, data.q
        self.logdet_xtx = _logdet_xtx(data.x)
        self.threads = threads
        self.batch_size = batch_size
        self.evaluations = 0

    def _stats(self, cov, active=None, dw=None):
        self.evaluations += 1
        return block_statistics(cov, cov.warped(self.coords), self.y, self.plan, dw, active,
                                self.threads, self.batch_size)

    def warp_derivatives(self, free, active):
        """d(warped coords)/d(warp parameter) by central differences."""
        pk = self.template.n_kernel_params + 1
        dw = np.zeros((len(free) - pk, self.n, 3))
        for j in active:
            if j < pk:
                continue
            h = WARP_STEP * max(1.0, abs(free[j]))
            e = np.zeros(len(free))
            e[j] = h
            hi = self.template.with_free(free + e).warped(self.coords)
            lo = self.template.with_free(free - e).warped(self.coords)
            dw[j - pk] = (hi - lo) / (2 * h)
        return dw

    def loglik(self, free):
        cov = self.template.with_free(free)
        value, _, _ = _profile(self._stats(cov), self.n, self.q, self.logdet_xtx)
        return value

    def loglik_and_grad(self, free, active=None):
        free = np.asarray(free, dtype=float)
        active = np.arange(len(free)) if active is None else np.asarray(active)
        cov = self.template.with_free(free)
        stats = self._stats(cov, list(active), self.warp_derivatives(free, active))
        value, _, grad = _profile(stats, self.n, self.q, self.logdet_xtx, grad=True)
        return value, grad

    def beta(self, free):
        _, beta, _ = _profile(self._stats(self.template.with_free(free)), self.n, self.q, self.logdet_xtx)
        return beta


class DenseRemlObjective:
    """Direct dense evaluation; gradients by central differences."""

    def __init__(self, template, data):
        if data.z is None:
            raise DataError("REML needs observations z")
        check_rank(data.x)
        self.template = template
        self.data = data
        self.evaluations = 0

    def loglik(self, free):
        self.evaluations += 1
        return reml_loglik_dense(self.template.with_free(free), self.data)

    def loglik_and_grad(self, free, active=None):
        free = np.asarray(free, dtype=float)
        active = np.arange(len(free)) if active is None else active
        return self.loglik(free), _fd_gradient(self.loglik, free, active, WARP_STEP)

    def beta(self, free):
        return gls_beta_dense(self.template.with_free(free), self.data)


def reml_loglik(theta, data, plan, threads=1):
    """Restricted log-likelihood with Q replaced by the Vecchia precision."""
    pv = _as_parameters(theta)
    return RemlObjective(pv.template, data, plan, threads).loglik(pv.free)


def reml_gradient(theta, data, plan, threads=1):
    """Gradient of reml_loglik w.r.t. the free parameters (frozen entries 0)."""
    pv = _as_parameters(theta)
    _, grad = RemlObjective(pv.template, data, plan, threads).loglik_and_grad(pv.free, pv.active)
    return grad


def gls_beta(theta, data, plan, threads=1):
    """(X'QX)^-1 X'QZ on the Vecchia precision; empty when q = 0."""
    pv = _as_parameters(theta)
    return RemlObjective(pv.template, data, plan, threads).beta(pv.free)


def reml_loglik_dense(theta, data):
    """Direct dense REML with an explicit inverse of Sigma."""
    cov = _as_covariance(theta)
    check_rank(data.x)
    x, z = data.x, data.z
    n, q = data.n, data.q
    prec = np.linalg.inv(cov.matrix(data.coords, with_nugget=True))
    _, logdet_q = np.linalg.slogdet(prec)
    qz = prec @ z
    value = -(n - q) / 2 * LOG_2PI + _logdet_xtx(x) / 2 + logdet_q / 2 - z @ qz / 2
    if q:
        qx = prec @ x
        xqx = x.T @ qx
        _, logdet_xqx = np.linalg.slogdet(xqx)
        xqz = x.T @ qz
        value += -logdet_xqx / 2 + xqz @ np.linalg.solve(xqx, xqz) / 2
    return float(value)


def gls_beta_dense(theta, data):
    cov = _as_covariance(theta)
    prec = np.linalg.inv(cov.matrix(data.coords, with_nugget=True))
    x = data.x
    return np.linalg.solve(x.T @ prec @ x, x.T @ prec @ data.z)


# ── Gradient checks ─────────────────────────────────────────────────────────

def max_relative_discrepancy(f, grad, x, h):
    """max_j |g_j - fd_j| / max(|g_j|, |fd_j|, 1) with central differences."""
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad(x), dtype=float)
    worst = 0.0
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h
        fd = (f(x + e) - f(x - e)) / (2 * h)
        worst = max(worst, abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1.0))
    return worst


def gradient_check(theta, data, plan, h=1e-5, threads=1):
    """Implemented REML gradient against central differences."""
    pv = _as_parameters(theta)
    obj = RemlObjective(pv.template, data, plan, threads)
    active = pv.active

    def f(v):
        return obj.loglik(pv.with_active(v).free)

    def grad(v):
        return obj.loglik_and_grad(pv.with_active(v).free, active)[1][active]

    return max_relative_discrepancy(f, grad, pv.free[active], h)


# ── Fitting ─────────────────────────────────────────────────────────────────

def _residual_variance(data):
    z = data.z
    if data.q:
        coef, *_ = np.linalg.lstsq(data.x, z, rcond=None)
        z = z - data.x @ coef
    var = float(np.var(z))
    return var if var > 0 else 1.0


def _decay_for(diameter):
    """Decay giving correlation INIT_CORRELATION at half the diameter."""
    return 2 * np.log(1 / INIT_CORRELATION) / (diameter if diameter > 0 else 1.0)


def initial_covariance(spec, data):
    """Starting covariance: identity-like warps, variance split evenly."""
    var = _residual_variance(data)
    span = data.coords.max(axis=0) - data.coords.min(axis=0)
    ds, dt = float(np.hypot(span[0], span[1])), float(span[2])
    init = spec.kernel_init

    def pick(key, default):
        value = init.get(key, "auto")
        return default if value in (None, "auto") else value

    if spec.family == "separable":
        kernel = SeparableExpKernel(
            float(pick("sigma2", var / 2)), float(pick("a_s", _decay_for(ds))), float(pick("a_t", _decay_for(dt)))
        )
    else:
        kernel = AsymmetricExpKernel(
            float(pick("sigma2", var / 2)), float(pick("a", _decay_for(ds))), tuple(pick("velocity", (0.0, 0.0)))
        )
    tau2 = var / 2 if spec.tau2 in (None, "auto") else float(spec.tau2)
    nugget_free = not frozen_mask(["nugget.log_tau2"], spec.frozen)[0]
    if tau2 <= 0 and nugget_free:
        LOGGER.warning("nugget starts at 0 but is estimated; starting from %.3g instead", 1e-8 * var)
        tau2 = 1e-8 * var
    return NonstationaryCovariance(spec.warp, kernel, tau2)


@dataclass
class FitResult:
    """Estimated covariance, GLS trend and optimizer record."""

    covariance: NonstationaryCovariance
    beta: np.ndarray
    loglik: float
    objective_trace: list
    converged: bool
    message: str = ""
    n_iter: int = 0
    n_eval: int = 0
    covariate_names: tuple = ()
    scaling: CoordinateScaling = field(default_factory=CoordinateScaling.identity)
    plan: dict = field(default_factory=dict)
    model: str = "model"
    config: dict = field(default_factory=dict)

    @property
    def theta_hat(self):
        return self.covariance.natural()

    def to_dict(self):
        return {
            "model": self.model,
            "converged": bool(self.converged),
            "message": self.message,
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "n_eval": self.n_eval,
            "theta_hat": self.theta_hat,
            "free": dict(zip(self.covariance.param_names(), self.covariance.free_params().tolist())),
            "beta_hat": dict(zip(self.covariate_names, np.asarray(self.beta).tolist())),
            "objective_trace": [float(v) for v in self.objective_trace],
            "scaling": self.scaling.to_dict(),
            "plan": self.plan,
            "config": self.config,
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def load_fit(path):
    with open(path) as f:
        d = json.load(f)
    names = tuple(d["beta_hat"])
    return FitResult(
        covariance=NonstationaryCovariance.from_natural(d["theta_hat"]),
        beta=np.array([d["beta_hat"][k] for k in names], dtype=float),
        loglik=d["loglik"],
        objective_trace=d["objective_trace"],
        converged=d["converged"],
        message=d.get("message", ""),
        n_iter=d.get("n_iter", 0),
        n_eval=d.get("n_eval", 0),
        covariate_names=names,
        scaling=CoordinateScaling.from_dict(d["scaling"]),
        plan=d.get("plan", {}),
        model=d.get("model", "model"),
        config=d.get("config", {}),
    )


def _optimizer_options(config):
    if config.optimizer == "L-BFGS-B":
        return {"maxiter": config.max_iter, "gtol": config.gtol, "ftol": config.ftol}
    return {"maxiter": config.max_iter, "gtol": config.gtol}


def optimize(objective, pv, config):
    """Minimize -REML over the active free parameters.

    Returns (best ParameterVector, trace, scipy result). The trace holds
    -REML at the start and at every accepted iterate.
    """
    active = pv.active
    try:
        f0 = objective.loglik(pv.free)
    except NumericalError as exc:
        raise NonFiniteObjectiveError(f"REML cannot be evaluated at the starting parameters {pv.natural()}: {exc}") \
            from exc
    if not np.isfinite(f0):
        raise NonFiniteObjectiveError(f"REML is {f0} at the starting parameters {pv.natural()}")

    seen = {}
    best = {"f": -f0, "x": pv.free[active].copy()}

    def fun(x):
        full = pv.with_active(x).free
        try:
            if config.gradient == "fd":
                value = objective.loglik(full)
                grad = _fd_gradient(objective.loglik, full, active, WARP_STEP)
            else:
                value, grad = objective.loglik_and_grad(full, active)
        except NumericalError as exc:
            LOGGER.debug("objective failed at %s: %s", x, exc)
            return np.inf, np.zeros(len(x))
        if not np.isfinite(value):
            return np.inf, np.zeros(len(x))
        seen[x.tobytes()] = -value
        if -value < best["f"]:
            best["f"], best["x"] = -value, x.copy()
        return -value, -grad[active]

    trace = [-f0]

    def callback(xk):
        value = seen.get(np.asarray(xk).tobytes())
        if value is None:
            value = -objective.loglik(pv.with_active(xk).free)
        trace.append(value)
        LOGGER.debug("iteration %d: -REML = %.10g", len(trace) - 1, value)

    if len(active) == 0:
        return pv, trace, None
    res = minimize(fun, pv.free[active], jac=True, method=config.optimizer,
                   callback=callback, options=_optimizer_options(config))
    return pv.with_active(best["x"]), trace, res


def _model_data(data, config, scaling=None):
    if scaling is None:
        scaling = CoordinateScaling.fit(data.coords) if config.scale_coords else CoordinateScaling.identity()
    return Dataset(scaling.apply(data.coords), data.z, data.x, data.covariate_names), scaling


def _fit_on_plan(model_data, pv, plan, spec, config, scaling):
    if config.objective == "dense":
        objective = DenseRemlObjective(pv.template, model_data)
    else:
        objective = RemlObjective(pv.template, model_data, plan, config.threads, config.batch_size)
    best, trace, res = optimize(objective, pv, config)
    converged = True if res is None else bool(res.success)
    message = "all parameters frozen" if res is None else str(res.message)
    if not converged:
        LOGGER.warning("%s: optimizer did not converge (%s)", spec.name, message)
    cov = best.covariance()
    result = FitResult(
        covariance=cov,
        beta=objective.beta(best.free),
        loglik=objective.loglik(best.free),
        objective_trace=trace,
        converged=converged,
        message=message,
        n_iter=0 if res is None else int(res.nit),
        n_eval=objective.evaluations,
        covariate_names=model_data.covariate_names,
        scaling=scaling,
        plan=plan.summary(),
        model=spec.name,
        config={"fit": config.to_dict(), "model": spec.to_dict()},
    )
    LOGGER.info("%s: -REML %.6g after %d iterations (converged=%s)", spec.name, -result.loglik,
                result.n_iter, converged)
    return result


def fit(data, spec, config=None):
    """Estimate covariance parameters by maximizing the Vecchia REML."""
    config = config or FitConfig()
    if data.z is None:
        raise DataError("fit needs observations z")
    if data.n < 2:
        raise ValueError("fit needs at least 2 observations")
    check_rank(data.x)
    model_data, scaling = _model_data(data, config)
    cov0 = initial_covariance(spec, model_data)
    pv = ParameterVector.from_covariance(cov0, spec.frozen)
    plan = build_plan(model_data.coords, config.m, config.order, "G", None, config.time_scale, config.seed)
    result = _fit_on_plan(model_data, pv, plan, spec, config, scaling)
    if config.refit_on_warped:
        result = refit_on_warped(result, data, spec, config)
    return result


def refit_on_warped(result, data, spec, config=None):
    """Rebuild the plan on the fitted warped domain and optimize again."""
    config = config or FitConfig()
    model_data, scaling = _model_data(data, config, result.scaling)
    pv = ParameterVector.from_covariance(result.covariance, spec.frozen)
    plan = build_plan(model_data.coords, config.m, config.order, "D", result.covariance.warp,
                      config.time_scale, config.seed)
    refit = _fit_on_plan(model_data, pv, plan, spec, config, scaling)
    refit.objective_trace = list(result.objective_trace) + list(refit.objective_trace)
    return refit
