"""
Vecchia kriging of the noiseless process Y at new space-time points, and
the dense exact conditional used as its oracle.

    E(Y* | Z)   = x*'b + S*N SNN^-1 (Z_N - X_N b)
    var(Y* | Z) = sigma2 - S*N SNN^-1 SN*

S_NN carries the nugget, S*N does not.
"""

import logging
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from dataset import Dataset, SpaceTimePoint
from errors import DataError, NumericalError
from inference import gls_beta_dense
from vecchia import DEFAULT_BATCH_SIZE, DOMAINS, _batches, default_time_scale, query_neighbors

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    point: SpaceTimePoint
    mean: float
    variance: float
    neighbor_indices: tuple = ()

    @property
    def sd(self):
        return float(np.sqrt(self.variance))


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Column view of a batch of predictions, in target order.

    coords are in the caller's (original) units; neighbors index rows of
    the observation Dataset.
    """

    coords: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    neighbors: np.ndarray = None

    @property
    def sd(self):
        return np.sqrt(self.variances)

    def __len__(self):
        return len(self.means)

    def __getitem__(self, i):
        nn = () if self.neighbors is None else tuple(int(j) for j in self.neighbors[i])
        return Prediction(SpaceTimePoint(*self.coords[i]), float(self.means[i]), float(self.variances[i]), nn)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _as_targets(targets):
    if isinstance(targets, Dataset):
        return targets
    if isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], SpaceTimePoint):
        return Dataset(np.array([p.as_array() for p in targets]))
    return Dataset(np.atleast_2d(np.asarray(targets, dtype=float)))


def _trend(targets, beta, q):
    if not q:
        return np.zeros(targets.n)
    if targets.q != q:
        raise DataError(f"targets carry {targets.q} covariates, the fit expects {q}")
    return targets.x @ beta


def _krige_batch(cov, w_obs, resid, w_tgt, nn, rows):
    idx = nn[rows]
    wn = w_obs[idx]
    disp = wn[:, :, None, :] - wn[:, None, :, :]
    K = cov.kernel.evaluate(disp[..., :2], disp[..., 2])
    K[:, np.arange(idx.shape[1]), np.arange(idx.shape[1])] += cov.tau2
    cross = w_tgt[rows][:, None, :] - wn
    k = cov.kernel.evaluate(cross[..., :2], cross[..., 2])
    try:
        weights = np.linalg.solve(K, k[..., None])[..., 0]
    except np.linalg.LinAlgError:
        raise NumericalError(f"singular neighbor covariance for targets {rows[0]}..{rows[-1]}") from None
    mean = (weights * resid[idx]).sum(axis=1)
    var = cov.sigma2 - (weights * k).sum(axis=1)
    return mean, var


def predict(fit, c, data, targets, neighbor_domain="G", m=30, noisy=False, threads=1,
            batch_size=DEFAULT_BATCH_SIZE):
    """Kriging from the m nearest observations of each target.

    Coordinates of data and targets are in original units; the fit's
    coordinate scaling and time scale are applied to both.
    """
    cov = c if c is not None else fit.covariance
    if neighbor_domain not in DOMAINS:
        raise ValueError(f"neighbor domain must be one of {DOMAINS}, got '{neighbor_domain}'")
    if m > data.n:
        raise ValueError(f"m = {m} exceeds the number of observations {data.n}")
    if data.z is None:
        raise DataError("prediction needs observed z")
    targets = _as_targets(targets)
    obs = fit.scaling.apply(data.coords)
    tgt = fit.scaling.apply(targets.coords)
    time_scale = fit.plan.get("time_scale") or default_time_scale(obs)

    w_obs, w_tgt = cov.warped(obs), cov.warped(tgt)
    if neighbor_domain == "D":
        nn = query_neighbors(w_obs, w_tgt, m, time_scale)
    else:
        nn = query_neighbors(obs, tgt, m, time_scale)

    q = len(fit.beta)
    if data.q != q:
        raise DataError(f"data carry {data.q} covariates, the fit expects {q}")
    resid = data.z - (data.x @ fit.beta if q else 0.0)
    parts = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_krige_batch)(cov, w_obs, resid, w_tgt, nn, rows) for rows in _batches(targets.n, batch_size)
    )
    mean = np.concatenate([p[0] for p in parts]) + _trend(targets, fit.beta, q)
    var = np.concatenate([p[1] for p in parts])
    if noisy:
        var = var + cov.tau2
    var = np.maximum(var, 0.0)
    LOGGER.info("predicted %d targets (m=%d, neighbors on %s)", targets.n, m, neighbor_domain)
    return PredictionSet(targets.coords, mean, var, nn)


def kriging_exact(c, data, targets, beta=None, noisy=False):
    """Dense conditional mean and variance given all observations."""
    targets = _as_targets(targets)
    sigma = c.matrix(data.coords, with_nugget=True)
    k = c.cross(targets.coords, data.coords)
    if data.q and beta is None:
        beta = gls_beta_dense(c, data)
    resid = data.z - (data.x @ beta if data.q else 0.0)
    solved = np.linalg.solve(sigma, k.T)
    mean = solved.T @ resid + _trend(targets, beta, data.q)
    var = c.sigma2 - (k * solved.T).sum(axis=1)
    if noisy:
        var = var + c.tau2
    return PredictionSet(targets.coords, mean, np.maximum(var, 0.0))
