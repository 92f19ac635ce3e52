"""
Vecchia approximation: maxmin ordering, space-time neighbor sets and the
sparse precision Q = (I - A)' D^-1 (I - A).

Everything downstream works in the *ordered* index space of a VecchiaPlan:
row i conditions on neighbors N(i), a subset of the rows before i. Blocks
for different rows are independent and are evaluated in batches.
"""

import logging
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.spatial import cKDTree

from errors import NumericalError, SingularNeighborhoodError

LOGGER = logging.getLogger(__name__)

ORDERS = ("maxmin", "random", "input")
DOMAINS = ("G", "D")
DEFAULT_BATCH_SIZE = 512
JITTER = 1e-8


# ── Ordering and neighbor search ────────────────────────────────────────────

def default_time_scale(coords):
    """Spatial domain diameter over temporal domain diameter."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    span = coords.max(axis=0) - coords.min(axis=0)
    spatial = float(np.hypot(span[0], span[1]))
    temporal = float(span[2])
    if spatial <= 0 or temporal <= 0:
        return 1.0
    return spatial / temporal


def scaled_coords(coords, time_scale):
    x = np.array(coords, dtype=float)
    x[:, 2] *= time_scale
    return x


def maxmin_order(coords, time_scale=1.0, seed=0):
    """Maximum-minimum distance ordering in the scaled space-time metric.

    Starts at the point nearest the centroid. Exact ties in the min
    distance go to the candidate farthest from the last ordered point,
    remaining ties are broken by a seeded shuffle.
    """
    x = scaled_coords(np.atleast_2d(coords), time_scale)
    n = len(x)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    shuffle = np.random.default_rng(seed).permutation(n)
    xs = x[shuffle]

    order = np.empty(n, dtype=np.int64)
    last = int(np.argmin(((xs - xs.mean(axis=0)) ** 2).sum(axis=1)))
    order[0] = last
    dmin = ((xs - xs[last]) ** 2).sum(axis=1)
    dmin[last] = -np.inf
    for k in range(1, n):
        cand = np.flatnonzero(dmin == dmin.max())
        if len(cand) > 1:
            dlast = ((xs[cand] - xs[last]) ** 2).sum(axis=1)
            cand = cand[dlast == dlast.max()]
        last = int(cand[0])
        order[k] = last
        dmin = np.minimum(dmin, ((xs - xs[last]) ** 2).sum(axis=1))
        dmin[last] = -np.inf
    return shuffle[order]


def _first_valid(idx, valid, m):
    """First m indices per row where valid holds, keeping query order."""
    pos = np.argsort(~valid, axis=1, kind="stable")[:, :m]
    return np.take_along_axis(idx, pos, axis=1)


def find_neighbors(coords, m, domain="G", warp=None, time_scale=1.0):
    """Nearest previously ordered points for every row of ordered coords.

    Returns an (n, min(m, n-1)) index array, nearest first, padded with -1
    where fewer than m predecessors exist.
    """
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    if domain not in DOMAINS:
        raise ValueError(f"neighbor domain must be one of {DOMAINS}, got '{domain}'")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if domain == "D":
        if warp is None:
            raise ValueError("neighbor search on D needs a warping map")
        coords = warp.warp(coords)
    x = scaled_coords(coords, time_scale)
    n = len(x)
    m = min(m, max(n - 1, 0))
    nn = np.full((n, m), -1, dtype=np.int64)
    if m == 0:
        return nn

    head = min(2 * m + 1, n)
    for i in range(1, head):
        d = ((x[:i] - x[i]) ** 2).sum(axis=1)
        k = min(m, i)
        nn[i, :k] = np.argsort(d, kind="stable")[:k]

    pending = np.arange(head, n)
    k = m
    while len(pending):
        top = int(pending.max()) + 1
        k = min(2 * k, top)
        tree = cKDTree(x[:top])
        _, idx = tree.query(x[pending], k=k)
        idx = idx.reshape(len(pending), -1)
        valid = idx < pending[:, None]
        done = valid.sum(axis=1) >= m
        nn[pending[done]] = _first_valid(idx[done], valid[done], m)
        pending = pending[~done]
    return nn


def query_neighbors(obs_coords, target_coords, m, time_scale=1.0):
    """m nearest observations for each target, nearest first."""
    n = len(obs_coords)
    if m > n:
        raise ValueError(f"m = {m} exceeds the number of observations {n}")
    tree = cKDTree(scaled_coords(obs_coords, time_scale))
    _, idx = tree.query(scaled_coords(np.atleast_2d(target_coords), time_scale), k=m)
    return np.asarray(idx, dtype=np.int64).reshape(len(target_coords), m)


@dataclass(frozen=True, eq=False)
class VecchiaPlan:
    """Ordering plus neighbor sets; fixes the sparsity of the precision."""

    permutation: np.ndarray
    neighbors: np.ndarray
    m: int
    metric_domain: str = "G"
    time_scale: float = 1.0
    order: str = "maxmin"

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        if not np.array_equal(np.sort(perm), np.arange(len(perm))):
            raise ValueError("plan permutation is not a bijection")
        nn = np.asarray(self.neighbors, dtype=np.int64)
        if nn.shape[0] != len(perm):
            raise ValueError("neighbor array does not match the permutation length")
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "neighbors", nn)

    @property
    def n(self):
        return len(self.permutation)

    def summary(self):
        return {
            "m": self.m,
            "order": self.order,
            "metric_domain": self.metric_domain,
            "time_scale": self.time_scale,
        }


def build_plan(coords, m, order="maxmin", domain="G", warp=None, time_scale=None, seed=0):
    """Order the points and find their neighbor sets on G or on D."""
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}, got '{order}'")
    if domain not in DOMAINS:
        raise ValueError(f"neighbor domain must be one of {DOMAINS}, got '{domain}'")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if domain == "D":
        if warp is None:
            raise ValueError("a plan on D needs a warping map")
        coords = warp.warp(coords)
    if time_scale is None:
        time_scale = default_time_scale(coords)

    if order == "maxmin":
        perm = maxmin_order(coords, time_scale, seed)
    elif order == "random":
        perm = np.random.default_rng(seed).permutation(len(coords))
    else:
        perm = np.arange(len(coords))
    nn = find_neighbors(coords[perm], m, "G", None, time_scale)
    LOGGER.info("vecchia plan: n=%d m=%d order=%s domain=%s time_scale=%.4g",
                len(coords), m, order, domain, time_scale)
    return VecchiaPlan(perm, nn, m, domain, float(time_scale), order)


# ── Per-observation blocks ──────────────────────────────────────────────────

@dataclass
class Blocks:
    """Covariance blocks for a batch of ordered rows.

    Padded neighbor slots carry an identity block in K and zeros in k, so
    their coefficients come out as exactly 0.
    """

    rows: np.ndarray
    safe: np.ndarray     # neighbor indices, padded slots replaced by the row itself
    mask: np.ndarray     # (b, m) real neighbor slots
    disp_nn: np.ndarray  # (b, m, m, 3) warped displacements among neighbors
    disp_in: np.ndarray  # (b, m, 3) displacement row -> neighbor
    kp_nn: np.ndarray    # process covariance among neighbors (0 on padded pairs)
    kp_in: np.ndarray    # process covariance row-neighbor (0 on padded slots)
    K: np.ndarray        # observed-data covariance among neighbors, padded
    k: np.ndarray
    c: float


def neighbor_blocks(cov, w, nn, rows):
    """Sigma_{N,N} (+ nugget), Sigma_{N,i} and Sigma_{i,i} for one batch of rows."""
    idx = nn[rows]
    mask = idx >= 0
    safe = np.where(mask, idx, rows[:, None])
    wn = w[safe]
    disp_nn = wn[:, :, None, :] - wn[:, None, :, :]
    disp_in = w[rows][:, None, :] - wn
    pair = mask[:, :, None] & mask[:, None, :]
    kp_nn = np.where(pair, cov.kernel.evaluate(disp_nn[..., :2], disp_nn[..., 2]), 0.0)
    kp_in = np.where(mask, cov.kernel.evaluate(disp_in[..., :2], disp_in[..., 2]), 0.0)
    K = kp_nn.copy()
    diag = np.arange(idx.shape[1])
    K[:, diag, diag] += np.where(mask, cov.tau2, 1.0)
    return Blocks(rows, safe, mask, disp_nn, disp_in, kp_nn, kp_in, K, kp_in.copy(), cov.sigma2 + cov.tau2)


def _cholesky_blocks(K, rows, sigma2):
    """Batched Cholesky; singular blocks get one diagonal jitter retry."""
    try:
        return np.linalg.cholesky(K), K
    except np.linalg.LinAlgError:
        pass
    K = K.copy()
    L = np.empty_like(K)
    eye = np.eye(K.shape[1])
    for j in range(len(K)):
        try:
            L[j] = np.linalg.cholesky(K[j])
        except np.linalg.LinAlgError:
            LOGGER.debug("jitter retry for ordered row %d", rows[j])
            K[j] = K[j] + JITTER * max(sigma2, 1.0) * eye
            try:
                L[j] = np.linalg.cholesky(K[j])
            except np.linalg.LinAlgError:
                raise SingularNeighborhoodError(int(rows[j])) from None
    return L, K


def solve_blocks(blocks, rhs, sigma2):
    """K^-1 rhs for every block of the batch (rhs: (b, m, r))."""
    L, K = _cholesky_blocks(blocks.K, blocks.rows, sigma2)
    blocks.K = K
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(np.swapaxes(L, 1, 2), y)


def _factor_batch(cov, w, nn, rows, y):
    """Coefficients a, conditional variances d and residual pieces for a batch.

    y is the (n, r) ordered matrix of vectors whose Vecchia residuals
    E_i = y_i - a_i' y_{N(i)} are wanted (Z and the columns of X).
    """
    blocks = neighbor_blocks(cov, w, nn, rows)
    r = y.shape[1]
    if nn.shape[1] == 0:
        a = np.zeros((len(rows), 0))
        g = np.zeros((len(rows), 0, r))
        d = np.full(len(rows), blocks.c, dtype=float)
        return blocks, a, d, y[rows].copy(), g
    rhs = np.concatenate([blocks.k[:, :, None], y[blocks.safe] * blocks.mask[:, :, None]], axis=2)
    sol = solve_blocks(blocks, rhs, cov.sigma2)
    a, g = sol[:, :, 0], sol[:, :, 1:]
    d = blocks.c - (blocks.k * a).sum(axis=1)
    if not np.all(d > 0):
        bad = int(rows[np.flatnonzero(~(d > 0))[0]])
        raise SingularNeighborhoodError(bad)
    resid = y[rows] - np.einsum("bp,bpc->bc", a, y[blocks.safe] * blocks.mask[:, :, None])
    return blocks, a, d, resid, g


def _batches(n, batch_size):
    return np.array_split(np.arange(n), max(1, -(-n // batch_size)))


# ── Sparse factors ──────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class SparseFactors:
    """Strictly lower-triangular A (rows on N(i)) and diagonal D."""

    a: sparse.csr_matrix
    d: np.ndarray

    @property
    def n(self):
        return len(self.d)

    def logdet_precision(self):
        """log|Q| = -sum log D_ii."""
        return -float(np.log(self.d).sum())

    def whiten(self, y):
        """D^-1/2 (I - A) y."""
        y = np.asarray(y, dtype=float)
        e = y - self.a @ y
        return e / (np.sqrt(self.d) if e.ndim == 1 else np.sqrt(self.d)[:, None])

    def quad_form(self, y):
        e = self.whiten(y)
        return float((e * e).sum())

    def precision(self):
        return sparse_precision(self)


def build_factors(cov, coords, plan, threads=1, batch_size=DEFAULT_BATCH_SIZE):
    """A and D for coords given in plan order."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    w = cov.warped(coords)
    nn = plan.neighbors
    empty = np.zeros((len(coords), 0))
    parts = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_factor_batch)(cov, w, nn, rows, empty) for rows in _batches(len(coords), batch_size)
    )
    d = np.concatenate([p[2] for p in parts])
    ii, jj, vals = [], [], []
    for blocks, a, _, _, _ in parts:
        if a.shape[1] == 0:
            continue
        ii.append(np.broadcast_to(blocks.rows[:, None], a.shape)[blocks.mask])
        jj.append(nn[blocks.rows][blocks.mask])
        vals.append(a[blocks.mask])
    n = len(coords)
    if ii:
        a = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(ii), np.concatenate(jj))), shape=(n, n))
    else:
        a = sparse.csr_matrix((n, n))
    return SparseFactors(a, d)


def sparse_precision(f):
    """Q = (I - A)' D^-1 (I - A) as a sparse matrix."""
    i_a = sparse.identity(f.n, format="csr") - f.a
    return (i_a.T @ sparse.diags(1.0 / f.d) @ i_a).tocsr()


# ── Likelihood sufficient statistics ────────────────────────────────────────

@dataclass
class BlockStats:
    """Sums over rows needed by the (restricted) likelihood.

    S = sum_i E_i E_i' / D_i over residuals of y = [Z, X]; with gradients,
    dlogd[j] = sum_i dD_i / D_i and dS[j] for every active parameter j.
    """

    logd: float
    S: np.ndarray
    dlogd: np.ndarray = None
    dS: np.ndarray = None

    def __add__(self, other):
        grad = self.dlogd is not None
        return BlockStats(
            self.logd + other.logd,
            self.S + other.S,
            self.dlogd + other.dlogd if grad else None,
            self.dS + other.dS if grad else None,
        )


def _derivative_blocks(cov, blocks, dw, active):
    """Yield (j, dK, dk, dc) for every active parameter index j.

    Parameters are ordered kernel, log tau2, warping. dw holds the
    derivatives of the warped coordinates w.r.t. each warping parameter.
    """
    pk = cov.n_kernel_params
    mask = blocks.mask
    if any(j < pk for j in active):
        g_nn = cov.kernel.grad_free(blocks.disp_nn[..., :2], blocks.disp_nn[..., 2], blocks.kp_nn)
        g_in = cov.kernel.grad_free(blocks.disp_in[..., :2], blocks.disp_in[..., 2], blocks.kp_in)
        g_c = cov.kernel.grad_free(np.zeros(2), np.zeros(()), np.asarray(cov.sigma2, dtype=float))
    if any(j > pk for j in active):
        gh_nn, gw_nn = cov.kernel.grad_disp(blocks.disp_nn[..., :2], blocks.disp_nn[..., 2], blocks.kp_nn)
        gh_in, gw_in = cov.kernel.grad_disp(blocks.disp_in[..., :2], blocks.disp_in[..., 2], blocks.kp_in)
        grad_nn = np.concatenate([gh_nn, gw_nn[..., None]], axis=-1)
        grad_in = np.concatenate([gh_in, gw_in[..., None]], axis=-1)
    m = mask.shape[1]
    for j in active:
        if j < pk:
            yield j, g_nn[..., j], g_in[..., j], float(g_c[j])
        elif j == pk:
            dK = np.zeros((len(mask), m, m))
            dK[:, np.arange(m), np.arange(m)] = np.where(mask, cov.tau2, 0.0)
            yield j, dK, np.zeros((len(mask), m)), cov.tau2
        else:
            dwj = dw[j - pk - 1]
            dwn = dwj[blocks.safe]
            dwi = dwj[blocks.rows]
            dK = np.einsum("bpqc,bpc->bpq", grad_nn, dwn) - np.einsum("bpqc,bqc->bpq", grad_nn, dwn)
            dk = np.einsum("bpc,bc->bp", grad_in, dwi) - np.einsum("bpc,bpc->bp", grad_in, dwn)
            yield j, dK, dk, 0.0


def _stats_batch(cov, w, y, nn, rows, dw, active, n_params):
    blocks, a, d, resid, g = _factor_batch(cov, w, nn, rows, y)
    scaled = resid / d[:, None]
    stats = BlockStats(float(np.log(d).sum()), resid.T @ scaled)
    if active is None:
        return stats
    r = y.shape[1]
    stats.dlogd = np.zeros(n_params)
    stats.dS = np.zeros((n_params, r, r))
    if a.shape[1] == 0:
        # no neighbors anywhere: only the marginal variance moves
        for j, _, _, dc in _derivative_blocks(cov, blocks, dw, active):
            dd = np.full(len(rows), dc)
            stats.dlogd[j] = (dd / d).sum()
            stats.dS[j] = -(scaled * (dd / d)[:, None]).T @ resid
        return stats
    for j, dK, dk, dc in _derivative_blocks(cov, blocks, dw, active):
        t = np.einsum("bp,bpq->bq", a, dK)
        dd = dc - 2 * (dk * a).sum(axis=1) + (t * a).sum(axis=1)
        dresid = -(np.einsum("bp,bpc->bc", dk, g) - np.einsum("bq,bqc->bc", t, g))
        cross = dresid.T @ scaled
        stats.dlogd[j] = (dd / d).sum()
        stats.dS[j] = cross + cross.T - (scaled * (dd / d)[:, None]).T @ resid
    return stats


def block_statistics(cov, w, y, plan, dw=None, active=None, threads=1, batch_size=DEFAULT_BATCH_SIZE):
    """Accumulate BlockStats over all rows of the plan.

    w are warped coordinates and y the [Z, X] matrix, both in plan order.
    Pass active (parameter indices) and dw to get gradients as well.
    """
    n_params = len(cov.param_names())
    parts = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_stats_batch)(cov, w, y, plan.neighbors, rows, dw, active, n_params)
        for rows in _batches(len(w), batch_size)
    )
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    if not np.isfinite(total.logd):
        raise NumericalError("non-finite conditional variances")
    return total
