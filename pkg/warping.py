"""
Injective warping units and their composition.

The spatial warp f_s is an ordered composition of axial and radial basis
function (RBF) units acting on 2-D space; the temporal warp f_t is a
single monotone axial unit (or the identity). Coordinates are expected on
[-0.5, 0.5] (see dataset.CoordinateScaling).

Units are immutable; optimization works on their free parameters through
free_params() / with_free().
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

AXES = {"s1": 0, "s2": 1, "t": 2}
AXIS_NAMES = {v: k for k, v in AXES.items()}

DEFAULT_AXIAL_R = 10
DEFAULT_RBF_GRID = 4
DEFAULT_RADIUS_FACTOR = 1.5
SAFE_FRACTION = 0.8
IDENTITY_EPS = 1e-6
# tanh(x / 2) rounds to 1.0 beyond this
FREE_CLIP = 36.0

# Reference sets for spatial normalization and warp comparisons
REF_RESOLUTION = 21
REF_TIME_POINTS = 101


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def axial_basis(r, lo=-0.5, hi=0.5):
    """Fixed sigmoid parameters (theta1, theta2) for basis functions 2..r.

    Centers equally spaced over [lo, hi]; slopes 4 / spacing.
    """
    k = r - 1
    if k <= 0:
        return np.zeros(0), np.zeros(0)
    if k == 1:
        centers = np.array([(lo + hi) / 2])
        spacing = hi - lo
    else:
        centers = np.linspace(lo, hi, k)
        spacing = (hi - lo) / (k - 1)
    return np.full(k, 4.0 / spacing), centers


def rbf_grid(k=DEFAULT_RBF_GRID, lo=-0.5, hi=0.5, radius_factor=DEFAULT_RADIUS_FACTOR):
    """k x k centers on [lo, hi]^2 and a radius of radius_factor grid spacings."""
    if k == 1:
        return np.array([[(lo + hi) / 2] * 2]), radius_factor * (hi - lo)
    ticks = np.linspace(lo, hi, k)
    g1, g2 = np.meshgrid(ticks, ticks, indexing="xy")
    centers = np.column_stack([g1.ravel(), g2.ravel()])
    return centers, radius_factor * (hi - lo) / (k - 1)


def safe_weight_bound(centers, radius, resolution=201):
    """Half-width of the weight interval that keeps an RBF unit injective.

    The Jacobian of the displacement term for center k has spectral norm
    g_k(s) * max(1, |1 - x_k|) with x_k = |s - c_k|^2 / radius^2, so
    |b_k| < 1 / sup_s sum_k of that norm keeps the unit a contraction-
    perturbed identity. The sup is taken on a grid around the centers.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    lo = centers.min(axis=0) - 3 * radius
    hi = centers.max(axis=0) + 3 * radius
    g1, g2 = np.meshgrid(np.linspace(lo[0], hi[0], resolution), np.linspace(lo[1], hi[1], resolution))
    s = np.column_stack([g1.ravel(), g2.ravel()])
    x = ((s[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2) / radius**2
    norms = np.exp(-x / 2) * np.maximum(1.0, np.abs(1.0 - x))
    return SAFE_FRACTION / norms.sum(axis=1).max()


# ── Units ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class AxialWarpUnit:
    """Monotone 1-D map sum_i w_i phi_i(c) on one coordinate.

    phi_1(c) = c; phi_i(c) = sigmoid(theta1_i (c - theta2_i)) for i >= 2.
    """

    axis: int
    weights: np.ndarray
    theta1: np.ndarray = None
    theta2: np.ndarray = None

    kind = "axial"

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).ravel()
        if self.theta1 is None or self.theta2 is None:
            t1, t2 = axial_basis(len(w))
        else:
            t1 = np.array(self.theta1, dtype=float).ravel()
            t2 = np.array(self.theta2, dtype=float).ravel()
        if self.axis not in AXIS_NAMES:
            raise ValueError(f"axis must be one of {sorted(AXIS_NAMES)}, got {self.axis}")
        if len(w) < 1 or len(t1) != len(w) - 1 or len(t2) != len(w) - 1:
            raise ValueError("axial unit needs r weights and r-1 basis parameter pairs")
        if not np.all(w > 0):
            raise ValueError(f"axial weights must be strictly positive, got {w}")
        if not np.all(t1 > 0):
            raise ValueError("axial sigmoid slopes theta1 must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", t2)

    @classmethod
    def identity(cls, axis, r=DEFAULT_AXIAL_R):
        w = np.full(r, IDENTITY_EPS)
        w[0] = 1.0
        return cls(axis, w)

    @property
    def r(self):
        return len(self.weights)

    @property
    def n_params(self):
        return self.r

    def warp(self, c):
        c = np.asarray(c, dtype=float)
        out = self.weights[0] * c
        if self.r > 1:
            out = out + expit(self.theta1 * (c[..., None] - self.theta2)) @ self.weights[1:]
        return out

    def apply(self, s):
        """Warp the unit's axis of an (n, 2) spatial array."""
        out = np.array(s, dtype=float)
        out[:, self.axis] = self.warp(out[:, self.axis])
        return out

    def free_params(self):
        return softplus_inv(self.weights)

    def with_free(self, v):
        w = np.maximum(softplus(np.asarray(v, dtype=float)), np.finfo(float).tiny)
        return replace(self, weights=w)

    def param_names(self):
        return [f"w{i + 1}" for i in range(self.r)]

    def to_dict(self):
        return {
            "type": self.kind,
            "axis": AXIS_NAMES[self.axis],
            "weights": self.weights.tolist(),
            "theta1": self.theta1.tolist(),
            "theta2": self.theta2.tolist(),
        }


@dataclass(frozen=True, eq=False)
class RbfWarpUnit:
    """s + sum_k b_k exp(-|s - c_k|^2 / (2 radius^2)) (s - c_k).

    Weights live in (-bound, bound); enforce_bound=False lifts that for
    constructing deliberately folding units.
    """

    centers: np.ndarray
    radius: float
    weights: np.ndarray = None
    bound: float = None
    enforce_bound: bool = field(default=True, compare=False)

    kind = "rbf"

    def __post_init__(self):
        centers = np.atleast_2d(np.array(self.centers, dtype=float))
        if centers.shape[1] != 2:
            raise ValueError("RBF centers must be 2-D")
        if not self.radius > 0:
            raise ValueError(f"RBF radius must be positive, got {self.radius}")
        w = np.zeros(len(centers)) if self.weights is None else np.array(self.weights, dtype=float).ravel()
        if len(w) != len(centers):
            raise ValueError(f"{len(w)} weights for {len(centers)} centers")
        bound = safe_weight_bound(centers, self.radius) if self.bound is None else float(self.bound)
        if self.enforce_bound and not np.all(np.abs(w) < bound):
            raise ValueError(f"RBF weights must lie in (-{bound:.4g}, {bound:.4g})")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bound", bound)
        object.__setattr__(self, "radius", float(self.radius))

    @classmethod
    def on_grid(cls, k=DEFAULT_RBF_GRID, radius_factor=DEFAULT_RADIUS_FACTOR, weights=None):
        centers, radius = rbf_grid(k, radius_factor=radius_factor)
        return cls(centers, radius, weights)

    @property
    def n_params(self):
        return len(self.centers)

    def apply(self, s):
        s = np.asarray(s, dtype=float)
        d = s[:, None, :] - self.centers[None, :, :]
        g = np.exp(-(d**2).sum(axis=2) / (2 * self.radius**2))
        return s + np.einsum("nk,nkj->nj", g * self.weights, d)

    def free_params(self):
        return 2 * np.arctanh(self.weights / self.bound)

    def with_free(self, v):
        v = np.clip(np.asarray(v, dtype=float), -FREE_CLIP, FREE_CLIP)
        return replace(self, weights=self.bound * np.tanh(v / 2))

    def param_names(self):
        return [f"b{k + 1}" for k in range(self.n_params)]

    def to_dict(self):
        return {
            "type": self.kind,
            "centers": self.centers.tolist(),
            "radius": self.radius,
            "weights": self.weights.tolist(),
            "bound": self.bound,
        }


def unit_from_dict(d):
    """Rebuild a unit written by to_dict()."""
    if d["type"] == "axial":
        return AxialWarpUnit(AXES[d["axis"]], d["weights"], d.get("theta1"), d.get("theta2"))
    if d["type"] == "rbf":
        return RbfWarpUnit(d["centers"], d["radius"], d["weights"], d.get("bound"))
    raise ValueError(f"unknown warping unit type '{d['type']}'")


def axial_warp(u, c):
    return u.warp(c)


def rbf_warp(u, s):
    return u.apply(np.atleast_2d(s))


# ── Composition ─────────────────────────────────────────────────────────────

def _reference_space():
    ticks = np.linspace(-0.5, 0.5, REF_RESOLUTION)
    g1, g2 = np.meshgrid(ticks, ticks)
    return np.column_stack([g1.ravel(), g2.ravel()])


def _rescale(values, ref):
    """Affine map sending the range of ref onto [-0.5, 0.5] (per column)."""
    lo, hi = ref.min(axis=0), ref.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (values - lo) / span - 0.5, (ref - lo) / span - 0.5


@dataclass(frozen=True)
class WarpingMap:
    """f_s = f_L o ... o f_1 on space, f_t on time.

    With normalize set, every spatial layer's output is rescaled affinely
    to [-0.5, 0.5]^2 using the image of a fixed reference point set. The
    temporal unit is applied as is.
    """

    spatial_units: tuple = ()
    temporal_unit: AxialWarpUnit = None
    normalize: bool = True

    def __post_init__(self):
        units = tuple(self.spatial_units)
        for u in units:
            if isinstance(u, AxialWarpUnit) and u.axis == AXES["t"]:
                raise ValueError("spatial axial units act on s1 or s2")
        if self.temporal_unit is not None and self.temporal_unit.axis != AXES["t"]:
            raise ValueError("temporal unit must act on axis t")
        object.__setattr__(self, "spatial_units", units)

    @classmethod
    def identity(cls):
        return cls((), None)

    @property
    def is_identity(self):
        return not self.spatial_units and self.temporal_unit is None

    @property
    def units(self):
        units = list(self.spatial_units)
        if self.temporal_unit is not None:
            units.append(self.temporal_unit)
        return units

    def warp_space(self, s):
        out = np.atleast_2d(np.asarray(s, dtype=float))
        ref = _reference_space()
        for unit in self.spatial_units:
            out = unit.apply(out)
            if self.normalize:
                out, ref = _rescale(out, unit.apply(ref))
        return out

    def warp_time(self, t):
        t = np.asarray(t, dtype=float)
        if self.temporal_unit is None:
            return t
        return self.temporal_unit.warp(t)

    def warp(self, coords):
        """(n, 3) space-time coordinates to the warped domain."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        if self.is_identity:
            return coords.copy()
        return np.column_stack([self.warp_space(coords[:, :2]), self.warp_time(coords[:, 2])])

    # parameter packing

    @property
    def n_params(self):
        return sum(u.n_params for u in self.units)

    def free_params(self):
        if not self.units:
            return np.zeros(0)
        return np.concatenate([u.free_params() for u in self.units])

    def with_free(self, v):
        v = np.asarray(v, dtype=float)
        offset, spatial = 0, []
        for u in self.spatial_units:
            spatial.append(u.with_free(v[offset:offset + u.n_params]))
            offset += u.n_params
        temporal = self.temporal_unit
        if temporal is not None:
            temporal = temporal.with_free(v[offset:offset + temporal.n_params])
        return replace(self, spatial_units=tuple(spatial), temporal_unit=temporal)

    def param_names(self):
        names = []
        for i, u in enumerate(self.spatial_units):
            names += [f"spatial[{i}].{u.kind}.{p}" for p in u.param_names()]
        if self.temporal_unit is not None:
            names += [f"temporal.axial.{p}" for p in self.temporal_unit.param_names()]
        return names

    def to_dict(self):
        return {
            "spatial_units": [u.to_dict() for u in self.spatial_units],
            "temporal_unit": None if self.temporal_unit is None else self.temporal_unit.to_dict(),
            "normalize": self.normalize,
        }

    @classmethod
    def from_dict(cls, d):
        temporal = d.get("temporal_unit")
        return cls(
            tuple(unit_from_dict(u) for u in d.get("spatial_units", [])),
            None if temporal is None else unit_from_dict(temporal),
            d.get("normalize", True),
        )


def warp_space(m, s):
    return m.warp_space(s)


def warp_time(m, t):
    return m.warp_time(t)


# ── Diagnostics ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class InjectivityReport:
    min_det: float
    location: tuple

    @property
    def folded(self):
        return not self.min_det > 0


def spatial_jacobian(m, s, step=1e-6):
    """Central-difference Jacobians of f_s at (n, 2) points -> (n, 2, 2)."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    jac = np.empty((len(s), 2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = step
        jac[:, :, j] = (m.warp_space(s + e) - m.warp_space(s - e)) / (2 * step)
    return jac


def time_derivative(m, t, step=1e-6):
    t = np.asarray(t, dtype=float)
    return (m.warp_time(t + step) - m.warp_time(t - step)) / (2 * step)


def check_injectivity(m, grid_resolution, lo=-0.5, hi=0.5):
    """Minimum Jacobian determinant of f_s over a square grid."""
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be at least 2")
    ticks = np.linspace(lo, hi, grid_resolution)
    g1, g2 = np.meshgrid(ticks, ticks)
    s = np.column_stack([g1.ravel(), g2.ravel()])
    det = np.linalg.det(spatial_jacobian(m, s))
    i = int(np.argmin(det))
    return InjectivityReport(float(det[i]), (float(s[i, 0]), float(s[i, 1])))
