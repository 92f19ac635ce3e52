"""
Stationary kernels on the warped domain and the nonstationary covariance
they induce on the original domain:

    C_G(s, u; t, v) = C_D(f_s(s) - f_s(u); f_t(t) - f_t(v))

The nugget tau2 belongs to the observation equation and is only added to
diagonals of observed-data covariance matrices.
"""

from dataclasses import dataclass, replace

import numpy as np

from warping import WarpingMap, spatial_jacobian, time_derivative


def _unit_vectors(v, norm):
    """v / |v| with 0 where the norm vanishes."""
    out = np.zeros_like(v)
    np.divide(v, norm[..., None], out=out, where=norm[..., None] > 0)
    return out


# ── Kernels ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SeparableExpKernel:
    """sigma2 * exp(-a_s |h|) * exp(-a_t |w|)."""

    sigma2: float
    a_s: float
    a_t: float

    family = "separable"

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be non-negative, got {self.sigma2}")
        if not (self.a_s > 0 and self.a_t > 0):
            raise ValueError(f"decay parameters must be positive, got a_s={self.a_s}, a_t={self.a_t}")

    def evaluate(self, h, w):
        h, w = np.asarray(h, dtype=float), np.asarray(w, dtype=float)
        r = np.sqrt((h**2).sum(axis=-1))
        return self.sigma2 * np.exp(-self.a_s * r - self.a_t * np.abs(w))

    def spatial_factor(self, h):
        r = np.sqrt((np.asarray(h, dtype=float) ** 2).sum(axis=-1))
        return np.exp(-self.a_s * r)

    def temporal_factor(self, w):
        return np.exp(-self.a_t * np.abs(np.asarray(w, dtype=float)))

    def grad_free(self, h, w, values):
        """Derivatives w.r.t. (log sigma2, log a_s, log a_t), stacked last."""
        r = np.sqrt((h**2).sum(axis=-1))
        return np.stack([values, -self.a_s * r * values, -self.a_t * np.abs(w) * values], axis=-1)

    def grad_disp(self, h, w, values):
        """Derivatives w.r.t. the displacement (h, w); subgradient 0 at 0."""
        r = np.sqrt((h**2).sum(axis=-1))
        dh = -self.a_s * values[..., None] * _unit_vectors(h, r)
        dw = -self.a_t * values * np.sign(w)
        return dh, dw

    def free_params(self):
        return np.log([self.sigma2, self.a_s, self.a_t])

    def with_free(self, v):
        sigma2, a_s, a_t = np.exp(v)
        return SeparableExpKernel(sigma2, a_s, a_t)

    def param_names(self):
        return ["log_sigma2", "log_a_s", "log_a_t"]

    def to_dict(self):
        return {"family": self.family, "sigma2": self.sigma2, "a_s": self.a_s, "a_t": self.a_t}


@dataclass(frozen=True, eq=False)
class AsymmetricExpKernel:
    """sigma2 * exp(-a |h - v w|): fields advected with velocity v."""

    sigma2: float
    a: float
    velocity: tuple = (0.0, 0.0)

    family = "asymmetric"

    def __post_init__(self):
        v = np.array(self.velocity, dtype=float).ravel()
        if not self.sigma2 >= 0:
            raise ValueError(f"sigma2 must be non-negative, got {self.sigma2}")
        if not self.a > 0:
            raise ValueError(f"decay a must be positive, got {self.a}")
        if v.shape != (2,) or not np.all(np.isfinite(v)):
            raise ValueError(f"velocity must be a finite 2-vector, got {self.velocity}")
        object.__setattr__(self, "velocity", v)

    def _advected(self, h, w):
        u = np.asarray(h, dtype=float) - self.velocity * np.asarray(w, dtype=float)[..., None]
        return u, np.sqrt((u**2).sum(axis=-1))

    def evaluate(self, h, w):
        _, rho = self._advected(h, w)
        return self.sigma2 * np.exp(-self.a * rho)

    def grad_free(self, h, w, values):
        """Derivatives w.r.t. (log sigma2, log a, v1, v2)."""
        u, rho = self._advected(h, w)
        dv = self.a * values[..., None] * w[..., None] * _unit_vectors(u, rho)
        return np.concatenate([values[..., None], (-self.a * rho * values)[..., None], dv], axis=-1)

    def grad_disp(self, h, w, values):
        u, rho = self._advected(h, w)
        unit = _unit_vectors(u, rho)
        dh = -self.a * values[..., None] * unit
        dw = self.a * values * (unit @ self.velocity)
        return dh, dw

    def free_params(self):
        return np.concatenate([np.log([self.sigma2, self.a]), self.velocity])

    def with_free(self, v):
        return AsymmetricExpKernel(float(np.exp(v[0])), float(np.exp(v[1])), tuple(v[2:4]))

    def param_names(self):
        return ["log_sigma2", "log_a", "v1", "v2"]

    def to_dict(self):
        return {"family": self.family, "sigma2": self.sigma2, "a": self.a, "velocity": self.velocity.tolist()}


KERNELS = {"separable": SeparableExpKernel, "asymmetric": AsymmetricExpKernel}


def kernel_from_dict(d):
    d = dict(d)
    family = d.pop("family")
    if family not in KERNELS:
        raise ValueError(f"unknown kernel family '{family}'")
    return KERNELS[family](**d)


def kernel_eval(k, h, w):
    return k.evaluate(h, w)


# ── Nonstationary covariance ────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class NonstationaryCovariance:
    """A stationary kernel placed on the domain warped by `warp`, plus nugget."""

    warp: WarpingMap
    kernel: object
    tau2: float = 0.0

    def __post_init__(self):
        if not self.tau2 >= 0:
            raise ValueError(f"nugget tau2 must be non-negative, got {self.tau2}")

    @property
    def sigma2(self):
        return self.kernel.sigma2

    def warped(self, coords):
        return self.warp.warp(coords)

    def cross_warped(self, wa, wb):
        """Process covariance between already-warped point sets."""
        d = wa[:, None, :] - wb[None, :, :]
        return self.kernel.evaluate(d[..., :2], d[..., 2])

    def cross(self, a, b):
        return self.cross_warped(self.warped(a), self.warped(b))

    def matrix(self, coords, with_nugget=True):
        w = self.warped(coords)
        k = self.cross_warped(w, w)
        k = (k + k.T) / 2
        if with_nugget:
            k[np.diag_indices_from(k)] += self.tau2
        return k

    # parameter packing: kernel, log tau2, warping

    def free_params(self):
        with np.errstate(divide="ignore"):
            log_tau2 = np.log(self.tau2)
        return np.concatenate([self.kernel.free_params(), [log_tau2], self.warp.free_params()])

    def with_free(self, v):
        v = np.asarray(v, dtype=float)
        pk = len(self.kernel.param_names())
        return NonstationaryCovariance(
            self.warp.with_free(v[pk + 1:]),
            self.kernel.with_free(v[:pk]),
            float(np.exp(v[pk])),
        )

    def param_names(self):
        return (
            [f"kernel.{p}" for p in self.kernel.param_names()]
            + ["nugget.log_tau2"]
            + self.warp.param_names()
        )

    @property
    def n_kernel_params(self):
        return len(self.kernel.param_names())

    def natural(self):
        return {"kernel": self.kernel.to_dict(), "tau2": self.tau2, "warp": self.warp.to_dict()}

    @classmethod
    def from_natural(cls, d):
        return cls(WarpingMap.from_dict(d["warp"]), kernel_from_dict(d["kernel"]), d["tau2"])

    def with_warp(self, warp):
        return replace(self, warp=warp)


def _as_coords(p):
    return p.as_array() if hasattr(p, "as_array") else np.asarray(p, dtype=float)


def cov_eval(c, p, q):
    """Process covariance between two SpaceTimePoints (no nugget)."""
    return float(c.cross(_as_coords(p)[None, :], _as_coords(q)[None, :])[0, 0])


def cov_matrix(c, pts, with_nugget=True):
    coords = np.array([_as_coords(p) for p in pts]) if isinstance(pts, (list, tuple)) else np.asarray(pts)
    if len(coords) == 0:
        raise ValueError("cov_matrix needs at least one point")
    return c.matrix(coords, with_nugget)


def velocity_field(c, coords):
    """Velocity on the original domain induced by an advecting kernel.

    Particles keep f_s(s) - v f_t(t) fixed, so ds/dt = J_s(s)^-1 v f_t'(t).
    """
    if c.kernel.family != "asymmetric":
        raise ValueError("velocity field needs the asymmetric kernel")
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    jac = spatial_jacobian(c.warp, coords[:, :2])
    rate = time_derivative(c.warp, coords[:, 2])
    v = np.broadcast_to(c.kernel.velocity, (len(coords), 2))
    return np.linalg.solve(jac, v[..., None])[..., 0] * rate[:, None]
