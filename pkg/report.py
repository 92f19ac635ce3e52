"""
Plot-ready tables: warping panels, temporal warp, induced velocity field
and prediction / standard-error maps. Figures themselves are left to the
reader's plotting tool (see README).
"""

import numpy as np
import pandas as pd

from covariance import velocity_field
from dataset import FLOAT_FORMAT, CoordinateScaling


def _bounds(scaling):
    center, span = np.array(scaling.center), np.array(scaling.span)
    return center - span / 2, center + span / 2


def _spatial_grid(scaling, resolution):
    lo, hi = _bounds(scaling)
    g1, g2 = np.meshgrid(np.linspace(lo[0], hi[0], resolution), np.linspace(lo[1], hi[1], resolution))
    return np.column_stack([g1.ravel(), g2.ravel()])


def warped_grid_table(cov, scaling=None, resolution=21):
    """Original grid (s1, s2), its model-unit image (u1, u2) and f_s (w1, w2)."""
    scaling = scaling or CoordinateScaling.identity()
    s = _spatial_grid(scaling, resolution)
    u = scaling.apply(np.column_stack([s, np.zeros(len(s))]))[:, :2]
    w = cov.warp.warp_space(u)
    return pd.DataFrame({"s1": s[:, 0], "s2": s[:, 1], "u1": u[:, 0], "u2": u[:, 1], "w1": w[:, 0], "w2": w[:, 1]})


def warped_time_table(cov, scaling=None, n=101):
    scaling = scaling or CoordinateScaling.identity()
    lo, hi = _bounds(scaling)
    t = np.linspace(lo[2], hi[2], n)
    u = scaling.apply(np.column_stack([np.zeros((n, 2)), t]))[:, 2]
    return pd.DataFrame({"t": t, "u": u, "f_t": cov.warp.warp_time(u)})


def velocity_field_table(cov, scaling=None, resolution=11, t=None):
    """Velocity induced on the original domain at time t.

    v1, v2 are in model units; v1_orig, v2_orig in original space units
    per original time unit.
    """
    scaling = scaling or CoordinateScaling.identity()
    s = _spatial_grid(scaling, resolution)
    t = scaling.center[2] if t is None else t
    coords = np.column_stack([s, np.full(len(s), t)])
    v = velocity_field(cov, scaling.apply(coords))
    span = np.array(scaling.span)
    v_orig = v * span[:2] / span[2]
    return pd.DataFrame({"s1": s[:, 0], "s2": s[:, 1], "t": t, "v1": v[:, 0], "v2": v[:, 1],
                         "v1_orig": v_orig[:, 0], "v2_orig": v_orig[:, 1]})


def prediction_table(predictions):
    coords = predictions.coords
    n_nb = 0 if predictions.neighbors is None else predictions.neighbors.shape[1]
    return pd.DataFrame({
        "s1": coords[:, 0], "s2": coords[:, 1], "t": coords[:, 2],
        "mean": predictions.means, "sd": predictions.sd, "n_neighbors": n_nb,
    })


def write_table(frame, path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
