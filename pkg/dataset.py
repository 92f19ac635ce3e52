"""
Observation data model: space-time points, datasets, CSV ingestion and
train/validation splitting.

A Dataset holds n observations Z at space-time points (s1, s2, t) and an
optional n x q covariate matrix X (q = 0 gives a zero-mean model).
"""

import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from errors import DataError

LOGGER = logging.getLogger(__name__)

COORD_COLUMNS = ("s1", "s2", "t")
COVARIATE_PATTERN = re.compile(r"^x(\d+)$")
FLOAT_FORMAT = "%.17g"


# ── Types ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SpaceTimePoint:
    """A 2-D spatial coordinate plus a time coordinate."""

    s1: float
    s2: float
    t: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.s1, self.s2, self.t])):
            raise ValueError(f"non-finite coordinate in {self!r}")

    def as_array(self):
        return np.array([self.s1, self.s2, self.t], dtype=float)


@dataclass(frozen=True)
class DataSchema:
    """Column-name mapping for CSV ingestion.

    x=None picks up every column named x1, x2, ... in numeric order.
    """

    s1: str = "s1"
    s2: str = "s2"
    t: str = "t"
    z: str = "z"
    x: tuple = None
    delimiter: str = ","


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations z at coords (n x 3: s1, s2, t) with covariates x (n x q).

    z may be None for prediction targets.
    """

    coords: np.ndarray
    z: np.ndarray = None
    x: np.ndarray = None
    covariate_names: tuple = field(default=())

    def __post_init__(self):
        coords = _frozen(self.coords).reshape(-1, 3)
        n = coords.shape[0]
        if not np.all(np.isfinite(coords)):
            raise DataError("coordinates must be finite")
        x = np.zeros((n, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != n:
            raise DataError(f"covariate matrix has {x.shape[0]} rows, expected {n}")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"{len(names)} covariate names for {x.shape[1]} columns")
        z = None
        if self.z is not None:
            z = _frozen(self.z).ravel()
            if z.shape[0] != n:
                raise DataError(f"z has length {z.shape[0]}, expected {n}")
        if n > 1 and np.unique(coords, axis=0).shape[0] != n:
            raise DataError("duplicate (s1, s2, t) coordinates")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def q(self):
        return self.x.shape[1]

    @property
    def points(self):
        return [SpaceTimePoint(*row) for row in self.coords]

    def take(self, idx):
        """Subset of rows, in the order given by idx."""
        idx = np.asarray(idx, dtype=int)
        z = None if self.z is None else self.z[idx]
        return Dataset(self.coords[idx], z, self.x[idx], self.covariate_names)


@dataclass(frozen=True)
class CoordinateScaling:
    """Per-coordinate affine map of (s1, s2, t) onto [-0.5, 0.5]."""

    center: tuple
    span: tuple

    @classmethod
    def from_bounds(cls, lo, hi):
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        span = hi - lo
        span = np.where(span > 0, span, 1.0)
        return cls(tuple((lo + hi) / 2), tuple(span))

    @classmethod
    def fit(cls, coords):
        coords = np.asarray(coords, dtype=float)
        return cls.from_bounds(coords.min(axis=0), coords.max(axis=0))

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def apply(self, coords):
        return (np.asarray(coords, dtype=float) - np.array(self.center)) / np.array(self.span)

    def invert(self, coords):
        return np.asarray(coords, dtype=float) * np.array(self.span) + np.array(self.center)

    def to_dict(self):
        return {"center": list(self.center), "span": list(self.span)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["center"]), tuple(d["span"]))


# ── CSV I/O ─────────────────────────────────────────────────────────────────

def _numeric_column(frame, col):
    """Convert a string column to float, reporting the first bad cell."""
    values = pd.to_numeric(frame[col].str.strip(), errors="coerce").to_numpy(dtype=float)
    bad = ~np.isfinite(values)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raw = frame[col].iloc[i]
        raise DataError(f"column '{col}': non-numeric value '{raw}'", row=i + 2)
    return values


def _covariate_columns(columns, schema):
    if schema.x is not None:
        return list(schema.x)
    found = [(int(m.group(1)), c) for c in columns if (m := COVARIATE_PATTERN.match(c))]
    return [c for _, c in sorted(found)]


def load_dataset(path, schema=None, require_z=True):
    """Read a delimited text file with a header into a Dataset.

    Row numbers in error messages are file line numbers (header = line 1).
    """
    schema = schema or DataSchema()
    if not os.path.exists(path):
        raise DataError(f"{path} not found")
    try:
        frame = pd.read_csv(path, sep=schema.delimiter, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from None
    frame.columns = [c.strip() for c in frame.columns]

    wanted = [schema.s1, schema.s2, schema.t]
    if require_z or schema.z in frame.columns:
        wanted.append(schema.z)
    xcols = _covariate_columns(frame.columns, schema)
    for col in wanted + xcols:
        if col not in frame.columns:
            raise DataError(f"missing column '{col}' in {path}")

    coords = np.column_stack([_numeric_column(frame, c) for c in wanted[:3]])
    z = _numeric_column(frame, schema.z) if len(wanted) == 4 else None
    x = np.column_stack([_numeric_column(frame, c) for c in xcols]) if xcols else None

    dup = pd.DataFrame(coords).duplicated(keep="first").to_numpy()
    if dup.any():
        i = int(np.flatnonzero(dup)[0])
        first = int(np.flatnonzero((coords == coords[i]).all(axis=1))[0])
        raise DataError(f"duplicate coordinates {tuple(coords[i])} (first seen at row {first + 2})", row=i + 2)

    LOGGER.info("loaded %d rows (q=%d) from %s", len(coords), len(xcols), path)
    return Dataset(coords, z, x, tuple(xcols))


def load_targets(path, schema=None):
    """Prediction targets: like load_dataset, but z is optional."""
    return load_dataset(path, schema, require_z=False)


def save_dataset(d, path, delimiter=","):
    """Write a Dataset as CSV; finite doubles round-trip exactly."""
    frame = pd.DataFrame(d.coords, columns=list(COORD_COLUMNS))
    if d.z is not None:
        frame["z"] = d.z
    for j, name in enumerate(d.covariate_names):
        frame[name] = d.x[:, j]
    frame.to_csv(path, sep=delimiter, index=False, float_format=FLOAT_FORMAT)


# ── Splitting ───────────────────────────────────────────────────────────────

def split_train_validation(d, fraction, seed):
    """Uniform random disjoint partition; training size round(fraction * n).

    Both parts keep file order.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if d.n < 2:
        raise ValueError("need at least 2 rows to split")
    n_train = int(np.floor(fraction * d.n + 0.5))
    n_train = min(max(n_train, 1), d.n - 1)
    perm = np.random.default_rng(seed).permutation(d.n)
    train = np.sort(perm[:n_train])
    valid = np.sort(perm[n_train:])
    return d.take(train), d.take(valid)
