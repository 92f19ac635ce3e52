"""
Exact simulation on space-time grids and the repeated
simulate / split / fit / predict / score studies.

Usage:
    raw, summary = run_study(study_config(load_config("configs/study1_small.cfg")), "out/study1")
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
import zstandard
from joblib import Parallel, delayed
from scipy.linalg import cholesky
from scipy.sparse.linalg import eigsh
from scipy.spatial.distance import pdist
from scipy.stats import spearmanr
from tqdm import tqdm

from covariance import NonstationaryCovariance
from dataset import CoordinateScaling, Dataset, split_train_validation
from errors import NumericalError, SimulationError
from inference import FitConfig, ModelSpec, fit
from metrics import score_predictions
from prediction import predict
from warping import REF_RESOLUTION, REF_TIME_POINTS

LOGGER = logging.getLogger(__name__)

MAX_DENSE_N = 30000
SCORE_COLUMNS = ("rmspe", "crps", "interval_score")


# ── Study description ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class Candidate:
    """A fitted model plus the domain its prediction neighbors come from.

    Candidates naming the same model share one fit per repetition.
    """

    label: str
    model: ModelSpec
    neighbor_domain: str = "G"


@dataclass(frozen=True)
class StudyConfig:
    name: str = "study"
    nx: int = 51
    ny: int = 51
    nt: int = 10
    s_bounds: tuple = (-0.5, 0.5)
    t_bounds: tuple = (-0.5, 0.5)
    truth: NonstationaryCovariance = None
    candidates: tuple = ()
    train_fraction: float = 0.8
    m: int = 50
    repetitions: int = 30
    seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if min(self.nx, self.ny, self.nt) < 2:
            raise ValueError(f"grid sizes must be at least 2, got {self.nx}x{self.ny}x{self.nt}")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be at least 1, got {self.repetitions}")

    @property
    def n(self):
        return self.nx * self.ny * self.nt


def make_grid(cfg):
    """nx*ny*nt points; s1 varies fastest, then s2, then t."""
    s1 = np.linspace(*cfg.s_bounds, cfg.nx)
    s2 = np.linspace(*cfg.s_bounds, cfg.ny)
    t = np.linspace(*cfg.t_bounds, cfg.nt)
    tt, ss2, ss1 = np.meshgrid(t, s2, s1, indexing="ij")
    return np.column_stack([ss1.ravel(), ss2.ravel(), tt.ravel()])


def _min_eigenvalue(sigma):
    try:
        return float(eigsh(sigma, k=1, which="SA", return_eigenvectors=False)[0])
    except Exception:
        return None


def simulate_gp(c, pts, seed):
    """Z = L xi + tau eta with L L' the process covariance on pts."""
    coords = np.atleast_2d(np.asarray(pts, dtype=float))
    n = len(coords)
    if n > MAX_DENSE_N:
        raise SimulationError(f"dense simulation is limited to {MAX_DENSE_N} points, got {n}")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(n)
    eta = rng.standard_normal(n)
    if c.sigma2 == 0:
        y = np.zeros(n)
    else:
        sigma = c.matrix(coords, with_nugget=False)
        try:
            chol = cholesky(sigma, lower=True, overwrite_a=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise SimulationError("Cholesky of the simulation covariance failed",
                                  _min_eigenvalue(c.matrix(coords, with_nugget=False))) from None
        y = chol @ xi
    return y + np.sqrt(c.tau2) * eta


def derive_seed(master, rep):
    """Per-repetition seed, a fixed function of (master, rep)."""
    return int(np.random.SeedSequence([int(master), int(rep)]).generate_state(1)[0])


# ── Diagnostics ─────────────────────────────────────────────────────────────

def warp_recovery(true_cov, fitted_cov, scaling=None, resolution=REF_RESOLUTION, n_times=REF_TIME_POINTS):
    """Rank agreement of true and fitted warps.

    Spearman correlation between pairwise distances of a reference grid
    after the true and after the fitted spatial warp, and likewise for
    time. Both are invariant to the warped domains' scale.
    """
    scaling = scaling or CoordinateScaling.identity()
    ticks = np.linspace(-0.5, 0.5, resolution)
    g1, g2 = np.meshgrid(ticks, ticks)
    grid = np.column_stack([g1.ravel(), g2.ravel(), np.zeros(g1.size)])
    times = np.column_stack([np.zeros((n_times, 2)), np.linspace(-0.5, 0.5, n_times)])
    spatial, _ = spearmanr(
        pdist(true_cov.warp.warp_space(grid[:, :2])),
        pdist(fitted_cov.warp.warp_space(scaling.apply(grid)[:, :2])),
    )
    temporal, _ = spearmanr(
        pdist(true_cov.warp.warp_time(times[:, 2])[:, None]),
        pdist(fitted_cov.warp.warp_time(scaling.apply(times)[:, 2])[:, None]),
    )
    return {"warp_rank_spatial": float(spatial), "warp_rank_temporal": float(temporal)}


# ── Studies ─────────────────────────────────────────────────────────────────

def _score_row(result, train, valid, cand, cfg):
    pred = predict(result, None, train, valid, cand.neighbor_domain, cfg.m, noisy=True)
    sd = np.sqrt(np.maximum(pred.variances, np.finfo(float).tiny))
    row = score_predictions(pred.means, sd, valid.z)
    row["converged"] = bool(result.converged)
    if not result.covariance.warp.is_identity:
        row.update(warp_recovery(cfg.truth, result.covariance, result.scaling))
    return row


def run_repetition(cfg, rep):
    """One simulate / split / fit / predict / score cycle."""
    seed = derive_seed(cfg.seed, rep)
    pts = make_grid(cfg)
    data = Dataset(pts, simulate_gp(cfg.truth, pts, seed))
    train, valid = split_train_validation(data, cfg.train_fraction, seed)
    fit_cfg = replace(cfg.fit, m=cfg.m, seed=seed, threads=1)

    fits, rows = {}, []
    for cand in cfg.candidates:
        key = cand.model.name
        if key not in fits:
            try:
                fits[key] = fit(train, cand.model, fit_cfg)
            except NumericalError as exc:
                LOGGER.warning("repetition %d, %s: %s", rep, key, exc)
                fits[key] = exc
        row = {"repetition": rep, "seed": seed, "candidate": cand.label, "model": key,
               "neighbor_domain": cand.neighbor_domain}
        result = fits[key]
        if not isinstance(result, Exception):
            try:
                row.update(_score_row(result, train, valid, cand, cfg))
            except NumericalError as exc:
                LOGGER.warning("repetition %d, %s: prediction failed: %s", rep, cand.label, exc)
                result = exc
        if isinstance(result, Exception):
            row.update({c: float("nan") for c in SCORE_COLUMNS})
            row.update(converged=False, error=str(result))
        rows.append(row)
    LOGGER.info("repetition %d finished", rep)
    return {"repetition": rep, "seed": seed, "rows": rows}


def checkpoint_path(out_dir, rep):
    return os.path.join(out_dir, "checkpoints", f"rep_{rep:03d}.json.zst")


def write_checkpoint(path, record):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    raw = json.dumps(record, indent=2).encode("utf-8")
    with open(path, "wb") as f:
        f.write(zstandard.ZstdCompressor().compress(raw))


def read_checkpoint(path):
    with open(path, "rb") as f:
        raw = zstandard.ZstdDecompressor().decompress(f.read())
    return json.loads(raw)


def summarize(raw):
    """Mean and standard error of each score per candidate, in first-seen order."""
    order = list(dict.fromkeys(raw["candidate"]))
    rows = []
    for label in order:
        part = raw[raw["candidate"] == label]
        row = {"candidate": label, "repetitions": len(part),
               "non_converged": int((~part["converged"].astype(bool)).sum())}
        for col in SCORE_COLUMNS:
            values = part[col].dropna().to_numpy(dtype=float)
            row[col] = float(values.mean()) if len(values) else float("nan")
            row[f"{col}_se"] = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
        rows.append(row)
    return pd.DataFrame(rows)


def run_study(cfg, out_dir=None, threads=1, resume=True, progress=True):
    """Run every repetition (resuming from checkpoints) and aggregate.

    Returns (raw, summary) tables; with out_dir both are also written as
    raw_scores.csv and summary.csv.
    """
    records = {}
    if out_dir and resume:
        for rep in range(cfg.repetitions):
            path = checkpoint_path(out_dir, rep)
            if os.path.exists(path):
                records[rep] = read_checkpoint(path)
        if records:
            LOGGER.info("resuming %s: %d of %d repetitions done", cfg.name, len(records), cfg.repetitions)
    pending = [rep for rep in range(cfg.repetitions) if rep not in records]

    jobs = Parallel(n_jobs=threads, return_as="generator")(delayed(run_repetition)(cfg, rep) for rep in pending)
    for record in tqdm(jobs, total=len(pending), desc=cfg.name, disable=not progress):
        records[record["repetition"]] = record
        if out_dir:
            write_checkpoint(checkpoint_path(out_dir, record["repetition"]), record)

    raw = pd.DataFrame([row for rep in sorted(records) for row in records[rep]["rows"]])
    summary = summarize(raw)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        raw.to_csv(os.path.join(out_dir, "raw_scores.csv"), index=False, float_format="%.17g")
        summary.to_csv(os.path.join(out_dir, "summary.csv"), index=False, float_format="%.17g")
    return raw, summary
