#!/usr/bin/env python3
"""
stwarp — nonstationary spatio-temporal Gaussian processes through injective
warpings of space and time, fitted by Vecchia-approximated REML.

Usage:
    python stwarp.py simulate configs/study1_small.cfg -o out/sim
    python stwarp.py fit out/sim/train.csv configs/nonstationary.cfg -o out/fit
    python stwarp.py predict out/fit/fit.json out/sim/train.csv targets.csv -o out/pred
    python stwarp.py validate out/fit/fit.json out/sim/train.csv out/sim/validation.csv -o out/val
    python stwarp.py study configs/study1_small.cfg -o out/study1
    python stwarp.py report out/fit/fit.json -o out/report

Exit codes: 0 success, 2 usage/config/data error, 3 fit did not converge
(result still written), 4 numerical failure.
"""

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace

from config import data_schema, fit_config, load_config, model_spec, study_config
from dataset import Dataset, load_dataset, load_targets, save_dataset, split_train_validation
from errors import ConfigError, DataError, NumericalError, StwarpError
from inference import FitConfig, fit, load_fit
from metrics import score_predictions
from prediction import predict
from report import prediction_table, velocity_field_table, warped_grid_table, warped_time_table, write_table
from simulation import make_grid, run_study, simulate_gp

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERICAL = 4

QUIET = False


# ── ANSI Formatting ─────────────────────────────────────────────────────────

BOLD = "\033[1m"
DIM = "\033[2m"
RESET = "\033[0m"
RED = "\033[31m"
GREEN = "\033[32m"
YELLOW = "\033[33m"
CYAN = "\033[36m"


def key(s):
    """Format a name/value key."""
    return f"{YELLOW}{BOLD}{s}{RESET}"


def header(s):
    """Format a section header."""
    return f"{CYAN}{BOLD}{s}{RESET}"


def success(s):
    """Format a finished step."""
    return f"{GREEN}{s}{RESET}"


def error(s):
    """Format an error or a failed check."""
    return f"{RED}{s}{RESET}"


def dim(s):
    """Format secondary text such as file paths."""
    return f"{DIM}{s}{RESET}"


def bold(s):
    """Format emphasized text."""
    return f"{BOLD}{s}{RESET}"


def say(*parts):
    if not QUIET:
        print(*parts)


def banner(title):
    say(f"{CYAN}{BOLD}{'─' * 40}{RESET}")
    say(header(title))
    say(f"{CYAN}{BOLD}{'─' * 40}{RESET}")


# ── Helpers ─────────────────────────────────────────────────────────────────

def prepare_output(out_dir, config_path=None):
    os.makedirs(out_dir, exist_ok=True)
    if config_path:
        shutil.copyfile(config_path, os.path.join(out_dir, "config.cfg"))


def apply_overrides(fit_cfg, args):
    """Command-line flags win over config values."""
    changes = {
        "seed": args.seed,
        "threads": args.threads,
        "m": args.m,
        "time_scale": args.time_scale,
        "neighbor_domain": args.neighbor_domain,
        "order": args.order,
    }
    return replace(fit_cfg, **{k: v for k, v in changes.items() if v is not None})


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)


def print_scores(scores):
    for name in ("rmspe", "crps", "interval_score"):
        say(f"  {key(name):<28} {scores[name]:.6f}")


# ── Commands ────────────────────────────────────────────────────────────────

def cmd_simulate(args):
    cfg = load_config(args.config)
    study = study_config(cfg)
    seed = study.seed if args.seed is None else args.seed
    prepare_output(args.output, args.config)
    banner(f"Simulate {study.name}")

    say(f"[1/2] Simulating {study.nx}x{study.ny}x{study.nt} grid (seed {seed})...")
    pts = make_grid(study)
    data = Dataset(pts, simulate_gp(study.truth, pts, seed))
    save_dataset(data, os.path.join(args.output, "data.csv"))
    write_json(os.path.join(args.output, "truth.json"), study.truth.natural())
    say(f"  {data.n:,} points")

    say(f"[2/2] Splitting {study.train_fraction:.0%} / {1 - study.train_fraction:.0%}...")
    train, valid = split_train_validation(data, study.train_fraction, seed)
    save_dataset(train, os.path.join(args.output, "train.csv"))
    save_dataset(valid, os.path.join(args.output, "validation.csv"))
    say(f"  train {train.n:,}, validation {valid.n:,}")
    say(success(f"\nDone! Wrote {args.output}"))
    return EXIT_OK


def cmd_fit(args):
    cfg = load_config(args.config)
    spec = model_spec(cfg, args.model)
    fit_cfg = apply_overrides(fit_config(cfg), args)
    prepare_output(args.output, args.config)
    banner(f"Fit {spec.name}")

    say("[1/3] Loading data...")
    data = load_dataset(args.data, data_schema(cfg))
    say(f"  {data.n:,} rows, {data.q} covariates")

    say(f"[2/3] Fitting ({spec.family}, m={fit_cfg.m}, {len(spec.warp.units)} warping units)...")
    result = fit(data, spec, fit_cfg)
    result.save(os.path.join(args.output, "fit.json"))
    say(f"  -REML {-result.loglik:.6f} after {result.n_iter} iterations")

    say("[3/3] Writing warping tables...")
    write_table(warped_grid_table(result.covariance, result.scaling), os.path.join(args.output, "warped_grid.csv"))
    write_table(warped_time_table(result.covariance, result.scaling), os.path.join(args.output, "warped_time.csv"))

    if not result.converged:
        say(error(f"\nOptimizer did not converge: {result.message}"))
        return EXIT_NOT_CONVERGED
    say(success(f"\nDone! Wrote {args.output}"))
    return EXIT_OK


def _predict_common(args, targets_loader):
    result = load_fit(args.fit)
    cfg = load_config(args.config) if args.config else None
    schema = data_schema(cfg) if cfg else None
    fit_cfg = FitConfig(**{k: v for k, v in result.config.get("fit", {}).items()
                           if k in FitConfig.__dataclass_fields__})
    fit_cfg = apply_overrides(fit_cfg, args)
    prepare_output(args.output, args.config)

    say("[1/3] Loading data and targets...")
    data = load_dataset(args.data, schema)
    targets = targets_loader(args.targets, schema)
    if data.covariate_names != result.covariate_names:
        raise DataError(f"data covariates {data.covariate_names} do not match the fit's {result.covariate_names}")
    say(f"  {data.n:,} observations, {targets.n:,} targets")
    return result, data, targets, fit_cfg


def cmd_predict(args):
    banner("Predict")
    result, data, targets, fit_cfg = _predict_common(args, load_targets)
    say(f"[2/3] Kriging (m={fit_cfg.m}, neighbors on {fit_cfg.neighbor_domain})...")
    preds = predict(result, None, data, targets, fit_cfg.neighbor_domain, fit_cfg.m,
                    noisy=args.predict_noisy, threads=fit_cfg.threads)
    say("[3/3] Writing predictions...")
    write_table(prediction_table(preds), os.path.join(args.output, "predictions.csv"))
    say(success(f"\nDone! Wrote {args.output}"))
    return EXIT_OK


def cmd_validate(args):
    banner("Validate")
    result, data, targets, fit_cfg = _predict_common(args, load_dataset)
    say(f"[2/3] Kriging (m={fit_cfg.m}, neighbors on {fit_cfg.neighbor_domain})...")
    preds = predict(result, None, data, targets, fit_cfg.neighbor_domain, fit_cfg.m,
                    noisy=not args.noiseless, threads=fit_cfg.threads)
    say("[3/3] Scoring...")
    scores = score_predictions(preds.means, preds.sd, targets.z)
    write_table(prediction_table(preds), os.path.join(args.output, "predictions.csv"))
    write_json(os.path.join(args.output, "scores.json"), scores)
    write_table(warped_grid_table(result.covariance, result.scaling), os.path.join(args.output, "warped_grid.csv"))
    print_scores(scores)
    say(success(f"\nDone! Wrote {args.output}"))
    return EXIT_OK


def cmd_study(args):
    cfg = load_config(args.config)
    study = study_config(cfg)
    overrides = apply_overrides(study.fit, args)
    study = replace(study, fit=overrides, m=overrides.m, seed=study.seed if args.seed is None else args.seed)
    prepare_output(args.output, args.config)
    banner(f"Study {study.name}")
    say(f"{study.repetitions} repetitions of {study.nx}x{study.ny}x{study.nt}, "
        f"{len(study.candidates)} candidates, m={study.m}")

    raw, summary = run_study(study, args.output, threads=args.threads or 1, resume=not args.no_resume,
                             progress=not QUIET)
    say()
    say(f"  {bold('Model'):<52} {bold('RMSPE'):>18} {bold('CRPS'):>18}")
    for _, row in summary.iterrows():
        flag = error(f" ({row['non_converged']} not converged)") if row["non_converged"] else ""
        say(f"  {row['candidate']:<44} {row['rmspe']:>10.4f} {row['crps']:>10.4f}{flag}")
    say(success(f"\nDone! Wrote {args.output}"))
    return EXIT_OK


def cmd_report(args):
    result = load_fit(args.fit)
    prepare_output(args.output)
    banner("Report")
    cov = result.covariance
    write_table(warped_grid_table(cov, result.scaling, args.resolution), os.path.join(args.output, "warped_grid.csv"))
    write_table(warped_time_table(cov, result.scaling), os.path.join(args.output, "warped_time.csv"))
    say(f"  {key('warped_grid.csv')}  {key('warped_time.csv')}")
    if cov.kernel.family == "asymmetric":
        table = velocity_field_table(cov, result.scaling, args.resolution, args.time)
        write_table(table, os.path.join(args.output, "velocity_field.csv"))
        say(f"  {key('velocity_field.csv')}")
    say(success(f"\nDone! Wrote {args.output}"))
    return EXIT_OK


def cmd_truth_report(args):
    """report --truth: tables for a simulation truth instead of a fit."""
    cfg = load_config(args.truth)
    cov = study_config(cfg).truth
    prepare_output(args.output, args.truth)
    banner("Report (truth)")
    write_table(warped_grid_table(cov, None, args.resolution), os.path.join(args.output, "warped_grid.csv"))
    write_table(warped_time_table(cov), os.path.join(args.output, "warped_time.csv"))
    if cov.kernel.family == "asymmetric":
        write_table(velocity_field_table(cov, None, args.resolution, args.time),
                    os.path.join(args.output, "velocity_field.csv"))
    say(success(f"\nDone! Wrote {args.output}"))
    return EXIT_OK


# ── Main ────────────────────────────────────────────────────────────────────

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--output", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--m", type=int, help="number of Vecchia neighbors")
    common.add_argument("--time-scale", type=float)
    common.add_argument("--neighbor-domain", choices=("G", "D"))
    common.add_argument("--order", choices=("maxmin", "random", "input"))
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="stwarp", description=__doc__.split("\n\n")[0].strip(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a study grid from its truth model")
    p.add_argument("config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit a model to a CSV dataset")
    p.add_argument("data")
    p.add_argument("config")
    p.add_argument("--model", help="fit [model.NAME] instead of [model]")
    p.set_defaults(func=cmd_fit)

    for name, func, help_text in (("predict", cmd_predict, "krige at target points"),
                                  ("validate", cmd_validate, "krige and score against held-out z")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("fit")
        p.add_argument("data")
        p.add_argument("targets")
        p.add_argument("--config", help="config with a [data] section for column names")
        if name == "predict":
            p.add_argument("--predict-noisy", action="store_true", help="add the nugget to the variance")
        else:
            p.add_argument("--noiseless", action="store_true", help="score the noiseless process variance")
        p.set_defaults(func=func)

    p = sub.add_parser("study", parents=[common], help="run a simulation study")
    p.add_argument("config")
    p.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("report", parents=[common], help="plot-ready tables for a fit")
    p.add_argument("fit", nargs="?")
    p.add_argument("--truth", help="study config; report its truth model instead of a fit")
    p.add_argument("--resolution", type=int, default=21)
    p.add_argument("--time", type=float, help="time at which to evaluate the velocity field")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    global QUIET
    parser = build_parser()
    args = parser.parse_args(argv)
    QUIET = args.quiet
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    func = args.func
    if args.command == "report":
        if args.truth:
            func = cmd_truth_report
        elif not args.fit:
            parser.error("report needs a fit file or --truth")

    try:
        return func(args)
    except (ConfigError, DataError) as exc:
        print(error(f"Error: {exc}"), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(error(f"Numerical failure: {exc}"), file=sys.stderr)
        return EXIT_NUMERICAL
    except (StwarpError, ValueError) as exc:
        print(error(f"Error: {exc}"), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
