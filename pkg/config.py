"""
Run configuration: one INI-style .cfg file per run.

Sections:
    [model] / [model.NAME]   kernel family, starting values, warping units, frozen groups
    [unit.NAME]              one warping unit (type = axial | rbf)
    [vecchia]                m, order, neighbor_domain, time_scale
    [fit]                    optimizer settings
    [data]                   CSV column names
    [study]                  grid, truth model, repetitions
    [candidate.NAME]         a fitted model + prediction neighbor domain for a study

Every error names the offending key and its line.
"""

import configparser
import os
import re
from dataclasses import dataclass, field

from covariance import AsymmetricExpKernel, NonstationaryCovariance, SeparableExpKernel
from dataset import DataSchema
from errors import ConfigError
from inference import FitConfig, ModelSpec
from simulation import Candidate, StudyConfig
from warping import AXES, DEFAULT_AXIAL_R, DEFAULT_RADIUS_FACTOR, DEFAULT_RBF_GRID, AxialWarpUnit, RbfWarpUnit, \
    WarpingMap, rbf_grid, safe_weight_bound

SECTION_KEYS = {
    "model": {"family", "sigma2", "a_s", "a_t", "a", "velocity", "tau2", "spatial", "temporal", "normalize", "frozen"},
    "unit": {"type", "axis", "r", "weights", "theta1", "theta2", "grid", "radius_factor", "relative"},
    "vecchia": {"m", "order", "neighbor_domain", "time_scale", "batch_size"},
    "fit": {"optimizer", "max_iter", "gtol", "ftol", "objective", "gradient", "refit_on_warped", "seed", "threads",
            "scale_coords", "predict_noisy"},
    "data": {"s1", "s2", "t", "z", "x", "delimiter", "validation_fraction"},
    "study": {"name", "nx", "ny", "nt", "s_lo", "s_hi", "t_lo", "t_hi", "train_fraction", "repetitions", "seed",
              "truth"},
    "candidate": {"label", "model", "neighbor_domain"},
}
NAMED = ("model", "unit", "candidate")
BOOLEANS = {"yes": True, "true": True, "on": True, "1": True, "no": False, "false": False, "off": False, "0": False}

SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
KEY_RE = re.compile(r"^\s*([^#;\s\[][^=:]*?)\s*[=:]")


@dataclass
class RunConfig:
    path: str
    text: str
    parser: configparser.ConfigParser
    lines: dict = field(default_factory=dict)

    def has(self, section):
        return self.parser.has_section(section)

    def get(self, section, key, default=None):
        if not self.has(section) or not self.parser.has_option(section, key):
            return default
        return self.parser.get(section, key).strip()

    def line(self, section, key=None):
        return self.lines.get((section, key))

    def named(self, kind):
        """NAMEs of every [kind.NAME] section, in file order."""
        prefix = kind + "."
        return [s[len(prefix):] for s in self.parser.sections() if s.startswith(prefix)]

    def fail(self, section, key, message):
        where = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{where}: {message}", self.line(section, key))


# ── Loading ─────────────────────────────────────────────────────────────────

def _scan_lines(text):
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        m = SECTION_RE.match(raw)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), no)
            continue
        m = KEY_RE.match(raw)
        if m and section is not None and not raw[:1].isspace():
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def _section_kind(section):
    kind, _, name = section.partition(".")
    if kind in NAMED and (name or kind == "model"):
        return kind
    if kind in SECTION_KEYS and not name:
        return kind
    return None


def parse_config(text, path="<string>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("entry before any [section] header", exc.lineno) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigError(exc.message.splitlines()[0], exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"cannot parse {line.strip()}", lineno) from None
    cfg = RunConfig(path, text, parser, _scan_lines(text))

    for section in parser.sections():
        kind = _section_kind(section)
        if kind is None:
            raise ConfigError(f"unknown section [{section}]", cfg.line(section))
        for key in parser.options(section):
            if key not in SECTION_KEYS[kind]:
                raise cfg.fail(section, key, "unknown key")
    return cfg


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), path)


# ── Typed values ────────────────────────────────────────────────────────────

def _number(cfg, section, key, default, kind=float):
    raw = cfg.get(section, key)
    if raw is None:
        return default
    try:
        return kind(raw)
    except ValueError:
        raise cfg.fail(section, key, f"expected {'an integer' if kind is int else 'a number'}, got '{raw}'") from None


def _number_or_auto(cfg, section, key):
    raw = cfg.get(section, key)
    if raw is None or raw.lower() == "auto":
        return "auto"
    return _number(cfg, section, key, None)


def _flag(cfg, section, key, default):
    raw = cfg.get(section, key)
    if raw is None:
        return default
    if raw.lower() not in BOOLEANS:
        raise cfg.fail(section, key, f"expected yes/no, got '{raw}'")
    return BOOLEANS[raw.lower()]


def _choice(cfg, section, key, default, choices):
    raw = cfg.get(section, key, default)
    if raw not in choices:
        raise cfg.fail(section, key, f"must be one of {', '.join(choices)}, got '{raw}'")
    return raw


def _names(cfg, section, key):
    raw = cfg.get(section, key, "")
    return [p.strip() for p in raw.split(",") if p.strip()]


def _floats(cfg, section, key):
    raw = cfg.get(section, key)
    if raw is None:
        return None
    try:
        return [float(p) for p in raw.split(",") if p.strip()]
    except ValueError:
        raise cfg.fail(section, key, f"expected a comma-separated list of numbers, got '{raw}'") from None


# ── Builders ────────────────────────────────────────────────────────────────

def warp_unit(cfg, name):
    """Build the unit described by [unit.NAME]."""
    section = f"unit.{name}"
    if not cfg.has(section):
        raise ConfigError(f"warping unit '{name}' has no [{section}] section")
    kind = _choice(cfg, section, "type", None, ("axial", "rbf"))
    try:
        if kind == "axial":
            axis = _choice(cfg, section, "axis", None, tuple(AXES))
            r = _number(cfg, section, "r", DEFAULT_AXIAL_R, int)
            weights = _floats(cfg, section, "weights")
            if weights is None:
                return AxialWarpUnit.identity(AXES[axis], r)
            if len(weights) != r:
                raise cfg.fail(section, "weights", f"expected {r} weights, got {len(weights)}")
            return AxialWarpUnit(AXES[axis], weights, _floats(cfg, section, "theta1"), _floats(cfg, section, "theta2"))

        k = _number(cfg, section, "grid", DEFAULT_RBF_GRID, int)
        centers, radius = rbf_grid(k, radius_factor=_number(cfg, section, "radius_factor", DEFAULT_RADIUS_FACTOR))
        weights = _floats(cfg, section, "weights")
        if weights is not None and len(weights) != len(centers):
            raise cfg.fail(section, "weights", f"expected {len(centers)} weights, got {len(weights)}")
        if weights is not None and _flag(cfg, section, "relative", False):
            weights = [w * safe_weight_bound(centers, radius) for w in weights]
        return RbfWarpUnit(centers, radius, weights)
    except ValueError as exc:
        raise cfg.fail(section, None, str(exc)) from None


def model_spec(cfg, name=None):
    """ModelSpec from [model] (name=None) or [model.NAME]."""
    section = "model" if name is None else f"model.{name}"
    if not cfg.has(section):
        raise ConfigError(f"no [{section}] section in {cfg.path}")
    family = _choice(cfg, section, "family", "separable", ("separable", "asymmetric"))
    params = ("sigma2", "a_s", "a_t") if family == "separable" else ("sigma2", "a", "velocity")
    for key in ("a_s", "a_t", "a", "velocity"):
        if key not in params and cfg.get(section, key) is not None:
            raise cfg.fail(section, key, f"not a parameter of the {family} kernel")

    init = {key: _number_or_auto(cfg, section, key) for key in params if key != "velocity"}
    if family == "asymmetric":
        raw = cfg.get(section, "velocity", "auto")
        init["velocity"] = "auto" if raw.lower() == "auto" else tuple(_floats(cfg, section, "velocity"))
        if init["velocity"] != "auto" and len(init["velocity"]) != 2:
            raise cfg.fail(section, "velocity", "expected two components")

    spatial = tuple(warp_unit(cfg, u) for u in _names(cfg, section, "spatial"))
    temporal_name = cfg.get(section, "temporal", "identity")
    temporal = None if temporal_name == "identity" else warp_unit(cfg, temporal_name)
    try:
        warp = WarpingMap(spatial, temporal, _flag(cfg, section, "normalize", True))
    except ValueError as exc:
        raise cfg.fail(section, "spatial" if spatial else "temporal", str(exc)) from None

    return ModelSpec(
        name=name or "model",
        family=family,
        kernel_init=init,
        tau2=_number_or_auto(cfg, section, "tau2"),
        warp=warp,
        frozen=tuple(_names(cfg, section, "frozen")),
    )


def covariance_from_spec(cfg, name):
    """A fully specified covariance (no 'auto' values), e.g. a simulation truth."""
    spec = model_spec(cfg, name)
    section = f"model.{name}" if name else "model"
    values = dict(spec.kernel_init, tau2=spec.tau2)
    for key, value in values.items():
        if value == "auto":
            raise cfg.fail(section, key, "needs an explicit value here")
    try:
        if spec.family == "separable":
            kernel = SeparableExpKernel(values["sigma2"], values["a_s"], values["a_t"])
        else:
            kernel = AsymmetricExpKernel(values["sigma2"], values["a"], values["velocity"])
        return NonstationaryCovariance(spec.warp, kernel, values["tau2"])
    except ValueError as exc:
        raise cfg.fail(section, None, str(exc)) from None


def fit_config(cfg):
    time_scale = cfg.get("vecchia", "time_scale", "auto")
    try:
        return FitConfig(
            optimizer=_choice(cfg, "fit", "optimizer", "L-BFGS-B", ("L-BFGS-B", "BFGS")),
            max_iter=_number(cfg, "fit", "max_iter", 500, int),
            gtol=_number(cfg, "fit", "gtol", 1e-5),
            ftol=_number(cfg, "fit", "ftol", 1e-8),
            m=_number(cfg, "vecchia", "m", 30, int),
            order=_choice(cfg, "vecchia", "order", "maxmin", ("maxmin", "random", "input")),
            neighbor_domain=_choice(cfg, "vecchia", "neighbor_domain", "G", ("G", "D")),
            time_scale=None if time_scale.lower() == "auto" else _number(cfg, "vecchia", "time_scale", None),
            seed=_number(cfg, "fit", "seed", 0, int),
            threads=_number(cfg, "fit", "threads", 1, int),
            batch_size=_number(cfg, "vecchia", "batch_size", 512, int),
            objective=_choice(cfg, "fit", "objective", "vecchia", ("vecchia", "dense")),
            gradient=_choice(cfg, "fit", "gradient", "analytic", ("analytic", "fd")),
            refit_on_warped=_flag(cfg, "fit", "refit_on_warped", False),
            scale_coords=_flag(cfg, "fit", "scale_coords", True),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def data_schema(cfg):
    x = _names(cfg, "data", "x")
    return DataSchema(
        s1=cfg.get("data", "s1", "s1"),
        s2=cfg.get("data", "s2", "s2"),
        t=cfg.get("data", "t", "t"),
        z=cfg.get("data", "z", "z"),
        x=tuple(x) if x else None,
        delimiter=cfg.get("data", "delimiter", ","),
    )


def study_config(cfg):
    if not cfg.has("study"):
        raise ConfigError(f"no [study] section in {cfg.path}")
    truth_name = cfg.get("study", "truth")
    if truth_name is None:
        raise cfg.fail("study", None, "missing key 'truth'")
    truth = covariance_from_spec(cfg, truth_name)

    candidates = []
    for name in cfg.named("candidate"):
        section = f"candidate.{name}"
        model = cfg.get(section, "model")
        if model is None:
            raise cfg.fail(section, None, "missing key 'model'")
        candidates.append(Candidate(
            label=cfg.get(section, "label", name),
            model=model_spec(cfg, model),
            neighbor_domain=_choice(cfg, section, "neighbor_domain", "G", ("G", "D")),
        ))
    if not candidates:
        raise ConfigError(f"study in {cfg.path} has no [candidate.NAME] sections")

    fit = fit_config(cfg)
    try:
        return StudyConfig(
            name=cfg.get("study", "name", "study"),
            nx=_number(cfg, "study", "nx", 51, int),
            ny=_number(cfg, "study", "ny", 51, int),
            nt=_number(cfg, "study", "nt", 10, int),
            s_bounds=(_number(cfg, "study", "s_lo", -0.5), _number(cfg, "study", "s_hi", 0.5)),
            t_bounds=(_number(cfg, "study", "t_lo", -0.5), _number(cfg, "study", "t_hi", 0.5)),
            truth=truth,
            candidates=tuple(candidates),
            train_fraction=_number(cfg, "study", "train_fraction", 0.8),
            m=fit.m,
            repetitions=_number(cfg, "study", "repetitions", 30, int),
            seed=_number(cfg, "study", "seed", 0, int),
            fit=fit,
        )
    except ValueError as exc:
        raise cfg.fail("study", None, str(exc)) from None
