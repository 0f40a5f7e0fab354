"""Run configuration: one JSON document, merged over defaults, validated with
field paths.  Precedence is command-line flags > file > defaults."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .errors import ConfigError, ResourceError
from .spectrum import DEFAULT_MAX_N, HARD_MAX_N

EXPERIMENTS = ("sff-run", "sweep-gamma", "sweep-eta", "observables", "purity", "annealed-diag",
               "benchmark-sme", "collapse-stats", "decompose")

DEFAULTS = {
    "experiment": "sff-run",
    "spectrum": {"kind": "syk", "n_majorana": 14, "coupling_scale": 1.0, "parity": None,
                 "anticommutator": 1.0, "allow_large": False, "dim": 128, "width": 2.0, "path": None},
    "variant": "monitored",
    "beta": 0.0,
    "gamma": 1.0,
    "eta": 1.0,
    "method": "direct",
    "grid": {"t_min": 0.01, "t_max": 1.0e4, "points": 601, "spacing": "log"},
    "averaging": {"n_disorder": 50, "n_trajectories": 1, "mode": "quenched", "measure": "ostensible",
                  "noise_average": "analytic", "noise_sharing": "independent", "keep_trajectories": 10},
    "analysis": {"window": 10, "tol": 0.2, "sustain": 10, "error_window": 100},
    "sme": {"dt": None, "save_points": 200, "refinements": 4},
    "n_paths": 10000,
    "master_seed": 0,
    "workers": 1,
    "output_dir": None,
    "memory_limit_bytes": 8 * 2**30,
}

_SPECTRUM_KINDS = ("syk", "gue", "file")
GAMMA_LISTS = ("sweep-gamma", "observables", "benchmark-sme")
ETA_LISTS = ("sweep-eta", "purity")


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(where, "unknown field")
        if isinstance(base[k], dict) and base[k] is not None:
            if not isinstance(v, dict):
                raise ConfigError(where, "expected an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def _num(cfg, path, lo=None, hi=None, integer=False, lo_open=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(path, f"expected a number, got {node!r}")
    if integer and (not float(node).is_integer()):
        raise ConfigError(path, f"expected an integer, got {node!r}")
    if not math.isfinite(node):
        raise ConfigError(path, "must be finite")
    if lo is not None and (node < lo or (lo_open and node == lo)):
        raise ConfigError(path, f"must be {'>' if lo_open else '>='} {lo}, got {node!r}")
    if hi is not None and node > hi:
        raise ConfigError(path, f"must be <= {hi}, got {node!r}")
    return node


def _num_or_list(cfg, key, lo=None, hi=None, lo_open=False):
    v = cfg[key]
    vals = v if isinstance(v, list) else [v]
    if not vals:
        raise ConfigError(key, "empty list")
    for i, x in enumerate(vals):
        where = f"{key}[{i}]" if isinstance(v, list) else key
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ConfigError(where, f"expected a finite number, got {x!r}")
        if lo is not None and (x < lo or (lo_open and x == lo)):
            raise ConfigError(where, f"must be {'>' if lo_open else '>='} {lo}, got {x!r}")
        if hi is not None and x > hi:
            raise ConfigError(where, f"must be <= {hi}, got {x!r}")
    return [float(x) for x in vals]


def _choice(cfg, path, options):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if node not in options:
        raise ConfigError(path, f"must be one of {', '.join(map(str, options))}; got {node!r}")
    return node


def validate_config(cfg: dict) -> dict:
    """Check every field; raises ConfigError (field path) or ResourceError."""
    _choice(cfg, "experiment", EXPERIMENTS)
    sp = cfg["spectrum"]
    kind = _choice(cfg, "spectrum.kind", _SPECTRUM_KINDS)
    if kind == "syk":
        n = _num(cfg, "spectrum.n_majorana", 4, integer=True)
        if n % 2:
            raise ConfigError("spectrum.n_majorana", "must be even")
        if n > HARD_MAX_N:
            raise ResourceError(f"spectrum.n_majorana={n} exceeds the hard cap N <= {HARD_MAX_N}")
        if n > DEFAULT_MAX_N and not sp["allow_large"]:
            raise ResourceError(f"spectrum.n_majorana={n} exceeds the default cap N <= {DEFAULT_MAX_N}; "
                                "set spectrum.allow_large to go up to " + str(HARD_MAX_N))
        _num(cfg, "spectrum.coupling_scale", 0, lo_open=True)
        _choice(cfg, "spectrum.parity", (None, 0, 1))
        _choice(cfg, "spectrum.anticommutator", (1, 2, 1.0, 2.0))
    elif kind == "gue":
        d = _num(cfg, "spectrum.dim", 2, integer=True)
        if d > 2 ** (HARD_MAX_N // 2):
            raise ResourceError(f"spectrum.dim={d} exceeds the cap {2 ** (HARD_MAX_N // 2)}")
        _num(cfg, "spectrum.width", 0, lo_open=True)
    else:
        if not sp["path"] or not Path(sp["path"]).is_file():
            raise ConfigError("spectrum.path", f"no such file: {sp['path']!r}")
    _choice(cfg, "variant", ("monitored", "efficiency", "nojump", "dephasing", "unitary"))
    _choice(cfg, "method", ("direct", "quadrature"))
    _num(cfg, "beta", 0)
    _num_or_list(cfg, "gamma", 0)
    _num_or_list(cfg, "eta", 0, 1)
    exp = cfg["experiment"]
    if isinstance(cfg["gamma"], list) and exp not in GAMMA_LISTS:
        raise ConfigError("gamma", f"experiment {exp} takes a single value")
    if isinstance(cfg["eta"], list) and exp not in ETA_LISTS:
        raise ConfigError("eta", f"experiment {exp} takes a single value")
    g = cfg["grid"]
    spacing = _choice(cfg, "grid.spacing", ("log", "uniform"))
    _num(cfg, "grid.t_min", 0)
    _num(cfg, "grid.t_max", 0, lo_open=True)
    _num(cfg, "grid.points", 2, integer=True)
    if g["t_max"] <= g["t_min"]:
        raise ConfigError("grid.t_max", "must exceed grid.t_min")
    if spacing == "log" and g["t_min"] <= 0:
        raise ConfigError("grid.t_min", "log spacing needs t_min > 0")
    _num(cfg, "averaging.n_disorder", 1, integer=True)
    _num(cfg, "averaging.n_trajectories", 1, integer=True)
    _num(cfg, "averaging.keep_trajectories", 0, integer=True)
    _choice(cfg, "averaging.mode", ("quenched", "annealed_noise_fixed_H",
                                    "annealed_noise_then_disorder", "annealed_both"))
    _choice(cfg, "averaging.measure", ("ostensible", "physical"))
    _choice(cfg, "averaging.noise_average", ("analytic", "sampled"))
    _choice(cfg, "averaging.noise_sharing", ("independent", "crossed"))
    _num(cfg, "analysis.window", 1, integer=True)
    _num(cfg, "analysis.error_window", 1, integer=True)
    _num(cfg, "analysis.sustain", 1, integer=True)
    _num(cfg, "analysis.tol", 0)
    if cfg["analysis"]["window"] > g["points"]:
        raise ConfigError("analysis.window", "larger than the number of grid points")
    if cfg["sme"]["dt"] is not None:
        _num(cfg, "sme.dt", 0, lo_open=True)
    _num(cfg, "sme.save_points", 1, integer=True)
    _num(cfg, "sme.refinements", 0, 12, integer=True)
    _num(cfg, "n_paths", 1, integer=True)
    _num(cfg, "master_seed", 0, 2**64 - 1, integer=True)
    _num(cfg, "workers", 1, integer=True)
    _num(cfg, "memory_limit_bytes", 1, integer=True)
    return cfg


def load_config(path, overrides: dict | None = None) -> dict:
    """Read a config (or a run manifest, whose ``config`` is reused) and
    apply flag overrides on top."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    if "config" in raw and "files" in raw:
        raw = raw["config"]
    cfg = _merge(DEFAULTS, raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return validate_config(cfg)


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
