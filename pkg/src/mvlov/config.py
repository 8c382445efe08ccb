"""Experiment config files: strict TOML schema, hashing, object builders.

A config is a single TOML file of tables of key/value pairs. Validation is
strict: any key not in the schema is a hard error naming the offending key, so
typos cannot silently change an experiment. The resolved config (defaults
merged) is hashed with SHA-256 and that hash is embedded in every report
artifact and in the manifest.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from . import particles as P
from .errors import ValidationError
from .kernels import KernelSpec, zero_kernel, power_law

EXPERIMENTS = (
    "simulate", "fpe", "superpose", "chaos", "truncation_sweep",
    "zvonkin_sweep", "girsanov_check", "bounds_fit", "gradient_fit",
    "krylov_check", "pair_krylov", "moments",
)

_NUM = ("num",)
_INT = ("int",)
_BOOL = ("bool",)
_STR = ("str",)
_NUMLIST = ("numlist",)
_INTLIST = ("intlist",)

_INITIAL_SCHEMA = {
    "kind": _STR,
    "point": _NUMLIST,
    "mean": _NUMLIST,
    "cov": _NUMLIST,
    "lo": _NUMLIST,
    "hi": _NUMLIST,
}

SCHEMA = {
    "experiment": _STR,
    "seed": _INT,
    "output_dir": _STR,
    "kernel": {
        "form": _STR,
        "kappa": _NUM,
        "alpha": _NUM,
        "direction": _STR,
        "truncation": _NUM,
    },
    "particles": {
        "n": _INT,
        "d": _INT,
        "dt": _NUM,
        "horizon": _NUM,
        "snapshot_times": _NUMLIST,
        "store_stride": _INT,
        "store_increments": _BOOL,
        "zero_noise": _BOOL,
        "initial": _INITIAL_SCHEMA,
        "diffusion": {"kind": _STR, "amplitude": _NUM},
    },
    "fpe": {
        "lo": _NUMLIST,
        "hi": _NUMLIST,
        "cells": _INTLIST,
        "horizon": _NUM,
        "dt": _NUM,
        "boundary": _STR,
        "snapshot_times": _NUMLIST,
        "initial": _INITIAL_SCHEMA,
    },
    "superpose": {
        "n_compare": _INT,
        "bandwidth": _NUM,
        "kde_cells": _INT,
        "bootstrap": _INT,
    },
    "chaos": {
        "n_values": _INTLIST,
        "replicas": _INT,
        "reference": _STR,
        "bandwidth": _NUM,
    },
    "truncation_sweep": {
        "levels": _NUMLIST,
        "betas": _NUMLIST,
    },
    "zvonkin": {
        "lambdas": _NUMLIST,
        "lo": _NUMLIST,
        "hi": _NUMLIST,
        "cells": _INTLIST,
        "center": _NUMLIST,
        "kappa": _NUM,
        "alpha": _NUM,
        "truncation": _NUM,
        "horizon": _NUM,
        "dt": _NUM,
    },
    "girsanov": {
        "paths": _INT,
        "flow_stride": _INT,
    },
    "krylov": {
        "dts": _NUMLIST,
        "p": _NUM,
        "q": _NUM,
        "r": _NUM,
        "lattice": _STR,
        "bump_centers": _NUMLIST,
        "bump_widths": _NUMLIST,
        "grid_lo": _NUMLIST,
        "grid_hi": _NUMLIST,
        "grid_cells": _INTLIST,
    },
    "pair_krylov": {
        "seed_b": _INT,
        "p1": _NUM,
        "p2": _NUM,
        "q0": _NUM,
        "dts": _NUMLIST,
        "envelope_truncation": _NUM,
        "grid_lo": _NUMLIST,
        "grid_hi": _NUMLIST,
        "grid_cells": _INTLIST,
    },
    "moments": {
        "betas": _NUMLIST,
        "deltas": _NUMLIST,
    },
    "bounds": {
        "gamma_grid": _NUMLIST,
        "kde_cells": _INT,
        "kde_cells_fine": _INT,
        "bandwidth": _NUM,
        "box_lo": _NUMLIST,
        "box_hi": _NUMLIST,
    },
}

DEFAULTS = {
    "output_dir": "out",
    "particles": {
        "snapshot_times": [],
        "store_stride": 0,
        "store_increments": False,
        "zero_noise": False,
        "diffusion": {"kind": "constant_sqrt2", "amplitude": 0.25},
    },
    "fpe": {"boundary": "no_flux", "snapshot_times": []},
    "superpose": {"n_compare": 0, "kde_cells": 512, "bootstrap": 16},
    "chaos": {"reference": "fpe", "replicas": 100},
    "truncation_sweep": {"betas": [1.0]},
    "girsanov": {"paths": 10000, "flow_stride": 1},
    "krylov": {"lattice": "continuum_sup", "r": 1.0},
    "moments": {"betas": [2.0, 4.0], "deltas": [0.01, 0.04, 0.16]},
    "bounds": {"kde_cells": 128, "kde_cells_fine": 256},
}


def _type_ok(spec, value) -> bool:
    kind = spec[0]
    if kind == "num":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "str":
        return isinstance(value, str)
    if kind == "numlist":
        return (isinstance(value, list)
                and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                        for v in value))
    if kind == "intlist":
        return (isinstance(value, list)
                and all(isinstance(v, int) and not isinstance(v, bool)
                        for v in value))
    return False


def _validate(tree, schema, path=""):
    if not isinstance(tree, dict):
        raise ValidationError(f"config section {path or '<root>'} must be a table")
    for key, value in tree.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ValidationError(f"unknown config key: {here!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            _validate(value, spec, here)
        elif not _type_ok(spec, value):
            raise ValidationError(f"config key {here!r} has wrong type "
                                  f"(expected {spec[0]})")


def _merge_defaults(tree, defaults):
    out = dict(defaults)
    for key, value in tree.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(value, out[key])
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Parse, strictly validate, and default-merge an experiment config."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    _validate(raw, SCHEMA)
    cfg = _merge_defaults(raw, DEFAULTS)
    if "experiment" not in cfg:
        raise ValidationError("config is missing the 'experiment' key")
    if cfg["experiment"] not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {cfg['experiment']!r}")
    if "seed" not in cfg:
        raise ValidationError("config is missing the 'seed' key")
    return cfg


def config_hash(cfg: dict) -> str:
    """Digest of the resolved config; output_dir is an execution detail and
    excluded so reruns into different directories hash identically."""
    hashed = {k: v for k, v in cfg.items() if k != "output_dir"}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def build_kernel(cfg: dict) -> KernelSpec:
    k = cfg.get("kernel")
    if k is None:
        raise ValidationError("config needs a [kernel] table")
    form = k.get("form", "zero")
    if form == "zero":
        return zero_kernel()
    if form == "power_law":
        if "kappa" not in k or "alpha" not in k:
            raise ValidationError("[kernel] power_law needs kappa and alpha")
        return power_law(float(k["kappa"]), float(k["alpha"]),
                         direction=k.get("direction", "radial"),
                         truncation_level=(float(k["truncation"])
                                           if "truncation" in k else None))
    raise ValidationError(f"config kernel form {form!r} not supported in files")


def build_initial(section: dict) -> P.InitialLaw:
    kind = section.get("kind")
    if kind == "point":
        return P.InitialLaw(kind="point", point=tuple(section.get("point", [0.0])))
    if kind == "gaussian":
        return P.InitialLaw(kind="gaussian",
                            mean=tuple(section.get("mean", [0.0])),
                            cov=tuple(section.get("cov", [1.0])))
    if kind == "uniform_box":
        return P.InitialLaw(kind="uniform_box", lo=tuple(section["lo"]),
                            hi=tuple(section["hi"]))
    raise ValidationError(f"unknown initial law kind {kind!r}")


def build_sim_config(cfg: dict, **overrides) -> P.SimConfig:
    sec = cfg.get("particles")
    if sec is None:
        raise ValidationError("config needs a [particles] table")
    for key in ("n", "d", "dt", "horizon"):
        if key not in sec:
            raise ValidationError(f"[particles] is missing {key!r}")
    if "initial" not in sec:
        raise ValidationError("[particles] needs an [particles.initial] table")
    diff = sec.get("diffusion", {})
    kwargs = dict(
        n=int(sec["n"]), d=int(sec["d"]), dt=float(sec["dt"]),
        horizon=float(sec["horizon"]),
        kernel=build_kernel(cfg),
        initial=build_initial(sec["initial"]),
        seed=int(cfg["seed"]),
        diffusion=P.Diffusion(kind=diff.get("kind", "constant_sqrt2"),
                              amplitude=float(diff.get("amplitude", 0.25))),
        snapshot_times=tuple(sec.get("snapshot_times", [])),
        store_stride=int(sec.get("store_stride", 0)),
        store_increments=bool(sec.get("store_increments", False)),
        zero_noise=bool(sec.get("zero_noise", False)),
    )
    kwargs.update(overrides)
    return P.SimConfig(**kwargs)


def initial_density_values(law: P.InitialLaw, grid) -> np.ndarray:
    """Discretize an initial law on a grid (mass renormalized to exactly 1)."""
    mesh = grid.center_mesh()
    if law.kind == "gaussian":
        mean = np.asarray(law.mean, dtype=float)
        cov = np.asarray(law.cov, dtype=float)
        if cov.ndim == 0:
            cov = np.full(grid.d, float(cov))
        vals = np.ones_like(mesh[0])
        for k in range(grid.d):
            vals = vals * np.exp(-(mesh[k] - mean[k]) ** 2 / (2 * cov[k])) \
                / math.sqrt(2 * math.pi * cov[k])
    elif law.kind == "point":
        x0 = np.asarray(law.point, dtype=float)
        idx = tuple(int(np.argmin(np.abs(grid.centers(k) - x0[k])))
                    for k in range(grid.d))
        vals = np.zeros(grid.shape)
        vals[idx] = 1.0
    elif law.kind == "uniform_box":
        lo = np.asarray(law.lo, dtype=float)
        hi = np.asarray(law.hi, dtype=float)
        vals = np.ones_like(mesh[0])
        for k in range(grid.d):
            vals = vals * ((mesh[k] >= lo[k]) & (mesh[k] <= hi[k]))
    else:
        raise ValidationError(f"cannot discretize initial law {law.kind!r}")
    total = vals.sum() * grid.cell_volume
    if total <= 0:
        raise ValidationError("initial law has no mass on the grid")
    return vals / total


def ensure_out_dir(cfg: dict, base: Path = None) -> Path:
    out = Path(cfg.get("output_dir", "out"))
    if base is not None and not out.is_absolute():
        out = base / out
    out.mkdir(parents=True, exist_ok=True)
    return out
