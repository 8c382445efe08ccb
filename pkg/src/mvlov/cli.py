"""Command line runner: ``mvlov run|validate|schema``.

Exit codes: 0 success, 2 config/validation error, 3 numerical abort (blow-up
or negativity). Every run writes ``manifest.json`` listing the artifacts with
digests, the config echo and hash, wall time, and module versions. The
``MVLOV_THREADS`` environment variable caps worker threads (speed only,
results are bit-identical for any value).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numba
import numpy as np
import scipy

from . import __version__
from .config import EXPERIMENTS, SCHEMA, config_hash, ensure_out_dir, load_config
from .errors import NumericalAbort, ValidationError
from .experiments import run_experiment
from .io import write_manifest


def _module_versions() -> dict:
    return {"mvlov": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _schema_lines(schema, indent=0):
    lines = []
    for key, spec in schema.items():
        pad = "  " * indent
        if isinstance(spec, dict):
            lines.append(f"{pad}[{key}]")
            lines.extend(_schema_lines(spec, indent + 1))
        else:
            lines.append(f"{pad}{key}: {spec[0]}")
    return lines


def cmd_schema(_args) -> int:
    print("experiments:", ", ".join(EXPERIMENTS))
    print()
    print("\n".join(_schema_lines(SCHEMA)))
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ValidationError, OSError) as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    print(f"ok: experiment={cfg['experiment']} config_hash={config_hash(cfg)}")
    return 0


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        out = ensure_out_dir(cfg, base=Path(args.config).resolve().parent)
    except (ValidationError, OSError) as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    chash = config_hash(cfg)
    started = time.time()
    manifest = {
        "experiment": cfg["experiment"],
        "config": cfg,
        "config_hash": chash,
        "module_versions": _module_versions(),
        "partial": False,
    }
    try:
        artifacts, report = run_experiment(cfg, out, chash)
    except ValidationError as err:
        print(f"invalid config: {err}", file=sys.stderr)
        return 2
    except NumericalAbort as err:
        manifest.update({
            "partial": True,
            "error": str(err),
            "wall_time_s": time.time() - started,
            "artifacts": [],
        })
        write_manifest(out, manifest)
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    manifest.update({
        "artifacts": [str(a) for a in artifacts],
        "report": report,
        "wall_time_s": time.time() - started,
    })
    path = write_manifest(out, manifest)
    if not args.quiet:
        print(f"wrote {path} ({len(artifacts)} artifacts, "
              f"config_hash={chash})")
        print(json.dumps(report, indent=2, sort_keys=True, default=str))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mvlov",
        description="mean-field particle / Fokker-Planck experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to the TOML config")
    p_run.add_argument("--output-dir", help="override the config output_dir")
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="validate a config without running")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)

    p_schema = sub.add_parser("schema", help="print the config schema")
    p_schema.set_defaults(func=cmd_schema)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
