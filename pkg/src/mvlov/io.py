"""Artifact formats: MVL1/MVG1 binaries, CSV, JSON-lines, manifests.

Binary layouts (all little-endian):

* ``MVL1`` particle snapshot: magic ``b"MVL1"``, u32 N, u32 d, f64 time,
  then N*d f64 positions row-major.
* ``MVG1`` grid density: magic ``b"MVG1"``, u32 d, then per axis
  (u32 size, f64 lo, f64 hi), then the f64 values row-major.

CSV artifacts are UTF-8 with a header row; when a config hash is supplied it
is embedded as a leading ``# config_hash=...`` comment line. JSON-lines
records embed the hash as a field. The run manifest lists every artifact with
its SHA-256 digest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .density import GridDensity
from .errors import ValidationError
from .particles import ParticleEnsemble

__all__ = [
    "write_particles_mvl1",
    "read_particles_mvl1",
    "write_density_mvg1",
    "read_density_mvg1",
    "write_particles_csv",
    "write_density_csv",
    "write_csv",
    "write_jsonl",
    "sha256_file",
    "write_manifest",
]


def write_particles_mvl1(path, ens: ParticleEnsemble) -> Path:
    path = Path(path)
    pos = np.ascontiguousarray(ens.positions, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(b"MVL1")
        fh.write(struct.pack("<II", ens.n, ens.d))
        fh.write(struct.pack("<d", float(ens.time)))
        fh.write(pos.tobytes(order="C"))
    return path


def read_particles_mvl1(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"MVL1":
            raise ValidationError(f"{path}: bad magic {magic!r}")
        n, d = struct.unpack("<II", fh.read(8))
        (time,) = struct.unpack("<d", fh.read(8))
        data = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d)
    return time, data.copy()


def write_density_mvg1(path, rho: GridDensity) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(b"MVG1")
        fh.write(struct.pack("<I", rho.d))
        for k in range(rho.d):
            fh.write(struct.pack("<Idd", rho.shape[k], float(rho.lo[k]),
                                 float(rho.hi[k])))
        fh.write(np.ascontiguousarray(rho.values, dtype="<f8").tobytes(order="C"))
    return path


def read_density_mvg1(path) -> GridDensity:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"MVG1":
            raise ValidationError(f"{path}: bad magic {magic!r}")
        (d,) = struct.unpack("<I", fh.read(4))
        shape, lo, hi = [], [], []
        for _ in range(d):
            s, a, b = struct.unpack("<Idd", fh.read(20))
            shape.append(s)
            lo.append(a)
            hi.append(b)
        count = int(np.prod(shape))
        vals = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return GridDensity(lo=np.array(lo), hi=np.array(hi), values=vals.copy())


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence],
              config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return v


def write_particles_csv(path, snapshots, config_hash: Optional[str] = None) -> Path:
    """One row per particle per snapshot: t, i, x1..xd."""
    first = snapshots[0][1]
    header = ["t", "i"] + [f"x{k + 1}" for k in range(first.d)]

    def rows():
        for t, ens in snapshots:
            for i in range(ens.n):
                yield [float(t), i] + [float(v) for v in ens.positions[i]]

    return write_csv(path, header, rows(), config_hash)


def write_density_csv(path, rho: GridDensity,
                      config_hash: Optional[str] = None) -> Path:
    """One row per cell: center coordinates then the value."""
    header = [f"x{k + 1}" for k in range(rho.d)] + ["value"]
    mesh = rho.center_mesh()
    coords = [m.ravel() for m in mesh]
    vals = rho.values.ravel()

    def rows():
        for i in range(vals.size):
            yield [float(c[i]) for c in coords] + [float(vals[i])]

    return write_csv(path, header, rows(), config_hash)


def write_jsonl(path, records: Iterable[dict],
                config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if config_hash and "config_hash" not in rec:
                rec = {**rec, "config_hash": config_hash}
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, manifest: dict) -> Path:
    out_dir = Path(out_dir)
    artifacts = []
    for p in manifest.get("artifacts", []):
        p = Path(p)
        artifacts.append({
            "path": p.name,
            "bytes": p.stat().st_size,
            "sha256": sha256_file(p),
        })
    manifest = {**manifest, "artifacts": artifacts}
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path
