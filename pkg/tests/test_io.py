import json
import struct

import numpy as np
import pytest

from mvlov.density import grid_box
from mvlov.errors import ValidationError
from mvlov import io as mio
from mvlov.particles import ParticleEnsemble


def test_mvl1_roundtrip_and_layout(tmp_path):
    pos = np.array([[1.5, -2.0], [0.25, 1e-9], [3.0, 4.0]])
    ens = ParticleEnsemble(pos, time=0.75, seed=0)
    path = mio.write_particles_mvl1(tmp_path / "snap.mvl1", ens)
    t, data = mio.read_particles_mvl1(path)
    assert t == 0.75
    assert np.array_equal(data, pos)
    raw = path.read_bytes()
    assert raw[:4] == b"MVL1"
    n, d = struct.unpack("<II", raw[4:12])
    assert (n, d) == (3, 2)
    (tt,) = struct.unpack("<d", raw[12:20])
    assert tt == 0.75
    vals = np.frombuffer(raw[20:], dtype="<f8")
    assert np.array_equal(vals.reshape(3, 2), pos)
    assert len(raw) == 20 + 8 * 6


def test_mvg1_roundtrip_and_layout(tmp_path):
    g = grid_box([-1.0, 0.0], [1.0, 2.0], (4, 8))
    rho = g.with_values(np.arange(32, dtype=float).reshape(4, 8) / 100.0)
    path = mio.write_density_mvg1(tmp_path / "rho.mvg1", rho)
    back = mio.read_density_mvg1(path)
    assert back.same_grid(rho)
    assert np.array_equal(back.values, rho.values)
    raw = path.read_bytes()
    assert raw[:4] == b"MVG1"
    (d,) = struct.unpack("<I", raw[4:8])
    assert d == 2
    s0, lo0, hi0 = struct.unpack("<Idd", raw[8:28])
    s1, lo1, hi1 = struct.unpack("<Idd", raw[28:48])
    assert (s0, lo0, hi0) == (4, -1.0, 1.0)
    assert (s1, lo1, hi1) == (8, 0.0, 2.0)
    assert len(raw) == 48 + 8 * 32


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 48)
    with pytest.raises(ValidationError):
        mio.read_particles_mvl1(p)
    with pytest.raises(ValidationError):
        mio.read_density_mvg1(p)


def test_particles_csv_format(tmp_path):
    ens = ParticleEnsemble(np.array([[1.0, 2.0], [3.0, 4.0]]), 0.5, seed=0)
    path = mio.write_particles_csv(tmp_path / "p.csv", [(0.5, ens)],
                                   config_hash="abc123")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc123"
    assert lines[1] == "t,i,x1,x2"
    assert lines[2].startswith("0.5,0,1,2")
    assert len(lines) == 4


def test_density_csv_format(tmp_path):
    g = grid_box([0.0], [1.0], (2,))
    rho = g.with_values(np.array([0.25, 0.75]))
    path = mio.write_density_csv(tmp_path / "d.csv", rho)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,value"
    assert lines[1] == "0.25,0.25"
    assert lines[2] == "0.75,0.75"


def test_jsonl_embeds_hash(tmp_path):
    path = mio.write_jsonl(tmp_path / "r.jsonl",
                           [{"a": 1}, {"a": 2, "config_hash": "own"}],
                           config_hash="h42")
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert recs[0]["config_hash"] == "h42"
    assert recs[1]["config_hash"] == "own"


def test_manifest_lists_digests(tmp_path):
    f1 = tmp_path / "a.csv"
    f1.write_text("x\n1\n")
    manifest_path = mio.write_manifest(tmp_path, {"artifacts": [f1], "k": 1})
    manifest = json.loads(manifest_path.read_text())
    assert manifest["k"] == 1
    (entry,) = manifest["artifacts"]
    assert entry["path"] == "a.csv"
    assert entry["sha256"] == mio.sha256_file(f1)
    assert entry["bytes"] == f1.stat().st_size
