import json
import math
from pathlib import Path

import numpy as np
import pytest

from mvlov.config import config_hash, load_config
from mvlov.errors import ValidationError
from mvlov.experiments import run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def run_inline(tmp_path, text):
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    cfg = load_config(p)
    out = tmp_path / "out"
    out.mkdir(exist_ok=True)
    return run_experiment(cfg, out, config_hash(cfg)), out


PARTICLES_1D = """
[particles]
n = {n}
d = 1
dt = {dt}
horizon = {horizon}

[particles.initial]
kind = "gaussian"
mean = [0.0]
cov = [0.09]
"""


def test_chaos_zero_kernel_flat(tmp_path):
    text = f"""
experiment = "chaos"
seed = 5
[kernel]
form = "zero"
{PARTICLES_1D.format(n=50, dt=0.01, horizon=0.1)}
[fpe]
lo = [-4.0]
hi = [4.0]
cells = [128]
horizon = 0.1
[chaos]
n_values = [50, 100]
replicas = 100
"""
    (artifacts, report), out = run_inline(tmp_path, text)
    rows = report["rows"]
    assert len(rows) == 2
    for n, w1, se in rows:
        assert np.isfinite(w1) and w1 > 0
    # zero kernel: tagged-particle law does not depend on N
    (n1, w1, s1), (n2, w2, s2) = rows
    assert abs(w1 - w2) < 3 * (s1 + s2)
    assert (out / "chaos.csv").exists()


def test_chaos_replica_guard(tmp_path):
    text = f"""
experiment = "chaos"
seed = 5
[kernel]
form = "zero"
{PARTICLES_1D.format(n=50, dt=0.01, horizon=0.1)}
[chaos]
n_values = [50, 100]
replicas = 50
"""
    with pytest.raises(ValidationError, match="replicas"):
        run_inline(tmp_path, text)


def test_truncation_sweep_rows(tmp_path):
    text = f"""
experiment = "truncation_sweep"
seed = 9
[kernel]
form = "power_law"
kappa = 4.0
alpha = 1.5
{PARTICLES_1D.format(n=128, dt=0.005, horizon=0.1)}
[truncation_sweep]
levels = [4.0, 8.0]
"""
    (artifacts, report), out = run_inline(tmp_path, text)
    assert len(report["rows"]) == 2
    for n, n2, beta, gap, se in report["rows"]:
        assert n2 == 2 * n and np.isfinite(gap)


def test_zvonkin_sweep_report(tmp_path):
    text = """
experiment = "zvonkin_sweep"
seed = 1
[zvonkin]
lambdas = [4.0, 16.0, 64.0]
lo = [-1.0, -1.0]
hi = [1.0, 1.0]
cells = [48, 48]
center = [0.013, -0.007]
kappa = 1.0
alpha = 1.0
truncation = 10.0
horizon = 0.5
"""
    (artifacts, report), out = run_inline(tmp_path, text)
    grads = [r[2] for r in report["rows"]]
    assert grads[0] > grads[1] > grads[2]
    assert report["grad_slope"] < 0
    assert report["lambda_small"] is not None


def test_girsanov_check_small(tmp_path):
    text = f"""
experiment = "girsanov_check"
seed = 33
[kernel]
form = "power_law"
kappa = 0.5
alpha = 1.0
truncation = 10.0
{PARTICLES_1D.format(n=2000, dt=0.005, horizon=0.1)}
[fpe]
lo = [-4.0]
hi = [4.0]
cells = [256]
horizon = 0.1
[girsanov]
paths = 2000
flow_stride = 2
"""
    (artifacts, report), out = run_inline(tmp_path, text)
    assert abs(report["mean_weight"] - 1.0) < 4 * report["mean_weight_se"]
    gap = abs(report["reweighted_x1"] - report["direct_x1"])
    assert gap < 4 * math.hypot(report["reweighted_x1_se"],
                                report["direct_x1_se"])
    rec = json.loads((out / "girsanov.jsonl").read_text().splitlines()[0])
    assert "config_hash" in rec


def test_krylov_experiment_small(tmp_path):
    text = f"""
experiment = "krylov_check"
seed = 3
[kernel]
form = "zero"
{PARTICLES_1D.format(n=500, dt=0.005, horizon=0.1)}
[krylov]
dts = [0.01, 0.005]
p = 4.0
q = 4.0
bump_centers = [0.0, 0.5]
bump_widths = [0.3]
grid_lo = [-5.0]
grid_hi = [5.0]
grid_cells = [256]
"""
    (artifacts, report), out = run_inline(tmp_path, text)
    assert report["ratio_max"] > 0
    assert report["dt_stability"] < 2.0
    lines = (out / "krylov.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_moments_experiment_small(tmp_path):
    text = f"""
experiment = "moments"
seed = 3
[kernel]
form = "zero"
{PARTICLES_1D.format(n=2000, dt=0.005, horizon=0.2)}
[moments]
betas = [2.0]
deltas = [0.01, 0.04]
"""
    (artifacts, report), out = run_inline(tmp_path, text)
    assert (out / "moments.csv").exists()
    assert (out / "increments.csv").exists()
    assert report["peak_over_initial"]["2"] < 10.0


def test_bounds_guards(tmp_path):
    text = f"""
experiment = "bounds_fit"
seed = 3
[kernel]
form = "zero"
{PARTICLES_1D.format(n=100, dt=0.01, horizon=0.1)}
"""
    with pytest.raises(ValidationError, match="2-d"):
        run_inline(tmp_path, text)


def test_reference_configs_validate():
    for cfg_path in sorted(CONFIGS.glob("*.toml")):
        cfg = load_config(cfg_path)
        assert cfg["experiment"]
        assert isinstance(config_hash(cfg), str)
