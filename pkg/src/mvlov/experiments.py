"""Experiment drivers: one function per experiment enum value.

Each runner takes the resolved config and an output directory, writes its
artifacts (CSV / JSON-lines / binary snapshots), and returns
``(artifact_paths, report_dict)`` for the manifest. Replica and comparison
runs derive independent noise streams from the base seed, so a config is a
complete, reproducible description of a run.
"""

from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io as mio
from . import metrics as M
from . import particles as P
from .config import (build_initial, build_kernel, build_sim_config,
                     initial_density_values)
from .density import GridDensity, fit_gradient_bound, fit_two_sided, \
    grid_box, kde
from .errors import ValidationError
from .fpe import FpeConfig, flow_drift, fpe_solve, zvonkin_solve
from .kernels import eval_kernel, power_law, truncate, zero_kernel
from ._noise import philox_key, uniform_block

__all__ = ["EXPERIMENT_RUNNERS", "run_experiment"]


def _sim_notes(results):
    notes = []
    for res in results:
        for n in res.notes:
            if n not in notes:
                notes.append(n)
    return notes


def _fpe_grid(cfg) -> GridDensity:
    sec = cfg.get("fpe")
    if sec is None:
        raise ValidationError("config needs an [fpe] table")
    for key in ("lo", "hi", "cells", "horizon"):
        if key not in sec:
            raise ValidationError(f"[fpe] is missing {key!r}")
    return grid_box(sec["lo"], sec["hi"], sec["cells"])


def _fpe_config(cfg, snapshot_times=None, kernel=None) -> FpeConfig:
    sec = cfg["fpe"]
    grid = _fpe_grid(cfg)
    init_sec = sec.get("initial") or cfg.get("particles", {}).get("initial")
    if init_sec is None:
        raise ValidationError("no initial law for the FPE solve")
    law = build_initial(init_sec)
    initial = grid.with_values(initial_density_values(law, grid))
    times = tuple(snapshot_times if snapshot_times is not None
                  else sec.get("snapshot_times", ()))
    return FpeConfig(initial=initial, horizon=float(sec["horizon"]),
                     kernel=kernel if kernel is not None else build_kernel(cfg),
                     dt=sec.get("dt"), boundary=sec.get("boundary", "no_flux"),
                     snapshot_times=times)


# ---------------------------------------------------------------------------


def run_simulate(cfg, out: Path, chash: str):
    sim = build_sim_config(cfg)
    res = P.simulate(sim)
    artifacts = []
    for t, ens in res.snapshots:
        artifacts.append(mio.write_particles_mvl1(
            out / f"snapshot_{t:.6f}.mvl1", ens))
    artifacts.append(mio.write_particles_csv(out / "particles.csv",
                                             res.snapshots, chash))
    report = {
        "snapshot_times": [t for t, _ in res.snapshots],
        "final_moment2": P.empirical_moment(res.final, 2.0),
        "notes": _sim_notes([res]),
    }
    return artifacts, report


def run_fpe(cfg, out: Path, chash: str):
    fcfg = _fpe_config(cfg)
    snaps = fpe_solve(fcfg)
    artifacts = []
    for t, rho in snaps:
        artifacts.append(mio.write_density_mvg1(out / f"density_{t:.6f}.mvg1", rho))
        artifacts.append(mio.write_density_csv(out / f"density_{t:.6f}.csv",
                                               rho, chash))
    masses = [rho.mass for _, rho in snaps]
    report = {"snapshot_times": [t for t, _ in snaps], "masses": masses,
              "max_mass_drift": max(abs(m - 1.0) for m in masses) if masses else 0.0}
    return artifacts, report


def _w1_with_bootstrap(positions, fpe_rho, bandwidth, grid, boot: int, key, tag: int):
    est = kde(positions, bandwidth=bandwidth, grid=grid)
    w1 = M.wasserstein_1d(est, fpe_rho)
    if boot < 2:
        return w1, float("nan")
    n = positions.shape[0]
    reps = []
    for b in range(boot):
        u = uniform_block(key, tag * 1000 + b, (n,))
        idx = np.minimum((u * n).astype(np.int64), n - 1)
        est_b = kde(positions[idx], bandwidth=bandwidth, grid=grid)
        reps.append(M.wasserstein_1d(est_b, fpe_rho))
    return w1, float(np.std(reps, ddof=1))


def run_superpose(cfg, out: Path, chash: str):
    sec = cfg["superpose"]
    sim = build_sim_config(cfg)
    if sim.d != 1:
        raise ValidationError("the superposition cross-check is 1-d")
    times = [t for t in sim.snapshot_times if t > 0]
    if not times:
        raise ValidationError("superpose needs positive snapshot times")
    fcfg = _fpe_config(cfg, snapshot_times=times)
    fpe_snaps = dict((round(t, 12), rho) for t, rho in fpe_solve(fcfg))
    grid = grid_box(fcfg.initial.lo, fcfg.initial.hi,
                    (int(sec.get("kde_cells", 512)),))
    bw = sec.get("bandwidth", "auto")
    boot = int(sec.get("bootstrap", 16))
    boot_key = philox_key(sim.seed, 17)

    runs = [(sim.n, P.simulate(sim))]
    n_cmp = int(sec.get("n_compare", 0))
    if n_cmp > 0:
        runs.append((n_cmp, P.simulate(replace(sim, n=n_cmp, replica=7))))

    rows = []
    for tag, (n, res) in enumerate(runs):
        for t, ens in res.snapshots:
            if t <= 0:
                continue
            rho = fpe_snaps[round(t, 12)]
            w1, se = _w1_with_bootstrap(ens.positions, rho, bw, grid, boot,
                                        boot_key, tag * 100 + int(round(t * 1e3)))
            rows.append([t, n, w1, se])
    artifacts = [mio.write_csv(out / "superpose.csv", ["t", "n", "w1", "se"],
                               rows, chash)]
    report = {"rows": [[float(v) for v in r] for r in rows],
              "notes": _sim_notes([r for _, r in runs])}
    return artifacts, report


def run_chaos(cfg, out: Path, chash: str):
    sec = cfg.get("chaos")
    if sec is None or "n_values" not in sec:
        raise ValidationError("config needs [chaos] with n_values")
    n_values = [int(n) for n in sec["n_values"]]
    if any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ValidationError("chaos n_values must increase")
    replicas = int(sec.get("replicas", 100))
    if replicas < 100:
        raise ValidationError("chaos needs at least 100 replicas for the marginal")
    sim = build_sim_config(cfg)
    if sim.d != 1:
        raise ValidationError("the chaos report is 1-d")

    reference = sec.get("reference", "fpe")
    if reference == "fpe":
        fcfg = _fpe_config(cfg, snapshot_times=(sim.horizon,))
        ref_rho = fpe_solve(fcfg)[-1][1]
    elif reference == "largest_n":
        big = P.simulate(replace(sim, n=n_values[-1], snapshot_times=(sim.horizon,)))
        ref_rho = kde(big.final, bandwidth=sec.get("bandwidth", "auto"))
    else:
        raise ValidationError(f"unknown chaos reference {reference!r}")

    boot_key = philox_key(sim.seed, 23)
    rows = []
    notes = []
    for n in n_values:
        samples = np.empty(replicas)
        for r in range(replicas):
            res = P.simulate(replace(sim, n=n, replica=1 + r,
                                     snapshot_times=(sim.horizon,)))
            samples[r] = res.final.positions[0, 0]
            notes = notes or list(res.notes)
        w1 = M.wasserstein_1d(samples, ref_rho)
        reps = []
        for b in range(64):
            u = uniform_block(boot_key, n * 100 + b, (replicas,))
            idx = np.minimum((u * replicas).astype(np.int64), replicas - 1)
            reps.append(M.wasserstein_1d(samples[idx], ref_rho))
        rows.append([n, w1, float(np.std(reps, ddof=1))])
    artifacts = [mio.write_csv(out / "chaos.csv", ["n", "w1", "se"], rows, chash)]
    report = {"rows": [[float(v) for v in r] for r in rows],
              "replicas": replicas, "reference": reference, "notes": notes}
    return artifacts, report


def run_truncation_sweep(cfg, out: Path, chash: str):
    sec = cfg.get("truncation_sweep")
    if sec is None or "levels" not in sec:
        raise ValidationError("config needs [truncation_sweep] with levels")
    levels = [float(v) for v in sec["levels"]]
    betas = [float(b) for b in sec.get("betas", [1.0])]
    base = build_kernel(cfg)
    sim = build_sim_config(cfg, kernel=truncate(base, levels[0]))
    rows = []
    for lv in levels:
        ka = truncate(base, lv)
        kb = truncate(base, 2.0 * lv)
        coupled = P.coupled_simulate(replace(sim, kernel=ka), ka, kb, betas=betas)
        for beta in betas:
            rows.append([lv, 2.0 * lv, beta, coupled.sup_diff_moment[beta],
                         coupled.sup_diff_stderr[beta]])
    artifacts = [mio.write_csv(out / "truncation_sweep.csv",
                               ["n", "n2", "beta", "sup_diff", "se"], rows, chash)]
    return artifacts, {"rows": [[float(v) for v in r] for r in rows]}


def singular_drift_field(sec: dict):
    """Frozen point-singularity drift for the backward-PDE sweep."""
    for key in ("lo", "hi", "cells", "kappa", "alpha", "truncation", "horizon"):
        if key not in sec:
            raise ValidationError(f"[zvonkin] is missing {key!r}")
    grid = grid_box(sec["lo"], sec["hi"], sec["cells"])
    center = np.asarray(sec.get("center", [0.0] * grid.d), dtype=float)
    spec = power_law(float(sec["kappa"]), float(sec["alpha"]),
                     truncation_level=float(sec["truncation"]))
    mesh = grid.center_mesh()
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = eval_kernel(spec, 0.0, pts, center)
    b = np.moveaxis(vals.reshape(grid.shape + (grid.d,)), -1, 0)
    return grid, b


def run_zvonkin_sweep(cfg, out: Path, chash: str):
    sec = cfg.get("zvonkin")
    if sec is None or "lambdas" not in sec:
        raise ValidationError("config needs [zvonkin] with lambdas")
    grid, b = singular_drift_field(sec)
    horizon = float(sec["horizon"])
    rows = []
    for lam in sec["lambdas"]:
        sol = zvonkin_solve(b, float(lam), grid.lo, grid.hi, horizon,
                            dt=sec.get("dt"))
        rows.append([float(lam), sol.sup_u, sol.sup_grad_u])
    lams = np.array([r[0] for r in rows])
    grads = np.array([r[2] for r in rows])
    slope = float(np.polyfit(np.log(lams), np.log(grads), 1)[0])
    small = [r[0] for r in rows if r[1] + r[2] <= 0.5]
    artifacts = [mio.write_csv(out / "zvonkin_sweep.csv",
                               ["lambda", "sup_u", "sup_grad_u"], rows, chash)]
    report = {"rows": [[float(v) for v in r] for r in rows],
              "grad_slope": slope,
              "lambda_small": min(small) if small else None}
    return artifacts, report


def run_girsanov_check(cfg, out: Path, chash: str):
    sec = cfg["girsanov"]
    paths = int(sec.get("paths", 10000))
    stride = int(sec.get("flow_stride", 1))
    kernel = build_kernel(cfg)
    sim = build_sim_config(cfg, n=paths, kernel=zero_kernel(),
                           store_stride=1, store_increments=True)
    zres = P.simulate(sim)

    flow_times = [k * sim.dt for k in range(0, sim.steps, stride)]
    fcfg = _fpe_config(cfg, snapshot_times=tuple(flow_times), kernel=kernel)
    flow = fpe_solve(fcfg)
    drift = flow_drift(flow, kernel)

    weights = P.girsanov_weight(zres, drift)
    mean_w, se_w = weights.mean_weight()
    z_final = zres.final.positions[:, 0]
    rew, rew_se = weights.expectation(z_final)

    direct = P.simulate_frozen(replace(sim, replica=11, store_stride=0,
                                       store_increments=False), drift)
    x1 = direct.final.positions[:, 0]
    direct_mean = float(np.mean(x1))
    direct_se = float(np.std(x1, ddof=1) / math.sqrt(len(x1)))

    report = {
        "paths": paths,
        "mean_weight": mean_w, "mean_weight_se": se_w,
        "reweighted_x1": rew, "reweighted_x1_se": rew_se,
        "direct_x1": direct_mean, "direct_x1_se": direct_se,
        "notes": _sim_notes([zres, direct]),
    }
    artifacts = [mio.write_jsonl(out / "girsanov.jsonl", [report], chash)]
    return artifacts, report


def _bounds_run(cfg):
    sim = build_sim_config(cfg)
    if sim.d != 2:
        raise ValidationError("bound fits use the 2-d rotational run")
    if sim.initial.kind != "point":
        raise ValidationError("bound fits compare against a point initial law")
    res = P.simulate(sim)
    mu0 = np.asarray([sim.initial.point], dtype=float)
    return sim, res, mu0


def _kde_flow(res, sec, cells, floor_spacings: float = 0.0):
    from .density import silverman_bandwidth
    box_lo = sec.get("box_lo")
    box_hi = sec.get("box_hi")
    bw_cfg = sec.get("bandwidth", "auto")
    flow = []
    for t, ens in res.snapshots:
        if t <= 0:
            continue
        if box_lo is not None:
            grid = grid_box(box_lo, box_hi, (cells,) * ens.d)
        else:
            grid = None
        if bw_cfg == "auto" or not isinstance(bw_cfg, (int, float)):
            bw = silverman_bandwidth(ens.positions)
        else:
            bw = np.full(ens.d, float(bw_cfg))
        if floor_spacings > 0:
            spacing = ((np.asarray(box_hi) - np.asarray(box_lo)) / cells
                       if box_lo is not None else None)
            if spacing is not None:
                bw = np.maximum(bw, floor_spacings * spacing)
        est = kde(ens, bandwidth=bw, grid=grid, cells=cells)
        flow.append((t, est))
    return flow


def run_bounds_fit(cfg, out: Path, chash: str):
    sec = cfg.get("bounds", {})
    gammas = sec.get("gamma_grid") or [1.0, 1.25, 1.5, 1.75, 2.0, 2.25,
                                       2.5, 3.0, 3.5, 4.0]
    sim, res, mu0 = _bounds_run(cfg)
    fits = {}
    for label, cells in (("coarse", int(sec.get("kde_cells", 128))),
                         ("fine", int(sec.get("kde_cells_fine", 256)))):
        flow = _kde_flow(res, sec, cells)
        fits[label] = fit_two_sided(flow, mu0, gammas)
    fc, ff = fits["coarse"], fits["fine"]
    report = {
        "coarse": {"c": fc.c, "gamma": fc.gamma, "residual": fc.residual,
                   "excluded_cells": fc.excluded_cells},
        "fine": {"c": ff.c, "gamma": ff.gamma, "residual": ff.residual,
                 "excluded_cells": ff.excluded_cells},
        "c_stability": max(fc.c, ff.c) / min(fc.c, ff.c),
        "gamma_stability": max(fc.gamma, ff.gamma) / min(fc.gamma, ff.gamma),
    }
    artifacts = [mio.write_jsonl(out / "bounds_fit.jsonl", [report], chash)]
    return artifacts, report


def run_gradient_fit(cfg, out: Path, chash: str):
    sec = cfg.get("bounds", {})
    gammas = sec.get("gamma_grid") or [2.25, 2.5, 3.0, 3.5, 4.0, 5.0]
    sim, res, mu0 = _bounds_run(cfg)
    cells = int(sec.get("kde_cells", 128))
    # finite differences need smoothing: bandwidth floored at 2 grid spacings
    flow = _kde_flow(res, sec, cells, floor_spacings=2.0)
    for t, est in flow:
        bw = np.asarray(est.meta["bandwidth"])
        if np.any(bw < 2.0 * est.spacing - 1e-12):
            raise ValidationError("gradient fit needs bandwidth >= 2 grid spacings")
    fit = fit_gradient_bound(flow, mu0, gammas)
    per_time = {f"{t:g}": c for t, c in fit.per_time}
    finite = [c for c in per_time.values() if np.isfinite(c)]
    report = {
        "c1": fit.c, "gamma1": fit.gamma, "residual": fit.residual,
        "per_time_c": per_time,
        "t_stability": (max(finite) / min(finite)) if finite else float("nan"),
    }
    artifacts = [mio.write_jsonl(out / "gradient_fit.jsonl", [report], chash)]
    return artifacts, report


def _bump_tests(sec):
    lo = sec.get("grid_lo")
    hi = sec.get("grid_hi")
    cells = sec.get("grid_cells")
    if lo is None or hi is None or cells is None:
        raise ValidationError("[krylov] needs grid_lo/grid_hi/grid_cells")
    centers = sec.get("bump_centers") or [0.0]
    widths = sec.get("bump_widths") or [0.25]
    tests = []
    for c in centers:
        for w in widths:
            f = M.gaussian_bump_field([c] + [0.0] * (len(lo) - 1), float(w),
                                      lo, hi, cells)
            tests.append((f"bump_c{c:g}_w{w:g}", f))
    return tests


def run_krylov_check(cfg, out: Path, chash: str):
    sec = cfg.get("krylov")
    if sec is None or "dts" not in sec:
        raise ValidationError("config needs [krylov] with dts")
    spec = M.NormSpec(p=float(sec.get("p", 4.0)), q=float(sec.get("q", 4.0)),
                      r=float(sec.get("r", 1.0)),
                      lattice=sec.get("lattice", "continuum_sup"))
    tests = _bump_tests(sec)
    results = []
    for dt in sec["dts"]:
        sim = build_sim_config(cfg, dt=float(dt), store_stride=1,
                               snapshot_times=())
        results.append(P.simulate(sim))
    report = M.krylov_check(results, tests, spec)
    rows = [{"id": t["id"], "lhs": t["lhs"], "norm": t["norm"],
             "ratio": t["ratio"], "lhs_all": t["lhs_all"]}
            for t in report.per_test]
    artifacts = [mio.write_jsonl(out / "krylov.jsonl", rows, chash)]
    summary = {"ratio_max": report.ratio_max, "dt_stability": report.dt_stability,
               "notes": _sim_notes(results)}
    return artifacts, summary


def run_pair_krylov(cfg, out: Path, chash: str):
    sec = cfg.get("pair_krylov")
    if sec is None:
        raise ValidationError("config needs a [pair_krylov] table")
    seed_b = int(sec.get("seed_b", int(cfg["seed"]) + 1))
    if seed_b == int(cfg["seed"]):
        raise ValidationError("seed_b must differ from the base seed")
    lo = sec.get("grid_lo")
    hi = sec.get("grid_hi")
    cells = sec.get("grid_cells")
    if lo is None or hi is None or cells is None:
        raise ValidationError("[pair_krylov] needs grid_lo/grid_hi/grid_cells")
    kernel = build_kernel(cfg)
    trunc = float(sec.get("envelope_truncation",
                          kernel.truncation_level or 10.0))
    xg = grid_box(lo, hi, cells)
    xc = xg.centers(0)
    h_of = kernel.envelope
    diff = np.abs(xc[:, None] - xc[None, :])
    env = np.minimum(np.asarray(h_of(diff), dtype=float), trunc)
    f = M.ProductField(values=env, x_lo=float(lo[0]), x_hi=float(hi[0]),
                       y_lo=float(lo[0]), y_hi=float(hi[0]))
    p1 = float(sec.get("p1", 4.0))
    p2 = float(sec.get("p2", 4.0))
    q0 = float(sec.get("q0", 4.0))
    dts = sec.get("dts") or [cfg["particles"]["dt"]]
    rows = []
    for dt in dts:
        sim_a = build_sim_config(cfg, dt=float(dt), kernel=zero_kernel(),
                                 store_stride=1, snapshot_times=())
        sim_b = replace(sim_a, seed=seed_b)
        res_a = P.simulate(sim_a)
        res_b = P.simulate(sim_b)
        rep = M.pair_krylov_check(res_a, res_b, f, p1, p2, q0)
        rows.append({"dt": float(dt), "lhs": rep.per_test[0]["lhs"],
                     "norm": rep.per_test[0]["norm"], "ratio": rep.ratio_max})
    ratios = [r["ratio"] for r in rows]
    artifacts = [mio.write_jsonl(out / "pair_krylov.jsonl", rows, chash)]
    report = {"rows": rows,
              "dt_stability": max(ratios) / min(ratios) if len(ratios) > 1 else 1.0}
    return artifacts, report


def run_moments(cfg, out: Path, chash: str):
    sec = cfg["moments"]
    betas = [float(b) for b in sec.get("betas", [2.0, 4.0])]
    deltas = [float(d) for d in sec.get("deltas", [0.01, 0.04, 0.16])]
    sim0 = build_sim_config(cfg)
    spacing = min(deltas)
    stride = int(round(spacing / sim0.dt))
    if abs(stride * sim0.dt - spacing) > 1e-9:
        raise ValidationError("min(deltas) must be a multiple of dt")
    sim = replace(sim0, store_stride=max(1, stride))
    res = P.simulate(sim)
    mom_rows = []
    for k, t in enumerate(res.path_times):
        ens = replace(res.final, positions=res.path[k], time=float(t))
        for beta in betas:
            mom_rows.append([float(t), beta, P.empirical_moment(ens, beta)])
    inc_rows = []
    for beta in betas:
        for delta in deltas:
            val = P.increment_statistic(res, delta, beta)
            inc_rows.append([delta, beta, val, val / delta ** (beta / 2.0)])
    artifacts = [
        mio.write_csv(out / "moments.csv", ["t", "beta", "moment"], mom_rows, chash),
        mio.write_csv(out / "increments.csv",
                      ["delta", "beta", "sup_moment", "ratio"], inc_rows, chash),
    ]
    initial_moms = {b: [r[2] for r in mom_rows if r[1] == b][0] for b in betas}
    peak_moms = {b: max(r[2] for r in mom_rows if r[1] == b) for b in betas}
    report = {
        "moment_rows": [[float(v) for v in r] for r in mom_rows],
        "increment_rows": [[float(v) for v in r] for r in inc_rows],
        "peak_over_initial": {f"{b:g}": peak_moms[b] / (initial_moms[b] + 1.0)
                              for b in betas},
        "notes": _sim_notes([res]),
    }
    return artifacts, report


EXPERIMENT_RUNNERS = {
    "simulate": run_simulate,
    "fpe": run_fpe,
    "superpose": run_superpose,
    "chaos": run_chaos,
    "truncation_sweep": run_truncation_sweep,
    "zvonkin_sweep": run_zvonkin_sweep,
    "girsanov_check": run_girsanov_check,
    "bounds_fit": run_bounds_fit,
    "gradient_fit": run_gradient_fit,
    "krylov_check": run_krylov_check,
    "pair_krylov": run_pair_krylov,
    "moments": run_moments,
}


def run_experiment(cfg: dict, out: Path, chash: str):
    name = cfg["experiment"]
    runner = EXPERIMENT_RUNNERS.get(name)
    if runner is None:
        raise ValidationError(f"unknown experiment {name!r}")
    return runner(cfg, out, chash)
