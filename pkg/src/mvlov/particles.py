"""Interacting-particle system: Euler-Maruyama stepping with mean-field drift.

The N-particle dynamics is

    X^i <- X^i + (1/N) sum_j b_t(X^i, X^j) dt + sigma(X^i) sqrt(dt) xi^i,

with the self term vanishing by the kernel diagonal convention and
``sigma = sqrt(2) I`` in the constant-diffusion case. Singular power-law
kernels are only ever stepped through a truncation level; configs without one
are rejected. Noise is counter-based (see :mod:`mvlov._noise`): fixed
``(seed, config)`` gives bit-identical snapshots for any worker count, and two
runs sharing a seed share their Brownian increments exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import _noise, _pairsum
from .errors import BlowUpError, ValidationError
from .kernels import KernelSpec, eval_kernel, truncate

__all__ = [
    "ParticleEnsemble",
    "Diffusion",
    "InitialLaw",
    "SimConfig",
    "SimResult",
    "CoupledResult",
    "GirsanovWeights",
    "mean_field_drift",
    "drift_all",
    "em_step",
    "simulate",
    "simulate_frozen",
    "coupled_simulate",
    "empirical_moment",
    "increment_statistic",
    "girsanov_weight",
]

_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class ParticleEnsemble:
    """N particle positions in R^d plus the reproducible noise cursor."""

    positions: np.ndarray  # (N, d), float64
    time: float
    seed: int
    step: int = 0
    replica: int = 0

    def __post_init__(self):
        pos = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        if pos.ndim != 2:
            raise ValidationError("positions must have shape (N, d)")
        if pos.shape[0] < 2:
            raise ValidationError("need N >= 2 (mean-field drift excludes self)")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("positions must be finite")
        object.__setattr__(self, "positions", pos)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class Diffusion:
    """Diffusion coefficient: constant sqrt(2) or a diagonal state-dependent test profile.

    The ``diagonal_state`` profile is ``sigma_k(x) = sqrt(2) * (1 + amplitude *
    sin(x_k) / (1 + |x|))``, uniformly elliptic for ``amplitude < 1`` with
    ellipticity constant ``c0 = sqrt(2) * (1 + amplitude)`` and Lipschitz (so
    Hoelder exponent 1). It exists to exercise the state-dependent code path.
    """

    kind: str = "constant_sqrt2"
    amplitude: float = 0.25

    def __post_init__(self):
        if self.kind not in ("constant_sqrt2", "diagonal_state"):
            raise ValidationError(f"unknown diffusion {self.kind!r}")
        if self.kind == "diagonal_state" and not (0.0 <= self.amplitude < 1.0):
            raise ValidationError("diagonal_state amplitude must be in [0, 1)")

    @property
    def c0(self) -> float:
        if self.kind == "constant_sqrt2":
            return math.sqrt(2.0)
        return math.sqrt(2.0) * (1.0 + self.amplitude)

    def sigma_diag(self, x: np.ndarray) -> np.ndarray:
        """Diagonal of sigma at each position; shape like ``x``."""
        if self.kind == "constant_sqrt2":
            return np.full_like(x, math.sqrt(2.0))
        r = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
        return math.sqrt(2.0) * (1.0 + self.amplitude * np.sin(x) / (1.0 + r))


@dataclass(frozen=True)
class InitialLaw:
    """Initial distribution: point mass, isotropic/diagonal Gaussian, or uniform box."""

    kind: str
    point: Optional[Sequence[float]] = None
    mean: Optional[Sequence[float]] = None
    cov: Optional[Sequence[float]] = None  # scalar or per-axis variances
    lo: Optional[Sequence[float]] = None
    hi: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.kind not in ("point", "gaussian", "uniform_box"):
            raise ValidationError(f"unknown initial law {self.kind!r}")

    def sample(self, n: int, d: int, key: np.ndarray) -> np.ndarray:
        if self.kind == "point":
            x0 = np.zeros(d) if self.point is None else np.asarray(self.point, dtype=float)
            if x0.shape != (d,):
                raise ValidationError("point initial has wrong dimension")
            return np.tile(x0, (n, 1))
        if self.kind == "gaussian":
            mean = np.zeros(d) if self.mean is None else np.asarray(self.mean, dtype=float)
            cov = np.ones(d) if self.cov is None else np.asarray(self.cov, dtype=float)
            if cov.ndim == 0:
                cov = np.full(d, float(cov))
            if mean.shape != (d,) or cov.shape != (d,) or np.any(cov < 0):
                raise ValidationError("bad gaussian initial parameters")
            xi = _noise.normal_block(key, 0, (n, d))
            return mean + np.sqrt(cov) * xi
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != (d,) or hi.shape != (d,) or np.any(hi <= lo):
            raise ValidationError("bad uniform_box initial parameters")
        u = _noise.uniform_block(key, 0, (n, d))
        return lo + (hi - lo) * u


def point(x0) -> InitialLaw:
    return InitialLaw(kind="point", point=tuple(np.atleast_1d(x0)))


def gaussian(mean, cov) -> InitialLaw:
    return InitialLaw(kind="gaussian", mean=tuple(np.atleast_1d(mean)),
                      cov=tuple(np.atleast_1d(cov)))


def uniform_box(lo, hi) -> InitialLaw:
    return InitialLaw(kind="uniform_box", lo=tuple(np.atleast_1d(lo)),
                      hi=tuple(np.atleast_1d(hi)))


@dataclass(frozen=True)
class SimConfig:
    """Declarative description of one particle run."""

    n: int
    d: int
    dt: float
    horizon: float
    kernel: KernelSpec
    initial: InitialLaw
    seed: int
    diffusion: Diffusion = Diffusion()
    snapshot_times: tuple = ()
    truncation_schedule: Optional[tuple] = None  # ((time, level), ...)
    store_stride: int = 0       # >0: keep positions every `stride` steps
    store_increments: bool = False
    zero_noise: bool = False    # test hook: xi == 0
    replica: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValidationError("need N >= 2")
        if self.d < 1:
            raise ValidationError("need d >= 1")
        if not (self.dt > 0 and self.horizon > 0 and self.dt <= self.horizon):
            raise ValidationError("need 0 < dt <= T")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > _ALIGN_TOL * max(1.0, steps):
            raise ValidationError("T must be an integer multiple of dt")
        for t in self.snapshot_times:
            if t < -_ALIGN_TOL or t > self.horizon + _ALIGN_TOL:
                raise ValidationError(f"snapshot time {t} outside [0, T]")
            k = t / self.dt
            if abs(k - round(k)) > _ALIGN_TOL * max(1.0, k):
                raise ValidationError(f"snapshot time {t} not aligned to dt")
        if (self.kernel.form == "power_law" and self.kernel.truncation_level is None
                and self.truncation_schedule is None):
            raise ValidationError(
                "singular kernels are stepped through a truncation level; set one")
        if self.truncation_schedule is not None:
            sched = tuple(self.truncation_schedule)
            if not sched or abs(sched[0][0]) > _ALIGN_TOL:
                raise ValidationError("truncation schedule must start at t = 0")
            times = [s[0] for s in sched]
            if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
                raise ValidationError("truncation schedule times must increase")
            if any(not s[1] > 0 for s in sched):
                raise ValidationError("truncation levels must be > 0")
        if self.store_increments and self.store_stride != 1:
            raise ValidationError("store_increments requires store_stride == 1")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def snapshot_steps(self) -> list:
        return sorted({int(round(t / self.dt)) for t in self.snapshot_times})


@dataclass
class SimResult:
    """Snapshots plus (optionally) the stored path and increments."""

    config: SimConfig
    snapshots: list                      # [(time, ParticleEnsemble)]
    final: ParticleEnsemble
    path_times: Optional[np.ndarray] = None      # (K+1,)
    path: Optional[np.ndarray] = None            # (K+1, N, d)
    increments: Optional[np.ndarray] = None      # (K, N, d) Brownian dW per step
    notes: tuple = ()


def _kernel_params(spec: KernelSpec, t: float):
    """(c, alpha, trunc, rotational) for the compiled power-law path."""
    c = spec.kappa * spec.scale_at(t)
    trunc = -1.0 if spec.truncation_level is None else float(spec.truncation_level)
    return c, spec.alpha, trunc, spec.direction == "rotational"


def drift_all(t: float, positions: np.ndarray, spec: KernelSpec,
              allow_rank_path: bool = True) -> np.ndarray:
    """Mean-field drift (1/N) sum_j b_t(x_i, x_j) for every particle at once."""
    x = np.ascontiguousarray(positions, dtype=np.float64)
    n, d = x.shape
    if not np.all(np.isfinite(x)):
        raise BlowUpError("non-finite positions in drift evaluation")
    if spec.form == "zero":
        return np.zeros_like(x)
    if spec.form == "power_law":
        c, alpha, trunc, rot = _kernel_params(spec, t)
        if c == 0.0:
            return np.zeros_like(x)
        if allow_rank_path and d == 1 and alpha == 1.0 and not rot:
            c_cl = c if trunc <= 0.0 else min(max(c, -trunc), trunc)
            return _pairsum.rank_drift_sign_kernel(x, c_cl)
        return _pairsum.all_drift_power_law(x, c, alpha, trunc, rot)
    # callable kernel: chunked numpy evaluation, same block+tree reduction;
    # overflow surfaces as a blow-up through the finiteness checks downstream
    out = np.empty_like(x)
    chunk = max(1, int(2e6 / max(n, 1)))
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, n, chunk):
            idx = np.arange(start, min(start + chunk, n))
            xs = np.repeat(x[idx], n, axis=0)
            ys = np.tile(x, (len(idx), 1))
            terms = eval_kernel(spec, t, xs, ys).reshape(len(idx), n, d)
            out[idx] = _pairsum.tree_sum(terms, axis=1) / n
    return out


def mean_field_drift(t: float, i: int, ens: ParticleEnsemble,
                     spec: KernelSpec) -> np.ndarray:
    """Drift felt by particle ``i``: (1/N) sum_j b_t(X^i, X^j).

    The j == i term contributes zero by the diagonal convention. The sum uses
    the same fixed block+tree reduction as the full stepping loop, so the
    value is bit-identical no matter how many workers run elsewhere.
    """
    if not 0 <= i < ens.n:
        raise ValidationError(f"particle index {i} out of range")
    x = ens.positions
    if spec.form == "zero":
        return np.zeros(ens.d)
    if spec.form == "power_law":
        c, alpha, trunc, rot = _kernel_params(spec, t)
        if c == 0.0:
            return np.zeros(ens.d)
        return _pairsum.row_drift_power_law(x, i, c, alpha, trunc, rot)
    terms = eval_kernel(spec, t, np.broadcast_to(x[i], x.shape), x)
    return _pairsum.tree_sum(terms, axis=0) / ens.n


def em_step(ens: ParticleEnsemble, dt: float, spec: KernelSpec,
            diffusion: Diffusion, xi: np.ndarray) -> ParticleEnsemble:
    """One explicit Euler-Maruyama step with the supplied standard normals."""
    if not dt > 0:
        raise ValidationError("dt must be > 0")
    xi = np.asarray(xi, dtype=float)
    if xi.shape != ens.positions.shape:
        raise ValidationError("noise draw must have shape (N, d)")
    drift = drift_all(ens.time, ens.positions, spec)
    sigma = diffusion.sigma_diag(ens.positions)
    with np.errstate(over="ignore", invalid="ignore"):
        new = ens.positions + drift * dt + sigma * math.sqrt(dt) * xi
    bad = ~np.isfinite(new)
    if bad.any():
        i = int(np.argwhere(bad.any(axis=1))[0][0])
        raise BlowUpError(
            f"blow-up: particle {i} non-finite at step {ens.step + 1} "
            f"(t = {ens.time + dt:.6g})")
    return replace(ens, positions=new, time=ens.time + dt, step=ens.step + 1)


def _schedule_level(cfg: SimConfig, t: float) -> Optional[float]:
    if cfg.truncation_schedule is None:
        return None
    level = cfg.truncation_schedule[0][1]
    for t0, lv in cfg.truncation_schedule:
        if t >= t0 - _ALIGN_TOL:
            level = lv
    return level


def _run(cfg: SimConfig, drift_override: Optional[Callable] = None) -> SimResult:
    _pairsum.apply_thread_cap()
    init_key = _noise.philox_key(cfg.seed, _noise.STREAM_INITIAL, cfg.replica)
    step_key = _noise.philox_key(cfg.seed, _noise.STREAM_STEPS, cfg.replica)
    x = cfg.initial.sample(cfg.n, cfg.d, init_key)
    ens = ParticleEnsemble(positions=x, time=0.0, seed=cfg.seed, replica=cfg.replica)
    steps = cfg.steps
    snap_at = set(cfg.snapshot_steps())
    snapshots = []
    if 0 in snap_at:
        snapshots.append((0.0, ens))

    store = cfg.store_stride > 0
    path, incs, ptimes = None, None, None
    if store:
        kept = steps // cfg.store_stride + 1
        path = np.empty((kept, cfg.n, cfg.d))
        ptimes = np.empty(kept)
        path[0] = ens.positions
        ptimes[0] = 0.0
        if cfg.store_increments:
            incs = np.empty((kept - 1, cfg.n, cfg.d))

    sqdt = math.sqrt(cfg.dt)
    try:
        for k in range(steps):
            t = k * cfg.dt
            if drift_override is None:
                level = _schedule_level(cfg, t)
                spec = cfg.kernel if level is None else truncate(cfg.kernel, level)
            if cfg.zero_noise:
                xi = np.zeros((cfg.n, cfg.d))
            else:
                xi = _noise.normal_block(step_key, k, (cfg.n, cfg.d))
            if drift_override is not None:
                drift = drift_override(t, ens.positions)
                sigma = cfg.diffusion.sigma_diag(ens.positions)
                with np.errstate(over="ignore", invalid="ignore"):
                    new = ens.positions + drift * cfg.dt + sigma * sqdt * xi
                if not np.all(np.isfinite(new)):
                    raise BlowUpError(f"blow-up at step {k + 1}")
                ens = replace(ens, positions=new, time=(k + 1) * cfg.dt, step=k + 1)
            else:
                ens = em_step(ens, cfg.dt, spec, cfg.diffusion, xi)
                # pin the absolute time to avoid accumulated roundoff
                ens = replace(ens, time=(k + 1) * cfg.dt)
            if store and (k + 1) % cfg.store_stride == 0:
                slot = (k + 1) // cfg.store_stride
                path[slot] = ens.positions
                ptimes[slot] = ens.time
                if cfg.store_increments:
                    incs[slot - 1] = sqdt * xi
            if (k + 1) in snap_at:
                snapshots.append((ens.time, ens))
    except BlowUpError as err:
        err.partial = SimResult(config=cfg, snapshots=snapshots, final=ens,
                                path_times=ptimes, path=path, increments=incs)
        raise

    notes = ()
    if cfg.d == 1:
        notes = ("d=1 run: outside the d >= 2 hypothesis range of the density "
                 "and admissibility estimates; oracle use only",)
    return SimResult(config=cfg, snapshots=snapshots, final=ens,
                     path_times=ptimes, path=path, increments=incs, notes=notes)


def simulate(cfg: SimConfig) -> SimResult:
    """Run the interacting system; snapshots at the requested times."""
    return _run(cfg)


def simulate_frozen(cfg: SimConfig, drift_fn: Callable) -> SimResult:
    """Run the linear SDE dX = B(t, X) dt + sigma dW for a frozen drift field.

    ``drift_fn(t, positions) -> (N, d)``. Used for cross-checks against
    reweighted driftless runs; the pairwise kernel in ``cfg`` is ignored.
    """
    return _run(cfg, drift_override=drift_fn)


@dataclass
class CoupledResult:
    """E[sup_{t<=T} |X_t - Y_t|^beta] estimates for two kernels sharing noise."""

    sup_diff_moment: dict
    sup_diff_stderr: dict
    final_a: ParticleEnsemble
    final_b: ParticleEnsemble


def coupled_simulate(cfg: SimConfig, kernel_a: KernelSpec, kernel_b: KernelSpec,
                     betas: Sequence[float] = (1.0,)) -> CoupledResult:
    """Two systems driven by the same noise and initial ensemble, different kernels."""
    _pairsum.apply_thread_cap()
    init_key = _noise.philox_key(cfg.seed, _noise.STREAM_INITIAL, cfg.replica)
    step_key = _noise.philox_key(cfg.seed, _noise.STREAM_STEPS, cfg.replica)
    x0 = cfg.initial.sample(cfg.n, cfg.d, init_key)
    ens_a = ParticleEnsemble(positions=x0, time=0.0, seed=cfg.seed, replica=cfg.replica)
    ens_b = ParticleEnsemble(positions=x0.copy(), time=0.0, seed=cfg.seed,
                             replica=cfg.replica)
    sup = np.zeros(cfg.n)
    for k in range(cfg.steps):
        if cfg.zero_noise:
            xi = np.zeros((cfg.n, cfg.d))
        else:
            xi = _noise.normal_block(step_key, k, (cfg.n, cfg.d))
        ens_a = em_step(ens_a, cfg.dt, kernel_a, cfg.diffusion, xi)
        ens_b = em_step(ens_b, cfg.dt, kernel_b, cfg.diffusion, xi)
        diff = np.sqrt(np.sum((ens_a.positions - ens_b.positions) ** 2, axis=1))
        np.maximum(sup, diff, out=sup)
    moments = {}
    errs = {}
    for beta in betas:
        vals = sup ** beta
        moments[float(beta)] = float(np.mean(vals))
        errs[float(beta)] = float(np.std(vals, ddof=1) / math.sqrt(cfg.n))
    return CoupledResult(sup_diff_moment=moments, sup_diff_stderr=errs,
                         final_a=ens_a, final_b=ens_b)


def empirical_moment(ens: ParticleEnsemble, beta: float) -> float:
    """(1/N) sum_i |X^i|^beta (euclidean norm)."""
    if beta < 1:
        raise ValidationError("beta must be >= 1")
    r = np.sqrt(np.sum(ens.positions ** 2, axis=1))
    return float(np.mean(r ** beta))


def increment_statistic(result: SimResult, delta: float, beta: float) -> float:
    """Monte Carlo estimate of E sup_{t <= T-delta} |X_{t+delta} - X_t|^beta.

    Runs over the stored path (uniform spacing); ``delta`` must be a multiple
    of the storage spacing and at most the horizon.
    """
    if result.path is None:
        raise ValidationError("increment statistics need a stored path")
    times = result.path_times
    spacing = times[1] - times[0]
    if delta > result.config.horizon + _ALIGN_TOL:
        raise ValidationError("delta exceeds the horizon")
    stride = delta / spacing
    if abs(stride - round(stride)) > _ALIGN_TOL * max(1.0, stride):
        raise ValidationError("delta must be a multiple of the stored spacing")
    stride = int(round(stride))
    if stride < 1:
        raise ValidationError("delta must be at least one stored interval")
    path = result.path
    disp = path[stride:] - path[:-stride]            # (K+1-stride, N, d)
    dist = np.sqrt(np.sum(disp ** 2, axis=2))
    sup = dist.max(axis=0)
    return float(np.mean(sup ** beta))


@dataclass
class GirsanovWeights:
    """Per-path stochastic exponential data for a driftless reference run.

    ``log_weight[i] = sum_k btilde(Z_k) . dW_k - 0.5 |btilde(Z_k)|^2 dt`` and
    ``integrated_quadratic`` is the half quadratic-variation term alone.
    """

    log_weight: np.ndarray
    integrated_quadratic: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weight)

    def mean_weight(self):
        w = self.weights
        n = len(w)
        return float(np.mean(w)), float(np.std(w, ddof=1) / math.sqrt(n))

    def expectation(self, values: np.ndarray):
        """Self-normalized reweighted mean of per-path ``values`` with stderr."""
        w = self.weights
        v = np.asarray(values, dtype=float)
        mu = float(np.sum(w * v) / np.sum(w))
        # delta-method stderr of the ratio estimator
        n = len(w)
        resid = w * (v - mu) / np.mean(w)
        se = float(np.std(resid, ddof=1) / math.sqrt(n))
        return mu, se


def girsanov_weight(result: SimResult, drift_fn: Callable) -> GirsanovWeights:
    """Stochastic exponential of a frozen-flow drift along a driftless run.

    ``result`` must come from a zero-kernel simulation with stored per-step
    increments. ``drift_fn(t, positions) -> (N, d)`` supplies the frozen
    mean-field drift ``B_t = int b_t(., y) mu_t(dy)`` (e.g. built from a
    density flow via :func:`mvlov.fpe.flow_drift`); the integrand is
    ``btilde = sigma^{-1} B``. The same callable drives
    :func:`simulate_frozen`, which is the direct-simulation counterpart.
    """
    cfg = result.config
    if cfg.kernel.form != "zero":
        raise ValidationError("reference trajectory must be driftless (zero kernel)")
    if result.increments is None or result.path is None:
        raise ValidationError("girsanov weights need stored increments")
    n = cfg.n
    log_w = np.zeros(n)
    quad = np.zeros(n)
    dt = cfg.dt
    for k in range(result.increments.shape[0]):
        t = result.path_times[k]
        z = result.path[k]
        b = drift_fn(t, z)
        sigma = cfg.diffusion.sigma_diag(z)
        btilde = b / sigma
        dw = result.increments[k]
        log_w += np.sum(btilde * dw, axis=1) - 0.5 * np.sum(btilde ** 2, axis=1) * dt
        quad += 0.5 * np.sum(btilde ** 2, axis=1) * dt
    if not np.all(np.isfinite(log_w)):
        raise BlowUpError("non-finite Girsanov log-weight")
    return GirsanovWeights(log_weight=log_w, integrated_quadratic=quad)
