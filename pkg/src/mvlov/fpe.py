"""Nonlinear Fokker-Planck solver and the damped backward PDE.

The density equation integrated here is the forward equation of
``dX = B[rho] dt + sqrt(2) dW``:

    d(rho)/dt = Lap(rho) - div(B[rho] rho),      B[rho](x) = int b(x, y) rho(y) dy,

discretized as a conservative finite volume scheme (centered diffusive flux,
upwind advective flux, drift recomputed from the current density each step).
Mass is conserved to roundoff by telescoping fluxes and positivity is
preserved under the stated CFL bound.

The companion backward problem, used for the damping/regularity diagnostics,
is the vector equation

    d(u)/dt + Lap(u) - lambda u + b . grad(u) = -b,    u(T, .) = 0,

marched backward with implicit diffusion + damping and explicit upwind
advection, reporting sup |u| and sup |grad u| over the space-time grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from scipy import signal, sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .density import GridDensity
from .errors import NegativityError, ValidationError
from .kernels import KernelSpec, eval_kernel

__all__ = [
    "FpeConfig",
    "ZvonkinSolution",
    "convolve_drift",
    "fpe_solve",
    "flow_drift",
    "zvonkin_solve",
]

_ROUNDOFF_CLAMP = 1e-13  # |negative| below this (relative to the peak) is zeroed


def _max_drift_bound(spec: KernelSpec, d: int) -> float:
    """Upper bound on sup_x sum_k |B_k(x)| for a unit-mass measure argument."""
    if spec.form == "zero":
        return 0.0
    per_comp = np.inf
    if spec.truncation_level is not None:
        per_comp = spec.truncation_level
    if spec.form == "bounded_table" and spec.table_bound is not None:
        per_comp = min(per_comp, spec.table_bound)
    return d * per_comp


@dataclass(frozen=True)
class FpeConfig:
    """Grid, horizon and kernel for one finite-volume solve.

    ``dt=None`` picks the largest CFL-compliant step that divides the horizon
    and aligns with the snapshot times. The CFL bound is
    ``dt <= min(h^2/(4 d), h/(2 max_drift))`` with ``max_drift`` the
    componentwise truncation bound summed over axes.
    """

    initial: GridDensity
    horizon: float
    kernel: KernelSpec
    dt: Optional[float] = None
    boundary: str = "no_flux"
    snapshot_times: tuple = ()

    def __post_init__(self):
        if self.boundary not in ("no_flux", "periodic"):
            raise ValidationError(f"unknown boundary {self.boundary!r}")
        if not self.horizon > 0:
            raise ValidationError("horizon must be > 0")
        if self.initial.d > 2:
            raise ValidationError("grids with d > 2 are out of scope")
        if (self.kernel.form == "power_law"
                and self.kernel.truncation_level is None):
            raise ValidationError("FPE stepping needs a truncated kernel")
        if abs(self.initial.mass - 1.0) > 1e-6:
            raise ValidationError(
                f"initial mass must be 1 (got {self.initial.mass:.8f})")
        for t in self.snapshot_times:
            if t < 0 or t > self.horizon + 1e-12:
                raise ValidationError(f"snapshot time {t} outside [0, T]")
        if self.dt is not None and self.dt > self.cfl_limit() * (1 + 1e-12):
            raise ValidationError(
                f"dt = {self.dt:g} violates the CFL bound {self.cfl_limit():g}")

    def cfl_limit(self) -> float:
        g = self.initial
        h = float(g.spacing.min())
        lim = h * h / (4.0 * g.d)
        md = _max_drift_bound(self.kernel, g.d)
        if md > 0:
            lim = min(lim, h / (2.0 * md))
        return lim

    def resolve_steps(self) -> int:
        t_total = self.horizon
        if self.dt is not None:
            steps = t_total / self.dt
            if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
                raise ValidationError("horizon must be a multiple of dt")
            steps = int(round(steps))
        else:
            steps = max(1, int(math.ceil(t_total / self.cfl_limit())))
        # align steps with snapshot times
        denoms = [Fraction(t / t_total).limit_denominator(4096).denominator
                  for t in self.snapshot_times if t > 0]
        if denoms:
            lcm = 1
            for q in denoms:
                lcm = lcm * q // math.gcd(lcm, q)
            steps = lcm * int(math.ceil(steps / lcm))
        return steps


def _offsets_field(spec: KernelSpec, t: float, grid: GridDensity,
                   periodic: bool) -> np.ndarray:
    """Kernel sampled on the cell-offset grid; near-origin cells averaged.

    Returns shape (d,) + offset-grid shape. Offsets within two cells of the
    origin use a 2^4-per-axis midpoint subcell average so the stiff region is
    integrated rather than point sampled.
    """
    d = grid.d
    h = grid.spacing
    shape = grid.shape
    if periodic:
        axes_k = [np.where(np.arange(m) <= m // 2,
                           np.arange(m), np.arange(m) - m) for m in shape]
    else:
        axes_k = [np.arange(-(m - 1), m) for m in shape]
    mesh = np.meshgrid(*[k * h[i] for i, k in enumerate(axes_k)], indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = eval_kernel(spec, t, pts, np.zeros(d))
    field_shape = mesh[0].shape

    near = np.all(np.abs(np.stack([m.ravel() for m in mesh], axis=1))
                  <= 2.0 * h + 1e-12, axis=1)
    if np.any(near):
        refine = 16
        steps1 = (np.arange(refine) + 0.5) / refine - 0.5
        sub_axes = [steps1 * h[i] for i in range(d)]
        sub_mesh = np.meshgrid(*sub_axes, indexing="ij")
        sub = np.stack([m.ravel() for m in sub_mesh], axis=1)   # (16^d, d)
        centers = pts[near]
        for row, center in zip(np.where(near)[0], centers):
            samples = center[None, :] + sub
            vals[row] = eval_kernel(spec, t, samples, np.zeros(d)).mean(axis=0)
    return np.moveaxis(vals.reshape(field_shape + (d,)), -1, 0)


def convolve_drift(rho: GridDensity, spec: KernelSpec, t: float = 0.0) -> np.ndarray:
    """Mean-field drift ``B(x) = sum_cells b(x, y) rho(y) vol`` on the grid.

    Translation-invariant kernels (power law, zero, tabulated difference
    kernels are treated as such) go through a discrete convolution; the cell
    at zero offset follows the diagonal convention and near-origin cells are
    subcell-averaged. Returns an array of shape ``(d,) + grid.shape``.
    """
    d = rho.d
    if spec.form == "zero":
        return np.zeros((d,) + rho.shape)
    weights = rho.values * rho.cell_volume
    fields = _offsets_field(spec, t, rho, periodic=False)
    out = np.empty((d,) + rho.shape)
    for c in range(d):
        out[c] = signal.convolve(weights, fields[c], mode="same", method="auto")
    return out


def _convolve_periodic(weights: np.ndarray, fields: np.ndarray) -> np.ndarray:
    axes = tuple(range(weights.ndim))
    fw = np.fft.rfftn(weights, axes=axes)
    out = np.empty((fields.shape[0],) + weights.shape)
    for c in range(fields.shape[0]):
        out[c] = np.fft.irfftn(fw * np.fft.rfftn(fields[c], axes=axes),
                               s=weights.shape, axes=axes)
    return out


@njit(cache=True)
def _fv_step_1d(rho: np.ndarray, bf: np.ndarray, dt: float, h: float,
                periodic: bool, out: np.ndarray) -> None:
    m = rho.shape[0]
    inv_h = 1.0 / h
    # interior faces i+1/2 for i = 0..m-2; boundary handled below
    prev_flux = 0.0
    if periodic:
        b = bf[m - 1]
        adv = max(b, 0.0) * rho[m - 1] + min(b, 0.0) * rho[0]
        prev_flux = adv - (rho[0] - rho[m - 1]) * inv_h
    for i in range(m):
        if i < m - 1:
            b = bf[i]
            adv = max(b, 0.0) * rho[i] + min(b, 0.0) * rho[i + 1]
            flux = adv - (rho[i + 1] - rho[i]) * inv_h
        elif periodic:
            b = bf[m - 1]
            adv = max(b, 0.0) * rho[m - 1] + min(b, 0.0) * rho[0]
            flux = adv - (rho[0] - rho[m - 1]) * inv_h
        else:
            flux = 0.0
        out[i] = rho[i] - dt * inv_h * (flux - prev_flux)
        prev_flux = flux


def _fv_step_2d(rho: np.ndarray, bfx: np.ndarray, bfy: np.ndarray, dt: float,
                hx: float, hy: float) -> np.ndarray:
    # no-flux walls: face fluxes of shape (m+1, n) and (m, n+1), zero at edges
    m, n = rho.shape
    fx = np.zeros((m + 1, n))
    adv = np.maximum(bfx, 0.0) * rho[:-1, :] + np.minimum(bfx, 0.0) * rho[1:, :]
    fx[1:m, :] = adv - (rho[1:, :] - rho[:-1, :]) / hx
    fy = np.zeros((m, n + 1))
    adv = np.maximum(bfy, 0.0) * rho[:, :-1] + np.minimum(bfy, 0.0) * rho[:, 1:]
    fy[:, 1:n] = adv - (rho[:, 1:] - rho[:, :-1]) / hy
    return rho - dt * ((fx[1:, :] - fx[:-1, :]) / hx + (fy[:, 1:] - fy[:, :-1]) / hy)


def fpe_solve(cfg: FpeConfig) -> list:
    """Integrate the nonlinear density equation; snapshots at requested times.

    Returns ``[(t, GridDensity), ...]``. The drift within a step uses the
    start-of-step density. A cell going negative beyond roundoff aborts with
    :class:`NegativityError` carrying the partial snapshot list.
    """
    grid = cfg.initial
    d = grid.d
    steps = cfg.resolve_steps()
    dt = cfg.horizon / steps
    periodic = cfg.boundary == "periodic"
    h = grid.spacing
    rho = grid.values.copy()
    snap_steps = {int(round(t / dt)): t for t in cfg.snapshot_times}
    out = []
    if 0 in snap_steps:
        out.append((0.0, grid.with_values(rho.copy())))

    static_kernel = cfg.kernel.time_scaling is None
    fields = None
    if cfg.kernel.form != "zero" and static_kernel:
        fields = _offsets_field(cfg.kernel, 0.0, grid, periodic)
    new = np.empty_like(rho)
    for k in range(steps):
        t = k * dt
        if cfg.kernel.form == "zero":
            bcomp = None
        else:
            if not static_kernel:
                fields = _offsets_field(cfg.kernel, t, grid, periodic)
            w = rho * grid.cell_volume
            if periodic:
                bcomp = _convolve_periodic(w, fields)
            else:
                bcomp = np.stack([signal.convolve(w, fields[c], mode="same",
                                                  method="auto")
                                  for c in range(d)])
        if d == 1:
            if bcomp is None:
                bf = np.zeros(rho.shape[0] if periodic else rho.shape[0] - 1)
            else:
                b = bcomp[0]
                bf = np.empty(rho.shape[0] if periodic else rho.shape[0] - 1)
                bf[:rho.shape[0] - 1] = 0.5 * (b[:-1] + b[1:])
                if periodic:
                    bf[-1] = 0.5 * (b[-1] + b[0])
            _fv_step_1d(rho, bf, dt, h[0], periodic, new)
            rho, new = new, rho
        else:
            if bcomp is None:
                bfx = np.zeros((rho.shape[0] - 1, rho.shape[1]))
                bfy = np.zeros((rho.shape[0], rho.shape[1] - 1))
            else:
                bfx = 0.5 * (bcomp[0][:-1, :] + bcomp[0][1:, :])
                bfy = 0.5 * (bcomp[1][:, :-1] + bcomp[1][:, 1:])
            if periodic:
                rho = _fv_step_2d_periodic(rho, bcomp, dt, h)
            else:
                rho = _fv_step_2d(rho, bfx, bfy, dt, h[0], h[1])
        peak = rho.max()
        neg = rho.min()
        if neg < 0:
            if neg < -_ROUNDOFF_CLAMP * max(peak, 1.0):
                err = NegativityError(
                    f"negative cell {rho.min():.3e} at step {k + 1} (t = {t + dt:.6g})")
                err.partial = out
                raise err
            np.maximum(rho, 0.0, out=rho)
        if (k + 1) in snap_steps:
            out.append(((k + 1) * dt, grid.with_values(rho.copy())))
    return out


def _fv_step_2d_periodic(rho: np.ndarray, bcomp: np.ndarray, dt: float,
                         h: np.ndarray) -> np.ndarray:
    flux_div = np.zeros_like(rho)
    for axis in range(2):
        b = bcomp[axis]
        bshift = np.roll(b, -1, axis=axis)
        rshift = np.roll(rho, -1, axis=axis)
        bf = 0.5 * (b + bshift)
        adv = np.maximum(bf, 0.0) * rho + np.minimum(bf, 0.0) * rshift
        flux = adv - (rshift - rho) / h[axis]
        flux_div += (flux - np.roll(flux, 1, axis=axis)) / h[axis]
    return rho - dt * flux_div


def flow_drift(flow: Sequence, spec: KernelSpec) -> Callable:
    """Freeze a density flow into a drift field ``B(t, positions)``.

    ``flow`` is ``[(t, GridDensity), ...]``; between the listed times the most
    recent field is used (piecewise constant to the left). Positions are
    clamped into the grid box before multilinear interpolation. The returned
    callable serves both :func:`mvlov.particles.simulate_frozen` and
    :func:`mvlov.particles.girsanov_weight`.
    """
    if not flow:
        raise ValidationError("empty reference flow")
    times = np.array([t for t, _ in flow])
    if np.any(np.diff(times) <= 0):
        raise ValidationError("flow times must increase")
    interps = []
    for t, rho in flow:
        b = convolve_drift(rho, spec, t)
        axes = [rho.centers(k) for k in range(rho.d)]
        if rho.d == 1:
            interps.append((axes[0], b[0]))
        else:
            interps.append([RegularGridInterpolator(axes, b[c], method="linear",
                                                    bounds_error=False,
                                                    fill_value=None)
                            for c in range(rho.d)])
    lo = flow[0][1].lo
    hi = flow[0][1].hi
    d = flow[0][1].d

    def drift(t: float, positions: np.ndarray) -> np.ndarray:
        idx = int(np.searchsorted(times, t + 1e-12, side="right") - 1)
        idx = max(0, min(idx, len(interps) - 1))
        pos = np.clip(positions, lo, hi)
        if d == 1:
            xg, b0 = interps[idx]
            return np.interp(pos[:, 0], xg, b0)[:, None]
        return np.stack([f(pos) for f in interps[idx]], axis=1)

    return drift


@dataclass
class ZvonkinSolution:
    """Backward-PDE solve summary; ``u0`` is the field at t = 0."""

    u0: np.ndarray          # (d,) + grid shape
    lam: float
    sup_u: float
    sup_grad_u: float
    times: Optional[np.ndarray] = None
    history: Optional[list] = None  # [(t, u)] when stored
    terminal_is_zero: bool = True


def _laplacian_matrix(shape, spacing, lam: float, dt: float):
    d = len(shape)
    n_tot = int(np.prod(shape))
    eye = sparse.identity(n_tot, format="csr")
    lap = sparse.csr_matrix((n_tot, n_tot))
    for axis in range(d):
        m = shape[axis]
        h2 = spacing[axis] ** 2
        main = -2.0 * np.ones(m) / h2
        off = np.ones(m - 1) / h2
        lap1 = sparse.diags([off, main, off], [-1, 0, 1], format="csr")
        mats = [sparse.identity(shape[k], format="csr") for k in range(d)]
        mats[axis] = lap1
        term = mats[0]
        for k in range(1, d):
            term = sparse.kron(term, mats[k], format="csr")
        lap = lap + term
    return (1.0 + lam * dt) * eye - dt * lap


def _upwind_advection(u: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """(b . grad u) with donor-cell differencing, zero beyond the boundary."""
    out = np.zeros_like(u)
    d = b.shape[0]
    for axis in range(d):
        h = spacing[axis]
        fwd = (np.roll(u, -1, axis=axis) - u) / h
        bwd = (u - np.roll(u, 1, axis=axis)) / h
        # one-sided at the boundary (ghost value 0)
        _edge_slice(fwd, axis, -1)[...] = (0.0 - _edge_slice(u, axis, -1)) / h
        _edge_slice(bwd, axis, 0)[...] = (_edge_slice(u, axis, 0) - 0.0) / h
        bax = b[axis]
        out += np.where(bax > 0, bax * fwd, bax * bwd)
    return out


def _edge_slice(arr: np.ndarray, axis: int, index: int):
    sl = [slice(None)] * arr.ndim
    sl[axis] = index
    return arr[tuple(sl)]


def zvonkin_solve(b: np.ndarray, lam: float, lo, hi, horizon: float,
                  dt: Optional[float] = None, store: bool = False) -> ZvonkinSolution:
    """Backward damped PDE with the drift itself as source, marched to t = 0.

    ``b`` has shape ``(d,) + grid_shape`` (a frozen, bounded vector field on
    the box [lo, hi]); each component of ``u`` solves
    ``du/dt + Lap u - lam u + b . grad u = -b_c`` with ``u(T) = 0`` and
    homogeneous Dirichlet walls. Diffusion and damping are implicit (one LU
    factorization reused across steps), advection explicit upwind; ``dt=None``
    picks the advective stability limit. Reports sup |u| and the Frobenius
    sup |grad u| over all time steps.
    """
    if lam < 1.0:
        raise ValidationError("lambda must be >= 1")
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValidationError("drift field must be bounded (truncate it)")
    d = b.shape[0]
    shape = b.shape[1:]
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    spacing = (hi - lo) / np.asarray(shape, dtype=float)
    speed = np.abs(b).sum(axis=0).max()
    if dt is None:
        dt_adv = 0.8 * spacing.min() / speed if speed > 0 else horizon / 32
        steps = max(32, int(math.ceil(horizon / dt_adv)))
    else:
        steps = max(1, int(round(horizon / dt)))
    dt = horizon / steps

    mat = _laplacian_matrix(shape, spacing, lam, dt)
    lu = splu(mat.tocsc())

    u = np.zeros((d,) + shape)
    sup_u = 0.0
    sup_grad = 0.0
    history = [(horizon, u.copy())] if store else None
    axes = [lo[k] + (np.arange(shape[k]) + 0.5) * spacing[k] for k in range(d)]
    for k in range(steps, 0, -1):
        rhs = np.empty_like(u)
        for c in range(d):
            rhs[c] = u[c] + dt * (_upwind_advection(u[c], b, spacing) + b[c])
        for c in range(d):
            u[c] = lu.solve(rhs[c].ravel()).reshape(shape)
        mag = np.sqrt(np.sum(u * u, axis=0))
        sup_u = max(sup_u, float(mag.max()))
        grads = [np.gradient(u[c], *axes) if d > 1 else [np.gradient(u[c], axes[0])]
                 for c in range(d)]
        g2 = sum(g ** 2 for comp in grads for g in comp)
        sup_grad = max(sup_grad, float(np.sqrt(g2).max()))
        if store:
            history.append(((k - 1) * dt, u.copy()))
    return ZvonkinSolution(u0=u, lam=float(lam), sup_u=sup_u, sup_grad_u=sup_grad,
                           times=np.arange(steps + 1) * dt,
                           history=history)
