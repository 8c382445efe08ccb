"""Measuring instruments: transport distances, localized norms, occupation checks.

Conventions:

* Total variation of a signed density is ``int |rho|`` (so two disjoint
  probability densities are at TV distance 2); the weighted variant multiplies
  by ``phi_theta(x) = 1 + |x|^theta``.
* Localized norms use the fixed cutoff profile from :mod:`mvlov.kernels`:
  ``sup_z ||f chi_r^z||_p`` with the supremum over a half-spacing lattice
  (``continuum_sup``) or indicator unit boxes ``Q_z = prod (z_i, z_i+1]``
  anchored on the integer lattice (``unit_lattice``).
* Occupation ("Krylov") ratios compare the Monte Carlo estimate of
  ``E int_0^T f_t(X_t) dt`` against the localized space-time norm of ``f``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product as iter_product
from typing import Optional, Sequence, Union

import numpy as np
from scipy import signal
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import linear_sum_assignment, linprog
from scipy.sparse import coo_matrix, vstack

from .density import GridDensity
from .errors import ValidationError
from .kernels import chi
from .particles import SimResult

__all__ = [
    "Field",
    "SpaceTimeField",
    "ProductField",
    "NormSpec",
    "KrylovReport",
    "ExpMomentResult",
    "ball_volume",
    "wasserstein_1d",
    "wasserstein_discrete",
    "weighted_tv",
    "localized_norm",
    "mixed_localized_norm",
    "maximal_function",
    "krylov_check",
    "pair_krylov_check",
    "exp_moment_check",
    "gaussian_bump_field",
]


# ---------------------------------------------------------------------------
# grid-function containers


@dataclass(frozen=True)
class Field:
    """A (possibly signed) grid function on a rectangular cell grid."""

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != lo.size or np.any(hi <= lo):
            raise ValidationError("bad field geometry")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.values.shape, dtype=float)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def centers(self, axis: int) -> np.ndarray:
        h = self.spacing[axis]
        return self.lo[axis] + (np.arange(self.values.shape[axis]) + 0.5) * h

    def at(self, positions: np.ndarray) -> np.ndarray:
        """Multilinear interpolation, zero outside the box."""
        pos = np.asarray(positions, dtype=float)
        if self.d == 1:
            return np.interp(pos[:, 0], self.centers(0), self.values,
                             left=0.0, right=0.0)
        interp = RegularGridInterpolator(
            [self.centers(k) for k in range(self.d)], self.values,
            method="linear", bounds_error=False, fill_value=0.0)
        return interp(pos)

    @staticmethod
    def from_density(rho: GridDensity) -> "Field":
        return Field(lo=rho.lo, hi=rho.hi, values=rho.values)

    @staticmethod
    def from_callable(fn, lo, hi, shape) -> "Field":
        tmp = Field(lo=np.atleast_1d(lo), hi=np.atleast_1d(hi),
                    values=np.zeros(tuple(np.atleast_1d(shape))))
        mesh = np.meshgrid(*[tmp.centers(k) for k in range(tmp.d)], indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = np.asarray(fn(pts), dtype=float).reshape(tmp.values.shape)
        return Field(lo=tmp.lo, hi=tmp.hi, values=vals)


@dataclass(frozen=True)
class SpaceTimeField:
    """Time-indexed grid function; ``values[k]`` lives at ``times[k]``."""

    times: np.ndarray
    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or vals.shape[0] != times.size:
            raise ValidationError("times and values disagree")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValidationError("times must increase")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "lo", np.atleast_1d(np.asarray(self.lo, float)))
        object.__setattr__(self, "hi", np.atleast_1d(np.asarray(self.hi, float)))

    def slice_at(self, t: float) -> Field:
        idx = int(np.searchsorted(self.times, t + 1e-12, side="right") - 1)
        idx = max(0, min(idx, self.times.size - 1))
        return Field(lo=self.lo, hi=self.hi, values=self.values[idx])

    @staticmethod
    def from_static(f: Field, times) -> "SpaceTimeField":
        times = np.asarray(times, dtype=float)
        vals = np.broadcast_to(f.values, (times.size,) + f.values.shape).copy()
        return SpaceTimeField(times=times, values=vals, lo=f.lo, hi=f.hi)


@dataclass(frozen=True)
class ProductField:
    """Two-point grid function f(x, y) on a product of two 1-d grids."""

    values: np.ndarray          # (Mx, My) or (K, Mx, My) with times set
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        want = 2 if self.times is None else 3
        if vals.ndim != want:
            raise ValidationError("product field must be (Mx, My) or (K, Mx, My)")
        object.__setattr__(self, "values", vals)

    def x_centers(self) -> np.ndarray:
        m = self.values.shape[-2]
        h = (self.x_hi - self.x_lo) / m
        return self.x_lo + (np.arange(m) + 0.5) * h

    def y_centers(self) -> np.ndarray:
        m = self.values.shape[-1]
        h = (self.y_hi - self.y_lo) / m
        return self.y_lo + (np.arange(m) + 0.5) * h

    def slice_values(self, t: float) -> np.ndarray:
        if self.times is None:
            return self.values
        idx = int(np.searchsorted(self.times, t + 1e-12, side="right") - 1)
        return self.values[max(0, min(idx, self.times.size - 1))]

    def at(self, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        vals = self.slice_values(t)
        interp = RegularGridInterpolator(
            (self.x_centers(), self.y_centers()), vals,
            method="linear", bounds_error=False, fill_value=0.0)
        return interp(np.stack([x, y], axis=1))


@dataclass(frozen=True)
class NormSpec:
    """Exponent pair, cutoff radius and lattice mode for localized norms."""

    p: float
    q: float
    r: float = 1.0
    lattice: str = "continuum_sup"

    def __post_init__(self):
        if not (self.p > 1 and self.q > 1):
            raise ValidationError("exponents must exceed 1")
        if not self.r > 0:
            raise ValidationError("cutoff radius must be > 0")
        if self.lattice not in ("continuum_sup", "unit_lattice"):
            raise ValidationError(f"unknown lattice mode {self.lattice!r}")


def ball_volume(d: int, radius: float) -> float:
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0) * radius ** d


# ---------------------------------------------------------------------------
# transport distances


def _quantiles_of(obj, levels: np.ndarray) -> np.ndarray:
    if isinstance(obj, GridDensity):
        if obj.d != 1:
            raise ValidationError("wasserstein_1d needs 1-d inputs")
        x = obj.centers(0)
        pm = obj.values * obj.cell_volume
        total = pm.sum()
        if total <= 0:
            raise ValidationError("empty density")
        # CDF evaluated at cell centers (half of the own-cell mass counted)
        cdf = (np.cumsum(pm) - 0.5 * pm) / total
        return np.interp(levels, cdf, x, left=x[0], right=x[-1])
    arr = np.asarray(obj, dtype=float).reshape(-1)
    xs = np.sort(arr)
    # empirical quantile: level u -> order statistic at ceil(u * n) - 1
    idx = np.minimum((levels * xs.size).astype(int), xs.size - 1)
    return xs[idx]


def wasserstein_1d(a, b, theta: float = 1.0, n_levels: int = 8192) -> float:
    """Order-theta transport distance on the line via quantile coupling.

    ``a`` and ``b`` are sample arrays or 1-d :class:`GridDensity` objects. Two
    sample sets must have equal size (exact sorted coupling); mixed or density
    inputs are coupled through ``n_levels`` midpoint quantile levels.
    """
    if theta < 1:
        raise ValidationError("theta must be >= 1")
    a_samp = not isinstance(a, GridDensity)
    b_samp = not isinstance(b, GridDensity)
    if a_samp and b_samp:
        xa = np.sort(np.asarray(a, dtype=float).reshape(-1))
        xb = np.sort(np.asarray(b, dtype=float).reshape(-1))
        if xa.size != xb.size:
            raise ValidationError(
                "sorted coupling needs equal sample counts; resample first")
        return float(np.mean(np.abs(xa - xb) ** theta) ** (1.0 / theta))
    levels = (np.arange(n_levels) + 0.5) / n_levels
    qa = _quantiles_of(a, levels)
    qb = _quantiles_of(b, levels)
    return float(np.mean(np.abs(qa - qb) ** theta) ** (1.0 / theta))


def wasserstein_discrete(a_points, a_weights, b_points, b_weights,
                         theta: float = 1.0, max_atoms: int = 512) -> float:
    """Exact optimal transport between small weighted point sets.

    Equal-size uniform marginals reduce to an assignment problem; general
    weights solve the transportation LP (HiGHS). The final cost is accumulated
    in extended precision.
    """
    xa = np.atleast_2d(np.asarray(a_points, dtype=float))
    xb = np.atleast_2d(np.asarray(b_points, dtype=float))
    wa = np.asarray(a_weights, dtype=float)
    wb = np.asarray(b_weights, dtype=float)
    if xa.shape[0] > max_atoms or xb.shape[0] > max_atoms:
        raise ValidationError(f"atom count exceeds the exact-solver cap {max_atoms}")
    if abs(wa.sum() - 1.0) > 1e-9 or abs(wb.sum() - 1.0) > 1e-9:
        raise ValidationError("weights must sum to 1")
    if np.any(wa < 0) or np.any(wb < 0):
        raise ValidationError("weights must be nonnegative")
    cost = np.sqrt(((xa[:, None, :] - xb[None, :, :]) ** 2).sum(axis=2)) ** theta
    m, n = cost.shape
    uniform = (m == n and np.allclose(wa, 1.0 / m, atol=1e-12)
               and np.allclose(wb, 1.0 / n, atol=1e-12))
    if uniform:
        ri, ci = linear_sum_assignment(cost)
        total = np.sum(cost[ri, ci].astype(np.longdouble)) / m
        return float(total ** (1.0 / np.longdouble(theta)))
    rows = np.repeat(np.arange(m), n)
    cols = np.tile(np.arange(n), m)
    data = np.ones(m * n)
    a_eq = coo_matrix((data, (rows, np.arange(m * n))), shape=(m, m * n))
    b_eq_rows = coo_matrix((data, (cols, np.arange(m * n))), shape=(n, m * n))
    res = linprog(cost.ravel(), A_eq=vstack([a_eq, b_eq_rows]),
                  b_eq=np.concatenate([wa, wb]), bounds=(0, None),
                  method="highs")
    if not res.success:
        raise ValidationError(f"transport LP failed: {res.message}")
    total = np.dot(res.x.astype(np.longdouble), cost.ravel().astype(np.longdouble))
    return float(max(total, 0.0) ** (1.0 / np.longdouble(theta)))


def weighted_tv(rho1: GridDensity, rho2: GridDensity, theta: float = 0.0) -> float:
    """``sum (1 + |x|^theta) |rho1 - rho2| vol`` over cells (theta=0: plain TV)."""
    if theta < 0:
        raise ValidationError("theta must be >= 0")
    if not rho1.same_grid(rho2):
        raise ValidationError("grids do not match")
    diff = np.abs(rho1.values - rho2.values)
    if theta == 0.0:
        return float(diff.sum() * rho1.cell_volume)
    mesh = rho1.center_mesh()
    r = np.sqrt(sum(m ** 2 for m in mesh))
    return float(((1.0 + r ** theta) * diff).sum() * rho1.cell_volume)


# ---------------------------------------------------------------------------
# localized norms


def _box_index(centers: np.ndarray) -> np.ndarray:
    """Index of the unit box (z, z+1] containing each coordinate."""
    return (np.ceil(centers) - 1).astype(np.int64)


def _slice_norm_unit_lattice(vals: np.ndarray, f: Field, p: float) -> float:
    axes_idx = [_box_index(f.centers(k)) for k in range(f.d)]
    offsets = [idx - idx.min() for idx in axes_idx]
    sizes = [o.max() + 1 for o in offsets]
    flat = np.zeros(int(np.prod(sizes)))
    mesh = np.meshgrid(*offsets, indexing="ij")
    lin = np.ravel_multi_index([m.ravel() for m in mesh], sizes)
    if np.isinf(p):
        out = np.zeros(int(np.prod(sizes)))
        np.maximum.at(out, lin, np.abs(vals).ravel())
        return float(out.max())
    np.add.at(flat, lin, (np.abs(vals) ** p).ravel() * f.cell_volume)
    return float(flat.max() ** (1.0 / p))


def _slice_norm_continuum(vals: np.ndarray, f: Field, p: float, r: float) -> float:
    h = f.spacing
    if np.isinf(p):
        best = 0.0
        # direct sweep over the half-spacing lattice (p = inf is rare/small)
        grids = [np.arange(2 * s) * 0.5 * h[k] + f.lo[k]
                 for k, s in enumerate(vals.shape)]
        mesh_c = np.meshgrid(*[f.centers(k) for k in range(f.d)], indexing="ij")
        for z in iter_product(*grids):
            dist = np.sqrt(sum((mc - zz) ** 2 for mc, zz in zip(mesh_c, z)))
            best = max(best, float((np.abs(vals) * chi(dist / r)).max()))
        return best
    g = np.abs(vals) ** p
    best = 0.0
    radii = [int(math.ceil(2.0 * r / h[k])) + 1 for k in range(f.d)]
    for shift in iter_product(*([(0.0, 0.5)] * f.d)):
        offs = [np.arange(-radii[k], radii[k] + 1) * h[k] - shift[k] * h[k]
                for k in range(f.d)]
        mesh = np.meshgrid(*offs, indexing="ij")
        dist = np.sqrt(sum(m ** 2 for m in mesh))
        stencil = chi(dist / r) ** p
        corr = signal.fftconvolve(g, np.flip(stencil), mode="same")
        best = max(best, float(corr.max()))
    return float(max(best, 0.0) * f.cell_volume) ** (1.0 / p)


def _slice_norm(fld: Field, spec: NormSpec) -> float:
    if spec.lattice == "unit_lattice":
        return _slice_norm_unit_lattice(fld.values, fld, spec.p)
    return _slice_norm_continuum(fld.values, fld, spec.p, spec.r)


def localized_norm(f: Union[Field, SpaceTimeField], spec: NormSpec,
                   horizon: Optional[float] = None) -> float:
    """Localized space-time norm ``sup_z ( int_0^T ||f_t chi_r^z||_p^q dt )^(1/q)``.

    ``q = inf`` takes the essential sup over time slices. A static
    :class:`Field` needs ``horizon`` and is treated as constant in time (the
    supremum over z then commutes with the time integral, so the slice norm is
    computed once).
    """
    if isinstance(f, Field):
        if horizon is None:
            raise ValidationError("static field needs a horizon")
        s = _slice_norm(f, spec)
        if np.isinf(spec.q):
            return s
        return s * horizon ** (1.0 / spec.q)
    times = f.times
    if times.size == 0:
        raise ValidationError("empty domain")
    horizon = horizon if horizon is not None else float(times[-1] - times[0])
    if times.size == 1:
        dt = horizon
    else:
        dts = np.diff(times)
        if not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
            raise ValidationError("time samples must be uniform")
        dt = float(dts[0])
    norms = np.array([_slice_norm(Field(lo=f.lo, hi=f.hi, values=f.values[k]),
                                  spec) for k in range(times.size)])
    if np.isinf(spec.q):
        return float(norms.max())
    return float((np.sum(norms ** spec.q) * dt) ** (1.0 / spec.q))


def mixed_localized_norm(f: ProductField, p1: float, p2: float, q0: float,
                         horizon: float) -> float:
    """Nested two-point norm over unit-box pairs.

    ``sup_{z, z'} ( int_0^T ( int_{Q_z'} ||1_{Q_z} f_t(., y)||_{p1}^{p2} dy
    )^{q0/p2} dt )^{1/q0}`` with boxes anchored on the integer lattice;
    infinite exponents take suprema.
    """
    xc = f.x_centers()
    yc = f.y_centers()
    hx = xc[1] - xc[0] if xc.size > 1 else f.x_hi - f.x_lo
    hy = yc[1] - yc[0] if yc.size > 1 else f.y_hi - f.y_lo
    zx = _box_index(xc)
    zy = _box_index(yc)
    x_edges = np.flatnonzero(np.diff(zx)) + 1
    y_edges = np.flatnonzero(np.diff(zy)) + 1
    x_groups = np.split(np.arange(xc.size), x_edges)
    y_groups = np.split(np.arange(yc.size), y_edges)

    if f.times is None:
        slices = [f.values]
        dt = horizon
        k_count = 1
    else:
        k_count = f.times.size
        slices = [f.values[k] for k in range(k_count)]
        dts = np.diff(f.times)
        if dts.size and not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
            raise ValidationError("time samples must be uniform")
        dt = float(dts[0]) if dts.size else horizon

    per_slice = np.zeros((k_count, len(x_groups), len(y_groups)))
    for k, vals in enumerate(slices):
        a = np.abs(vals)
        for ix, gx in enumerate(x_groups):
            block = a[gx, :]
            if np.isinf(p1):
                inner = block.max(axis=0)
            else:
                inner = (np.sum(block ** p1, axis=0) * hx) ** (1.0 / p1)
            for iy, gy in enumerate(y_groups):
                seg = inner[gy]
                if np.isinf(p2):
                    per_slice[k, ix, iy] = seg.max()
                else:
                    per_slice[k, ix, iy] = (np.sum(seg ** p2) * hy) ** (1.0 / p2)
    if np.isinf(q0):
        agg = per_slice.max(axis=0)
    else:
        agg = (np.sum(per_slice ** q0, axis=0) * dt) ** (1.0 / q0)
    return float(agg.max())


def maximal_function(f: Field, radius: float) -> Field:
    """Dyadic-ladder maximal ball average of ``|f|``.

    ``sup`` over radii ``{R, R/2, R/4, ...}`` down to one grid spacing of the
    discretely normalized ball average (so constants are reproduced exactly).
    The exact continuum supremum over all radii is under-approximated by at
    most the ratio of consecutive ball volumes.
    """
    h = float(f.spacing.max())
    if radius < 2.0 * h:
        raise ValidationError("radius must be at least two grid spacings")
    a = np.abs(f.values)
    ones = np.ones_like(a)
    out = np.zeros_like(a)
    r = radius
    while r >= h:
        offs = [np.arange(-int(math.ceil(r / f.spacing[k])),
                          int(math.ceil(r / f.spacing[k])) + 1) * f.spacing[k]
                for k in range(f.d)]
        mesh = np.meshgrid(*offs, indexing="ij")
        ball = (np.sqrt(sum(m ** 2 for m in mesh)) <= r).astype(float)
        num = signal.fftconvolve(a, ball, mode="same")
        # average over the in-domain part of the ball so constants stay exact
        den = signal.fftconvolve(ones, ball, mode="same")
        np.maximum(out, num / np.maximum(den, 1.0), out=out)
        r *= 0.5
    return Field(lo=f.lo, hi=f.hi, values=np.maximum(out, 0.0))


# ---------------------------------------------------------------------------
# occupation-measure checks


@dataclass
class KrylovReport:
    """Occupation/norm ratios for a family of nonnegative test functions."""

    ratio_max: float
    per_test: list            # dicts: id, lhs, norm, ratio, lhs_all
    dt_stability: float = 1.0
    meta: dict = field(default_factory=dict)


def _occupation_lhs(result: SimResult, f) -> float:
    if result.path is None:
        raise ValidationError("occupation checks need a stored path")
    times = result.path_times
    dt = float(times[1] - times[0])
    total = np.zeros(result.path.shape[1])
    for k in range(times.size - 1):   # left Riemann rule
        if isinstance(f, SpaceTimeField):
            fld = f.slice_at(times[k])
        else:
            fld = f
        total += fld.at(result.path[k]) * dt
    return float(np.mean(total))


def krylov_check(results: Union[SimResult, Sequence[SimResult]], tests: Sequence,
                 spec: NormSpec) -> KrylovReport:
    """Ratios ``E int f(X_t) dt / |||f|||`` for each test function.

    ``results`` may be a single run or a list of runs of the same experiment
    at different step sizes; ratios come from the first, ``dt_stability`` is
    the worst max/min ratio spread across the runs. Tests are ``(id, Field)``
    or ``(id, SpaceTimeField)`` pairs with nonnegative values.
    """
    if isinstance(results, SimResult):
        results = [results]
    if not results or not tests:
        raise ValidationError("need at least one run and one test function")
    horizon = results[0].config.horizon
    per_test = []
    stab = 1.0
    for test_id, f in tests:
        vals = f.values
        if np.any(vals < 0):
            raise ValidationError(f"test {test_id!r} must be nonnegative")
        norm = localized_norm(f, spec, horizon=horizon)
        if norm <= 0:
            raise ValidationError(f"test {test_id!r} has zero norm")
        lhs_all = [_occupation_lhs(res, f) for res in results]
        ratios = [lhs / norm for lhs in lhs_all]
        per_test.append({"id": test_id, "lhs": lhs_all[0], "norm": norm,
                         "ratio": ratios[0], "lhs_all": lhs_all})
        if len(ratios) > 1:
            stab = max(stab, max(ratios) / min(ratios))
    report = KrylovReport(ratio_max=max(t["ratio"] for t in per_test),
                          per_test=per_test, dt_stability=stab)
    return report


def pair_krylov_check(result_a: SimResult, result_b: SimResult, f: ProductField,
                      p1: float, p2: float, q0: float,
                      test_id: str = "pair") -> KrylovReport:
    """Two-process occupation check against the mixed two-point norm.

    The runs must be independent (distinct seed/replica) with equal path
    counts; path i of the first is paired with path i of the second.
    """
    ca, cb = result_a.config, result_b.config
    if (ca.seed, ca.replica) == (cb.seed, cb.replica):
        raise ValidationError("seed collision: runs are not independent")
    if result_a.path is None or result_b.path is None:
        raise ValidationError("occupation checks need stored paths")
    if result_a.path.shape != result_b.path.shape:
        raise ValidationError("path counts/shapes differ")
    if ca.d != 1 or cb.d != 1:
        raise ValidationError("pair checks are implemented for 1-d processes")
    if np.any(f.values < 0):
        raise ValidationError("test function must be nonnegative")
    times = result_a.path_times
    dt = float(times[1] - times[0])
    total = np.zeros(result_a.path.shape[1])
    for k in range(times.size - 1):
        total += f.at(times[k], result_a.path[k][:, 0],
                      result_b.path[k][:, 0]) * dt
    lhs = float(np.mean(total))
    norm = mixed_localized_norm(f, p1, p2, q0, horizon=ca.horizon)
    if norm <= 0:
        raise ValidationError("test function has zero norm")
    ratio = lhs / norm
    return KrylovReport(ratio_max=ratio,
                        per_test=[{"id": test_id, "lhs": lhs, "norm": norm,
                                   "ratio": ratio, "lhs_all": [lhs]}])


@dataclass
class ExpMomentResult:
    estimate: float
    stderr: float
    log_estimate: float
    lam: float


def exp_moment_check(result: SimResult, f, lam: float) -> ExpMomentResult:
    """Monte Carlo estimate of ``E exp(lam int_0^T f_t(X_t) dt)``.

    Computed through a log-sum-exp shift so bounded-but-large integrands do
    not overflow; the standard error uses the same shift.
    """
    if lam <= 0:
        raise ValidationError("lambda must be > 0")
    vals = f.values if hasattr(f, "values") else None
    if vals is not None and np.any(vals < 0):
        raise ValidationError("test function must be nonnegative")
    if result.path is None:
        raise ValidationError("needs a stored path")
    times = result.path_times
    dt = float(times[1] - times[0])
    integral = np.zeros(result.path.shape[1])
    for k in range(times.size - 1):
        fld = f.slice_at(times[k]) if isinstance(f, SpaceTimeField) else f
        integral += fld.at(result.path[k]) * dt
    w = lam * integral
    shift = w.max()
    scaled = np.exp(w - shift)
    n = scaled.size
    log_est = shift + math.log(float(np.mean(scaled)))
    est = math.exp(log_est) if log_est < 700 else math.inf
    se = math.exp(shift) * float(np.std(scaled, ddof=1)) / math.sqrt(n) \
        if shift < 700 else math.inf
    return ExpMomentResult(estimate=est, stderr=se, log_estimate=log_est,
                           lam=float(lam))


def gaussian_bump_field(center, width: float, grid_lo, grid_hi, shape,
                        amplitude: float = 1.0) -> Field:
    """Isotropic Gaussian bump test function on a grid."""
    center = np.atleast_1d(np.asarray(center, dtype=float))

    def fn(pts):
        d2 = ((pts - center) ** 2).sum(axis=1)
        return amplitude * np.exp(-0.5 * d2 / width ** 2)

    return Field.from_callable(fn, grid_lo, grid_hi, shape)
