"""Grid densities: KDE recovery, Gaussian heat semigroup, two-sided/gradient fits.

The heat semigroup here is the reference comparator for all density bounds:

    P_t mu0(y) = (2*pi*t)^(-d/2) * int exp(-|x-y|^2 / (2t)) mu0(dx),

i.e. variance ``t`` per coordinate. Note the zero-drift marginal flow started
from ``mu0`` equals ``P_{2t} mu0`` in this normalization (the generator is the
full Laplacian), so scale factors of 2 in fitted constants are expected, not
bugs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ValidationError
from .particles import ParticleEnsemble

__all__ = [
    "GridDensity",
    "BoundFit",
    "auto_grid",
    "silverman_bandwidth",
    "kde",
    "heat_semigroup",
    "fit_two_sided",
    "fit_gradient_bound",
]

TAIL_THRESHOLD = 1e-12  # cells where the comparator falls below are excluded


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density values on a rectangular cell grid.

    Cells are uniform per axis; ``values[i1, ..., id]`` lives at the cell
    center ``lo_k + (i_k + 1/2) * spacing_k``. Mass is reported, never forced.
    """

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        vals = np.asarray(self.values, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError("lo/hi must be 1-d and matching")
        if vals.ndim != lo.size:
            raise ValidationError("values rank must equal the dimension")
        if np.any(hi <= lo):
            raise ValidationError("need hi > lo")
        if np.any(vals < 0):
            raise ValidationError("density values must be nonnegative")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.shape, dtype=float)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def centers(self, axis: int) -> np.ndarray:
        n = self.shape[axis]
        h = self.spacing[axis]
        return self.lo[axis] + (np.arange(n) + 0.5) * h

    def center_mesh(self) -> list:
        return np.meshgrid(*[self.centers(k) for k in range(self.d)], indexing="ij")

    def same_grid(self, other: "GridDensity") -> bool:
        return (self.shape == other.shape
                and np.allclose(self.lo, other.lo, atol=1e-12)
                and np.allclose(self.hi, other.hi, atol=1e-12))

    def with_values(self, values: np.ndarray, **meta) -> "GridDensity":
        return GridDensity(lo=self.lo, hi=self.hi, values=values, meta=meta)

    def as_atoms(self):
        """Cell centers and masses, for semigroup evaluation."""
        mesh = self.center_mesh()
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        w = self.values.ravel() * self.cell_volume
        return pts, w


def grid_box(lo, hi, shape) -> GridDensity:
    """Empty density used as a grid specification."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    return GridDensity(lo=np.atleast_1d(lo), hi=np.atleast_1d(hi),
                       values=np.zeros(shape))


def silverman_bandwidth(positions: np.ndarray) -> np.ndarray:
    """Per-axis Silverman rule: 0.9 * min(std, iqr/1.34) * N^(-1/5)."""
    n = positions.shape[0]
    std = positions.std(axis=0, ddof=1)
    q75, q25 = np.percentile(positions, [75, 25], axis=0)
    a = np.minimum(std, (q75 - q25) / 1.34)
    if np.any(a <= 0):
        raise ValidationError("degenerate sample: set an explicit bandwidth")
    return 0.9 * a * n ** (-0.2)


def auto_grid(ens_or_positions, bandwidth, cells: int = 256,
              margin_bandwidths: float = 6.0) -> GridDensity:
    """Grid box covering the sample plus a multiple of the bandwidth."""
    pos = getattr(ens_or_positions, "positions", ens_or_positions)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (pos.shape[1],))
    lo = pos.min(axis=0) - margin_bandwidths * bw
    hi = pos.max(axis=0) + margin_bandwidths * bw
    pad = 1e-9 * np.maximum(1.0, np.abs(hi - lo))
    return grid_box(lo - pad, hi + pad, (cells,) * pos.shape[1])


def _cic_bin(positions: np.ndarray, grid: GridDensity) -> np.ndarray:
    """Cloud-in-cell (linear) binning; drops particles outside the box."""
    d = grid.d
    shape = grid.shape
    h = grid.spacing
    f = (positions - grid.lo) / h - 0.5
    base = np.floor(f).astype(np.int64)
    frac = f - base
    counts = np.zeros(shape)
    inside = np.all((positions >= grid.lo) & (positions <= grid.hi), axis=1)
    for corner in range(1 << d):
        idx = base.copy()
        w = np.ones(positions.shape[0])
        for k in range(d):
            if corner & (1 << k):
                idx[:, k] += 1
                w = w * frac[:, k]
            else:
                w = w * (1.0 - frac[:, k])
        ok = inside.copy()
        for k in range(d):
            ok &= (idx[:, k] >= 0) & (idx[:, k] < shape[k])
        np.add.at(counts, tuple(idx[ok].T), w[ok])
    return counts


def kde(ens: Union[ParticleEnsemble, np.ndarray], bandwidth="auto",
        grid: Optional[GridDensity] = None, cells: int = 256) -> GridDensity:
    """Gaussian kernel density estimate on a regular grid.

    Linear (cloud-in-cell) binning followed by convolution with a discretely
    normalized Gaussian stencil (3 sigma support), so the mass equals the
    fraction of particles inside the box up to roundoff whenever the grid
    covers the sample plus 3 bandwidths. The grid must cover the per-axis
    [0.005, 0.995] quantile box of the sample; ``bandwidth="auto"`` is the
    per-axis Silverman rule. Bandwidth and realized mass are stored in
    ``meta``.
    """
    pos = getattr(ens, "positions", None)
    if pos is None:
        pos = np.asarray(ens, dtype=float)
    if pos.ndim != 2 or pos.shape[0] < 2:
        raise ValidationError("kde needs at least two points of shape (N, d)")
    d = pos.shape[1]
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise ValidationError(f"unknown bandwidth rule {bandwidth!r}")
        bw = silverman_bandwidth(pos)
    else:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,)).copy()
    if np.any(bw <= 0):
        raise ValidationError("bandwidth must be positive")
    if grid is None:
        grid = auto_grid(pos, bw, cells=cells)
    qlo, qhi = np.percentile(pos, [0.5, 99.5], axis=0)
    if np.any(grid.lo > qlo) or np.any(grid.hi < qhi):
        raise ValidationError("grid does not cover the 0.99 quantile box of the sample")

    counts = _cic_bin(pos, grid)
    frac_inside = float(counts.sum()) / pos.shape[0]
    raw = counts / (pos.shape[0] * grid.cell_volume)
    sigma_cells = bw / grid.spacing
    smooth = gaussian_filter(raw, sigma=sigma_cells, mode="constant", truncate=3.0)
    smooth = np.maximum(smooth, 0.0)
    out = grid.with_values(smooth, bandwidth=bw, fraction_inside=frac_inside)
    out.meta["mass"] = out.mass
    return out


def _as_atoms(mu0) -> tuple:
    if isinstance(mu0, GridDensity):
        return mu0.as_atoms()
    if isinstance(mu0, tuple) and len(mu0) == 2:
        pts, w = mu0
        return np.atleast_2d(np.asarray(pts, dtype=float)), np.asarray(w, dtype=float)
    pts = np.atleast_2d(np.asarray(mu0, dtype=float))
    w = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return pts, w


def heat_semigroup(mu0, t: float, grid: GridDensity) -> GridDensity:
    """Evaluate ``P_t mu0`` on the cell centers of ``grid``.

    ``mu0`` may be a :class:`GridDensity`, an ``(points, weights)`` pair, or an
    (m, d) array of equally weighted sample points (a single point works for a
    Dirac mass).
    """
    if not t > 0:
        raise ValidationError("heat semigroup needs t > 0")
    pts, w = _as_atoms(mu0)
    d = grid.d
    if pts.shape[1] != d:
        raise ValidationError("mu0 dimension does not match the grid")
    norm = (2.0 * math.pi * t) ** (-d / 2.0)
    axes = [grid.centers(k) for k in range(d)]
    if d == 1:
        a = np.exp(-(axes[0][None, :] - pts[:, 0:1]) ** 2 / (2.0 * t))
        vals = norm * (w[:, None] * a).sum(axis=0)
    elif d == 2:
        a0 = np.exp(-(axes[0][None, :] - pts[:, 0:1]) ** 2 / (2.0 * t))
        a1 = np.exp(-(axes[1][None, :] - pts[:, 1:2]) ** 2 / (2.0 * t))
        vals = norm * np.einsum("mi,mj,m->ij", a0, a1, w, optimize=True)
    else:
        mesh = grid.center_mesh()
        y = np.stack([m.ravel() for m in mesh], axis=1)
        vals = np.zeros(y.shape[0])
        chunk = max(1, int(2e7 / max(1, y.shape[0])))
        for s in range(0, pts.shape[0], chunk):
            block = pts[s:s + chunk]
            wb = w[s:s + chunk]
            d2 = ((y[None, :, :] - block[:, None, :]) ** 2).sum(axis=2)
            vals += (wb[:, None] * np.exp(-d2 / (2.0 * t))).sum(axis=0)
        vals = norm * vals.reshape(grid.shape)
    return grid.with_values(np.maximum(vals, 0.0), t=t)


@dataclass
class BoundFit:
    """Fitted comparison constants against the heat semigroup.

    ``residual`` is the largest violated margin at the returned pair (0 when
    the bounds hold on every thresholded cell); ``excluded_cells`` counts grid
    points skipped because the comparator (and, on the lower side, the
    density) sat below the tail threshold.
    """

    c: float
    gamma: float
    residual: float
    excluded_cells: int = 0
    per_time: list = field(default_factory=list)


def _fit_search(rho_snapshots, mu0, gamma_search, ratio_fn):
    gammas = sorted(float(g) for g in gamma_search)
    if not gammas or gammas[0] < 1.0:
        raise ValidationError("gamma search grid must contain values >= 1")
    best = None
    for gamma in gammas:
        c_needed = 1.0
        excluded = 0
        residual = 0.0
        per_time = []
        for t, rho in rho_snapshots:
            if not t > 0:
                raise ValidationError("snapshots must have t > 0")
            c_t, excl_t, resid_t = ratio_fn(float(t), rho, gamma)
            per_time.append((float(t), c_t))
            excluded += excl_t
            residual = max(residual, resid_t)
            c_needed = max(c_needed, c_t)
        cand = BoundFit(c=float(c_needed), gamma=gamma, residual=residual,
                        excluded_cells=excluded, per_time=per_time)
        if best is None or _fit_key(cand) < _fit_key(best):
            best = cand
    return best


def _fit_key(fit: BoundFit):
    finite = np.isfinite(fit.c) and fit.residual == 0.0
    return (0 if finite else 1, fit.residual, fit.c, fit.gamma)


def fit_two_sided(rho_snapshots: Sequence, mu0,
                  gamma_search: Sequence[float]) -> BoundFit:
    """Smallest (c, gamma) with ``c^-1 P_{t/gamma} mu0 <= rho_t <= c P_{gamma t} mu0``.

    Candidates are ranked by needed ``c`` (ties to smaller gamma); cells where
    the relevant comparator falls below ``TAIL_THRESHOLD`` are excluded and
    counted, as are lower-side cells where the density itself has no support.
    When no gamma on the grid yields finite constants the best-effort pair is
    returned with ``residual > 0``.
    """

    def ratio(t, rho, gamma):
        upper = heat_semigroup(mu0, gamma * t, rho).values
        lower = heat_semigroup(mu0, t / gamma, rho).values
        vals = rho.values
        c = 1.0
        resid = 0.0
        mask_u = upper > TAIL_THRESHOLD
        excl = int(vals.size - mask_u.sum())
        if mask_u.any():
            c = max(c, float((vals[mask_u] / upper[mask_u]).max()))
        mask_l = lower > TAIL_THRESHOLD
        supported = mask_l & (vals > TAIL_THRESHOLD)
        dead = mask_l & ~(vals > TAIL_THRESHOLD)
        excl += int(mask_l.sum() - supported.sum())
        if supported.any():
            c = max(c, float((lower[supported] / vals[supported]).max()))
        if dead.any():
            # lower bound unattainable where the density vanishes
            resid = float(lower[dead].max())
            c = np.inf
        return c, excl, resid

    fit = _fit_search(rho_snapshots, mu0, gamma_search, ratio)
    if not np.isfinite(fit.c):
        # best effort: report the finite part of the constant
        finite_c = max([c for _, c in fit.per_time if np.isfinite(c)] or [1.0])
        fit.c = float(finite_c)
    return fit


def fit_gradient_bound(rho_snapshots: Sequence, mu0,
                       gamma_search: Sequence[float]) -> BoundFit:
    """Smallest (c1, gamma1) with ``|grad rho_t| <= c1 t^(-1/2) P_{gamma1 t} mu0``.

    The gradient is the central difference of the snapshot density; densities
    should be smoothed at bandwidth >= 2 grid spacings for the differences to
    be meaningful.
    """

    def ratio(t, rho, gamma):
        comp = heat_semigroup(mu0, gamma * t, rho).values
        grads = np.gradient(rho.values, *[rho.centers(k) for k in range(rho.d)])
        if rho.d == 1:
            grads = [grads]
        gmag = np.sqrt(sum(g ** 2 for g in grads))
        mask = comp > TAIL_THRESHOLD
        excl = int(comp.size - mask.sum())
        c = 1.0
        if mask.any():
            c = max(c, float((math.sqrt(t) * gmag[mask] / comp[mask]).max()))
        return c, excl, 0.0

    return _fit_search(rho_snapshots, mu0, gamma_search, ratio)
