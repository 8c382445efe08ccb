"""Pairwise drift kernels: singular power laws, truncation, envelopes, admissibility.

Conventions fixed here and relied on everywhere else:

* Diagonal convention: every kernel evaluates to the zero vector at ``x == y``
  (exact componentwise equality), so particle self-interaction vanishes.
* Truncation at level ``n`` is the componentwise clamp into ``[-n, n]``,
  applied to the (possibly time-scaled) kernel value; it bounds the euclidean
  norm by ``n * sqrt(d)``.
* The cutoff profile ``chi`` is 1 on ``|x| <= 1``, 0 on ``|x| >= 2`` and equals
  ``exp(1 - 1/(1 - (|x|-1)**2))`` in between; ``chi_r^z(x) = chi((x-z)/r)``.
  This exact bump is the one bit-stable choice used by all localized norms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import IntegrabilityError, ValidationError

__all__ = [
    "KernelSpec",
    "EnvelopeSpec",
    "RadialQuadrature",
    "AdmissibilityReport",
    "power_law",
    "rotational",
    "zero_kernel",
    "bounded_table",
    "constant_kernel",
    "eval_kernel",
    "truncate",
    "check_admissible",
    "envelope_localized_norm",
    "envelope_of",
    "chi",
    "chi_norm",
]


def chi(s):
    """Radial cutoff profile: 1 on [0,1], smooth bump on (1,2), 0 beyond.

    ``s`` is the radius ``|x|`` (scalar or array). On 1 < s < 2 the value is
    ``exp(1 - 1/(1 - (s-1)^2))``, which joins both plateaus continuously.
    """
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    out[s <= 1.0] = 1.0
    mid = (s > 1.0) & (s < 2.0)
    if np.any(mid):
        t = s[mid] - 1.0
        out[mid] = np.exp(1.0 - 1.0 / (1.0 - t * t))
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class KernelSpec:
    """A two-point drift kernel ``b_t(x, y)`` with optional truncation.

    ``form`` is one of ``"power_law"`` (radial or rotational direction),
    ``"bounded_table"`` (arbitrary bounded callable) or ``"zero"``. Power-law
    kernels evaluate to ``kappa * (x-y)/|x-y|**alpha`` (radial) or the same
    magnitude rotated by 90 degrees (rotational, 2-d only, ``v_perp =
    (-v2, v1)``). Instances are immutable and safe to share across workers;
    evaluation is pure.
    """

    form: str
    kappa: float = 0.0
    alpha: float = 1.0
    direction: str = "radial"
    table: Optional[Callable] = None
    table_bound: Optional[float] = None
    truncation_level: Optional[float] = None
    time_scaling: Optional[Callable[[float], float]] = None

    def __post_init__(self):
        if self.form not in ("power_law", "bounded_table", "zero"):
            raise ValidationError(f"unknown kernel form {self.form!r}")
        if self.form == "power_law":
            if self.kappa < 0:
                raise ValidationError("kappa must be >= 0")
            if not (1.0 <= self.alpha < 2.0):
                raise ValidationError("alpha must lie in [1, 2)")
            if self.direction not in ("radial", "rotational"):
                raise ValidationError(f"unknown direction {self.direction!r}")
        if self.form == "bounded_table" and self.table is None:
            raise ValidationError("bounded_table kernel needs a callable")
        if self.truncation_level is not None and not self.truncation_level > 0:
            raise ValidationError("truncation_level must be > 0")

    def scale_at(self, t: float) -> float:
        return 1.0 if self.time_scaling is None else float(self.time_scaling(t))

    def envelope(self, z):
        """Radial envelope ``h(z)`` of the untruncated kernel at ``|x-y| = z``.

        ``|b_t(x,y)| <= |scale_at(t)| * h(|x-y|)`` always, and with truncation
        ``n`` additionally ``|b| <= n * sqrt(d)``. For power laws
        ``h(z) = kappa * z**(1-alpha)`` (infinite at 0 when alpha > 1).
        """
        z = np.asarray(z, dtype=float)
        if self.form == "zero":
            h = np.zeros_like(z)
        elif self.form == "power_law":
            if self.alpha == 1.0:
                h = np.full_like(z, self.kappa)
            else:
                with np.errstate(divide="ignore"):
                    h = self.kappa * np.where(z > 0, z, np.nan) ** (1.0 - self.alpha)
                h[z == 0] = np.inf
        else:
            bound = self.table_bound if self.table_bound is not None else np.inf
            h = np.full_like(z, bound)
        return h if h.ndim else float(h)


def power_law(kappa: float, alpha: float, direction: str = "radial",
              truncation_level: Optional[float] = None,
              time_scaling: Optional[Callable[[float], float]] = None) -> KernelSpec:
    return KernelSpec(form="power_law", kappa=kappa, alpha=alpha, direction=direction,
                      truncation_level=truncation_level, time_scaling=time_scaling)


def rotational(kappa: float, alpha: float,
               truncation_level: Optional[float] = None) -> KernelSpec:
    return KernelSpec(form="power_law", kappa=kappa, alpha=alpha, direction="rotational",
                      truncation_level=truncation_level)


def zero_kernel() -> KernelSpec:
    return KernelSpec(form="zero")


def bounded_table(func: Callable, bound: Optional[float] = None,
                  truncation_level: Optional[float] = None) -> KernelSpec:
    """Wrap a callable ``func(t, x, y) -> array like x`` as a kernel.

    ``func`` must accept ``x``, ``y`` of shape (m, d) and be bounded; the
    diagonal convention and truncation are applied on top of it.
    """
    return KernelSpec(form="bounded_table", table=func, table_bound=bound,
                      truncation_level=truncation_level)


def constant_kernel(vec) -> KernelSpec:
    """Kernel identically equal to ``vec`` off the diagonal."""
    v = np.asarray(vec, dtype=float)

    def _const(t, x, y):
        return np.broadcast_to(v, np.shape(x)).copy()

    return bounded_table(_const, bound=float(np.linalg.norm(v)))


def eval_kernel(spec: KernelSpec, t: float, x, y):
    """Evaluate ``b_t(x, y)``; total by the diagonal convention.

    ``x`` and ``y`` are points of shape (d,) or stacks of shape (m, d); the
    result has the broadcast shape. Exact coincidence ``x == y`` gives the
    zero vector; with a truncation level set, the result is clamped
    componentwise into ``[-n, n]``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    single = x.ndim == 1 and y.ndim == 1
    xs, ys = np.broadcast_arrays(np.atleast_2d(x), np.atleast_2d(y))
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValidationError("kernel arguments must be finite")
    d = xs.shape[1]

    if spec.form == "zero":
        out = np.zeros_like(xs)
    elif spec.form == "power_law":
        diff = xs - ys
        r = np.sqrt(np.sum(diff * diff, axis=1))
        scale = spec.kappa * spec.scale_at(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(r > 0, scale * r ** (-spec.alpha), 0.0)
        if spec.direction == "radial":
            out = diff * w[:, None]
        else:
            if d != 2:
                raise ValidationError("rotational kernels are 2-d only")
            out = np.stack([-diff[:, 1], diff[:, 0]], axis=1) * w[:, None]
    else:
        out = np.asarray(spec.table(t, xs, ys), dtype=float) * spec.scale_at(t)
        diag = np.all(xs == ys, axis=1)
        out = np.where(diag[:, None], 0.0, out)

    if spec.truncation_level is not None:
        n = spec.truncation_level
        out = np.clip(out, -n, n)
    return out[0] if single else out


def truncate(spec: KernelSpec, n: float) -> KernelSpec:
    """Componentwise clamp of the kernel into ``[-n, n]``.

    Truncating twice composes as the min of the two levels.
    """
    if not n > 0:
        raise ValidationError("truncation level must be > 0")
    if spec.truncation_level is not None:
        n = min(n, spec.truncation_level)
    return replace(spec, truncation_level=float(n))


@dataclass(frozen=True)
class EnvelopeSpec:
    """Radial envelope ``h`` with integrability exponents ``p``, ``q`` (> 2).

    For power-law kernels ``h(z) = kappa * z**(1-alpha)``; ``alpha`` is kept
    alongside the profile so divergence of the localized norm can be detected
    analytically instead of by a blown-up quadrature.
    """

    profile: Callable
    p: float
    q: float
    alpha: Optional[float] = None

    def __post_init__(self):
        if not (self.p > 2 and self.q > 2):
            raise ValidationError("envelope exponents must satisfy p, q > 2")


def envelope_of(spec: KernelSpec, p: float, q: float) -> EnvelopeSpec:
    alpha = spec.alpha if spec.form == "power_law" else None
    return EnvelopeSpec(profile=spec.envelope, p=p, q=q, alpha=alpha)


@dataclass(frozen=True)
class AdmissibilityReport:
    admissible: bool
    slack: float


def check_admissible(env: EnvelopeSpec, d: int) -> AdmissibilityReport:
    """Check the integrability condition d/p + 2/q < 1 (strict).

    ``slack`` is ``1 - d/p - 2/q``; nonpositive slack means inadmissible.
    """
    if not (env.p > 2 and env.q > 2):
        raise ValidationError("admissibility requires p, q > 2")
    slack = 1.0 - d / env.p - 2.0 / env.q
    return AdmissibilityReport(admissible=slack > 0.0, slack=slack)


@dataclass(frozen=True)
class RadialQuadrature:
    """Shell quadrature on [0, r_max] with a graded origin cell.

    The base grid has ``n`` uniform shells; the shell touching the origin is
    subdivided dyadically ``refine_levels`` times so stiff-but-integrable
    profiles like ``z**(1-alpha)`` are resolved. Midpoint rule per shell.
    """

    n: int = 512
    refine_levels: int = 4

    def nodes_weights(self, r_max: float):
        edges = np.linspace(0.0, r_max, self.n + 1)
        h0 = edges[1]
        sub = [h0 * 2.0 ** (-j) for j in range(self.refine_levels + 1)]
        first_edges = np.concatenate([[0.0], sub[::-1]])
        all_edges = np.concatenate([first_edges, edges[2:]]) if self.n > 1 else first_edges
        mids = 0.5 * (all_edges[1:] + all_edges[:-1])
        widths = np.diff(all_edges)
        return mids, widths


def _sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def envelope_localized_norm(env: EnvelopeSpec, r: float, quad: RadialQuadrature,
                            d: int = 2) -> float:
    """Localized norm ``sup_z ||h * chi_r^z||_p`` of a radial envelope.

    For nonincreasing radial profiles the supremum over translates is attained
    at ``z = 0``, so this reduces to the radial integral
    ``(int_0^{2r} h(s)^p chi(s/r)^p area(S^{d-1}) s^{d-1} ds)^{1/p}``.
    Raises :class:`IntegrabilityError` when ``p * (alpha - 1) >= d``.
    """
    if not r > 0:
        raise ValidationError("cutoff radius must be > 0")
    if not np.isfinite(env.p):
        raise ValidationError("p must be finite for the quadrature norm")
    if env.alpha is not None and env.p * (env.alpha - 1.0) >= d:
        raise IntegrabilityError(
            f"non-integrable: p*(alpha-1) = {env.p * (env.alpha - 1.0):g} >= d = {d}")
    s, w = quad.nodes_weights(2.0 * r)
    hv = np.asarray(env.profile(s), dtype=float)
    if not np.all(np.isfinite(hv)):
        raise IntegrabilityError("envelope profile not finite on (0, 2r]")
    integrand = hv ** env.p * chi(s / r) ** env.p * _sphere_area(d) * s ** (d - 1)
    return float(np.sum(integrand * w) ** (1.0 / env.p))


@lru_cache(maxsize=None)
def chi_norm(p: float, d: int = 2, r: float = 1.0, n: int = 2048) -> float:
    """Reference constant ``||chi_r||_p`` in dimension ``d`` (quadrature)."""
    s, w = RadialQuadrature(n=n).nodes_weights(2.0 * r)
    integrand = chi(s / r) ** p * _sphere_area(d) * s ** (d - 1)
    return float(np.sum(integrand * w) ** (1.0 / p))
