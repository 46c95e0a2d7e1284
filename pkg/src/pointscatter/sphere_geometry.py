"""Quadrature and geometry on the unit sphere and on spheres centred on it.

Two families of surfaces appear throughout the package:

* the unit sphere ``S`` carrying the source points ``a``, integrated with a
  product Gauss-Legendre x uniform-azimuth rule (:class:`SphereGrid`);
* spheres ``|y - a| = tau`` centred on ``S``.  These are parameterised by the
  distance ``rho = |y|`` to the origin and the rotation angle ``theta`` about
  the axis through ``a`` (:class:`CapChart`), with surface element
  ``dS = tau * rho * drho * dtheta``.

Along such a sphere the angle ``phi`` between ``y`` and ``a`` obeys
``cos(phi) = (rho**2 + 1 - tau**2) / (2 rho)``, and ``1/sin(phi)`` has an
inverse square-root singularity at ``rho = 1 - tau``.  Cap integrals remove it
with the substitution ``rho = (1 - tau) + w**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import roots_legendre

from .errors import DomainError, SingularInputError

UNIT_TOL = 1e-12


def as_points(x) -> np.ndarray:
    """Return ``x`` as a float array whose last axis has length 3."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise DomainError(f"expected 3-vectors, got shape {x.shape}")
    return x


def orthonormal_frame(e) -> Tuple[np.ndarray, np.ndarray]:
    """Two unit vectors completing ``e`` (unit) to a right-handed frame.

    Works row-wise on arrays of shape (..., 3).
    """
    e = np.asarray(e, dtype=float)
    # pick the coordinate axis least aligned with e
    helper = np.zeros_like(e)
    k = np.argmin(np.abs(e), axis=-1)
    np.put_along_axis(helper, k[..., None], 1.0, axis=-1)
    f1 = helper - np.sum(helper * e, axis=-1, keepdims=True) * e
    f1 /= np.linalg.norm(f1, axis=-1, keepdims=True)
    f2 = np.cross(e, f1)
    return f1, f2


@dataclass(frozen=True)
class SourcePoint:
    """A point ``a`` on the unit sphere where a source fires and data are read."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(3)
        if abs(np.linalg.norm(a) - 1.0) > UNIT_TOL:
            raise DomainError(f"source point must be a unit vector, |a| = {np.linalg.norm(a)!r}")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    @classmethod
    def from_direction(cls, v) -> "SourcePoint":
        v = np.asarray(v, dtype=float).reshape(3)
        n = np.linalg.norm(v)
        if n == 0:
            raise DomainError("zero vector has no direction")
        return cls(v / n)

    def frame(self) -> Tuple[np.ndarray, np.ndarray]:
        """Fixed unit vectors ``(b1, b2)`` with ``(b1, b2, a)`` right-handed."""
        return orthonormal_frame(self.a)


def coerce_source(a) -> SourcePoint:
    return a if isinstance(a, SourcePoint) else SourcePoint.from_direction(a)


@dataclass(frozen=True)
class SphereGrid:
    """Product quadrature on the unit sphere.

    Attributes
    ----------
    nodes : ndarray, shape (K, 3)
        Unit vectors.
    weights : ndarray, shape (K,)
        Positive weights in steradians; they sum to ``4 pi`` for a full grid.
    """

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)

    def integrate(self, values) -> float:
        values = np.asarray(values, dtype=float)
        return float(np.dot(self.weights, values))

    def rotated(self, pole) -> "SphereGrid":
        """Same rule with its polar axis moved from ``e_z`` onto ``pole``."""
        R = _rotation_to(pole)
        return SphereGrid(self.nodes @ R.T, self.weights)


def _rotation_to(pole) -> np.ndarray:
    """Orthogonal matrix whose third column is ``pole`` (unit)."""
    p = np.asarray(pole, dtype=float).reshape(3)
    p = p / np.linalg.norm(p)
    f1, f2 = orthonormal_frame(p)
    return np.column_stack([f1, f2, p])


def sphere_grid(n_polar: int, n_azimuth: Optional[int] = None, pole=(0.0, 0.0, 1.0),
                mu_min: float = -1.0) -> SphereGrid:
    """Gauss-Legendre in ``cos(polar)`` times uniform azimuth.

    With ``mu_min > -1`` only the polar cap ``omega . pole >= mu_min`` is
    covered; the weights then sum to the cap area ``2 pi (1 - mu_min)``.
    The full rule integrates spherical polynomials exactly up to degree
    ``min(2 n_polar - 1, n_azimuth - 1)``.
    """
    if n_azimuth is None:
        n_azimuth = 2 * n_polar
    if n_polar < 1 or n_azimuth < 1:
        raise DomainError("grid sizes must be positive")
    if not -1.0 <= mu_min < 1.0:
        raise DomainError(f"mu_min must lie in [-1, 1), got {mu_min}")
    # banded Golub-Welsch; numpy's dense companion solve is cubic in n_polar
    x, w = roots_legendre(n_polar)
    mu = mu_min + (x + 1.0) * (1.0 - mu_min) / 2.0
    w = w * (1.0 - mu_min) / 2.0
    lon = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    sin_t = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    nodes = np.stack(np.broadcast_arrays(
        sin_t[:, None] * np.cos(lon)[None, :],
        sin_t[:, None] * np.sin(lon)[None, :],
        mu[:, None]), axis=-1).reshape(-1, 3)
    weights = np.repeat(w * (2.0 * np.pi / n_azimuth), n_azimuth)
    grid = SphereGrid(nodes, weights)
    if not np.allclose(pole, (0.0, 0.0, 1.0)):
        grid = grid.rotated(pole)
    return grid


# ---------------------------------------------------------------------------
# Spheres centred on S: the (rho, theta) chart
# ---------------------------------------------------------------------------

def cap_cos_phi(rho, tau):
    """Cosine of the angle between ``y`` and ``a`` for ``|y| = rho``, ``|y - a| = tau``."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho == 0):
        raise DomainError("cap_cos_phi is undefined at rho = 0")
    out = (rho * rho + 1.0 - np.asarray(tau, dtype=float) ** 2) / (2.0 * rho)
    return out if out.ndim else float(out)


def inv_sin_phi(rho, tau):
    """``1 / sin(phi)`` on the sphere ``|y - a| = tau`` at ``|y| = rho``.

    Uses the factorised form
    ``2 rho / sqrt((rho-(1-tau)) (tau+1-rho) (rho+1+tau) (rho+1-tau))``,
    which keeps full relative accuracy near the inner endpoint.
    """
    rho = np.asarray(rho, dtype=float)
    tau = np.asarray(tau, dtype=float)
    lo, hi = 1.0 - tau, 1.0 + tau
    if np.any(rho <= lo) or np.any(rho >= hi):
        raise SingularInputError("inv_sin_phi needs 1 - tau < rho < 1 + tau strictly")
    den = (rho - lo) * (tau + 1.0 - rho) * (rho + 1.0 + tau) * (rho + 1.0 - tau)
    out = 2.0 * rho / np.sqrt(den)
    return out if out.ndim else float(out)


def inv_sin_phi_bound(rho, tau):
    """Upper bound ``2 rho / (sqrt(tau) sqrt(1-tau) sqrt(rho-(1-tau)))`` valid for
    ``0 < tau < 1`` and ``1 - tau < rho <= 1``."""
    rho = np.asarray(rho, dtype=float)
    tau = np.asarray(tau, dtype=float)
    out = 2.0 * rho / (np.sqrt(tau) * np.sqrt(1.0 - tau) * np.sqrt(rho - (1.0 - tau)))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class CapChart:
    """The ``(rho, theta)`` parameterisation of the sphere ``|y - a| = tau``.

    ``theta`` is measured about the axis through ``a`` from the fixed frame
    vector ``b1`` of the source point, shifted by ``theta0``.
    """

    source: SourcePoint
    tau: float
    rho_range: Tuple[float, float] = None
    theta0: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise DomainError(f"cap radius must lie in (0, 1], got {self.tau}")
        if self.rho_range is None:
            object.__setattr__(self, "rho_range", (max(1.0 - self.tau, 0.0), 1.0))

    def geometry(self, rho, theta):
        """Points, unit vectors ``alpha`` and ``sin(phi)`` at chart coordinates.

        ``alpha`` lies in the plane of ``y`` and ``a``, is orthogonal to ``y``
        and satisfies ``alpha . a <= 0``; it is the direction in which ``phi``
        increases.  Where ``sin(phi) = 0`` alpha is undefined and returned as
        NaN.
        """
        rho = np.asarray(rho, dtype=float)
        theta = np.asarray(theta, dtype=float) + self.theta0
        rho, theta = np.broadcast_arrays(rho, theta)
        a = self.source.a
        b1, b2 = self.source.frame()
        cphi = np.clip(cap_cos_phi(np.maximum(rho, 1e-300), self.tau), -1.0, 1.0)
        sphi = np.sqrt(1.0 - cphi * cphi)
        e_theta = np.cos(theta)[..., None] * b1 + np.sin(theta)[..., None] * b2
        yhat = cphi[..., None] * a + sphi[..., None] * e_theta
        y = rho[..., None] * yhat
        alpha = -sphi[..., None] * a + cphi[..., None] * e_theta
        alpha = np.where(sphi[..., None] > 0, alpha, np.nan)
        return y, alpha, sphi


@dataclass
class CapQuadrature:
    """Nodes and weights of a cap rule, with the chart geometry at each node.

    ``weights`` already include the surface element ``tau * rho`` and the
    Jacobian of the optional square-root substitution.
    """

    points: np.ndarray
    weights: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    sin_phi: np.ndarray
    inv_sin_phi: np.ndarray = field(repr=False)


def cap_quadrature(a, tau, n_rho=64, n_theta=64, singular_exponent=0.0,
                   rho_range=None, theta0=0.0) -> CapQuadrature:
    """Tensor rule on ``{|y - a| = tau, rho_lo <= |y| <= rho_hi}``.

    ``singular_exponent = 0.5`` substitutes ``rho = rho_lo + w**2`` with
    Gauss-Legendre nodes in ``w``, which integrates ``(rho - rho_lo)**-0.5``
    singularities without loss of order.  ``theta`` uses the periodic
    trapezoid rule.
    """
    src = coerce_source(a)
    chart = CapChart(src, float(tau), rho_range, theta0)
    lo, hi = chart.rho_range
    if not lo < hi:
        raise DomainError(f"empty radial range {chart.rho_range}")
    x, wx = np.polynomial.legendre.leggauss(n_rho)
    if singular_exponent == 0:
        rho = lo + (x + 1.0) * (hi - lo) / 2.0
        wr = wx * (hi - lo) / 2.0
    elif singular_exponent == 0.5:
        wmax = np.sqrt(hi - lo)
        w = (x + 1.0) * wmax / 2.0
        rho = lo + w * w
        wr = wx * (wmax / 2.0) * 2.0 * w
    else:
        raise DomainError("singular_exponent must be 0 or 0.5")
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    wt = 2.0 * np.pi / n_theta
    R, T = np.meshgrid(rho, theta, indexing="ij")
    y, alpha, sphi = chart.geometry(R, T)
    weights = (tau * R * wr[:, None] * wt).ravel()
    lo_s = 1.0 - tau
    with np.errstate(divide="ignore", invalid="ignore"):
        den = (R - lo_s) * (tau + 1.0 - R) * (R + 1.0 + tau) * (R + 1.0 - tau)
        isp = np.where(den > 0, 2.0 * R / np.sqrt(den), np.inf)
    return CapQuadrature(y.reshape(-1, 3), weights, R.ravel(), alpha.reshape(-1, 3),
                         sphi.ravel(), isp.ravel())


def integrate_cap(f: Callable, a, tau, n_rho=64, n_theta=64, singular_exponent=0.0,
                  rho_range=None, theta0=0.0) -> float:
    """Integrate ``f(y)`` over a zone of the sphere ``|y - a| = tau``.

    The default zone is ``max(1 - tau, 0) <= |y| <= 1``, i.e. the part of the
    sphere inside the closed unit ball.  Pass ``rho_range=(1 - tau, 1 + tau)``
    for the whole sphere.
    """
    quad = cap_quadrature(a, tau, n_rho, n_theta, singular_exponent, rho_range, theta0)
    vals = np.asarray(f(quad.points), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise DomainError("integrand returned non-finite values on the cap")
    return float(np.dot(quad.weights, vals))


# ---------------------------------------------------------------------------
# Integrals over the source sphere S
# ---------------------------------------------------------------------------

def _heaviside(x):
    return np.heaviside(x, 0.5)


def sphere_delta_weight(y, tau):
    """``int_S delta(|y - a|^2 - tau^2) dS_a = (pi/|y|) H(tau + |y| - 1)``."""
    y = as_points(y)
    r = np.linalg.norm(y, axis=-1)
    if np.any(r == 0):
        raise DomainError("sphere_delta_weight is undefined at y = 0")
    out = np.pi / r * _heaviside(np.asarray(tau) + r - 1.0)
    return out if np.ndim(out) else float(out)


def sphere_ball_weight(y, tau):
    """``int_S H(tau^2 - |y - a|^2) dS_a`` in closed form, with its bound.

    Returns ``(value, bound)`` where ``bound = 4 pi H(tau + |y| - 1)``.
    """
    y = as_points(y)
    r = np.linalg.norm(y, axis=-1)
    if np.any(r == 0):
        raise DomainError("sphere_ball_weight is undefined at y = 0")
    tau = np.asarray(tau, dtype=float)
    s0 = (1.0 + r * r - tau * tau) / (2.0 * r)
    value = 2.0 * np.pi * (1.0 - np.clip(s0, -1.0, 1.0))
    bound = 4.0 * np.pi * _heaviside(tau + r - 1.0)
    if np.ndim(value) == 0:
        return float(value), float(bound)
    return value, bound


def mollified_delta_weight(y, tau, sigma, grid: SphereGrid) -> float:
    """Quadrature of ``int_S g_sigma(|y - a|^2 - tau^2) dS_a`` for a Gaussian
    ``g_sigma`` of width ``sigma``; tends to :func:`sphere_delta_weight` as
    ``sigma -> 0`` once the grid resolves the band."""
    y = np.asarray(y, dtype=float).reshape(3)
    v = np.sum((y[None, :] - grid.nodes) ** 2, axis=1) - tau * tau
    g = np.exp(-0.5 * (v / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))
    return grid.integrate(g)
