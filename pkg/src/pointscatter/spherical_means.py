"""Spherical means centred on the unit sphere and the derivative identity

    d/dtau (tau Mp(a, tau)) = (1 - tau)/2 p((1 - tau) a)
                              + 1/(4 pi) int_{|y-a|=tau} (alpha . grad p)(y) / sin(phi) dS_y

for ``p`` supported in the closed unit ball.  The left side is computed from
spherical means by finite differences and the right side by a singular cap
quadrature, so the two paths share no code beyond the potential itself.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import DomainError, UsageError
from .sphere_geometry import SourcePoint, as_points, cap_quadrature, coerce_source

RESIDUAL_FLOOR = 1e-12


class ToleranceWarning(UserWarning):
    """A finite-difference error estimate exceeds the requested tolerance."""


@dataclass
class MeanEvaluation:
    """``value = Mp(a, tau)`` and ``derivative = d/dtau (tau Mp(a, tau))``."""

    a: SourcePoint
    tau: float
    value: float
    derivative: float
    error_estimate: float
    method: Dict[str, object] = field(default_factory=dict)


def _mean_rule(n_mu: int, n_az: int, mu_lo: float):
    x, w = np.polynomial.legendre.leggauss(n_mu)
    mu = mu_lo + (x + 1.0) * (1.0 - mu_lo) / 2.0
    wm = w * (1.0 - mu_lo) / 2.0
    az = 2.0 * np.pi * np.arange(n_az) / n_az
    return mu, wm, az, 2.0 * np.pi / n_az


def spherical_mean(p: Callable, center, tau: float, n_mu: int = 64, n_az: int = 64,
                   support_radius: Optional[float] = 1.0) -> float:
    """Mean of ``p`` over the sphere ``|y - center| = tau``.

    When ``support_radius`` is given, ``p`` is taken to vanish outside the
    ball of that radius and only the spherical cap inside it is integrated,
    which keeps Gauss-Legendre accuracy for potentials with a kink at the
    support boundary.  ``support_radius=None`` integrates the whole sphere.
    """
    c = np.asarray(center, dtype=float).reshape(3)
    tau = float(tau)
    if tau < 0:
        raise DomainError("tau must be non-negative")
    if tau == 0:
        return float(p(c))
    rc = float(np.linalg.norm(c))
    if rc > 0:
        pole = -c / rc
    else:
        pole = np.array([0.0, 0.0, 1.0])
    mu_lo = -1.0
    if support_radius is not None:
        R = float(support_radius)
        if rc > 0:
            mu0 = (rc * rc + tau * tau - R * R) / (2.0 * tau * rc)
        else:
            mu0 = -1.0 if tau <= R else 2.0
        if mu0 >= 1.0:
            return 0.0
        mu_lo = max(mu0, -1.0)
    mu, wm, az, wa = _mean_rule(n_mu, n_az, mu_lo)
    b1 = np.cross(pole, [1.0, 0.0, 0.0] if abs(pole[0]) < 0.9 else [0.0, 1.0, 0.0])
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(pole, b1)
    s = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    omega = (mu[:, None, None] * pole
             + (s[:, None] * np.cos(az)[None, :])[..., None] * b1
             + (s[:, None] * np.sin(az)[None, :])[..., None] * b2)
    vals = np.asarray(p(c + tau * omega), dtype=float)
    return float(np.einsum("ij,i->", vals, wm) * wa / (4.0 * np.pi))


def default_step(tau: float) -> float:
    return min(tau / 64.0, min(tau, 1.0 - tau) / 4.0)


def dtau_tau_mean(p: Callable, a, tau: float, step: Optional[float] = None,
                  tol: Optional[float] = None, **mean_kw) -> MeanEvaluation:
    """``d/dtau (tau Mp(a, tau))`` by a Richardson-extrapolated central difference.

    The error estimate is the change produced by the extrapolation step.  A
    :class:`ToleranceWarning` is issued when it exceeds ``tol``.
    """
    src = coerce_source(a)
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise DomainError("dtau_tau_mean needs 0 < tau < 1")
    h = default_step(tau) if step is None else float(step)
    if not 0.0 < h or tau - h <= 0.0 or tau + h >= 1.0:
        raise DomainError(f"step {h} leaves (0, 1) around tau = {tau}")

    def g(t):
        return t * spherical_mean(p, src.a, t, **mean_kw)

    def central(k):
        return (g(tau + k) - g(tau - k)) / (2.0 * k)

    coarse, fine = central(h), central(h / 2.0)
    value = (4.0 * fine - coarse) / 3.0
    err = abs(value - fine)
    if tol is not None and err > tol:
        warnings.warn(f"derivative error estimate {err:.3g} exceeds tolerance {tol:.3g}",
                      ToleranceWarning, stacklevel=2)
    return MeanEvaluation(src, tau, spherical_mean(p, src.a, tau, **mean_kw), float(value), float(err),
                          {"scheme": "central+richardson", "step": h, **mean_kw})


def _gradient_of(p):
    grad = getattr(p, "gradient", None)
    if grad is None or not callable(grad):
        raise UsageError("prop21_rhs needs a potential with a gradient method")
    return grad


def prop21_rhs(p, a, tau: float, n_rho: int = 64, n_theta: int = 64) -> float:
    """Boundary term plus the singular cap integral of ``alpha . grad p / sin(phi)``."""
    src = coerce_source(a)
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise DomainError("prop21_rhs needs 0 < tau < 1")
    grad = _gradient_of(p)
    boundary = 0.5 * (1.0 - tau) * float(p((1.0 - tau) * src.a))
    quad = cap_quadrature(src, tau, n_rho, n_theta, singular_exponent=0.5)
    g = np.asarray(grad(quad.points))
    integrand = np.einsum("ij,ij->i", quad.alpha, g) * quad.inv_sin_phi
    if not np.all(np.isfinite(integrand)):
        raise DomainError("non-finite cap integrand")
    return boundary + float(quad.weights @ integrand) / (4.0 * np.pi)


@dataclass
class Prop21Residual:
    a: SourcePoint
    tau: float
    lhs: float
    rhs: float
    absolute: float
    relative: float
    lhs_error_estimate: float
    settings: Dict[str, object]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["a"] = [float(v) for v in self.a.a]
        return d


def prop21_residual(p, a, tau: float, n_rho: int = 64, n_theta: int = 64,
                    step: Optional[float] = None, n_mu: int = 64, n_az: int = 64) -> Prop21Residual:
    """Compare both sides of the derivative identity at ``(a, tau)``."""
    src = coerce_source(a)
    lhs = dtau_tau_mean(p, src, tau, step=step, n_mu=n_mu, n_az=n_az)
    rhs = prop21_rhs(p, src, tau, n_rho=n_rho, n_theta=n_theta)
    absolute = abs(lhs.derivative - rhs)
    relative = absolute / max(abs(lhs.derivative), abs(rhs), RESIDUAL_FLOOR)
    if lhs.derivative == 0.0 and rhs == 0.0:
        relative = 0.0
    return Prop21Residual(src, float(tau), lhs.derivative, rhs, absolute, relative, lhs.error_estimate,
                          {"n_rho": n_rho, "n_theta": n_theta, "step": lhs.method["step"],
                           "n_mu": n_mu, "n_az": n_az})


def residual_report(p, sources: Sequence, taus: Sequence[float], **kw) -> dict:
    """JSON-ready table of residuals over ``sources x taus`` in input order."""
    rows: List[dict] = []
    for src in sources:
        for tau in taus:
            rows.append(prop21_residual(p, src, tau, **kw).to_dict())
    return {
        "rows": rows,
        "max_relative": max((r["relative"] for r in rows), default=0.0),
        "max_absolute": max((r["absolute"] for r in rows), default=0.0),
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# The pointwise estimate
# ---------------------------------------------------------------------------

def omega_sq_sum(p, y) -> np.ndarray:
    """``sum_{i<j} |Omega_ij p(y)|^2`` from the gradient of ``p``."""
    y = as_points(y)
    g = np.asarray(_gradient_of(p)(y))
    out = np.zeros(y.shape[:-1])
    for i in range(3):
        for j in range(i + 1, 3):
            out += (y[..., i] * g[..., j] - y[..., j] * g[..., i]) ** 2
    return out


@dataclass
class EstimateSample:
    tau: float
    lhs: float
    rhs: float
    ratio: float


def pointwise_estimate_ratio(p, a, tau: float, n_rho: int = 64, n_theta: int = 64,
                             **mean_kw) -> EstimateSample:
    """Both sides of
    ``(1-tau)^3 |p((1-tau) a)|^2 <~ |d/dtau(tau Mp)|^2
    + sum_{i<j} int_{|y-a|=tau} |Omega_ij p|^2 / sqrt(|y| - (1-tau)) dS_y``
    and their ratio (0 when both vanish, inf when only the right side does)."""
    src = coerce_source(a)
    lhs = (1.0 - tau) ** 3 * float(p((1.0 - tau) * src.a)) ** 2
    d = dtau_tau_mean(p, src, tau, **mean_kw).derivative
    quad = cap_quadrature(src, tau, n_rho, n_theta, singular_exponent=0.5)
    with np.errstate(divide="ignore"):
        wgt = 1.0 / np.sqrt(quad.rho - (1.0 - tau))
    ang = float(quad.weights @ (omega_sq_sum(p, quad.points) * wgt))
    rhs = d * d + ang
    if rhs == 0.0:
        ratio = 0.0 if lhs == 0.0 else float("inf")
    else:
        ratio = lhs / rhs
    return EstimateSample(float(tau), lhs, rhs, ratio)


def estimate_constant(p, sources: Sequence, taus: Sequence[float], **kw) -> float:
    """Supremum of :func:`pointwise_estimate_ratio` over the sample set."""
    return max(pointwise_estimate_ratio(p, s, t, **kw).ratio for s in sources for t in taus)
