"""Numerical check of the backscatter data identity

    v(a, 2 tau) = 1/(8 pi) Mp(a, tau) + int_{|x-a| <= tau} p(x) k(x, tau, a) dx,

    k(x, tau, a) = (u1 + u2)(x, 2 tau - |x-a|) / (4 pi |x-a|)
                   + int_{|x-a|}^{2 tau - |x-a|} u1(x, 2 tau - t) u2(x, t) dt,

where ``u1``, ``u2`` are the scattered fields of the same source ``a`` for the
potentials ``q1``, ``q2``, ``p = q1 - q2`` and ``v = u1 - u2``.  The left side
is read off the solved traces at the source; the right side is assembled from
a spherical mean and a ball quadrature of ``p k``, so the two paths are
independent.

Since ``p`` vanishes on the unit sphere, ``k`` may be multiplied by a smooth
cutoff that removes a neighbourhood of ``x = a`` without changing the
integral; this keeps the quadrature away from the ``1/|x-a|`` singularity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DomainError, UsageError, WindowRangeError
from .forward_solver import LightConeField, SolverConfig, picard_solve, trace_at_source
from .potential import Potential
from .sphere_geometry import SourcePoint, as_points, coerce_source
from .spherical_means import RESIDUAL_FLOOR, spherical_mean


def smooth_cutoff(r, r_cut: float):
    """Quintic smooth step: 0 for ``r <= r_cut``, 1 for ``r >= 2 r_cut``."""
    r = np.asarray(r, dtype=float)
    if r_cut <= 0:
        return np.ones_like(r)
    s = np.clip((r - r_cut) / r_cut, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _check_pair(field1: LightConeField, field2: LightConeField) -> SourcePoint:
    if not np.allclose(field1.source.a, field2.source.a, atol=1e-14):
        raise UsageError("fields belong to different source points")
    if field1.ds != field2.ds:
        raise UsageError("fields must share the retarded-time step")
    return field1.source


def _levels_at(field_: LightConeField, x, s):
    """Interpolate stored levels at points ``x`` (M, 3) for times ``s`` (M, J)."""
    vals, win = field_.retarded_levels(x)
    pos = s / field_.ds
    if np.any(pos > win[:, None] + 1e-9):
        raise WindowRangeError("kernel needs retarded times beyond the solved window")
    j = np.clip(np.floor(pos).astype(np.int64), 0, vals.shape[1] - 2)
    f = pos - j
    rows = np.arange(len(vals))[:, None]
    out = (1.0 - f) * vals[rows, j] + f * vals[rows, j + 1]
    return np.where(s >= 0, out, 0.0)


def _kernel_terms(x, tau, field1, field2):
    """First (trace) and second (convolution) kernel terms at points ``x``
    sharing one distance ``r`` from the source; cutoff not applied."""
    a = field1.source.a
    r = np.linalg.norm(x - a, axis=1)
    S = 2.0 * tau - 2.0 * r
    M = max(2, int(np.ceil(S.max() / field1.ds - 1e-9)))
    frac = np.linspace(0.0, 1.0, M + 1)
    s = S[:, None] * frac[None, :]
    u1 = _levels_at(field1, x, s)
    u2 = _levels_at(field2, x, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        first = (u1[:, -1] + u2[:, -1]) / (4.0 * np.pi * r)
    prod = u1[:, ::-1] * u2
    w = np.full(M + 1, 1.0 / M)
    w[[0, -1]] *= 0.5
    second = (prod @ w) * S
    return first, second


@dataclass
class KernelEvaluation:
    x: np.ndarray
    tau: float
    a: SourcePoint
    value: np.ndarray
    r_cut: float


def kernel_k(x, tau: float, a, field1: LightConeField, field2: LightConeField,
             r_cut: float = 0.02) -> KernelEvaluation:
    """Evaluate the cut-off kernel at points ``x`` with ``|x - a| <= tau``."""
    src = _check_pair(field1, field2)
    if not np.allclose(coerce_source(a).a, src.a, atol=1e-14):
        raise UsageError("source point does not match the fields")
    X = as_points(x).reshape(-1, 3)
    r = np.linalg.norm(X - src.a, axis=1)
    if np.any(r > tau + 1e-12):
        raise DomainError("kernel_k needs |x - a| <= tau")
    cut = smooth_cutoff(r, r_cut)
    out = np.zeros(len(X))
    live = cut > 0
    # group by distance so the convolution grid is shared
    for rv in np.unique(r[live]):
        idx = np.nonzero(live & (r == rv))[0]
        f, s = _kernel_terms(X[idx], tau, field1, field2)
        out[idx] = cut[idx] * (f + s)
    shape = as_points(x).shape[:-1]
    return KernelEvaluation(np.asarray(x), float(tau), src, out.reshape(shape), float(r_cut))


@dataclass
class BallRule:
    """Nodes ``a + r omega`` covering ``{|x - a| <= tau} ∩ B``.

    Radii are Gauss-Legendre on ``[0, tau]``; for each radius the direction
    cosine ``mu = -a . omega`` runs over ``[r/2, 1]`` (the part of the sphere
    inside ``B``) with Gauss-Legendre nodes, and the azimuth uses the
    periodic trapezoid rule.
    """

    radii: np.ndarray
    points: np.ndarray        # (n_r, n_mu * n_az, 3)
    weights: np.ndarray       # (n_r, n_mu * n_az), include r^2 dr dmu dpsi


def ball_rule(a, tau: float, n_r: int = 48, n_mu: int = 24, n_az: int = 16) -> BallRule:
    src = coerce_source(a)
    b1, b2 = src.frame()
    xr, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * tau * (xr + 1.0)
    wr = 0.5 * tau * wr
    xm, wm = np.polynomial.legendre.leggauss(n_mu)
    psi = 2.0 * np.pi * np.arange(n_az) / n_az
    wpsi = 2.0 * np.pi / n_az
    pts = np.empty((n_r, n_mu * n_az, 3))
    wts = np.empty((n_r, n_mu * n_az))
    for i, ri in enumerate(r):
        lo = min(ri / 2.0, 1.0)
        mu = lo + 0.5 * (1.0 - lo) * (xm + 1.0)
        w_mu = 0.5 * (1.0 - lo) * wm
        sin = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
        omega = (-mu[:, None, None] * src.a
                 + (sin[:, None] * np.cos(psi)[None, :])[..., None] * b1
                 + (sin[:, None] * np.sin(psi)[None, :])[..., None] * b2)
        pts[i] = (src.a + ri * omega).reshape(-1, 3)
        wts[i] = (ri * ri * wr[i] * w_mu[:, None] * wpsi * np.ones(n_az)[None, :]).ravel()
    return BallRule(r, pts, wts)


def ball_integral(p, tau, field1, field2, r_cut=0.02, rule: Optional[BallRule] = None,
                  terms: str = "both") -> float:
    """``int_{|x-a| <= tau} p k dx``; ``terms`` selects ``first``, ``second`` or ``both``."""
    src = _check_pair(field1, field2)
    rule = rule or ball_rule(src, tau)
    total = 0.0
    for i, r in enumerate(rule.radii):
        cut = float(smooth_cutoff(r, r_cut))
        if cut == 0.0:
            continue
        X = rule.points[i]
        pv = np.asarray(p(X), dtype=float)
        if not np.any(pv):
            continue
        f, s = _kernel_terms(X, tau, field1, field2)
        k = {"first": f, "second": s, "both": f + s}[terms]
        total += cut * float(rule.weights[i] @ (pv * k))
    return total


def prop22_rhs(p, a, tau: float, field1: LightConeField, field2: LightConeField,
               r_cut: float = 0.02, rule: Optional[BallRule] = None, n_mu: int = 64,
               n_az: int = 64) -> float:
    """``(1/8 pi) Mp(a, tau) + int p k dx``."""
    if not 0.0 < tau <= 1.0:
        raise DomainError("tau must lie in (0, 1]")
    src = coerce_source(a)
    mean = spherical_mean(p, src.a, tau, n_mu=n_mu, n_az=n_az)
    return mean / (8.0 * np.pi) + ball_integral(p, tau, field1, field2, r_cut, rule)


@dataclass
class Prop22Report:
    a: List[float]
    tau: float
    lhs: float
    rhs: float
    mean_term: float
    kernel_term: float
    absolute: float
    relative: float
    settings: Dict[str, object] = field(default_factory=dict)


def _solve_pair(q1, q2, src, tau, cfg):
    cfg = cfg or SolverConfig()
    t_need = min(2.0, np.ceil(2.0 * tau / cfg.ds - 1e-9) * cfg.ds)
    cfg = replace(cfg, t_max=float(max(t_need, cfg.ds)))
    return picard_solve(q1, src, cfg), picard_solve(q2, src, cfg)


def _ds_settings(cfg: SolverConfig) -> dict:
    return {"h": cfg.h, "ds": cfg.ds, "t_max": cfg.t_max, "n_zeta": cfg.n_zeta, "n_psi": cfg.n_psi}


def prop22_residual(q1: Potential, q2: Potential, a, tau: float, cfg: Optional[SolverConfig] = None,
                    r_cut: float = 0.02, rule_orders=(48, 24, 16), fields=None) -> Prop22Report:
    """Solve both fields and compare the two sides of the identity at ``(a, tau)``.

    ``fields`` may pass pre-solved ``(field1, field2)`` with a window of at
    least ``2 tau``.
    """
    src = coerce_source(a)
    f1, f2 = fields if fields is not None else _solve_pair(q1, q2, src, tau, cfg)
    p = q1 - q2
    lhs = float(trace_at_source(f1, 2 * tau) - trace_at_source(f2, 2 * tau))
    mean = spherical_mean(p, src.a, tau) / (8.0 * np.pi)
    kern = ball_integral(p, tau, f1, f2, r_cut, ball_rule(src, tau, *rule_orders))
    rhs = mean + kern
    absolute = abs(lhs - rhs)
    denom = max(abs(lhs), abs(rhs), RESIDUAL_FLOOR)
    relative = 0.0 if lhs == 0.0 and rhs == 0.0 else absolute / denom
    return Prop22Report([float(v) for v in src.a], float(tau), lhs, rhs, mean, kern, absolute, relative,
                        {**_ds_settings(f1.config), "r_cut": r_cut, "ball_orders": list(rule_orders)})


@dataclass
class PairingReport:
    a: List[float]
    tau: float
    pairing: float
    expected: float
    lhs: float
    mean_term: float
    first_term: float
    absolute: float
    max_outside: float


def pairing_integrand(x, t, tau, field1: LightConeField, field2: LightConeField, p):
    """``p(x) u2(x, t) u1(x, 2 tau - t)`` at arbitrary space-time samples.

    Each field factor is only evaluated where the other is nonzero, so the
    zeros outside the double cone come from the causal layout of the stored
    fields and samples never reach beyond a pruned window.
    """
    X = as_points(x).reshape(-1, 3)
    t = np.asarray(t, dtype=float).reshape(-1)
    d = np.linalg.norm(X - field1.source.a, axis=1)
    out = np.asarray(p(X), dtype=float).copy()
    live2 = t >= d
    live1 = 2.0 * tau - t >= d
    u2 = np.zeros(len(X))
    u1 = np.zeros(len(X))
    both = live1 & live2
    u2[both] = field2(X[both], t[both])
    u1[both] = field1(X[both], 2.0 * tau - t[both])
    # outside the cone one factor is zero by causality; evaluate it alone
    only2 = live2 & ~live1
    only1 = live1 & ~live2
    u1[only2] = field1(X[only2], 2.0 * tau - t[only2])
    u2[only1] = field2(X[only1], t[only1])
    return out * u2 * u1


def adjoint_pairing_check(q1: Potential, q2: Potential, a, tau: float,
                          cfg: Optional[SolverConfig] = None, r_cut: float = 0.02,
                          n_outside: int = 2000, seed: int = 0, fields=None) -> PairingReport:
    """Isolate the time-convolution part of the identity.

    ``pairing`` is the space-time integral of ``p u2 u1(2 tau - .)`` over the
    double cone ``|x-a| <= t <= 2 tau - |x-a|`` and ``expected`` is what the
    identity leaves for it once the mean term and the trace term are
    subtracted from the measured difference.  ``max_outside`` is the largest
    integrand magnitude sampled outside the double cone.
    """
    src = coerce_source(a)
    f1, f2 = fields if fields is not None else _solve_pair(q1, q2, src, tau, cfg)
    p = q1 - q2
    rule = ball_rule(src, tau)
    pairing = ball_integral(p, tau, f1, f2, r_cut, rule, terms="second")
    first = ball_integral(p, tau, f1, f2, r_cut, rule, terms="first")
    lhs = float(trace_at_source(f1, 2 * tau) - trace_at_source(f2, 2 * tau))
    mean = spherical_mean(p, src.a, tau) / (8.0 * np.pi)
    expected = lhs - mean - first

    rng = np.random.default_rng(seed)
    # points in the ball around a, inside B, and times outside [r, 2 tau - r]
    dirs = rng.normal(size=(n_outside, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.where((dirs @ src.a)[:, None] > 0, -dirs, dirs)
    r = tau * rng.uniform(0.05, 1.0, n_outside) ** (1.0 / 3.0)
    x = src.a + r[:, None] * dirs
    x *= np.minimum(1.0, 0.999 / np.linalg.norm(x, axis=1))[:, None]
    r = np.linalg.norm(x - src.a, axis=1)
    below = rng.uniform(0.0, 1.0, n_outside) < 0.5
    t = np.where(below, r * rng.uniform(0.0, 0.999, n_outside),
                 2.0 * tau - r * rng.uniform(0.0, 0.999, n_outside))
    vals = pairing_integrand(x, t, tau, f1, f2, p)
    return PairingReport([float(v) for v in src.a], float(tau), pairing, expected, lhs, mean, first,
                         abs(pairing - expected), float(np.max(np.abs(vals))) if len(vals) else 0.0)


def verification_report(q1, q2, sources: Sequence, taus: Sequence[float],
                        cfg: Optional[SolverConfig] = None, r_cut: float = 0.02, inputs=None) -> dict:
    """Residual table over ``sources x taus``; one pair of solves per source."""
    cfg = cfg or SolverConfig()
    rows = []
    for a in sources:
        src = coerce_source(a)
        fields = _solve_pair(q1, q2, src, max(taus), cfg)
        for tau in taus:
            rows.append(asdict(prop22_residual(q1, q2, src, tau, r_cut=r_cut, fields=fields)))
    return {"inputs": inputs or {}, "rows": rows,
            "max_relative": max((r["relative"] for r in rows), default=0.0)}


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
