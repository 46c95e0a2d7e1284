"""Radial reconstruction by layer stripping, and the Abel/Gronwall utilities.

For a radial potential and ``q2 = 0`` the data identity reads

    d(2 tau) = 1/(8 pi) Mq(a, tau) + int_{|x-a| <= tau} q(x) u(x, 2 tau - |x-a|) / (4 pi |x-a|) dx

and the radial derivative identity gives

    q(1 - tau) = 2/(1 - tau) d/dtau (tau Mq(a, tau)).

The ball integral needs ``q`` only on shells ``|x| >= 1 - tau`` and the field
only inside the backward light cone of ``(a, 2 tau)``, which depends on the
same shells.  Marching ``tau`` upward therefore recovers ``q`` shell by shell
from the surface inward.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Union

import numpy as np

from .errors import DomainError, RejectionError, UsageError
from .forward_solver import BackscatterData, LightConeField, SolverConfig, picard_solve
from .identity_lab import ball_rule, smooth_cutoff
from .potential import Potential, TabulatedRadial

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Abel kernel utilities
# ---------------------------------------------------------------------------

def abel_pi_identity(s: float, r: float, n_quad: int = 64) -> float:
    """``int_s^r d rho / sqrt((rho - s)(r - rho))``, which equals pi.

    The interval is split at its midpoint and each half is mapped by a
    square-root substitution toward its singular endpoint, leaving the smooth
    integrand ``2 / sqrt(r - s - w^2)`` on both halves.
    """
    s, r = float(s), float(r)
    if not s < r:
        raise DomainError(f"abel_pi_identity needs s < r, got s={s}, r={r}")
    L = r - s
    x, w = np.polynomial.legendre.leggauss(n_quad)
    wmax = np.sqrt(0.5 * L)
    ww = 0.5 * wmax * (x + 1.0)
    half = 0.5 * wmax * float(np.sum(w * 2.0 / np.sqrt(L - ww * ww)))
    return 2.0 * half


SampledP = Union[Callable, tuple]


def _abel_denominator_samples(rho, vals, s):
    """Exact ``int_s^1 P(rho) (rho - s)^(-1/2) d rho`` for piecewise-linear ``P``."""
    rho = np.asarray(rho, dtype=float)
    vals = np.asarray(vals, dtype=float)
    order = np.argsort(rho)
    rho, vals = rho[order], vals[order]
    if s < rho[0] - 1e-12 or s > rho[-1]:
        raise DomainError(f"s = {s} outside the sample range [{rho[0]}, {rho[-1]}]")
    Ps = float(np.interp(s, rho, vals))
    knots = np.concatenate([[s], rho[rho > s]])
    pk = np.concatenate([[Ps], vals[rho > s]])
    u0, u1 = knots[:-1] - s, knots[1:] - s
    B = np.diff(pk) / np.diff(knots)
    A = pk[:-1] - B * u0
    total = 2.0 * A * (np.sqrt(u1) - np.sqrt(u0)) + (2.0 * B / 3.0) * (u1 ** 1.5 - u0 ** 1.5)
    return float(np.sum(total)), Ps


def stability_ratio(P: SampledP, s: float, n_quad: int = 128) -> float:
    """``P(s) / int_s^1 P(rho) (rho - s)^(-1/2) d rho``.

    ``P`` is either a callable or a tuple ``(rho, values)`` of samples, which
    are interpolated linearly and integrated exactly.  Returns ``inf`` when
    only the denominator vanishes and 0 when both do.
    """
    s = float(s)
    if not s < 1.0:
        raise DomainError("stability_ratio needs s < 1")
    if callable(P):
        x, w = np.polynomial.legendre.leggauss(n_quad)
        wmax = np.sqrt(1.0 - s)
        ww = 0.5 * wmax * (x + 1.0)
        den = wmax * float(np.sum(w * np.asarray(P(s + ww * ww), dtype=float)))
        num = float(P(s))
    else:
        den, num = _abel_denominator_samples(P[0], P[1], s)
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


@dataclass
class GronwallReport:
    eps: float
    s: List[float]
    ratios: List[float]
    sup_ratio: float
    argsup: float
    pi_c_eps_squared: float

    def to_dict(self) -> dict:
        return asdict(self)


def gronwall_report(P: SampledP, eps: float, s_max: float = 0.99, n_s: int = 90) -> GronwallReport:
    """Stability ratios on ``[eps, s_max]``, their supremum ``C_eps`` and the
    iterated constant ``pi C_eps^2``."""
    if not 0.0 < eps < 1.0:
        raise DomainError("eps must lie in (0, 1)")
    if not eps <= s_max < 1.0:
        raise DomainError("need eps <= s_max < 1")
    s = np.linspace(eps, s_max, n_s)
    ratios = np.array([stability_ratio(P, si) for si in s])
    k = int(np.argmax(ratios))
    sup = float(ratios[k])
    return GronwallReport(float(eps), s.tolist(), ratios.tolist(), sup, float(s[k]), float(np.pi * sup * sup))


# ---------------------------------------------------------------------------
# Layer stripping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InversionConfig:
    """Layer-stripping parameters.

    ``refresh_every`` layers share one field solve; ``n_corr`` corrector
    passes re-solve the field once the block's shells are known.
    """

    solver: SolverConfig = field(default_factory=SolverConfig)
    eps: float = 0.05
    tau_boot: float = 0.05
    n_corr: int = 1
    refresh_every: int = 4
    r_cut: float = 0.02
    n_r: int = 48
    n_mu: int = 32
    variance_tol: float = 1e-6
    kernel: bool = True

    def validate(self) -> "InversionConfig":
        if not 0.0 < self.eps < 1.0:
            raise DomainError("eps must lie in (0, 1)")
        if self.tau_boot < 0 or self.n_corr < 0 or self.refresh_every < 1:
            raise DomainError("tau_boot, n_corr must be >= 0 and refresh_every >= 1")
        self.solver.validate()
        return self


@dataclass
class RadialProfile:
    """Reconstructed profile on ``rho_k = 1 - tau_k``, ordered by increasing ``rho``."""

    rho: np.ndarray
    values: np.ndarray
    q_true: Optional[np.ndarray] = None
    layer_residual: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __call__(self, rho):
        return np.interp(rho, self.rho, self.values)

    def error(self, q_true: Optional[Callable] = None, rho_min: Optional[float] = None) -> float:
        """Relative L2 error in ``rho`` over the reconstructed range."""
        truth = self.q_true if q_true is None else np.asarray(q_true(self.rho), dtype=float)
        if truth is None:
            raise UsageError("no reference profile available")
        sel = np.ones(len(self.rho), bool) if rho_min is None else self.rho >= rho_min - 1e-12
        num = np.trapezoid((self.values[sel] - truth[sel]) ** 2, self.rho[sel])
        den = np.trapezoid(truth[sel] ** 2, self.rho[sel])
        if den == 0:
            return float(np.sqrt(num))
        return float(np.sqrt(num / den))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rho", "q_true", "q_reconstructed", "layer_residual"])
            for k, r in enumerate(self.rho):
                qt = "" if self.q_true is None else repr(float(self.q_true[k]))
                lr = "" if self.layer_residual is None else repr(float(self.layer_residual[k]))
                w.writerow([repr(float(r)), qt, repr(float(self.values[k])), lr])

    @classmethod
    def from_csv(cls, path) -> "RadialProfile":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rho = np.array([float(r["rho"]) for r in rows])
        vals = np.array([float(r["q_reconstructed"]) for r in rows])
        qt = None if any(r["q_true"] == "" for r in rows) else np.array([float(r["q_true"]) for r in rows])
        lr = (None if any(r["layer_residual"] == "" for r in rows)
              else np.array([float(r["layer_residual"]) for r in rows]))
        return cls(rho, vals, qt, lr)


def radial_trace(data: BackscatterData, variance_tol: float) -> np.ndarray:
    """Source-averaged trace; rejects data that depend on the source."""
    vals = np.asarray(data.values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise RejectionError("data contain failed (non-finite) rows")
    mean = vals.mean(axis=0)
    spread = float(np.max(vals.max(axis=0) - vals.min(axis=0))) if len(vals) > 1 else 0.0
    scale = float(np.max(np.abs(mean))) if mean.size else 0.0
    if spread > variance_tol * max(scale, 1e-300) and spread > 1e-14:
        raise RejectionError(f"data are not radial: source spread {spread:.3g} exceeds "
                             f"{variance_tol:.1g} x max|d| = {variance_tol * scale:.3g}")
    return mean


def born_data(q: Potential, times, n_mu: int = 64) -> np.ndarray:
    """First-order trace ``(1/8 pi) Mq(a, t/2)`` for a radial ``q``."""
    from .spherical_means import spherical_mean
    a = np.array([0.0, 0.0, 1.0])
    return np.array([spherical_mean(q, a, 0.5 * t, n_mu=n_mu, n_az=4) for t in np.asarray(times)]) / (8.0 * np.pi)


class _Recovered:
    """Shell values recovered so far, as a radial table from ``rho = 1`` inward."""

    def __init__(self):
        self.rho = [1.0]
        self.vals = [0.0]

    def set(self, rho, val):
        if rho in self.rho:
            self.vals[self.rho.index(rho)] = val
        else:
            self.rho.append(rho)
            self.vals.append(val)

    def potential(self, front: float) -> TabulatedRadial:
        return TabulatedRadial(np.array(self.rho), np.array(self.vals), front=front)


def _kernel_integral(qhat: Potential, field_: LightConeField, tau: float, rule, r_cut: float) -> float:
    """``int q u(x, 2 tau - |x-a|) / (4 pi |x-a|) dx`` with the cutoff."""
    total = 0.0
    for i, r in enumerate(rule.radii):
        cut = float(smooth_cutoff(r, r_cut))
        if cut == 0.0:
            continue
        X = rule.points[i]
        qv = np.asarray(qhat(X), dtype=float)
        if not np.any(qv):
            continue
        vals, win = field_.retarded_levels(X)
        pos = (2.0 * tau - 2.0 * r) / field_.ds
        if np.any(pos > win + 1e-9):
            raise DomainError("field window too short for the layer")
        j = min(int(np.floor(pos)), vals.shape[1] - 2)
        f = pos - j
        u = (1.0 - f) * vals[:, j] + f * vals[:, j + 1]
        total += cut * float(rule.weights[i] @ (qv * u)) / (4.0 * np.pi * r)
    return total


def layer_strip_radial(data: BackscatterData, cfg: Optional[InversionConfig] = None,
                       q_true: Optional[Callable] = None) -> RadialProfile:
    """Recover a radial potential from backscatter traces.

    The data times must form the uniform grid ``t_m = m dt``; layer ``m``
    sits at ``tau_m = t_m / 2`` and shell ``rho_m = 1 - tau_m``.  The march
    stops at ``tau = 1 - eps``.

    Raises
    ------
    RejectionError
        If the traces differ across sources by more than ``variance_tol``
        relative to their maximum.
    """
    cfg = (cfg or InversionConfig()).validate()
    times = np.asarray(data.times, dtype=float)
    dt = times[0]
    if not np.allclose(times, dt * np.arange(1, len(times) + 1), rtol=0, atol=1e-9):
        raise UsageError("data times must form the grid dt, 2 dt, ..., starting at dt")
    d = radial_trace(data, cfg.variance_tol)
    dtau = 0.5 * dt
    M = int(np.floor((1.0 - cfg.eps) / dtau + 1e-9))
    M = min(M, len(times))
    if M < 3:
        raise UsageError("too few data times for the requested depth")
    tau = dtau * np.arange(M + 1)
    G = np.zeros(M + 1)
    I = np.zeros(M + 1)
    qhat = np.zeros(M + 1)
    resid = np.zeros(M + 1)
    min_read = np.full(M + 1, np.inf)
    src = data.sources[0]
    solver = replace(cfg.solver, ds=dt, geometry="axisymmetric")
    rec = _Recovered()

    def update(m):
        if m == 1:
            deriv = (G[2] - G[0]) / (2.0 * dtau)
        else:
            deriv = (3.0 * G[m] - 4.0 * G[m - 1] + G[m - 2]) / (2.0 * dtau)
        return 2.0 / (1.0 - tau[m]) * deriv

    m_boot = max(2, int(np.floor(cfg.tau_boot / dtau + 1e-9))) if cfg.kernel else M
    m_boot = min(m_boot, M)
    G[1:m_boot + 1] = 8.0 * np.pi * tau[1:m_boot + 1] * d[:m_boot]
    for m in range(1, m_boot + 1):
        qhat[m] = update(m)
        rec.set(1.0 - tau[m], qhat[m])

    solves = 0
    m = m_boot + 1
    while m <= M:
        m_end = min(M, m + cfg.refresh_every - 1)
        block = range(m, m_end + 1)
        t_max = min(2.0, 2.0 * tau[m_end])
        for sweep in range(1 + cfg.n_corr):
            table = rec.potential(front=1.0 - tau[m_end] - 1e-12)
            fld = picard_solve(table, src, replace(solver, t_max=float(t_max)))
            solves += 1
            for k in block:
                rule = ball_rule(src, tau[k], cfg.n_r, cfg.n_mu, 1)
                integrand_q = rec.potential(front=1.0 - tau[k] - 1e-12)
                I[k] = _kernel_integral(integrand_q, fld, tau[k], rule, cfg.r_cut)
                G[k] = 8.0 * np.pi * tau[k] * (d[k - 1] - I[k])
                new = update(k)
                resid[k] = abs(new - qhat[k]) if sweep > 0 else 0.0
                qhat[k] = new
                rec.set(1.0 - tau[k], new)
                min_read[k] = min(table.min_rho_read, integrand_q.min_rho_read)
        m = m_end + 1

    rho = 1.0 - tau[::-1]
    vals = qhat[::-1]
    truth = None if q_true is None else np.asarray(q_true(rho), dtype=float)
    meta = {
        "tau": tau.tolist(), "G": G.tolist(), "kernel_integral": I.tolist(),
        "min_rho_read": min_read.tolist(), "field_solves": solves, "m_boot": m_boot,
        "config": {"eps": cfg.eps, "tau_boot": cfg.tau_boot, "n_corr": cfg.n_corr,
                   "refresh_every": cfg.refresh_every, "r_cut": cfg.r_cut, "n_r": cfg.n_r,
                   "n_mu": cfg.n_mu, "kernel": cfg.kernel, "h": solver.h, "ds": solver.ds},
    }
    return RadialProfile(rho, vals, truth, resid[::-1], meta)


def radial_shell_norm(profile: Callable, rho) -> np.ndarray:
    """``P(rho) = 4 pi rho^2 p(rho)^2`` for a radial profile."""
    rho = np.asarray(rho, dtype=float)
    return 4.0 * np.pi * rho ** 2 * np.asarray(profile(rho), dtype=float) ** 2


def write_gronwall_json(report: GronwallReport, path, extra: Optional[dict] = None) -> None:
    out = report.to_dict()
    if extra:
        out.update(extra)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
