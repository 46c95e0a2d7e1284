"""Scattered field of a point source and its backscatter trace.

The total field splits as ``U = delta(t - |x-a|) / (4 pi |x-a|) + u`` and the
smooth part solves the retarded-potential equation

    u = R[q G] + R[q u],    R[f](x, t) = int f(y, t - |x-y|) / (4 pi |x-y|) dy.

Both terms are written in prolate-spheroidal coordinates with foci ``a`` and
``x``: ``sigma = |y-a| + |y-x|``, ``zeta = (|y-a| - |y-x|) / |x-a|`` and an
azimuth ``psi``.  With ``d = |x - a|`` and retarded time ``s = t - d``

    R[q G](x, d+s) = 1/(32 pi^2) int int q(y(d+s, zeta, psi)) dpsi dzeta
    R[q u](x, d+s) = int_d^{d+s} int int (sigma + d zeta)/(16 pi)
                        q(y) u~(y, d+s-sigma) dpsi dzeta dsigma

where ``u~(y, s') = u(y, |y-a| + s')``.  The formulas stay regular at
``d = 0`` and at ``sigma = d``, where the spheroid collapses onto the segment
from ``a`` to ``x`` and the first term reduces to the characteristic value
``(1/8 pi) int_0^1 q(a + s (x-a)) ds``.

Sampling ``sigma`` on the retarded-time grid puts every retarded argument
exactly on a stored level, so the volume term becomes a causal convolution of
sparse spatial operators.  The field is marched level by level; at each level
the implicit contribution of the ``sigma = d`` segment is resolved by Picard
iteration.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConvergenceError, DomainError, UsageError, WindowRangeError
from .potential import Potential
from .sphere_geometry import SourcePoint, as_points, coerce_source, orthonormal_frame

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Discretisation and stopping parameters.

    ``h`` is the spatial lattice spacing (``1/h`` must be an integer) and
    ``ds`` the retarded-time step.  ``t_max`` bounds the backscatter time the
    field must support at the source; with ``prune`` on, node ``x`` is only
    advanced to ``s = t_max - 2|x - a|`` plus a small margin, which is all the
    trace at ``a`` up to ``t_max`` can depend on.
    """

    h: float = 1.0 / 32
    ds: float = 1.0 / 64
    t_max: float = 2.0
    max_iter: int = 20
    tol: float = 1e-8
    n_zeta: int = 12
    n_psi: int = 16
    n_zeta_source: int = 32
    n_psi_source: int = 16
    geometry: str = "auto"
    prune: bool = True

    def validate(self) -> "SolverConfig":
        if self.h <= 0 or self.ds <= 0 or self.tol <= 0:
            raise DomainError("h, ds and tol must be positive")
        if abs(1.0 / self.h - round(1.0 / self.h)) > 1e-9:
            raise DomainError(f"1/h must be an integer, got h = {self.h}")
        if not 0 < self.t_max <= 2.0 + 1e-12:
            raise DomainError("t_max must lie in (0, 2]")
        if self.max_iter < 1:
            raise DomainError("max_iter must be at least 1")
        if self.n_psi < 2 or self.n_psi % 2 or self.n_psi_source < 2 or self.n_psi_source % 2:
            raise DomainError("azimuthal orders must be even")
        if self.geometry not in ("auto", "axisymmetric", "cartesian"):
            raise DomainError(f"unknown geometry {self.geometry!r}")
        return self

    @property
    def n_levels(self) -> int:
        return int(round(self.t_max / self.ds)) + 1

    def refined(self, factor: int = 2, orders: bool = True) -> "SolverConfig":
        """Spacings divided by ``factor``; quadrature orders multiplied by it
        unless ``orders`` is false."""
        kw = {"h": self.h / factor, "ds": self.ds / factor}
        if orders:
            kw.update(n_zeta=self.n_zeta * factor, n_psi=self.n_psi * factor,
                      n_zeta_source=self.n_zeta_source * factor, n_psi_source=self.n_psi_source * factor)
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# Spatial lattices attached to a source point
# ---------------------------------------------------------------------------

class _Lattice:
    """Nodes covering the closed unit ball plus a collar, in a frame where the
    source point ``a`` is a lattice node."""

    collar_cells = 3
    symmetric = False

    def __init__(self, source: SourcePoint, h: float):
        self.source = source
        self.h = h
        self.n = int(round(1.0 / h))
        self.collar = 2.0 * h

    def node_frames(self):
        """Spheroid axis ``e`` and transverse unit vectors per node."""
        a = self.source.a
        diff = self.points - a
        d = np.linalg.norm(diff, axis=1)
        e = np.where(d[:, None] > 1e-12, diff / np.maximum(d, 1e-300)[:, None], -a)
        f1, f2 = self._transverse(e)
        return d, e, f1, f2


class AxisymmetricLattice(_Lattice):
    """``(z, r)`` lattice in the half-plane spanned by ``a`` and ``b1``.

    Valid for fields symmetric about the axis through ``a`` (radial ``q``).
    """

    symmetric = True
    dim = 2

    def __init__(self, source, h):
        super().__init__(source, h)
        c = self.collar_cells
        self.iz = np.arange(-self.n - c, self.n + c + 1)
        self.ir = np.arange(0, self.n + c + 1)
        Z, R = np.meshgrid(self.iz * h, self.ir * h, indexing="ij")
        keep = np.hypot(Z, R) <= 1.0 + self.collar
        self.index = -np.ones(Z.shape, dtype=np.int64)
        self.index[keep] = np.arange(int(keep.sum()))
        self.b1 = source.frame()[0]
        a = source.a
        self.points = Z[keep][:, None] * a + R[keep][:, None] * self.b1
        self.source_node = int(self.index[2 * self.n + c, 0])
        self.cell_diag = math.sqrt(2.0) * h

    def _transverse(self, e):
        a, b1 = self.source.a, self.b1
        ea, eb = e @ a, e @ b1
        f1 = -eb[:, None] * a + ea[:, None] * b1
        f1 /= np.linalg.norm(f1, axis=1, keepdims=True)
        f2 = np.cross(e, f1)
        return f1, f2

    def stencil(self, y):
        """Bilinear weights: ``(cols, weights, valid)`` with shapes (M, 4)."""
        a, h = self.source.a, self.h
        z = y @ a
        r = np.linalg.norm(y - z[:, None] * a, axis=1)
        c = self.collar_cells
        fz = (z / h) + self.n + c
        fr = r / h
        i = np.clip(np.floor(fz).astype(np.int64), 0, len(self.iz) - 2)
        j = np.clip(np.floor(fr).astype(np.int64), 0, len(self.ir) - 2)
        tz = fz - i
        tr = fr - j
        cols = np.stack([self.index[i, j], self.index[i + 1, j],
                         self.index[i, j + 1], self.index[i + 1, j + 1]], axis=1)
        w = np.stack([(1 - tz) * (1 - tr), tz * (1 - tr), (1 - tz) * tr, tz * tr], axis=1)
        inside = (tz >= -1e-9) & (tz <= 1 + 1e-9) & (tr <= 1 + 1e-9)
        valid = inside[:, None] & ((cols >= 0) | (np.abs(w) < 1e-14))
        return cols, w, valid


class CartesianLattice(_Lattice):
    """Cubic lattice in the frame ``(b1, b2, a)``; for general potentials."""

    dim = 3

    def __init__(self, source, h):
        super().__init__(source, h)
        c = self.collar_cells
        self.ik = np.arange(-self.n - c, self.n + c + 1)
        b1, b2 = source.frame()
        self.R = np.column_stack([b1, b2, source.a])
        I, J, K = np.meshgrid(self.ik, self.ik, self.ik, indexing="ij")
        local = np.stack([I, J, K], axis=-1) * h
        keep = np.linalg.norm(local, axis=-1) <= 1.0 + self.collar
        self.index = -np.ones(I.shape, dtype=np.int64)
        self.index[keep] = np.arange(int(keep.sum()))
        self.points = local[keep] @ self.R.T
        o = self.n + c
        self.source_node = int(self.index[o, o, 2 * self.n + c])
        self.cell_diag = math.sqrt(3.0) * h

    def _transverse(self, e):
        return orthonormal_frame(e)

    def stencil(self, y):
        local = y @ self.R
        o = self.n + self.collar_cells
        f = local / self.h + o
        i0 = np.clip(np.floor(f).astype(np.int64), 0, len(self.ik) - 2)
        t = f - i0
        cols, ws = [], []
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    cols.append(self.index[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz])
                    ws.append((t[:, 0] if dx else 1 - t[:, 0]) * (t[:, 1] if dy else 1 - t[:, 1])
                              * (t[:, 2] if dz else 1 - t[:, 2]))
        cols = np.stack(cols, axis=1)
        w = np.stack(ws, axis=1)
        inside = np.all((t >= -1e-9) & (t <= 1 + 1e-9), axis=1)
        valid = inside[:, None] & ((cols >= 0) | (np.abs(w) < 1e-14))
        return cols, w, valid


def make_lattice(source: SourcePoint, q: Potential, cfg: SolverConfig) -> _Lattice:
    geometry = cfg.geometry
    if geometry == "auto":
        geometry = "axisymmetric" if q.is_radial else "cartesian"
    if geometry == "axisymmetric":
        if not q.is_radial:
            raise UsageError("axisymmetric lattice requires a radial potential")
        return AxisymmetricLattice(source, cfg.h)
    return CartesianLattice(source, cfg.h)


def _psi_rule(n_psi: int, symmetric: bool):
    """Azimuth nodes and weights; the symmetric form folds psi -> -psi."""
    if symmetric:
        nh = n_psi // 2
        psi = np.pi * np.arange(nh + 1) / nh
        w = np.full(nh + 1, 2.0 * np.pi / n_psi)
        w[[0, -1]] *= 0.5
        return psi, 2.0 * w
    return 2.0 * np.pi * np.arange(n_psi) / n_psi, np.full(n_psi, 2.0 * np.pi / n_psi)


def spheroid_points(a, X, d, e, f1, f2, sigma, zeta, psi):
    """Points on the spheroids ``|y-a| + |y-x| = sigma``; shape (n, nz, npsi, 3)."""
    m = 0.5 * (X + a)
    B = 0.5 * np.sqrt(np.clip(sigma * sigma - d * d, 0.0, None))
    radial = np.sqrt(np.clip(1.0 - zeta * zeta, 0.0, None))
    axial = 0.5 * sigma[:, None] * zeta[None, :]                       # (n, nz)
    ring = (np.cos(psi)[None, :, None] * f1[:, None, :]
            + np.sin(psi)[None, :, None] * f2[:, None, :])               # (n, npsi, 3)
    return (m[:, None, None, :] + axial[:, :, None, None] * e[:, None, None, :]
            + (B[:, None] * radial[None, :])[:, :, None, None] * ring[:, None, :, :])


# ---------------------------------------------------------------------------
# First Picard term
# ---------------------------------------------------------------------------

def born_first_term(q: Potential, a, x, t, n_zeta: int = 32, n_psi: int = 32):
    """Retarded potential of ``q`` times the free wavefront, ``R[q G](x, t)``.

    Zero for ``t < |x - a|``.  At ``t = |x - a|`` the spheroid degenerates to
    the segment ``[a, x]`` and the value is the characteristic line integral.
    """
    src = coerce_source(a)
    x = as_points(x)
    x, t = np.broadcast_arrays(x, np.asarray(t, dtype=float)[..., None])
    t = t[..., 0]
    shape = t.shape
    X = x.reshape(-1, 3)
    T = t.reshape(-1)
    if np.any(T < 0):
        raise DomainError("born_first_term needs t >= 0")
    diff = X - src.a
    d = np.linalg.norm(diff, axis=1)
    out = np.zeros(len(X))
    live = T >= d - 1e-14
    if np.any(live):
        Xl, dl, Tl = X[live], d[live], np.maximum(T[live], d[live])
        e = np.where(dl[:, None] > 1e-12, diff[live] / np.maximum(dl, 1e-300)[:, None], -src.a)
        f1, f2 = orthonormal_frame(e)
        zeta, wz = np.polynomial.legendre.leggauss(n_zeta)
        psi, wp = _psi_rule(n_psi, False)
        y = spheroid_points(src.a, Xl, dl, e, f1, f2, Tl, zeta, psi)
        vals = np.asarray(q(y))
        out[live] = np.einsum("nzp,z,p->n", vals, wz, wp) / (32.0 * np.pi ** 2)
    out = out.reshape(shape)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# The field
# ---------------------------------------------------------------------------

@dataclass
class LightConeField:
    """Scattered field stored in retarded coordinates.

    ``values[i, n]`` is ``u(x_i, |x_i - a| + n ds)``.  Level ``n`` of node
    ``i`` is meaningful only for ``n <= window[i]``.  ``u`` vanishes for
    ``t < |x - a|`` by construction.
    """

    source: SourcePoint
    lattice: _Lattice
    ds: float
    values: np.ndarray
    window: np.ndarray
    config: SolverConfig
    iterations: int = 0
    residual_history: List[float] = field(default_factory=list)
    level_iterations: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_levels(self) -> int:
        return self.values.shape[1]

    @property
    def s_max(self) -> float:
        return (self.n_levels - 1) * self.ds

    def _gather(self, x, s):
        x = as_points(x)
        shape = x.shape[:-1]
        X = x.reshape(-1, 3)
        S = np.broadcast_to(np.asarray(s, dtype=float), shape).reshape(-1)
        out = np.zeros(len(X))
        live = S >= 0
        if not np.any(live):
            return out.reshape(shape)
        if np.any(S[live] > self.s_max + 1e-12):
            raise WindowRangeError(f"retarded time {S[live].max():.6g} beyond stored window {self.s_max:.6g}")
        cols, w, valid = self.lattice.stencil(X[live])
        if not np.all(valid):
            raise DomainError("query point outside the computed lattice")
        sl = S[live] / self.ds
        j = np.clip(np.floor(sl).astype(np.int64), 0, self.n_levels - 1)
        f = sl - j
        j1 = np.minimum(j + 1, self.n_levels - 1)
        safe = np.where(cols >= 0, cols, 0)
        need = np.where(f > 1e-12, j1, j)[:, None]
        used = np.abs(w) > 1e-14
        if np.any(used & (self.window[safe] < need)):
            raise WindowRangeError("query reaches beyond the causal window of the solve")
        u0 = self.values[safe, j[:, None]]
        u1 = self.values[safe, j1[:, None]]
        vals = np.sum(np.where(used, w, 0.0) * ((1 - f)[:, None] * u0 + f[:, None] * u1), axis=1)
        out[live] = vals
        return out.reshape(shape)

    def retarded(self, x, s):
        """``u(x, |x - a| + s)``; zero for ``s < 0``."""
        out = self._gather(x, s)
        return out if out.ndim else float(out)

    def __call__(self, x, t):
        """``u(x, t)``; zero for ``t < |x - a|``."""
        x = as_points(x)
        d = np.linalg.norm(x - self.source.a, axis=-1)
        return self.retarded(x, np.asarray(t, dtype=float) - d)

    def retarded_levels(self, x):
        """All stored levels at points ``x``: array (M, n_levels) plus the
        last trustworthy level per point."""
        X = as_points(x).reshape(-1, 3)
        cols, w, valid = self.lattice.stencil(X)
        if not np.all(valid):
            raise DomainError("query point outside the computed lattice")
        safe = np.where(cols >= 0, cols, 0)
        used = np.abs(w) > 1e-14
        vals = np.einsum("mk,mkn->mn", np.where(used, w, 0.0), self.values[safe])
        win = np.min(np.where(used, self.window[safe], np.iinfo(np.int64).max), axis=1)
        return vals, win

    def char_trace(self, x):
        """Stored field on the light cone ``t = |x - a|``."""
        return self.retarded(x, 0.0)

    def pde_residual(self, q: Potential, points, step_cells: int = 4):
        """Discrete ``box u - q u`` at interior points (diagnostic only).

        Second differences use spacing ``step_cells * h`` in space and ``2 ds``
        in time, through the field interpolant, at a retarded time halfway
        into the usable window.  Returns ``(residual, scale)`` with
        ``scale = |u_tt| + |lap u| + |q u|``; both are NaN where the stencil
        would leave the window or straddle the light cone.
        """
        X = as_points(points).reshape(-1, 3)
        d = np.linalg.norm(X - self.source.a, axis=1)
        dt = 2.0 * self.ds
        dx = step_cells * self.lattice.h
        top = (self.config.t_max - 2.0 * (d + dx)) if self.config.prune else np.full(len(X), self.s_max)
        top = np.minimum(top, self.s_max) - dt
        s = 0.5 * (top + dx + dt)
        ok = s > dx + dt
        res = np.full(len(X), np.nan)
        scale = np.full(len(X), np.nan)
        if not np.any(ok):
            return res, scale
        Xo, t = X[ok], d[ok] + s[ok]
        u = self(Xo, t)
        utt = (self(Xo, t + dt) - 2 * u + self(Xo, t - dt)) / dt ** 2
        lap = np.zeros(len(Xo))
        for k in range(3):
            e = np.zeros(3)
            e[k] = dx
            lap += (self(Xo + e, t) - 2 * u + self(Xo - e, t)) / dx ** 2
        qu = np.asarray(q(Xo)) * u
        res[ok] = utt - lap - qu
        scale[ok] = np.abs(utt) + np.abs(lap) + np.abs(qu)
        return res, scale


def trace_at_source(field: LightConeField, t):
    """Backscatter datum ``u^a(a, t)``; zero for ``t <= 0``."""
    t = np.asarray(t, dtype=float)
    if np.any(t > field.s_max + 1e-12):
        raise WindowRangeError(f"t = {t.max():.6g} beyond stored window {field.s_max:.6g}")
    i = field.lattice.source_node
    levels = np.arange(field.n_levels) * field.ds
    out = np.where(t > 0, np.interp(np.clip(t, 0, None), levels, field.values[i]), 0.0)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _window(d, cfg: SolverConfig, lattice) -> np.ndarray:
    L = cfg.n_levels
    if not cfg.prune:
        return np.full(len(d), L - 1, dtype=np.int64)
    margin = int(math.ceil(2.0 * lattice.cell_diag / cfg.ds)) + 2
    n = np.floor((cfg.t_max - 2.0 * d) / cfg.ds + 1e-9).astype(np.int64) + margin
    return np.clip(n, 0, L - 1)


def _assemble(q, lattice, d, e, f1, f2, window, cfg):
    """Source term per level and the sparse volume operators per sigma level."""
    a = lattice.source.a
    N = len(d)
    L = cfg.n_levels
    ds = cfg.ds
    zs, wzs = np.polynomial.legendre.leggauss(cfg.n_zeta_source)
    ps, wps = _psi_rule(cfg.n_psi_source, lattice.symmetric)
    wsrc = (wzs[:, None] * wps[None, :]) / (32.0 * np.pi ** 2)
    zv, wzv = np.polynomial.legendre.leggauss(cfg.n_zeta)
    pv, wpv = _psi_rule(cfg.n_psi, lattice.symmetric)
    X = lattice.points
    F = np.zeros((N, L))
    ops = []
    for k in range(L):
        act = np.nonzero(window >= k)[0]
        if len(act) == 0:
            ops.append(None)
            continue
        sigma = d[act] + k * ds
        y = spheroid_points(a, X[act], d[act], e[act], f1[act], f2[act], sigma, zs, ps)
        F[act, k] = np.einsum("nzp,zp->n", np.asarray(q(y)), wsrc)
        if k == 0:
            # segment: every azimuth gives the same point
            pk, wk = np.zeros(1), np.array([2.0 * np.pi])
        else:
            pk, wk = pv, wpv
        y = spheroid_points(a, X[act], d[act], e[act], f1[act], f2[act], sigma, zv, pk)
        jac = (sigma[:, None] + d[act][:, None] * zv[None, :]) / (16.0 * np.pi)
        w = jac[:, :, None] * (wzv[:, None] * wk[None, :])[None] * np.asarray(q(y))
        rows = np.broadcast_to(act[:, None, None], w.shape).ravel()
        w = w.ravel()
        keep = w != 0
        if not np.any(keep):
            ops.append(None)
            continue
        cols, iw, valid = lattice.stencil(y.reshape(-1, 3)[keep])
        if not np.all(valid):
            raise DomainError("spheroid sample outside the lattice collar")
        vals = iw * w[keep][:, None]
        used = np.abs(iw) > 0
        A = sp.csr_matrix((vals[used], (np.broadcast_to(rows[keep][:, None], cols.shape)[used], cols[used])),
                          shape=(N, N))
        ops.append(A)
    return F, ops


def picard_solve(q: Potential, a, cfg: Optional[SolverConfig] = None) -> LightConeField:
    """Solve for the scattered field of the source at ``a``.

    Raises
    ------
    ConvergenceError
        If the per-level fixed point does not settle within ``cfg.max_iter``.
    """
    cfg = (cfg or SolverConfig()).validate()
    src = coerce_source(a)
    lattice = make_lattice(src, q, cfg)
    d, e, f1, f2 = lattice.node_frames()
    window = _window(d, cfg, lattice)
    L = cfg.n_levels
    N = len(d)
    U = np.zeros((N, L))
    if q.sup_norm == 0:
        return LightConeField(src, lattice, cfg.ds, U, window, cfg, 1, [0.0], np.ones(L, dtype=np.int64))
    F, ops = _assemble(q, lattice, d, e, f1, f2, window, cfg)
    ds = cfg.ds
    U[:, 0] = F[:, 0]
    worst = np.zeros(cfg.max_iter)
    level_iters = np.ones(L, dtype=np.int64)
    for n in range(1, L):
        active = window >= n
        hist = np.zeros(N)
        for k in range(1, n + 1):
            A = ops[k]
            if A is None:
                continue
            c = 0.5 if k == n else 1.0
            hist += c * (A @ U[:, n - k])
        b = F[:, n] + ds * hist
        A0 = ops[0]
        u = b.copy()
        history = []
        for it in range(cfg.max_iter):
            new = b + 0.5 * ds * (A0 @ u) if A0 is not None else b
            delta = float(np.max(np.abs(new - u)[active])) if np.any(active) else 0.0
            u = new
            history.append(delta)
            if delta <= cfg.tol:
                break
        else:
            raise ConvergenceError(f"Picard iteration stalled at level {n} (s = {n * ds:.4g})", history)
        worst[: len(history)] = np.maximum(worst[: len(history)], history)
        level_iters[n] = len(history)
        U[:, n] = np.where(active, u, 0.0)
    iters = int(level_iters.max())
    field_ = LightConeField(src, lattice, ds, U, window, cfg, iters, worst[:iters].tolist(), level_iters)
    logger.debug("solved source %s: %d nodes, %d levels, <= %d Picard sweeps per level",
                 src.a, N, L, iters)
    return field_


# ---------------------------------------------------------------------------
# Data acquisition
# ---------------------------------------------------------------------------

@dataclass
class BackscatterData:
    """Table ``values[k, m] = u^{a_k}(a_k, t_m)``.  Failed sources have NaN rows
    and an entry in ``errors``."""

    sources: List[SourcePoint]
    times: np.ndarray
    values: np.ndarray
    errors: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a_index", "a_x", "a_y", "a_z", "t", "value"])
            for k, src in enumerate(self.sources):
                for m, t in enumerate(self.times):
                    w.writerow([k, *(repr(float(c)) for c in src.a), repr(float(t)),
                                repr(float(self.values[k, m]))])

    @classmethod
    def from_csv(cls, path) -> "BackscatterData":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        idx = sorted({int(r["a_index"]) for r in rows})
        times = sorted({float(r["t"]) for r in rows})
        tpos = {t: i for i, t in enumerate(times)}
        srcs, values = {}, np.full((len(idx), len(times)), np.nan)
        kpos = {k: i for i, k in enumerate(idx)}
        for r in rows:
            k = kpos[int(r["a_index"])]
            srcs[k] = SourcePoint.from_direction([float(r["a_x"]), float(r["a_y"]), float(r["a_z"])])
            values[k, tpos[float(r["t"])]] = float(r["value"])
        return cls([srcs[k] for k in range(len(idx))], np.array(times), values)


def _threads(threads: Optional[int]) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("PS_THREADS")
    return max(1, int(env)) if env else 1


def acquire_data(q: Potential, sources: Sequence, times, cfg: Optional[SolverConfig] = None,
                 threads: Optional[int] = None) -> BackscatterData:
    """Backscatter traces for every source; sources run concurrently.

    A source whose solve fails gets a NaN row and an entry in ``errors``; the
    remaining sources still run.  Output order follows input order.
    """
    cfg = (cfg or SolverConfig()).validate()
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0) or np.any(times > 2.0 + 1e-12):
        raise DomainError("acquisition times must lie in (0, 2]")
    if times.size and times.max() > cfg.t_max + 1e-12:
        cfg = replace(cfg, t_max=float(min(2.0, math.ceil(times.max() / cfg.ds - 1e-9) * cfg.ds)))
    srcs = [coerce_source(a) for a in sources]

    def one(src):
        try:
            return trace_at_source(picard_solve(q, src, cfg), times), None
        except (ConvergenceError, DomainError, WindowRangeError) as exc:
            return np.full(len(times), np.nan), f"{type(exc).__name__}: {exc}"

    n = _threads(threads)
    if n > 1 and len(srcs) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(one, srcs))
    else:
        results = [one(s) for s in srcs]
    values = np.array([r[0] for r in results]).reshape(len(srcs), len(times))
    errors = {k: r[1] for k, r in enumerate(results) if r[1] is not None}
    return BackscatterData(srcs, times, values, errors)
