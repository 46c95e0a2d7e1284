"""Potentials supported in the open unit ball.

Every potential is a callable ``q(x)`` on arrays of shape (..., 3) with an
analytic or finite-difference ``gradient``.  Values vanish identically for
``|x| >= 1``; that support contract is what lets the rest of the package clip
quadratures to the ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import integrate, ndimage

from .errors import DomainError, UsageError
from .harmonics import solid_harmonic
from .sphere_geometry import SphereGrid, as_points, coerce_source


class Potential:
    """Base class; subclasses implement ``_value`` and ``_gradient`` inside the ball."""

    is_radial = False

    def __call__(self, x):
        x = as_points(x)
        r2 = np.sum(x * x, axis=-1)
        inside = r2 < 1.0
        out = np.zeros(x.shape[:-1])
        if np.any(inside):
            out[inside] = self._value(x[inside], r2[inside])
        return out if out.ndim else float(out)

    def gradient(self, x):
        x = as_points(x)
        r2 = np.sum(x * x, axis=-1)
        inside = r2 < 1.0
        out = np.zeros(x.shape)
        if np.any(inside):
            out[inside] = self._gradient(x[inside], r2[inside])
        return out

    def _value(self, x, r2):
        raise NotImplementedError

    def _gradient(self, x, r2):
        raise NotImplementedError

    @property
    def sup_norm(self) -> float:
        """Upper bound on ``max |q|`` (exact for the presets)."""
        raise NotImplementedError

    def radial(self, rho):
        """Profile ``q(rho)`` of a radial potential."""
        if not self.is_radial:
            raise UsageError(f"{type(self).__name__} is not radial")
        rho = np.asarray(rho, dtype=float)
        pts = np.zeros(rho.shape + (3,))
        pts[..., 2] = rho
        return self(pts)

    def __add__(self, other):
        return Combination([(1.0, self), (1.0, other)])

    def __sub__(self, other):
        return Combination([(1.0, self), (-1.0, other)])

    def __rmul__(self, c):
        return Combination([(float(c), self)])

    def __neg__(self):
        return Combination([(-1.0, self)])


class Zero(Potential):
    is_radial = True

    def _value(self, x, r2):
        return np.zeros(len(x))

    def _gradient(self, x, r2):
        return np.zeros(x.shape)

    @property
    def sup_norm(self):
        return 0.0

    def spec(self):
        return {"kind": "zero"}


@dataclass(eq=False)
class RadialBump(Potential):
    """``q(x) = c (1 - |x|^2)^m`` inside the ball; ``C^(m-1)`` across ``|x| = 1``."""

    c: float = 1.0
    m: int = 2
    is_radial = True

    def __post_init__(self):
        if self.m < 1:
            raise DomainError("bump exponent m must be at least 1")

    def _value(self, x, r2):
        return self.c * (1.0 - r2) ** self.m

    def _gradient(self, x, r2):
        return (-2.0 * self.m * self.c * (1.0 - r2) ** (self.m - 1))[:, None] * x

    @property
    def sup_norm(self):
        return abs(self.c)

    def spec(self):
        return {"kind": "radial_bump", "c": self.c, "m": self.m}


@dataclass(eq=False)
class HarmonicModulated(Potential):
    """``q(x) = c (1 - |x|^2)^m phi_n(x)`` with ``phi_n`` the solid harmonic.

    On the shell ``|x| = rho`` this is ``f(rho) phi_n(omega)`` with radial
    profile ``f(rho) = c rho^d (1 - rho^2)^m``, ``d`` the degree of ``phi_n``;
    the factor ``rho^d`` keeps it smooth at the origin.
    """

    c: float = 1.0
    m: int = 2
    n: int = 5

    def __post_init__(self):
        if self.m < 1:
            raise DomainError("bump exponent m must be at least 1")
        self._phi = solid_harmonic(self.n)
        self.degree = self._phi.degree
        self.is_radial = self.degree == 0

    def profile(self, rho):
        rho = np.asarray(rho, dtype=float)
        return np.where(rho < 1.0, self.c * rho ** self.degree * np.clip(1.0 - rho * rho, 0.0, None) ** self.m, 0.0)

    def _value(self, x, r2):
        return self.c * (1.0 - r2) ** self.m * self._phi(x)

    def _gradient(self, x, r2):
        h, gh = self._phi(x, gradient=True)
        g = self.c * (1.0 - r2) ** self.m
        dg = -2.0 * self.m * self.c * (1.0 - r2) ** (self.m - 1)
        return dg[:, None] * x * h[:, None] + g[:, None] * gh

    @property
    def sup_norm(self):
        # |phi_n(x)| <= |x|^d sqrt((2d+1)/(4 pi)) and rho^d (1-rho^2)^m peaks at rho^2 = d/(d+2m)
        d, m = self.degree, self.m
        s = d / (d + 2 * m) if d else 0.0
        peak = (s ** (d / 2) if d else 1.0) * (1.0 - s) ** m
        return abs(self.c) * math.sqrt((2 * d + 1) / (4 * math.pi)) * peak

    def spec(self):
        return {"kind": "harmonic_modulated", "c": self.c, "m": self.m, "n": self.n}


class AngularMix(Potential):
    """``q(x) = c (1 - |x|^2)^m sum_n w_n Y_n(x / |x|)`` with unit-sphere harmonics.

    Every shell carries the same angular content, which makes the angular
    condition constant exact: ``sum w_n^2 d_n (d_n + 1) / sum w_n^2``.  Not
    smooth at the origin unless only degree 0 is present.
    """

    def __init__(self, weights: dict, c: float = 1.0, m: int = 2):
        if m < 1:
            raise DomainError("bump exponent m must be at least 1")
        self.weights = {int(k): float(v) for k, v in weights.items()}
        self.c = float(c)
        self.m = int(m)
        self._phis = [(w, solid_harmonic(n)) for n, w in sorted(self.weights.items())]
        self.is_radial = all(phi.degree == 0 for _, phi in self._phis)

    def _angular(self, x, r2, gradient=False):
        r = np.sqrt(np.maximum(r2, 1e-300))
        val = np.zeros(len(x))
        grad = np.zeros(x.shape)
        for w, phi in self._phis:
            l = phi.degree
            if gradient:
                h, gh = phi(x, gradient=True)
                val += w * h / r ** l
                grad += w * (gh / r[:, None] ** l - l * h[:, None] * x / r[:, None] ** (l + 2))
            else:
                val += w * phi(x) / r ** l
        return val, grad

    def _value(self, x, r2):
        return self.c * (1.0 - r2) ** self.m * self._angular(x, r2)[0]

    def _gradient(self, x, r2):
        y, gy = self._angular(x, r2, gradient=True)
        g = self.c * (1.0 - r2) ** self.m
        dg = -2.0 * self.m * self.c * (1.0 - r2) ** (self.m - 1)
        return dg[:, None] * x * y[:, None] + g[:, None] * gy

    @property
    def sup_norm(self):
        bound = sum(abs(w) * math.sqrt((2 * phi.degree + 1) / (4 * math.pi)) for w, phi in self._phis)
        return abs(self.c) * bound

    def spec(self):
        return {"kind": "angular_mix", "c": self.c, "m": self.m,
                "weights": {str(k): v for k, v in self.weights.items()}}


class TabulatedRadial(Potential):
    """Radial potential interpolated linearly from samples ``q(rho_k)``.

    Linear interpolation reads only the two bracketing samples, so shell
    access can be tracked exactly: ``min_rho_read`` records the smallest
    sample radius that influenced any evaluation.
    """

    is_radial = True

    def __init__(self, rho, values, front: Optional[float] = None):
        rho = np.asarray(rho, dtype=float)
        values = np.asarray(values, dtype=float)
        order = np.argsort(rho)
        self.rho = rho[order]
        self.values = values[order]
        # values below `front` are treated as zero without being read
        self.front = -np.inf if front is None else float(front)
        self.min_rho_read = np.inf

    def _lookup(self, r):
        r = np.asarray(r, dtype=float)
        live = (r >= self.front) & (r < 1.0)
        out = np.zeros(r.shape)
        slope = np.zeros(r.shape)
        if np.any(live):
            rl = r[live]
            k = np.clip(np.searchsorted(self.rho, rl, side="right") - 1, 0, len(self.rho) - 2)
            r0, r1 = self.rho[k], self.rho[k + 1]
            v0, v1 = self.values[k], self.values[k + 1]
            f = np.clip((rl - r0) / (r1 - r0), 0.0, 1.0)
            out[live] = v0 + f * (v1 - v0)
            slope[live] = (v1 - v0) / (r1 - r0)
            self.min_rho_read = min(self.min_rho_read, float(np.min(np.where(f < 1.0, r0, r1))))
        return out, slope

    def _value(self, x, r2):
        return self._lookup(np.sqrt(r2))[0]

    def _gradient(self, x, r2):
        r = np.sqrt(r2)
        _, s = self._lookup(r)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(r > 0, s / r, 0.0)
        return g[:, None] * x

    @property
    def sup_norm(self):
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    def spec(self):
        return {"kind": "tabulated_radial", "rho": self.rho.tolist(), "values": self.values.tolist()}


class Combination(Potential):
    """Linear combination ``sum c_k q_k``."""

    def __init__(self, terms):
        flat = []
        for c, q in terms:
            if isinstance(q, Combination):
                flat.extend((c * c2, q2) for c2, q2 in q.terms)
            else:
                flat.append((float(c), q))
        self.terms = flat
        self.is_radial = all(q.is_radial for _, q in flat)

    def __call__(self, x):
        return sum(c * np.asarray(q(x)) for c, q in self.terms) if self.terms else np.zeros(as_points(x).shape[:-1])

    def gradient(self, x):
        x = as_points(x)
        return sum((c * q.gradient(x) for c, q in self.terms), np.zeros(x.shape))

    @property
    def sup_norm(self):
        return sum(abs(c) * q.sup_norm for c, q in self.terms)

    def spec(self):
        return {"kind": "combination", "terms": [[c, q.spec()] for c, q in self.terms]}


class GriddedPotential(Potential):
    """Samples on a Cartesian lattice, interpolated with cubic splines.

    Outside the sample hull and outside the unit ball the value is exactly 0.
    ``delta_margin`` records the smallest distance from a nonzero sample to
    the unit sphere.
    """

    def __init__(self, samples, spacing, origin, fd_step: float = 1e-4):
        self.samples = np.asarray(samples, dtype=float)
        if self.samples.ndim != 3:
            raise DomainError("gridded samples must be a 3-D array")
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
        self.origin = np.broadcast_to(np.asarray(origin, dtype=float), (3,)).copy()
        self.fd_step = fd_step
        self._coeffs = ndimage.spline_filter(self.samples, order=3, mode="grid-constant")
        idx = np.argwhere(self.samples != 0)
        if len(idx):
            pos = self.origin + idx * self.spacing
            self.delta_margin = float(1.0 - np.max(np.linalg.norm(pos, axis=1)))
        else:
            self.delta_margin = 1.0

    def _value(self, x, r2):
        coords = ((x - self.origin) / self.spacing).T
        upper = np.array(self.samples.shape)[:, None] - 1
        inside = np.all((coords >= 0) & (coords <= upper), axis=0)
        out = np.zeros(len(x))
        if np.any(inside):
            out[inside] = ndimage.map_coordinates(self._coeffs, coords[:, inside], order=3,
                                                  mode="grid-constant", prefilter=False)
        return out

    def _gradient(self, x, r2):
        g = np.empty(x.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = self.fd_step
            g[:, k] = (self(x + e) - self(x - e)) / (2.0 * self.fd_step)
        return g

    @property
    def sup_norm(self):
        return float(np.max(np.abs(self.samples))) if self.samples.size else 0.0

    # -- file format -------------------------------------------------------
    # CSV: "# dims=nx,ny,nz spacing=hx,hy,hz origin=ox,oy,oz" then one sample
    # per line, row-major (x slowest).  Raw: nine float64 header values
    # (dims, spacing, origin) followed by row-major float64 samples.

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".csv":
            hdr = "dims={} spacing={} origin={}".format(
                ",".join(str(n) for n in self.samples.shape),
                ",".join(repr(float(v)) for v in self.spacing),
                ",".join(repr(float(v)) for v in self.origin))
            np.savetxt(path, self.samples.ravel(), fmt="%.17g", header=hdr)
        else:
            head = np.concatenate([np.array(self.samples.shape, float), self.spacing, self.origin])
            with open(path, "wb") as fh:
                fh.write(head.astype("<f8").tobytes())
                fh.write(self.samples.astype("<f8").ravel().tobytes())

    @classmethod
    def load(cls, path) -> "GriddedPotential":
        path = Path(path)
        if path.suffix == ".csv":
            with open(path) as fh:
                first = fh.readline().lstrip("#").strip()
            meta = dict(tok.split("=") for tok in first.split())
            dims = tuple(int(v) for v in meta["dims"].split(","))
            spacing = [float(v) for v in meta["spacing"].split(",")]
            origin = [float(v) for v in meta["origin"].split(",")]
            data = np.loadtxt(path, ndmin=1)
        else:
            raw = np.frombuffer(path.read_bytes(), dtype="<f8")
            dims = tuple(int(v) for v in raw[:3])
            spacing, origin = raw[3:6], raw[6:9]
            data = raw[9:]
        if data.size != int(np.prod(dims)):
            raise DomainError(f"gridded file {path}: expected {np.prod(dims)} samples, found {data.size}")
        return cls(data.reshape(dims), spacing, origin)

    def spec(self):
        return {"kind": "gridded", "dims": list(self.samples.shape),
                "spacing": self.spacing.tolist(), "origin": self.origin.tolist()}


def eval_potential(q: Potential, x):
    return q(x)


def potential_from_spec(spec: dict, base_dir=None) -> Potential:
    """Build a potential from a config mapping ``{kind, c, m, n, path}``."""
    kind = spec.get("kind")
    if kind == "radial_bump":
        return RadialBump(float(spec.get("c", 1.0)), int(spec.get("m", 2)))
    if kind == "harmonic_modulated":
        return HarmonicModulated(float(spec.get("c", 1.0)), int(spec.get("m", 2)), int(spec.get("n", 5)))
    if kind == "zero":
        return Zero()
    if kind == "tabulated_radial":
        return TabulatedRadial(spec["rho"], spec["values"])
    if kind == "angular_mix":
        return AngularMix(spec.get("weights", {"1": 1.0}), float(spec.get("c", 1.0)), int(spec.get("m", 2)))
    if kind == "sum":
        terms = [potential_from_spec(t, base_dir) for t in spec.get("terms", [])]
        if not terms:
            raise UsageError("a sum potential needs at least one term")
        return Combination([(1.0, t) for t in terms])
    if kind == "gridded":
        path = Path(spec["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        q = GriddedPotential.load(path)
        return float(spec.get("c", 1.0)) * q if "c" in spec else q
    raise UsageError(f"unknown potential kind {kind!r}")


# ---------------------------------------------------------------------------
# Characteristic data and shell norms
# ---------------------------------------------------------------------------

def char_line_integral(q: Potential, a, x, epsabs: float = 1e-13, epsrel: float = 1e-11):
    """``(1/8 pi) int_0^1 q(a + s (x - a)) ds`` by adaptive quadrature.

    This is the value of the scattered field on the light cone
    ``t = |x - a|``.  Vectorised over ``x`` of shape (..., 3).
    """
    a = coerce_source(a).a
    x = as_points(x)
    shape = x.shape[:-1]
    X = x.reshape(-1, 3)

    def seg(s):
        return np.asarray(q(a + s * (X - a)), dtype=float)

    val, _ = integrate.quad_vec(seg, 0.0, 1.0, epsabs=epsabs, epsrel=epsrel)
    out = np.asarray(val).reshape(shape) / (8.0 * np.pi)
    return out if out.ndim else float(out)


def shell_norm(p, rho, grid: SphereGrid):
    """``P(rho) = int_{|y| = rho} p(y)^2 dS_y`` by sphere quadrature."""
    rho = np.asarray(rho, dtype=float)
    pts = rho[..., None, None] * grid.nodes
    vals = np.asarray(p(pts), dtype=float)
    out = rho ** 2 * (vals ** 2 @ grid.weights)
    return out if np.ndim(out) else float(out)
