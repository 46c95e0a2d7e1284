"""Real spherical harmonics, angular derivatives and the angular-control test.

Harmonics are indexed ``n = 1, 2, ...`` with nondecreasing degree, matching
the usual ``{phi_n}_{n >= 1}`` enumeration: ``n = l*l + (m + l) + 1`` for
degree ``l`` and order ``m = -l..l``.  Negative orders carry the ``sin(|m| phi)``
factor, nonnegative orders ``cos(m phi)``.

The basis is evaluated as regular solid harmonics (homogeneous harmonic
polynomials) through the Cartesian recurrences

    C[l+1, l+1] = (2l+1) (x C[l,l] - y S[l,l])
    S[l+1, l+1] = (2l+1) (y C[l,l] + x S[l,l])
    (l-m+1) C[l+1, m] = (2l+1) z C[l,m] - (l+m) r^2 C[l-1,m]

which avoid the pole singularities of the angular form and give gradients by
the product rule.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import UsageError
from .sphere_geometry import SphereGrid, as_points, sphere_grid

DEFAULT_MAX_DEGREE = 16
_PAIRS = ((1, 2), (1, 3), (2, 3))


class TruncationWarning(UserWarning):
    """Expansion basis misses part of the field's energy."""


def harmonic_index(degree: int, order: int) -> int:
    """1-based position of ``(degree, order)`` in the basis ordering."""
    if abs(order) > degree:
        raise UsageError(f"order {order} out of range for degree {degree}")
    return degree * degree + order + degree + 1


def harmonic_degree_order(n: int) -> Tuple[int, int]:
    if n < 1:
        raise UsageError("harmonic indices start at 1")
    l = math.isqrt(n - 1)
    return l, n - 1 - l * l - l


def _normalisation(l: int, m: int) -> float:
    am = abs(m)
    ratio = math.exp(math.lgamma(l - am + 1) - math.lgamma(l + am + 1))
    c = math.sqrt((2 * l + 1) / (4 * math.pi) * ratio)
    return c * math.sqrt(2.0) if m != 0 else c


def solid_harmonics(x, max_degree: int, gradient: bool = False):
    """Orthonormal real solid harmonics ``|x|^l Y_lm(x/|x|)`` up to ``max_degree``.

    Parameters
    ----------
    x : array_like, shape (..., 3)
    max_degree : int
    gradient : bool
        Also return the Cartesian gradients.

    Returns
    -------
    values : ndarray, shape (..., (max_degree+1)**2)
    grads : ndarray, shape (..., (max_degree+1)**2, 3), only if ``gradient``
    """
    x = as_points(x)
    shape = x.shape[:-1]
    X = x.reshape(-1, 3)
    px, py, pz = X[:, 0], X[:, 1], X[:, 2]
    r2 = np.sum(X * X, axis=1)
    M = len(X)
    D = max_degree
    nb = (D + 1) ** 2
    C = np.zeros((D + 1, D + 1, M))
    S = np.zeros((D + 1, D + 1, M))
    C[0, 0] = 1.0
    if gradient:
        gC = np.zeros((D + 1, D + 1, M, 3))
        gS = np.zeros((D + 1, D + 1, M, 3))
        ex, ey, ez = np.eye(3)
        gr2 = 2.0 * X
    for l in range(D):
        C[l + 1, l + 1] = (2 * l + 1) * (px * C[l, l] - py * S[l, l])
        S[l + 1, l + 1] = (2 * l + 1) * (py * C[l, l] + px * S[l, l])
        if gradient:
            gC[l + 1, l + 1] = (2 * l + 1) * (ex * C[l, l][:, None] + px[:, None] * gC[l, l]
                                              - ey * S[l, l][:, None] - py[:, None] * gS[l, l])
            gS[l + 1, l + 1] = (2 * l + 1) * (ey * C[l, l][:, None] + py[:, None] * gC[l, l]
                                              + ex * S[l, l][:, None] + px[:, None] * gS[l, l])
        for m in range(l + 1):
            for T, gT in ((C, gC if gradient else None), (S, gS if gradient else None)):
                prev = T[l - 1, m] if l >= 1 else 0.0
                T[l + 1, m] = ((2 * l + 1) * pz * T[l, m] - (l + m) * r2 * prev) / (l - m + 1)
                if gradient:
                    gprev = gT[l - 1, m] if l >= 1 else 0.0
                    prev_arr = T[l - 1, m] if l >= 1 else np.zeros(M)
                    gT[l + 1, m] = ((2 * l + 1) * (ez * T[l, m][:, None] + pz[:, None] * gT[l, m])
                                    - (l + m) * (gr2 * prev_arr[:, None] + r2[:, None] * gprev)
                                    ) / (l - m + 1)
    values = np.empty((M, nb))
    grads = np.empty((M, nb, 3)) if gradient else None
    for l in range(D + 1):
        for m in range(-l, l + 1):
            k = l * l + m + l
            c = _normalisation(l, m)
            src, gsrc = (S[l, -m], gS[l, -m] if gradient else None) if m < 0 else \
                (C[l, m], gC[l, m] if gradient else None)
            values[:, k] = c * src
            if gradient:
                grads[:, k] = c * gsrc
    values = values.reshape(shape + (nb,))
    if gradient:
        return values, grads.reshape(shape + (nb, 3))
    return values


@dataclass(frozen=True)
class HarmonicBasis:
    """Orthonormal real spherical harmonics of degree ``<= max_degree``."""

    max_degree: int = DEFAULT_MAX_DEGREE

    @property
    def size(self) -> int:
        return (self.max_degree + 1) ** 2

    @property
    def degrees(self) -> np.ndarray:
        return np.repeat(np.arange(self.max_degree + 1), 2 * np.arange(self.max_degree + 1) + 1)

    @property
    def entries(self) -> List[Tuple[int, int, int]]:
        """``(n, degree, order)`` triples in basis order."""
        return [(n, *harmonic_degree_order(n)) for n in range(1, self.size + 1)]

    def evaluate(self, omega) -> np.ndarray:
        """All basis functions at unit vectors ``omega``; shape (..., size)."""
        return solid_harmonics(omega, self.max_degree)

    def solid(self, x, gradient=False):
        return solid_harmonics(x, self.max_degree, gradient)


def solid_harmonic(n: int) -> Callable:
    """Single orthonormal solid harmonic ``phi_n`` as a callable ``(x, gradient)``."""
    l, _ = harmonic_degree_order(n)
    k = n - 1

    def phi(x, gradient=False):
        if gradient:
            v, g = solid_harmonics(x, l, gradient=True)
            return v[..., k], g[..., k, :]
        return solid_harmonics(x, l)[..., k]

    phi.degree = l
    phi.index = n
    return phi


# ---------------------------------------------------------------------------
# Angular derivatives
# ---------------------------------------------------------------------------

def _gradient_of(p, step=1e-5) -> Callable:
    if hasattr(p, "gradient"):
        return p.gradient

    def grad(x):
        x = as_points(x)
        g = np.empty(x.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = step
            g[..., k] = (np.asarray(p(x + e)) - np.asarray(p(x - e))) / (2.0 * step)
        return g

    return grad


def angular_derivative(p, i: int, j: int, step: float = 1e-5) -> Callable:
    """``Omega_ij p = x_i d_j p - x_j d_i p`` with axes numbered 1..3.

    Uses ``p.gradient`` when available, central differences of width ``step``
    otherwise.
    """
    if i == j:
        raise UsageError("angular derivative needs i != j")
    if not (1 <= i <= 3 and 1 <= j <= 3):
        raise UsageError("axis indices run from 1 to 3")
    grad = _gradient_of(p, step)
    i0, j0 = i - 1, j - 1

    def omega(x):
        x = as_points(x)
        g = grad(x)
        return x[..., i0] * g[..., j0] - x[..., j0] * g[..., i0]

    return omega


def tij_vectors(x) -> np.ndarray:
    """``T_ij = x_i e_j - x_j e_i`` for ``(i, j) = (1,2), (1,3), (2,3)``; shape (..., 3, 3)."""
    x = as_points(x)
    T = np.zeros(x.shape[:-1] + (3, 3))
    for k, (i, j) in enumerate(_PAIRS):
        T[..., k, j - 1] = x[..., i - 1]
        T[..., k, i - 1] = -x[..., j - 1]
    return T


@dataclass
class TijDecomposition:
    """Coefficients of ``|x|^2 v = sum (v.T_ij) T_ij + (v.x) x``."""

    tangential: np.ndarray   # (..., 3) for pairs (1,2), (1,3), (2,3)
    radial: np.ndarray
    residual: np.ndarray


def tij_decompose(x, v) -> TijDecomposition:
    x = as_points(x)
    v = as_points(v)
    T = tij_vectors(x)
    tang = np.einsum("...kc,...c->...k", T, v)
    rad = np.sum(v * x, axis=-1)
    recon = np.einsum("...k,...kc->...c", tang, T) + rad[..., None] * x
    res = np.linalg.norm(recon - np.sum(x * x, axis=-1)[..., None] * v, axis=-1)
    return TijDecomposition(tang, rad, res)


# ---------------------------------------------------------------------------
# Expansions on shells
# ---------------------------------------------------------------------------

@dataclass
class HarmonicProfile:
    """Radial coefficient functions ``p_n(rho)`` sampled on ``rho_grid``.

    ``coeffs[k, n-1]`` is ``p_n(rho_grid[k])``.
    """

    rho_grid: np.ndarray
    coeffs: np.ndarray
    degrees: np.ndarray
    residual_energy: Optional[np.ndarray] = field(default=None, repr=False)

    def reconstruct(self, omega) -> np.ndarray:
        """``sum_n p_n(rho) phi_n(omega)`` for every shell; shape (n_rho, ...)."""
        D = int(self.degrees.max()) if len(self.degrees) else 0
        Y = solid_harmonics(omega, D)[..., : self.coeffs.shape[1]]
        return np.einsum("kn,...n->k...", self.coeffs, Y)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rho", "n", "degree", "coeff"])
            for k, rho in enumerate(self.rho_grid):
                for n0, d in enumerate(self.degrees):
                    w.writerow([repr(float(rho)), n0 + 1, int(d), repr(float(self.coeffs[k, n0]))])

    @classmethod
    def from_csv(cls, path) -> "HarmonicProfile":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rho = sorted({float(r["rho"]) for r in rows})
        nmax = max(int(r["n"]) for r in rows)
        coeffs = np.zeros((len(rho), nmax))
        degrees = np.zeros(nmax, dtype=int)
        pos = {v: i for i, v in enumerate(rho)}
        for r in rows:
            n = int(r["n"])
            coeffs[pos[float(r["rho"])], n - 1] = float(r["coeff"])
            degrees[n - 1] = int(r["degree"])
        return cls(np.array(rho), coeffs, degrees)


def expand(p, basis: HarmonicBasis, rho_grid, grid: Optional[SphereGrid] = None,
           rel_tol: float = 1e-8) -> HarmonicProfile:
    """Project ``p(rho omega)`` onto ``basis`` on each shell of ``rho_grid``.

    Emits :class:`TruncationWarning` when the captured energy falls short of
    the shell energy ``int_S p^2`` by more than ``rel_tol`` (relative).
    """
    rho_grid = np.atleast_1d(np.asarray(rho_grid, dtype=float))
    if grid is None:
        D = basis.max_degree
        grid = sphere_grid(2 * D + 2, 4 * D + 4)
    Y = basis.evaluate(grid.nodes)                       # (K, nb)
    pts = rho_grid[:, None, None] * grid.nodes[None, :, :]
    vals = np.asarray(p(pts), dtype=float)               # (n_rho, K)
    coeffs = (vals * grid.weights[None, :]) @ Y
    total = vals ** 2 @ grid.weights
    captured = np.sum(coeffs ** 2, axis=1)
    resid = total - captured
    peak = max(float(total.max()), 1e-300)
    if np.any(resid > rel_tol * peak):
        warnings.warn(f"harmonic expansion truncated: residual energy up to {resid.max():.3e} "
                      f"(peak shell energy {peak:.3e})", TruncationWarning, stacklevel=2)
    return HarmonicProfile(rho_grid, coeffs, basis.degrees, resid)


@dataclass
class AngularConditionReport:
    """Outcome of :func:`angular_condition_constant`.

    ``ratios`` holds ``sum d(d+1) p_n^2 / sum p_n^2`` per shell, NaN where the
    shell was skipped for carrying negligible energy.
    """

    constant: float
    rho_grid: np.ndarray
    ratios: np.ndarray


def angular_condition_constant(profile: HarmonicProfile, skip_rel: float = 1e-14) -> AngularConditionReport:
    """Smallest ``C`` with ``sum d_n(d_n+1) p_n^2 <= C sum p_n^2`` on every shell."""
    c = np.asarray(profile.coeffs, dtype=float)
    if c.size == 0:
        raise UsageError("empty harmonic profile")
    d = np.asarray(profile.degrees, dtype=float)[: c.shape[1]]
    energy = np.sum(c * c, axis=1)
    weighted = (c * c) @ (d * (d + 1.0))
    peak = energy.max()
    keep = energy >= skip_rel * peak if peak > 0 else np.zeros_like(energy, dtype=bool)
    ratios = np.full(len(energy), np.nan)
    ratios[keep] = weighted[keep] / energy[keep]
    const = float(np.max(ratios[keep])) if np.any(keep) else 0.0
    return AngularConditionReport(const, np.asarray(profile.rho_grid), ratios)
