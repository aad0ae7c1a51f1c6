"""Fisher and Sobolev IPMs: closed forms, 1-D oracles and restricted critic classes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .densities import (
    Categorical,
    Density,
    Empirical,
    NoDensityError,
    dminus_cdf,
    weighted_conditional_cdf,
)
from .grid import Grid, GridField, support_grid

__all__ = [
    "IpmResult",
    "fisher_ipm",
    "cramer_1d",
    "wasserstein1_1d",
    "sobolev_ipm_cdf_form",
    "sobolev_ipm_conditional_form",
    "optimal_critic_gradient_field",
    "FeatureSet",
    "FourierFeatures",
    "GridFeatures",
    "LinearFeatures",
    "restricted_ipm",
    "RestrictedResult",
    "DEFAULT_GRID",
]

DEFAULT_GRID = 256
MAX_CONDITION = 1e12
_CHUNK = 8192


@dataclass
class IpmResult:
    value: float
    method: str
    resolution: int | tuple | None = None
    est_error: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if not self.value >= 0:
            raise ValueError(f"distance must be non-negative, got {self.value}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["resolution"], tuple):
            d["resolution"] = list(d["resolution"])
        return d


def _require_pdf(mu: Density) -> None:
    if not getattr(mu, "has_pdf", True):
        raise NoDensityError(f"dominant measure {mu.kind!r} has no closed-form pdf")


def _as_grid(grid, densities) -> Grid:
    if isinstance(grid, Grid):
        return grid
    return support_grid(densities, DEFAULT_GRID if grid is None else grid)


def _richardson(value_fn: Callable[[Grid], float], grid: Grid) -> tuple[float, float]:
    """Value at `grid` and the half-resolution Richardson error estimate (trapezoid order 2)."""
    fine = value_fn(grid)
    coarse = value_fn(grid.coarsen())
    return fine, abs(fine - coarse) / 3.0


# ---------------------------------------------------------------------------
# Fisher IPM
# ---------------------------------------------------------------------------


def _discrete_fisher(p: Categorical, q: Categorical, mu) -> IpmResult:
    atoms = np.union1d(p.atoms, q.atoms)
    pp, qq = p.pmf(atoms), q.pmf(atoms)
    if isinstance(mu, str):
        if mu != "counting":
            raise ValueError(f"unknown discrete measure {mu!r}")
        mm = np.ones_like(atoms)
    elif isinstance(mu, Categorical):
        mm = mu.pmf(atoms)
    else:
        mm = np.broadcast_to(np.asarray(mu, dtype=np.float64), atoms.shape)
    support = (pp > 0) | (qq > 0)
    if np.any(mm[support] <= 0):
        raise ValueError("mu must be positive wherever P or Q has mass")
    sq = float(np.sum((pp - qq)[support] ** 2 / mm[support]))
    return IpmResult(np.sqrt(sq), "fisher_closed", resolution=len(atoms), est_error=0.0,
                     meta={"squared": sq})


def fisher_ipm(p: Density, q: Density, mu, grid: Grid | int | None = None) -> IpmResult:
    """``sqrt(E_mu ((P - Q) / mu)^2)``; a sum over atoms for categorical P and Q.

    For point masses `mu` may be ``"counting"``, a Categorical or per-atom weights.
    """
    if isinstance(p, Categorical) and isinstance(q, Categorical):
        return _discrete_fisher(p, q, mu)
    _require_pdf(mu)
    grid = _as_grid(grid, [p, q])

    def value(g: Grid) -> float:
        x = g.points()
        pp, qq, mm = p.pdf(x), q.pdf(x), mu.pdf(x)
        diff = pp - qq
        if np.any((mm <= 0) & (diff != 0)):
            raise ValueError("mu vanishes where P and Q differ")
        integrand = np.divide(diff**2, mm, out=np.zeros_like(mm), where=mm > 0)
        return np.sqrt(g.integrate(integrand))

    v, err = _richardson(value, grid)
    return IpmResult(v, "fisher_closed", resolution=grid.n, est_error=err)


# ---------------------------------------------------------------------------
# 1-D oracles
# ---------------------------------------------------------------------------


def _step_atoms(d: Density) -> np.ndarray | None:
    if isinstance(d, Categorical):
        return d.atoms
    if isinstance(d, Empirical) and d.dim == 1:
        return np.unique(d.samples[:, 0])
    return None


def _cdf_gap_integral(p: Density, q: Density, power: int) -> tuple[float, float]:
    """``int |F_P - F_Q|^power dx`` over the real line, exact for step CDFs."""
    if p.dim != 1 or q.dim != 1:
        raise ValueError("1-D densities required")
    ap, aq = _step_atoms(p), _step_atoms(q)

    def gap(x):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))[:, None]
        return np.abs(p.cdf(x) - q.cdf(x)) ** power

    if ap is not None and aq is not None:
        knots = np.union1d(ap, aq)
        mids = 0.5 * (knots[:-1] + knots[1:])
        return float(np.sum(gap(mids) * np.diff(knots))), 0.0

    lo = min(p.quad_lower(0), q.quad_lower(0))
    hi = max(_quad_upper(p), _quad_upper(q))
    breaks = np.concatenate([a for a in (ap, aq) if a is not None] or [np.empty(0)])
    knots = np.unique(np.concatenate([[lo, hi], breaks[(breaks > lo) & (breaks < hi)]]))
    total, err = 0.0, 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        v, e = integrate.quad(lambda t: float(gap(t)[0]), a, b, epsabs=1e-13, epsrel=1e-12, limit=400)
        total += v
        err += e
    return total, err


def _quad_upper(d: Density) -> float:
    lo, hi = d.support_box()
    return float(hi[0] + (hi[0] - lo[0]))


def cramer_1d(p: Density, q: Density) -> IpmResult:
    """``int (F_P - F_Q)^2 dx``: the squared Sobolev IPM for ``mu := 1``."""
    v, err = _cdf_gap_integral(p, q, 2)
    return IpmResult(max(v, 0.0), "cramer1d", est_error=err)


def wasserstein1_1d(p: Density, q: Density) -> IpmResult:
    """``int |F_P - F_Q| dx``."""
    v, err = _cdf_gap_integral(p, q, 1)
    return IpmResult(max(v, 0.0), "wasserstein1d", est_error=err)


# ---------------------------------------------------------------------------
# Sobolev IPM closed forms
# ---------------------------------------------------------------------------


def _dminus_terms(p, q, g: Grid, route: str) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``D^{-i}F_P - D^{-i}F_Q`` over i (trailing axis) and the grid points."""
    x = g.points()
    fn = dminus_cdf if route == "cdf" else weighted_conditional_cdf
    diffs = [fn(p, i, x) - fn(q, i, x) for i in range(g.dim)]
    return np.stack(diffs, axis=-1), x


def _sobolev_form(p, q, mu, grid, route: str, method: str) -> IpmResult:
    if p.dim != q.dim:
        raise ValueError("P and Q must share a dimension")
    if p.dim not in (1, 2):
        raise NotImplementedError("closed forms are implemented for d <= 2")
    _require_pdf(mu)
    grid = _as_grid(grid, [p, q])
    d = p.dim

    def value(g: Grid) -> float:
        diff, x = _dminus_terms(p, q, g, route)
        mm = mu.pdf(x)
        sq = (diff**2).sum(axis=-1)
        if np.any((mm <= 0) & (sq > 0)):
            raise ValueError("mu vanishes where the CDF terms differ")
        integrand = np.divide(sq, mm, out=np.zeros_like(mm), where=mm > 0)
        return np.sqrt(g.integrate(integrand)) / d

    v, err = _richardson(value, grid)
    return IpmResult(v, method, resolution=grid.n, est_error=err,
                     meta={"box_lo": list(grid.lo), "box_hi": list(grid.hi)})


def sobolev_ipm_cdf_form(p: Density, q: Density, mu: Density, grid: Grid | int | None = None) -> IpmResult:
    """``(1/d) sqrt(int sum_i (D^{-i}F_P - D^{-i}F_Q)^2 / mu dx)`` on the support box."""
    return _sobolev_form(p, q, mu, grid, "cdf", "sobolev_cdf")


def sobolev_ipm_conditional_form(p: Density, q: Density, mu: Density,
                                 grid: Grid | int | None = None) -> IpmResult:
    """Same distance from marginal-weighted conditional CDFs."""
    return _sobolev_form(p, q, mu, grid, "conditional", "sobolev_conditional")


def optimal_critic_gradient_field(p: Density, q: Density, mu: Density,
                                  grid: Grid | int | None = None) -> GridField:
    """``(D^-F_Q - D^-F_P) / (mu d S)`` sampled on the grid.

    `S` is the cdf-form distance on the same grid, so the field has unit
    ``E_mu ||.||^2`` up to quadrature.  For P = Q the zero field is returned.
    """
    _require_pdf(mu)
    grid = _as_grid(grid, [p, q])
    d = p.dim
    diff, x = _dminus_terms(p, q, grid, "cdf")
    mm = mu.pdf(x)
    sq = (diff**2).sum(axis=-1)
    s = np.sqrt(grid.integrate(np.divide(sq, mm, out=np.zeros_like(mm), where=mm > 0))) / d
    if s == 0.0:
        return GridField(grid, np.zeros(grid.n + (d,)), meta={"S": 0.0})
    field_ = np.divide(-diff, (mm * d * s)[..., None], out=np.zeros_like(diff), where=(mm > 0)[..., None])
    return GridField(grid, field_, meta={"S": float(s)})


# ---------------------------------------------------------------------------
# restricted critic classes
# ---------------------------------------------------------------------------


class FeatureSet:
    """Finite family of functions phi_j; the span is the restricted critic class."""

    def __len__(self) -> int:
        raise NotImplementedError

    def values(self, x) -> np.ndarray:
        """Shape ``(..., J)``."""
        raise NotImplementedError

    def gradients(self, x) -> np.ndarray:
        """Shape ``(..., J, d)``."""
        raise NotImplementedError

    def block(self, x: np.ndarray, sl: slice, with_grad: bool):
        """Values (and gradients) on rows `sl` of the flattened grid points `x`."""
        xs = x[sl]
        return self.values(xs), (self.gradients(xs) if with_grad else None)


class FourierFeatures(FeatureSet):
    """``phi_j(x) = B(x) cos(<w_j, x> + b_j)`` with the box window ``B = prod sin(pi (x - lo) / L)``."""

    def __init__(self, omegas, phases, lo, hi):
        self.omegas = np.atleast_2d(np.asarray(omegas, dtype=np.float64))
        self.phases = np.asarray(phases, dtype=np.float64).ravel()
        self.lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
        if self.omegas.shape != (len(self.phases), len(self.lo)):
            raise ValueError("omegas must be (J, d) with one phase per feature")

    @classmethod
    def random(cls, n: int, grid: Grid, scale, rng: np.random.Generator) -> "FourierFeatures":
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (grid.dim,))
        om = rng.standard_normal((n, grid.dim)) * scale
        ph = rng.uniform(0.0, 2.0 * np.pi, n)
        return cls(om, ph, grid.lo, grid.hi)

    def subset(self, k: int) -> "FourierFeatures":
        return FourierFeatures(self.omegas[:k], self.phases[:k], self.lo, self.hi)

    def __len__(self):
        return len(self.phases)

    def _window(self, x):
        length = self.hi - self.lo
        arg = np.pi * (x - self.lo) / length
        s, c = np.sin(arg), np.cos(arg)
        win = np.prod(s, axis=-1)
        # d/dx_k B = (pi / L_k) cos(arg_k) prod_{l != k} sin(arg_l)
        dwin = np.empty_like(x)
        for k in range(x.shape[-1]):
            others = np.prod(np.delete(s, k, axis=-1), axis=-1) if x.shape[-1] > 1 else 1.0
            dwin[..., k] = np.pi / length[k] * c[..., k] * others
        return win, dwin

    def values(self, x):
        x = np.asarray(x, dtype=np.float64)
        win, _ = self._window(x)
        return win[..., None] * np.cos(x @ self.omegas.T + self.phases)

    def gradients(self, x):
        x = np.asarray(x, dtype=np.float64)
        win, dwin = self._window(x)
        arg = x @ self.omegas.T + self.phases
        cos, sin = np.cos(arg), np.sin(arg)
        return (cos[..., :, None] * dwin[..., None, :]
                - (win[..., None] * sin)[..., :, None] * self.omegas)


class LinearFeatures(FeatureSet):
    """Coordinates ``x_1 .. x_d``, plus the constant 1 when `intercept` is set.

    The constant has zero gradient, so with the Sobolev norm only the
    coordinate features give a non-singular Gram matrix.
    """

    def __init__(self, dim: int, intercept: bool = False):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim, self.intercept = int(dim), bool(intercept)

    def __len__(self):
        return self.dim + self.intercept

    def values(self, x):
        x = np.asarray(x, dtype=np.float64)
        if not self.intercept:
            return x.copy()
        return np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)

    def gradients(self, x):
        x = np.asarray(x, dtype=np.float64)
        g = np.broadcast_to(np.eye(len(self), self.dim), x.shape[:-1] + (len(self), self.dim))
        return g.copy()


class GridFeatures(FeatureSet):
    """Features given as scalar fields on the quadrature grid."""

    def __init__(self, fields: Sequence[GridField]):
        if not fields:
            raise ValueError("need at least one field")
        self.fields = list(fields)
        self.grid = self.fields[0].grid
        if any(f.grid != self.grid or f.is_vector for f in self.fields):
            raise ValueError("grid features must be scalar fields on one grid")
        d = self.grid.dim
        self._vals = np.stack([f.values.ravel() for f in self.fields], axis=-1)
        self._grads = np.stack([f.gradient().values.reshape(-1, d) for f in self.fields], axis=-2)

    def __len__(self):
        return len(self.fields)

    def values(self, x):
        raise TypeError("grid features are only defined on their own grid nodes")

    gradients = values

    def block(self, x, sl, with_grad):
        if x.shape != (self.grid.size, self.grid.dim):
            raise ValueError("grid features can only be evaluated on their own grid")
        return self._vals[sl], (self._grads[sl] if with_grad else None)


@dataclass
class RestrictedResult:
    result: IpmResult
    coef: np.ndarray
    gram: np.ndarray
    c: np.ndarray
    condition: float


def restricted_ipm(features: FeatureSet, p: Density, q: Density, mu: Density,
                   norm: str = "sobolev", grid: Grid | int | None = None) -> RestrictedResult:
    """Best critic in ``span(phi_j)`` under the Fisher or Sobolev unit constraint.

    Maximizes ``c^T a`` subject to ``a^T G a <= 1`` where
    ``c_j = E_P phi_j - E_Q phi_j``; the optimum is ``sqrt(c^T G^{-1} c)``.
    """
    if norm not in ("sobolev", "fisher"):
        raise ValueError(f"unknown norm {norm!r}")
    _require_pdf(mu)
    if isinstance(features, GridFeatures) and grid is None:
        grid = features.grid
    grid = _as_grid(grid, [p, q])
    x = grid.points().reshape(-1, grid.dim)
    wts = grid.weights().ravel()
    w_pq = (p.pdf(x) - q.pdf(x)) * wts
    w_mu = mu.pdf(x) * wts
    c = np.zeros(len(features))
    gram = np.zeros((len(features), len(features)))
    sobolev = norm == "sobolev"
    for sl in _chunks(len(x), _CHUNK):
        phi, g = features.block(x, sl, sobolev)
        c += w_pq[sl] @ phi
        if sobolev:
            for k in range(grid.dim):
                gk = np.ascontiguousarray(g[..., k])
                gram += (gk * w_mu[sl, None]).T @ gk
        else:
            gram += (phi * w_mu[sl, None]).T @ phi
    gram = 0.5 * (gram + gram.T)
    eig = np.linalg.eigvalsh(gram)
    cond = float(eig[-1] / eig[0]) if eig[0] > 0 else np.inf
    if not (eig[0] > 0 and cond <= MAX_CONDITION):
        raise np.linalg.LinAlgError(
            f"Gram matrix is singular or ill-conditioned (min eig {eig[0]:.3e}, cond {cond:.3e})"
        )
    chol = np.linalg.cholesky(gram)
    y = np.linalg.solve(chol, c)
    value = float(np.sqrt(y @ y))
    if value == 0.0:
        coef = np.zeros_like(c)
    else:
        coef = np.linalg.solve(chol.T, y) / value
    res = IpmResult(value, "restricted", resolution=grid.n, meta={"features": len(c), "norm": norm})
    return RestrictedResult(res, coef, gram, c, cond)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))
