"""Finite-difference solver for ``-div(mu grad f) = P - Q`` with zero Dirichlet data.

The operator acts on interior nodes only; boundary nodes are fixed at zero.
Face coefficients are harmonic means of the nodal ``mu`` values, which keeps
the discrete operator symmetric positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .densities import Density
from .grid import Grid, GridField, support_grid
from .ipm import DEFAULT_GRID, _require_pdf

__all__ = [
    "DivFormOperator",
    "ConvergenceError",
    "PdeSolution",
    "conjugate_gradient",
    "solve_critic_pde",
    "pde_residual",
    "stein_identity_check",
    "integration_by_parts_check",
    "mass_region",
]

CG_TOL = 1e-10


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    s = a + b
    return np.divide(2.0 * a * b, s, out=np.zeros_like(s), where=s > 0)


class DivFormOperator:
    """``(A f)_i = sum_faces mu_face (f_i - f_nb) / h^2`` on interior nodes."""

    def __init__(self, grid: Grid, mu_nodes: np.ndarray):
        mu_nodes = np.asarray(mu_nodes, dtype=np.float64)
        if mu_nodes.shape != grid.n:
            raise ValueError("mu must be sampled on the grid nodes")
        inner = mu_nodes[grid.interior()]
        if np.any(inner <= 0) or not np.all(np.isfinite(inner)):
            raise ValueError("mu must be positive and finite on interior nodes")
        self.grid = grid
        self.mu = mu_nodes
        # faces[k] sits between node j and j+1 along axis k
        self.faces = [
            _harmonic(np.take(mu_nodes, np.arange(n - 1), axis=k), np.take(mu_nodes, np.arange(1, n), axis=k))
            for k, n in enumerate(grid.n)
        ]
        self.inner_shape = tuple(n - 2 for n in grid.n)
        self.size = int(np.prod(self.inner_shape))
        self._diag = self._diagonal()

    def _face_slices(self, k: int):
        """Interior-transverse slices of the face array along axis k: (lower faces, upper faces)."""
        d = self.grid.dim
        lower = [slice(1, -1)] * d
        upper = [slice(1, -1)] * d
        lower[k] = slice(0, -1)
        upper[k] = slice(1, None)
        return tuple(lower), tuple(upper)

    def _diagonal(self) -> np.ndarray:
        diag = np.zeros(self.inner_shape)
        for k, h in enumerate(self.grid.h):
            lo, hi = self._face_slices(k)
            diag += (self.faces[k][lo] + self.faces[k][hi]) / h**2
        return diag

    @property
    def diagonal(self) -> np.ndarray:
        return self._diag.ravel()

    def pad(self, u_inner: np.ndarray) -> np.ndarray:
        full = np.zeros(self.grid.n)
        full[self.grid.interior()] = u_inner.reshape(self.inner_shape)
        return full

    def apply_full(self, full: np.ndarray) -> np.ndarray:
        """``-div(mu grad f)`` at interior nodes for a full-grid array (boundary values used as given)."""
        out = np.zeros(self.inner_shape)
        d = self.grid.dim
        for k, h in enumerate(self.grid.h):
            # flux across faces along axis k on interior-transverse lines
            sl = [slice(1, -1)] * d
            sl[k] = slice(None)
            line = full[tuple(sl)]
            flux = self.faces[k][tuple(sl)] * np.diff(line, axis=k)
            out -= (np.take(flux, np.arange(1, flux.shape[k]), axis=k)
                    - np.take(flux, np.arange(0, flux.shape[k] - 1), axis=k)) / h**2
        return out

    def matvec(self, u: np.ndarray) -> np.ndarray:
        return self.apply_full(self.pad(u)).ravel()

    def to_sparse(self) -> sp.csr_matrix:
        """Assembled matrix, for tests and small problems."""
        n = self.size
        idx = np.arange(n).reshape(self.inner_shape)
        rows, cols, vals = [idx.ravel()], [idx.ravel()], [self.diagonal]
        d = self.grid.dim
        for k, h in enumerate(self.grid.h):
            lo, _ = self._face_slices(k)
            # coupling between interior node j and j+1 along axis k via face j+1 of the padded grid
            inner_faces = self.faces[k][lo]
            coupling = np.take(inner_faces, np.arange(1, inner_faces.shape[k]), axis=k)
            a = np.take(idx, np.arange(0, self.inner_shape[k] - 1), axis=k).ravel()
            b = np.take(idx, np.arange(1, self.inner_shape[k]), axis=k).ravel()
            w = -coupling.ravel() / h**2
            rows += [a, b]
            cols += [b, a]
            vals += [w, w]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))

    def energy(self, full: np.ndarray) -> float:
        """``sum_faces mu_face |grad f|^2 h^d``: the quadratic form ``f^T A f h^d``."""
        cell = float(np.prod(self.grid.h))
        total = 0.0
        for k, h in enumerate(self.grid.h):
            grad = np.diff(full, axis=k) / h
            total += float(np.sum(self.faces[k] * grad**2)) * cell
        return total


def conjugate_gradient(matvec, b: np.ndarray, diag: np.ndarray, tol: float = CG_TOL,
                       maxiter: int | None = None) -> tuple[np.ndarray, int, float]:
    """Jacobi-preconditioned CG; stops when ``||r|| <= tol ||b||``."""
    n = b.size
    maxiter = 10 * n if maxiter is None else maxiter
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x, 0, 0.0
    inv = 1.0 / diag
    r = b.copy()
    z = inv * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        ap = matvec(p)
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= tol:
            return x, it, rel
        z = inv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError("conjugate gradient did not converge", rel, maxiter)


@dataclass
class PdeSolution:
    f_hat: GridField
    S: float
    iterations: int
    residual: float
    operator: DivFormOperator
    rhs: np.ndarray
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.f_hat
        yield self.S

    @property
    def f_star(self) -> GridField:
        """Normalized critic ``f_hat / S`` (zero field when P = Q)."""
        if self.S == 0:
            return GridField(self.f_hat.grid, np.zeros(self.f_hat.grid.n), meta=dict(self.f_hat.meta))
        return GridField(self.f_hat.grid, self.f_hat.values / self.S, meta=dict(self.f_hat.meta))


def _rhs(p: Density, q: Density, mu_nodes: np.ndarray, grid: Grid, x: np.ndarray,
         correct: bool) -> tuple[np.ndarray, float]:
    b = p.pdf(x) - q.pdf(x)
    shift = 0.0
    if correct:
        # make sum(b w) = 0 by removing a multiple of mu, the weight of the constraint
        w = grid.weights()[grid.interior()]
        inner_mu = mu_nodes[grid.interior()]
        shift = float(np.sum(b[grid.interior()] * w) / np.sum(inner_mu * w))
        b = b - shift * mu_nodes
    return b, shift


def solve_critic_pde(p: Density, q: Density, mu: Density, grid: Grid | int | None = None,
                     tol: float = CG_TOL, mean_correct: bool = True) -> PdeSolution:
    """Solve ``-div(mu grad f) = P - Q`` with ``f = 0`` on the box boundary.

    Returns the unnormalized ``f_hat`` and ``S = sqrt(E_mu ||grad f_hat||^2)``;
    ``f* = f_hat / S`` solves the equation with right side ``(P - Q) / S``.
    """
    if p.dim not in (1, 2) or q.dim != p.dim:
        raise NotImplementedError("the solver handles d = 1 or 2")
    _require_pdf(mu)
    if not isinstance(grid, Grid):
        grid = support_grid([p, q], DEFAULT_GRID if grid is None else grid)
    x = grid.points()
    mu_nodes = mu.pdf(x)
    op = DivFormOperator(grid, mu_nodes)
    b, shift = _rhs(p, q, mu_nodes, grid, x, mean_correct)
    rhs = b[grid.interior()].ravel()
    u, iters, rel = conjugate_gradient(op.matvec, rhs, op.diagonal, tol=tol)
    full = op.pad(u)
    energy = op.energy(full)
    s = float(np.sqrt(max(energy, 0.0)))
    meta = {"rhs_shift": shift, "energy": energy}
    return PdeSolution(GridField(grid, full, meta=dict(meta)), s, iters, rel, op, b, meta)


def pde_residual(f: GridField, p: Density, q: Density, mu: Density, S: float) -> float:
    """``max |(P - Q)/S + div(mu grad f)|`` over interior nodes, in the solver's stencil.

    The right side includes the solver's compatibility shift when `f` carries one.
    """
    grid = f.grid
    x = grid.points()
    mu_nodes = mu.pdf(x)
    op = DivFormOperator(grid, mu_nodes)
    b = p.pdf(x) - q.pdf(x) - f.meta.get("rhs_shift", 0.0) * mu_nodes
    if S == 0:
        return float(np.max(np.abs(op.apply_full(f.values))))
    res = b[grid.interior()] / S - op.apply_full(f.values)
    return float(np.max(np.abs(res)))


def mass_region(grid: Grid, density_values: np.ndarray, mass: float = 0.99) -> np.ndarray:
    """Boolean mask of the highest-density nodes that carry `mass` of the total."""
    w = density_values * grid.weights()
    order = np.argsort(density_values, axis=None)[::-1]
    cum = np.cumsum(w.ravel()[order])
    k = int(np.searchsorted(cum, mass * cum[-1])) + 1
    mask = np.zeros(grid.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(grid.n)


def stein_identity_check(f_star: GridField, p: Density, q: Density, mu: Density, S: float,
                         mass: float = 0.99) -> float:
    """Max deviation between ``T(mu) grad f*`` and ``(Q - P) / (2 S mu)`` over the mass region.

    ``T(mu) g = (<g, grad log mu> + div g) / 2`` with central differences for
    the derivatives and the analytic score of `mu`.
    """
    grid = f_star.grid
    x = grid.points()
    mu_nodes = mu.pdf(x)
    g = f_star.gradient().values
    div = np.zeros(grid.n)
    for k, h in enumerate(grid.h):
        div += np.gradient(g[..., k], h, axis=k, edge_order=2)
    lhs = 0.5 * (np.sum(g * mu.score(x), axis=-1) + div)
    if S == 0:
        rhs = np.zeros(grid.n)
    else:
        rhs = (q.pdf(x) - p.pdf(x)) / (2.0 * S * mu_nodes)
    region = mass_region(grid, mu_nodes, mass)
    inner = np.zeros(grid.n, dtype=bool)
    inner[grid.interior()] = True
    return float(np.max(np.abs(lhs - rhs)[region & inner]))


def integration_by_parts_check(f_hat: GridField, p: Density, q: Density, mu: Density) -> float:
    """``|int f (P - Q) - E_mu ||grad f||^2| / E_mu ||grad f||^2`` with independent quadratures."""
    grid = f_hat.grid
    x = grid.points()
    lhs = grid.integrate(f_hat.values * (p.pdf(x) - q.pdf(x)))
    g = f_hat.gradient().values
    energy = grid.integrate(np.sum(g * g, axis=-1) * mu.pdf(x))
    if energy == 0.0:
        return 0.0
    return abs(lhs - energy) / energy
