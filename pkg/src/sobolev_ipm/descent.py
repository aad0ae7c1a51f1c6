"""Sobolev descent: particles drift along the gradient of the per-step optimal critic.

Each step smooths the particle cloud with a Gaussian kernel, solves for the
Sobolev critic between that smoothed density and the target with
``mu = (q_t + P) / 2``, and moves every particle by ``dt`` times the critic
gradient at its position.  The drift is the unnormalized gradient
``grad f_hat = S grad f*``: it vanishes when the cloud reaches the target,
whereas the unit-norm field ``grad f*`` does not.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .densities import Density, mu_average
from .grid import Grid, GridField, support_grid
from .ipm import FourierFeatures, restricted_ipm
from .pde import solve_critic_pde

__all__ = [
    "KernelDensity",
    "ParticleCloud",
    "DescentResult",
    "silverman_bandwidth",
    "sobolev_descent",
    "descent_energy",
]

log = logging.getLogger(__name__)

CLAMP_WARN_FRACTION = 0.01
# fixed Fourier features stay well conditioned as the cloud contracts at these counts
DEFAULT_FEATURES = {1: 8, 2: 36}
_CHUNK = 4096


def silverman_bandwidth(x: np.ndarray) -> np.ndarray:
    """Per-coordinate ``h = N^{-1/(d+4)} sigma_hat``."""
    n, d = x.shape
    sd = x.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    sd = np.where(sd > 0, sd, 1.0)
    return sd * n ** (-1.0 / (d + 4))


class KernelDensity(Density):
    """Gaussian-kernel smoothing of a particle cloud (diagonal bandwidth)."""

    kind = "kernel"

    def __init__(self, particles, bandwidth=None):
        particles = np.asarray(particles, dtype=np.float64)
        if particles.ndim != 2 or len(particles) == 0:
            raise ValueError("particles must be a non-empty (N, d) array")
        self.particles = particles
        self.dim = particles.shape[1]
        bw = silverman_bandwidth(particles) if bandwidth is None else bandwidth
        self.bandwidth = np.broadcast_to(np.asarray(bw, dtype=np.float64), (self.dim,)).copy()
        if np.any(self.bandwidth <= 0):
            raise ValueError("bandwidth must be positive")
        self._norm = 1.0 / (len(particles) * np.prod(np.sqrt(2 * np.pi) * self.bandwidth))

    def pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, self.dim)
        out = np.empty(len(flat))
        scaled_p = self.particles / self.bandwidth
        for start in range(0, len(flat), _CHUNK):
            block = flat[start : start + _CHUNK] / self.bandwidth
            d2 = np.zeros((len(block), len(scaled_p)))
            for k in range(self.dim):
                d2 += (block[:, k, None] - scaled_p[None, :, k]) ** 2
            out[start : start + _CHUNK] = np.exp(-0.5 * d2).sum(axis=1)
        return (out * self._norm).reshape(x.shape[:-1])

    def cdf(self, x):
        raise NotImplementedError("kernel densities are used through their pdf only")

    def sample(self, n, rng):
        idx = rng.integers(0, len(self.particles), size=n)
        return self.particles[idx] + self.bandwidth * rng.standard_normal((n, self.dim))


@dataclass
class ParticleCloud:
    positions: np.ndarray
    step: int
    time: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.positions)):
            raise FloatingPointError(f"non-finite particle positions at step {self.step}")


@dataclass
class DescentResult:
    trajectory: list[ParticleCloud]
    energies: list[float]
    clamped: list[int]
    grid: Grid
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> ParticleCloud:
        return self.trajectory[-1]


def _field_pde(target: Density, q: KernelDensity, grid: Grid):
    sol = solve_critic_pde(target, q, mu_average(q, target), grid)
    return sol.f_hat.gradient(), sol.S


def _field_restricted(target: Density, q: KernelDensity, grid: Grid, features: FourierFeatures):
    res = restricted_ipm(features, target, q, mu_average(q, target), norm="sobolev", grid=grid)
    x = grid.points()
    # grad f_hat = S grad f*, with f* = sum_j a_j phi_j
    grad = np.einsum("...jd,j->...d", features.gradients(x), res.coef * res.result.value)
    return GridField(grid, grad), res.result.value


def descent_energy(cloud, target: Density, grid: Grid, bandwidth=None) -> float:
    """PDE Sobolev distance between the smoothed cloud and `target` under the average measure."""
    pos = cloud.positions if isinstance(cloud, ParticleCloud) else np.asarray(cloud, dtype=np.float64)
    q = KernelDensity(pos, bandwidth)
    return solve_critic_pde(target, q, mu_average(q, target), grid).S


def sobolev_descent(
    target: Density,
    init: Density,
    n_particles: int,
    steps: int,
    dt: float,
    rng: np.random.Generator,
    critic_source: str = "pde",
    grid: Grid | int | None = None,
    features: FourierFeatures | None = None,
    n_features: int | None = None,
    keep_every: int = 1,
) -> DescentResult:
    """Explicit Euler transport of `n_particles` samples of `init` toward `target`.

    ``energies[t]`` is the Sobolev distance between the smoothed cloud at
    step t and the target; ``trajectory`` keeps every `keep_every`-th cloud
    plus the final one.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if critic_source not in ("pde", "restricted"):
        raise ValueError(f"unknown critic source {critic_source!r}")
    if target.dim not in (1, 2):
        raise NotImplementedError("descent is implemented for d = 1 or 2")
    if not isinstance(grid, Grid):
        default = 2049 if target.dim == 1 else 129
        grid = support_grid([target, init], default if grid is None else grid)
    lo, hi = np.array(grid.lo), np.array(grid.hi)
    if critic_source == "restricted" and features is None:
        if not n_features:
            n_features = DEFAULT_FEATURES[target.dim]
        # the frequency band must resolve n_features modes on the box or the Gram matrix is singular
        scale = np.pi * n_features ** (1.0 / grid.dim) / (hi - lo)
        features = FourierFeatures.random(n_features, grid, scale, rng)

    x = init.sample(n_particles, rng)
    x = np.clip(x, lo, hi)
    trajectory = [ParticleCloud(x.copy(), 0, 0.0)]
    energies, clamped = [], []
    for t in range(steps + 1):
        q = KernelDensity(x)
        if critic_source == "pde":
            grad, s = _field_pde(target, q, grid)
        else:
            grad, s = _field_restricted(target, q, grid, features)
        energies.append(float(s))
        if t == steps:
            break
        x = x + dt * grad(x)
        out = np.any((x < lo) | (x > hi), axis=1)
        n_out = int(out.sum())
        clamped.append(n_out)
        if n_out > CLAMP_WARN_FRACTION * n_particles:
            warnings.warn(f"step {t + 1}: {n_out} of {n_particles} particles clamped to the box",
                          RuntimeWarning, stacklevel=2)
        x = np.clip(x, lo, hi)
        if (t + 1) % keep_every == 0 or t + 1 == steps:
            trajectory.append(ParticleCloud(x.copy(), t + 1, (t + 1) * dt))
        log.debug("step %d energy %.6g", t + 1, s)
    return DescentResult(trajectory, energies, clamped, grid,
                         meta={"critic_source": critic_source, "dt": dt, "n_particles": n_particles})
