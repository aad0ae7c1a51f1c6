"""Analytic and empirical distributions plus dominant-measure constructors.

Points are always passed with a trailing coordinate axis: a batch of 1-D
points has shape ``(n, 1)`` and a 2-D grid has shape ``(nx, ny, 2)``.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import integrate
from scipy.special import ndtr

__all__ = [
    "NoDensityError",
    "Density",
    "Gaussian",
    "Mixture",
    "Categorical",
    "Empirical",
    "AverageMeasure",
    "UniformMeasure",
    "GPInterpolation",
    "mu_average",
    "mu_gp_sample",
    "mu_smoothed",
    "dminus_cdf",
    "dminus_cdf_adaptive",
    "weighted_conditional_cdf",
    "SUPPORT_SIGMAS",
]

SUPPORT_SIGMAS = 6.0
# lower limit of the CDF quadratures, in marginal standard deviations
_QUAD_SIGMAS = 12.0
_LOG_2PI = np.log(2.0 * np.pi)

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)
_GL_PANELS = 24


class NoDensityError(ValueError):
    """Raised when a closed-form pdf is required but the measure has none."""


def _points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != dim:
        raise ValueError(f"points must have a trailing axis of length {dim}, got shape {x.shape}")
    return x


class Density(ABC):
    kind: str
    dim: int

    @abstractmethod
    def pdf(self, x) -> np.ndarray: ...

    @abstractmethod
    def cdf(self, x) -> np.ndarray: ...

    @abstractmethod
    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...

    def score(self, x) -> np.ndarray:
        raise NotImplementedError(f"{self.kind} has no analytic score")

    def support_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def quad_lower(self, i: int) -> float:
        """Lower limit used in place of -inf for CDF quadratures along axis i."""
        raise NotImplementedError

    @property
    def has_pdf(self) -> bool:
        return True


class Gaussian(Density):
    """Multivariate normal; CDFs are supported for d <= 2."""

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        self.mean = mean
        self.cov = cov
        self.dim = d
        self.kind = {1: "gaussian1d", 2: "gaussian2d"}.get(d, "gaussian")
        self._chol = chol
        self._prec = np.linalg.inv(cov)
        self._logdet = 2.0 * np.log(np.diag(chol)).sum()

    def __repr__(self) -> str:
        return f"Gaussian(mean={self.mean.tolist()}, cov={self.cov.tolist()})"

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def logpdf(self, x) -> np.ndarray:
        x = _points(x, self.dim)
        r = x - self.mean
        maha = np.einsum("...i,ij,...j->...", r, self._prec, r)
        return -0.5 * (maha + self.dim * _LOG_2PI + self._logdet)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def score(self, x) -> np.ndarray:
        x = _points(x, self.dim)
        return -(x - self.mean) @ self._prec

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T

    def support_box(self):
        s = SUPPORT_SIGMAS * self.std
        return self.mean - s, self.mean + s

    def quad_lower(self, i: int) -> float:
        return float(self.mean[i] - _QUAD_SIGMAS * self.std[i])

    def marginal(self, keep: Sequence[int]) -> "Gaussian":
        keep = list(keep)
        return Gaussian(self.mean[keep], self.cov[np.ix_(keep, keep)])

    def conditional(self, i: int, x) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std of ``X_i | X^{-i} = x^{-i}`` (x carries all d coords)."""
        x = _points(x, self.dim)
        rest = [j for j in range(self.dim) if j != i]
        s_rr = self.cov[np.ix_(rest, rest)]
        s_ir = self.cov[i, rest]
        coef = np.linalg.solve(s_rr, s_ir)
        cmean = self.mean[i] + (x[..., rest] - self.mean[rest]) @ coef
        cvar = self.cov[i, i] - s_ir @ coef
        return cmean, np.full(cmean.shape, np.sqrt(cvar))

    def cdf(self, x) -> np.ndarray:
        x = _points(x, self.dim)
        if self.dim == 1:
            return ndtr((x[..., 0] - self.mean[0]) / self.std[0])
        if self.dim != 2:
            raise NotImplementedError("CDFs are implemented for d <= 2")
        # F(x1, x2) = int_{-inf}^{x1} phi_1(u) Phi((x2 - m_{2|1}(u)) / s_{2|1}) du
        s1 = self.std[0]
        b = self.cov[0, 1] / self.cov[0, 0]
        s21 = np.sqrt(self.cov[1, 1] - b * self.cov[0, 1])

        def integrand(u, x2):
            phi = np.exp(-0.5 * ((u - self.mean[0]) / s1) ** 2) / (np.sqrt(2 * np.pi) * s1)
            cm = self.mean[1] + b * (u - self.mean[0])
            return phi * ndtr((x2 - cm) / s21)

        return _gl_cumulative(integrand, self.quad_lower(0), x[..., 0], x[..., 1],
                              upper_cap=self.mean[0] + _QUAD_SIGMAS * s1)

    def cdf_adaptive(self, x) -> float:
        """Single-point 2-D CDF by adaptive quadrature (scipy.integrate.quad)."""
        x = np.asarray(x, dtype=np.float64)
        if self.dim == 1:
            return float(self.cdf(x.reshape(1, 1))[0])
        s1 = self.std[0]
        b = self.cov[0, 1] / self.cov[0, 0]
        s21 = np.sqrt(self.cov[1, 1] - b * self.cov[0, 1])

        def f(u):
            phi = np.exp(-0.5 * ((u - self.mean[0]) / s1) ** 2) / (np.sqrt(2 * np.pi) * s1)
            return phi * ndtr((x[1] - self.mean[1] - b * (u - self.mean[0])) / s21)

        val, _ = integrate.quad(f, -np.inf, x[0], epsabs=1e-13, epsrel=1e-12, limit=200)
        return float(val)

    def weighted_conditional_cdf(self, i: int, x) -> np.ndarray:
        x = _points(x, self.dim)
        if self.dim == 1:
            return self.cdf(x)
        rest = [j for j in range(self.dim) if j != i]
        marg = self.marginal(rest).pdf(x[..., rest])
        cmean, cstd = self.conditional(i, x)
        return marg * ndtr((x[..., i] - cmean) / cstd)


class Mixture(Density):
    """Finite mixture of Gaussians."""

    def __init__(self, components: Sequence[Gaussian], weights=None):
        if not components:
            raise ValueError("mixture needs at least one component")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise ValueError("components must share a dimension")
        w = np.full(len(components), 1.0 / len(components)) if weights is None else np.asarray(weights, float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12 or w.shape != (len(components),):
            raise ValueError("weights must be a probability vector matching the components")
        self.components = list(components)
        self.weights = w
        self.dim = dims.pop()
        self.kind = "mixture"

    def __repr__(self) -> str:
        return f"Mixture({self.components!r}, weights={self.weights.tolist()})"

    def pdf(self, x):
        return sum(w * c.pdf(x) for w, c in zip(self.weights, self.components))

    def cdf(self, x):
        return sum(w * c.cdf(x) for w, c in zip(self.weights, self.components))

    def score(self, x):
        x = _points(x, self.dim)
        logs = np.stack([np.log(w) + c.logpdf(x) for w, c in zip(self.weights, self.components)])
        resp = np.exp(logs - logs.max(axis=0))
        resp /= resp.sum(axis=0)
        return sum(r[..., None] * c.score(x) for r, c in zip(resp, self.components))

    def sample(self, n, rng):
        counts = rng.multinomial(n, self.weights)
        parts = [c.sample(k, rng) for c, k in zip(self.components, counts)]
        out = np.concatenate(parts, axis=0)
        return out[rng.permutation(n)]

    def support_box(self):
        boxes = [c.support_box() for c in self.components]
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    def quad_lower(self, i):
        return min(c.quad_lower(i) for c in self.components)

    def weighted_conditional_cdf(self, i, x):
        return sum(w * c.weighted_conditional_cdf(i, x) for w, c in zip(self.weights, self.components))


class Categorical(Density):
    """Point masses at 1-D atoms."""

    def __init__(self, atoms, probs):
        atoms = np.asarray(atoms, dtype=np.float64).ravel()
        probs = np.asarray(probs, dtype=np.float64).ravel()
        if atoms.shape != probs.shape:
            raise ValueError("atoms and probs must have equal length")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probs must lie on the simplex")
        order = np.argsort(atoms, kind="stable")
        self.atoms = atoms[order]
        self.probs = probs[order]
        self.dim = 1
        self.kind = "categorical"

    def __repr__(self) -> str:
        return f"Categorical(atoms={self.atoms.tolist()}, probs={self.probs.tolist()})"

    @property
    def has_pdf(self) -> bool:
        return False

    def pdf(self, x):
        raise NoDensityError("point masses have no Lebesgue density; use pmf")

    def pmf(self, atoms) -> np.ndarray:
        atoms = np.asarray(atoms, dtype=np.float64)
        out = np.zeros(atoms.shape)
        for a, p in zip(self.atoms, self.probs):
            out[atoms == a] += p
        return out

    def cdf(self, x):
        x = _points(x, 1)[..., 0]
        cum = np.concatenate([[0.0], np.cumsum(self.probs)])
        return cum[np.searchsorted(self.atoms, x, side="right")]

    def sample(self, n, rng):
        idx = rng.choice(len(self.atoms), size=n, p=self.probs)
        return self.atoms[idx][:, None]

    def support_box(self):
        return np.array([self.atoms[0] - 1.0]), np.array([self.atoms[-1] + 1.0])

    def quad_lower(self, i):
        return float(self.atoms[0] - 1.0)


class Empirical(Density):
    """Sample-based distribution: sampling and the empirical CDF only."""

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] == 0:
            raise ValueError("empirical distribution needs samples")
        self.samples = samples
        self.dim = samples.shape[1]
        self.kind = "empirical"

    @property
    def has_pdf(self) -> bool:
        return False

    def pdf(self, x):
        raise NoDensityError("empirical distributions expose no density")

    def cdf(self, x):
        x = _points(x, self.dim)
        flat = x.reshape(-1, self.dim)
        if self.dim == 1:
            srt = np.sort(self.samples[:, 0])
            out = np.searchsorted(srt, flat[:, 0], side="right") / len(srt)
        else:
            out = np.array([(self.samples <= p).all(axis=1).mean() for p in flat])
        return out.reshape(x.shape[:-1])

    def sample(self, n, rng):
        return self.samples[rng.integers(0, len(self.samples), size=n)]

    def support_box(self):
        lo, hi = self.samples.min(axis=0), self.samples.max(axis=0)
        pad = np.maximum(hi - lo, 1.0) * 0.1
        return lo - pad, hi + pad

    def quad_lower(self, i):
        return float(self.support_box()[0][i])

    @cached_property
    def mean(self):
        return self.samples.mean(axis=0)


# ---------------------------------------------------------------------------
# dominant measures
# ---------------------------------------------------------------------------


class AverageMeasure(Density):
    """``mu = (P + Q) / 2``."""

    def __init__(self, p: Density, q: Density):
        if p.dim != q.dim:
            raise ValueError("P and Q must share a dimension")
        self.p, self.q = p, q
        self.dim = p.dim
        self.kind = "average"

    def pdf(self, x):
        return 0.5 * (self.p.pdf(x) + self.q.pdf(x))

    def cdf(self, x):
        return 0.5 * (self.p.cdf(x) + self.q.cdf(x))

    def score(self, x):
        # grad log((P+Q)/2) = (P s_P + Q s_Q) / (P + Q)
        pp, qq = self.p.pdf(x), self.q.pdf(x)
        tot = pp + qq
        wp = np.divide(pp, tot, out=np.full_like(tot, 0.5), where=tot > 0)
        return wp[..., None] * self.p.score(x) + (1.0 - wp)[..., None] * self.q.score(x)

    def sample(self, n, rng):
        pick = rng.random(n) < 0.5
        xp = self.p.sample(n, rng)
        xq = self.q.sample(n, rng)
        return np.where(pick[:, None], xp, xq)

    def support_box(self):
        a, b = self.p.support_box(), self.q.support_box()
        return np.minimum(a[0], b[0]), np.maximum(a[1], b[1])

    def quad_lower(self, i):
        return min(self.p.quad_lower(i), self.q.quad_lower(i))


class UniformMeasure(Density):
    """Constant weight ``mu(x) = level`` (``level=1`` is the paper's ``mu := 1``)."""

    def __init__(self, dim: int = 1, level: float = 1.0):
        if level <= 0:
            raise ValueError("level must be positive")
        self.dim = dim
        self.level = float(level)
        self.kind = "uniform"

    def pdf(self, x):
        x = _points(x, self.dim)
        return np.full(x.shape[:-1], self.level)

    def score(self, x):
        return np.zeros_like(_points(x, self.dim))

    def cdf(self, x):
        raise NotImplementedError("uniform weight has no CDF")

    def sample(self, n, rng):
        raise NotImplementedError("uniform weight is not sampleable")


class GPInterpolation(Density):
    """Law of ``u x + (1-u) y`` with ``x ~ P``, ``y ~ Q``, ``u ~ U[0,1]``; sampling only."""

    def __init__(self, p: Density, q: Density):
        self.p, self.q = p, q
        self.dim = p.dim
        self.kind = "gp_interpolation"

    @property
    def has_pdf(self) -> bool:
        return False

    def pdf(self, x):
        raise NoDensityError("the interpolation measure has no closed-form density")

    def cdf(self, x):
        raise NoDensityError("the interpolation measure has no closed-form CDF")

    def sample(self, n, rng):
        x = self.p.sample(n, rng)
        y = self.q.sample(n, rng)
        return mu_gp_sample(x, y, rng)


def mu_average(p: Density, q: Density) -> AverageMeasure:
    return AverageMeasure(p, q)


def mu_gp_sample(x, y, rng: np.random.Generator | None = None, u=None) -> np.ndarray:
    """Random interpolates ``u x + (1-u) y``; pass `u` to fix the mixing weights."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if u is None:
        if rng is None:
            raise ValueError("need rng or u")
        u = rng.random(x.shape[:1] + (1,) * (x.ndim - 1))
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < x.ndim:
        u = u.reshape(u.shape + (1,) * (x.ndim - u.ndim))
    return u * x + (1.0 - u) * y


def mu_smoothed(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """``x + xi`` with ``xi ~ N(0, sigma^2 I)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


# ---------------------------------------------------------------------------
# leave-one-out CDF derivatives
# ---------------------------------------------------------------------------


def _gl_cumulative(integrand, lower: float, upper, *args, upper_cap: float | None = None):
    """Vectorized composite Gauss-Legendre of ``int_lower^upper integrand(u, *args) du``."""
    upper = np.asarray(upper, dtype=np.float64)
    hi = np.minimum(upper, upper_cap) if upper_cap is not None else upper
    hi = np.maximum(hi, lower)
    width = (hi - lower) / _GL_PANELS
    out = np.zeros(upper.shape)
    half = 0.5 * width
    for k in range(_GL_PANELS):
        mid = lower + (k + 0.5) * width
        for t, w in zip(_GL_NODES, _GL_WEIGHTS):
            out += w * half * integrand(mid + t * half, *args)
    return out


def dminus_cdf(d: Density, i: int, x) -> np.ndarray:
    """``D^{-i}F(x) = int_{-inf}^{x_i} pdf(x_1..u..x_d) du`` by quadrature of the joint pdf.

    For d = 1 this is the CDF itself.
    """
    x = _points(x, d.dim)
    if not 0 <= i < d.dim:
        raise ValueError(f"coordinate index {i} out of range")
    if d.dim == 1:
        return d.cdf(x)
    if d.dim != 2:
        raise NotImplementedError("leave-one-out CDF derivatives are implemented for d <= 2")

    def integrand(u, pts):
        q = pts.copy()
        q[..., i] = u
        return d.pdf(q)

    lower = d.quad_lower(i)
    upper_cap = -lower + 2 * _mean_i(d, i)
    return _gl_cumulative(integrand, lower, x[..., i], x, upper_cap=upper_cap)


def _mean_i(d: Density, i: int) -> float:
    lo, hi = d.support_box()
    return 0.5 * float(lo[i] + hi[i])


def dminus_cdf_adaptive(d: Density, i: int, x) -> float:
    """Single-point ``D^{-i}F`` by adaptive quadrature (scipy.integrate.quad)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if d.dim == 1:
        return float(d.cdf(x.reshape(1, 1))[0])

    def f(u):
        q = x.copy()
        q[i] = u
        return float(d.pdf(q))

    val, _ = integrate.quad(f, -np.inf, x[i], epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(val)


def weighted_conditional_cdf(d: Density, i: int, x) -> np.ndarray:
    """``P_{X^{-i}}(x^{-i}) F_{X_i | X^{-i}}(x_i)`` from analytic marginals/conditionals."""
    fn = getattr(d, "weighted_conditional_cdf", None)
    if fn is None:
        raise NotImplementedError(f"{d.kind} has no analytic conditionals")
    if not 0 <= i < d.dim:
        raise ValueError(f"coordinate index {i} out of range")
    return fn(i, x)
