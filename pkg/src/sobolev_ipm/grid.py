"""Regular 1-D/2-D grids and fields sampled on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

__all__ = ["Grid", "GridField", "support_grid"]


@dataclass(frozen=True)
class Grid:
    """Tensor-product grid with `n` nodes per axis including both endpoints."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.n)):
            raise ValueError("lo, hi and n must have equal length")
        if len(self.n) not in (1, 2):
            raise ValueError("grids are 1-D or 2-D")
        for a, b, k in zip(self.lo, self.hi, self.n):
            if not b > a:
                raise ValueError("each axis needs hi > lo")
            if k < 3:
                raise ValueError("each axis needs at least 3 nodes")

    @classmethod
    def from_box(cls, lo, hi, n: int | Sequence[int]) -> "Grid":
        lo = tuple(float(v) for v in np.atleast_1d(lo))
        hi = tuple(float(v) for v in np.atleast_1d(hi))
        n = (int(n),) * len(lo) if np.isscalar(n) else tuple(int(k) for k in n)
        return cls(lo, hi, n)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, k) for a, b, k in zip(self.lo, self.hi, self.n)]

    @property
    def h(self) -> np.ndarray:
        return np.array([(b - a) / (k - 1) for a, b, k in zip(self.lo, self.hi, self.n)])

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*n, d)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def integrate(self, values) -> float:
        """Trapezoid rule over the whole box."""
        v = np.asarray(values, dtype=np.float64)
        if v.shape[: self.dim] != self.n:
            raise ValueError(f"values shape {v.shape} does not match grid {self.n}")
        for ax, h in zip(self.axes, self.h):
            v = np.trapezoid(v, dx=h, axis=0)
        return float(v)

    def weights(self) -> np.ndarray:
        """Trapezoid weights per node, shape ``n``."""
        out = np.ones(())
        for k, h in zip(self.n, self.h):
            w = np.full(k, h)
            w[[0, -1]] = 0.5 * h
            out = np.multiply.outer(out, w)
        return out

    def interior(self) -> tuple[slice, ...]:
        return (slice(1, -1),) * self.dim

    def coarsen(self) -> "Grid":
        """Half-resolution grid sharing every other node."""
        return Grid(self.lo, self.hi, tuple((k - 1) // 2 + 1 for k in self.n))

    def refine(self) -> "Grid":
        return Grid(self.lo, self.hi, tuple(2 * (k - 1) + 1 for k in self.n))

    def volume(self) -> float:
        return float(np.prod(np.subtract(self.hi, self.lo)))


@dataclass
class GridField:
    """Scalar (shape ``n``) or vector (shape ``(*n, d)``) values on a grid."""

    grid: Grid
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape[: self.grid.dim] != self.grid.n:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.n}")
        if self.values.ndim not in (self.grid.dim, self.grid.dim + 1):
            raise ValueError("values must be scalar or vector per node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    @property
    def axes(self) -> list[np.ndarray]:
        return self.grid.axes

    @property
    def spacing(self) -> np.ndarray:
        return self.grid.h

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == self.grid.dim + 1

    def gradient(self) -> "GridField":
        """Second-order central differences (one-sided at the edges)."""
        if self.is_vector:
            raise ValueError("gradient of a vector field is not supported")
        g = np.gradient(self.values, *self.grid.h, edge_order=2)
        if self.grid.dim == 1:
            g = [g]
        return GridField(self.grid, np.stack(g, axis=-1))

    def interpolator(self):
        """Linear interpolant; points outside the box get the nearest boundary value."""
        interp = RegularGridInterpolator(tuple(self.grid.axes), self.values, method="linear",
                                         bounds_error=False, fill_value=None)
        lo, hi = np.array(self.grid.lo), np.array(self.grid.hi)

        def call(x):
            x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
            return interp(x)

        return call

    def __call__(self, x) -> np.ndarray:
        return self.interpolator()(x)


def support_grid(densities, n: int | Sequence[int]) -> Grid:
    """Grid on the union of the densities' support boxes."""
    boxes = [d.support_box() for d in densities]
    lo = np.min([b[0] for b in boxes], axis=0)
    hi = np.max([b[1] for b in boxes], axis=0)
    return Grid.from_box(lo, hi, n)
