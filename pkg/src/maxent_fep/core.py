"""Grids, densities, regions and the information functionals built on them.

Every density lives on a uniform rectangular grid in one or two dimensions and
is integrated with an end-corrected trapezoid rule (Gregory weights: the plain
trapezoid rule with three corrected nodes at each end).  The rule keeps the
trapezoid's uniform interior weights, is exact for cubics and is fourth-order
accurate, which the moment-matching tolerances downstream need.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import (
    DegenerateRegionError,
    DimensionalityError,
    DomainError,
    InvariantViolationError,
    NumericInputError,
    SupportMismatchError,
)

NORMALIZATION_TOL = 1e-9
SUPPORT_TOL = 1e-12
ZERO_SUPPORT = 1e-300
_LOG_FLOOR = 1e-300

_GREGORY_END = np.array([3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0])


def gregory_weights(n: int, h: float) -> np.ndarray:
    """1D quadrature weights: trapezoid with Gregory end corrections."""
    if n < 6:
        raise DimensionalityError(f"end-corrected rule needs at least 6 points, got {n}")
    w = np.full(n, h, dtype=float)
    w[:3] = _GREGORY_END * h
    w[-3:] = _GREGORY_END[::-1] * h
    return w


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid with ``points[i]`` nodes on ``[lower[i], upper[i]]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in np.atleast_1d(self.lower))
        upper = tuple(float(v) for v in np.atleast_1d(self.upper))
        points = tuple(int(v) for v in np.atleast_1d(self.points))
        if not (len(lower) == len(upper) == len(points)) or len(lower) not in (1, 2):
            raise DimensionalityError("grid must be 1D or 2D with matching bounds and counts")
        if not all(np.isfinite(lower + upper)):
            raise NumericInputError("grid bounds must be finite")
        if any(u <= l for l, u in zip(lower, upper)):
            raise InvariantViolationError("grid upper bounds must exceed lower bounds")
        if any(n < 8 for n in points):
            raise InvariantViolationError("grid needs at least 8 points per axis")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "points", points)

    @classmethod
    def line(cls, lower: float, upper: float, points: int) -> "Grid":
        return cls((lower,), (upper,), (points,))

    @classmethod
    def square(cls, lower: float, upper: float, points: int) -> "Grid":
        return cls((lower, lower), (upper, upper), (points, points))

    @property
    def dims(self) -> int:
        return len(self.points)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((u - l) / (n - 1) for l, u, n in zip(self.lower, self.upper, self.points))

    @property
    def volume(self) -> float:
        return float(np.prod([u - l for l, u in zip(self.lower, self.upper)]))

    @functools.cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(_frozen(np.linspace(l, u, n)) for l, u, n in zip(self.lower, self.upper, self.points))

    @functools.cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, dims)``."""
        return _frozen(np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1))

    @functools.cached_property
    def axis_weights(self) -> tuple[np.ndarray, ...]:
        return tuple(_frozen(gregory_weights(n, h)) for n, h in zip(self.points, self.spacing))

    @functools.cached_property
    def weights(self) -> np.ndarray:
        w = self.axis_weights[0]
        for wa in self.axis_weights[1:]:
            w = np.multiply.outer(w, wa)
        return _frozen(w)

    @functools.cached_property
    def cell_volumes(self) -> np.ndarray:
        """Volume of each node's nearest-node (Voronoi) cell inside the domain."""
        vols = []
        for n, h in zip(self.points, self.spacing):
            v = np.full(n, h)
            v[0] = v[-1] = h / 2
            vols.append(v)
        out = vols[0]
        for v in vols[1:]:
            out = np.multiply.outer(out, v)
        return _frozen(out)

    def evaluate(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Evaluate a vectorised ``f(points[..., dims])`` on every node."""
        vals = np.asarray(f(self.coords), dtype=float)
        return np.broadcast_to(vals, self.shape).copy()

    def integrate(self, f) -> float:
        f = np.asarray(f, dtype=float)
        if f.shape != self.shape:
            raise DimensionalityError(f"field shape {f.shape} does not match grid {self.shape}")
        if not np.all(np.isfinite(f)):
            raise NumericInputError("field contains NaN or Inf")
        return float(np.sum(self.weights * f))

    def gradient(self, f) -> np.ndarray:
        """Second-order finite-difference gradient, shape ``(*shape, dims)``."""
        f = np.asarray(f, dtype=float)
        g = np.gradient(f, *self.spacing, edge_order=2)
        if self.dims == 1:
            g = [g]
        return np.stack(g, axis=-1)

    def _as_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if self.dims == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
            pts = pts[..., None]
        if pts.shape[-1] != self.dims:
            raise DimensionalityError(f"points have dimension {pts.shape[-1]}, grid has {self.dims}")
        return pts

    def contains(self, points, atol: float = 1e-12) -> np.ndarray:
        pts = self._as_points(points)
        lo = np.asarray(self.lower) - atol
        hi = np.asarray(self.upper) + atol
        return np.all((pts >= lo) & (pts <= hi), axis=-1)

    def nearest_index(self, points) -> tuple[np.ndarray, ...]:
        pts = self._as_points(points)
        idx = []
        for k in range(self.dims):
            i = np.rint((pts[..., k] - self.lower[k]) / self.spacing[k]).astype(np.int64)
            idx.append(np.clip(i, 0, self.points[k] - 1))
        return tuple(idx)

    def subgrid(self, axis: int) -> "Grid":
        return Grid((self.lower[axis],), (self.upper[axis],), (self.points[axis],))


def integrate(f, grid: Grid) -> float:
    """Quadrature of a scalar field over the grid (linear in ``f``)."""
    return grid.integrate(f)


@dataclass(frozen=True, eq=False)
class Density:
    """Normalised, nonnegative probability density sampled on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise DimensionalityError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericInputError("density contains NaN or Inf")
        if np.any(v < 0):
            raise InvariantViolationError(f"density has negative values (min {v.min():.3e})")
        mass = float(np.sum(self.grid.weights * v))
        if abs(mass - 1.0) > NORMALIZATION_TOL:
            raise InvariantViolationError(f"density integrates to {mass!r}, not 1")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_unnormalized(cls, grid: Grid, values) -> "Density":
        v = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericInputError("values contain NaN or Inf")
        if np.any(v < 0):
            raise InvariantViolationError("values must be nonnegative")
        z = float(np.sum(grid.weights * v))
        if not z > 0:
            raise DegenerateRegionError("values carry no mass")
        return cls(grid, v / z)

    @classmethod
    def from_function(cls, grid: Grid, f: Callable[[np.ndarray], np.ndarray]) -> "Density":
        return cls.from_unnormalized(grid, grid.evaluate(f))

    @classmethod
    def uniform(cls, grid: Grid) -> "Density":
        return cls.from_unnormalized(grid, np.ones(grid.shape))

    @classmethod
    def gaussian(cls, grid: Grid, mean, cov) -> "Density":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        prec = np.linalg.inv(cov)
        d = grid.coords - mean
        quad = np.einsum("...i,ij,...j->...", d, prec, d)
        return cls.from_unnormalized(grid, np.exp(-0.5 * quad))

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def log_values(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.values)

    def expectation(self, f) -> float:
        """Mean of a field (array on the grid, or vectorised callable)."""
        vals = self.grid.evaluate(f) if callable(f) else np.asarray(f, dtype=float)
        return self.grid.integrate(vals * self.values)

    def mean(self) -> np.ndarray:
        c = self.grid.coords
        return np.array([self.grid.integrate(c[..., k] * self.values) for k in range(self.grid.dims)])

    def covariance(self) -> np.ndarray:
        m = self.mean()
        d = self.grid.coords - m
        k = self.grid.dims
        return np.array(
            [[self.grid.integrate(d[..., i] * d[..., j] * self.values) for j in range(k)] for i in range(k)]
        )

    def marginal(self, axis: int) -> "Density":
        if self.grid.dims != 2:
            raise DimensionalityError("marginals are defined for 2D densities")
        other = 1 - axis
        w = self.grid.axis_weights[other]
        vals = np.tensordot(self.values, w, axes=([other], [0]))
        return Density.from_unnormalized(self.grid.subgrid(axis), vals)

    @functools.cached_property
    def _log_interp(self) -> RegularGridInterpolator:
        logv = np.log(np.maximum(self.values, _LOG_FLOOR))
        return RegularGridInterpolator(self.grid.axes, logv, method="linear", bounds_error=False, fill_value=None)

    def log_pdf_at(self, points) -> np.ndarray:
        """Log-density at arbitrary points by multilinear interpolation of ``ln p``."""
        pts = self.grid._as_points(points)
        if not np.all(self.grid.contains(pts)):
            raise DomainError("points outside the grid")
        return self._log_interp(pts.reshape(-1, self.grid.dims)).reshape(pts.shape[:-1])

    def bin_masses(self) -> np.ndarray:
        """Probability of each node's nearest-node cell, summing to 1."""
        m = self.values * self.grid.cell_volumes
        return m / m.sum()


@dataclass(frozen=True, eq=False)
class Region:
    """A subset of grid nodes; a continuous point belongs if its nearest node does."""

    grid: Grid
    mask: np.ndarray
    allow_empty: bool = field(default=False)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != self.grid.shape:
            raise DimensionalityError(f"mask shape {m.shape} does not match grid {self.grid.shape}")
        if not m.any() and not self.allow_empty:
            raise InvariantViolationError("region mask is empty; use Region.empty for the empty region")
        object.__setattr__(self, "mask", _frozen(m))

    @classmethod
    def box(cls, grid: Grid, lower, upper) -> "Region":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        c = grid.coords
        eps = 1e-9 * np.asarray(grid.spacing)
        mask = np.all((c >= lo - eps) & (c <= hi + eps), axis=-1)
        return cls(grid, mask)

    @classmethod
    def from_predicate(cls, grid: Grid, pred: Callable[[np.ndarray], np.ndarray]) -> "Region":
        return cls(grid, np.broadcast_to(np.asarray(pred(grid.coords), dtype=bool), grid.shape))

    @classmethod
    def full(cls, grid: Grid) -> "Region":
        return cls(grid, np.ones(grid.shape, dtype=bool))

    @classmethod
    def empty(cls, grid: Grid) -> "Region":
        return cls(grid, np.zeros(grid.shape, dtype=bool), allow_empty=True)

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())

    def complement(self) -> "Region":
        return Region(self.grid, ~self.mask, allow_empty=True)

    def contains(self, points) -> np.ndarray:
        return self.mask[self.grid.nearest_index(points)]


def _check_same_grid(p: Density, q: Density):
    if p.grid != q.grid:
        raise DimensionalityError("densities live on different grids")


def _check_normalized(p: Density):
    mass = p.mass
    if abs(mass - 1.0) > NORMALIZATION_TOL:
        raise InvariantViolationError(f"density integrates to {mass!r}, not 1")


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(y[pos])
    return out


def entropy(p: Density) -> float:
    """Differential Shannon entropy in nats, with ``0 ln 0 = 0``."""
    _check_normalized(p)
    return -p.grid.integrate(_xlogy(p.values, p.values))


def kl_divergence(p: Density, q: Density) -> float:
    """Relative entropy ``KL(p || q)`` in nats."""
    _check_same_grid(p, q)
    _check_normalized(p)
    _check_normalized(q)
    bad = (p.values > SUPPORT_TOL) & (q.values < ZERO_SUPPORT)
    if bad.any():
        raise SupportMismatchError(
            f"p has mass at {int(bad.sum())} nodes where q vanishes (supports differ)"
        )
    use = (p.values > 0) & (q.values > 0)
    integrand = np.zeros_like(p.values)
    integrand[use] = p.values[use] * (np.log(p.values[use]) - np.log(q.values[use]))
    return p.grid.integrate(integrand)


def fisher_information(p: Density, reference: Density) -> float:
    """Relative Fisher information ``∫ |∇ ln(p / reference)|² p``."""
    _check_same_grid(p, reference)
    interior = tuple(slice(1, -1) for _ in range(p.grid.dims))
    if np.any(reference.values[interior] <= 0):
        raise SupportMismatchError("reference density vanishes on the grid interior")
    log_ratio = np.log(np.maximum(p.values, _LOG_FLOOR)) - np.log(np.maximum(reference.values, _LOG_FLOOR))
    g = p.grid.gradient(log_ratio)
    integrand = np.where(p.values > 0, np.sum(g * g, axis=-1) * p.values, 0.0)
    return p.grid.integrate(integrand)


def mutual_information(joint: Density) -> float:
    """``S[x] + S[y] - S[x, y]`` for a 2D joint density."""
    if joint.grid.dims != 2:
        raise DimensionalityError("mutual information needs a 2D joint density")
    return entropy(joint.marginal(0)) + entropy(joint.marginal(1)) - entropy(joint)


def region_mass(p: Density, a: Region) -> float:
    if p.grid != a.grid:
        raise DimensionalityError("density and region live on different grids")
    return p.grid.integrate(np.where(a.mask, p.values, 0.0))


def restrict(p: Density, a: Region) -> Density:
    """Condition ``p`` on ``a``: zero outside, renormalised inside."""
    mass = region_mass(p, a)
    if not mass > 0:
        raise DegenerateRegionError("region carries zero probability mass")
    return Density(p.grid, np.where(a.mask, p.values, 0.0) / mass)


def total_variation(p: Density, q: Density) -> float:
    _check_same_grid(p, q)
    return 0.5 * p.grid.integrate(np.abs(p.values - q.values))


def as_points(grid: Grid, points: Sequence) -> np.ndarray:
    """Coerce a point or list of points into a ``(n, dims)`` array."""
    pts = grid._as_points(points)
    return pts.reshape(-1, grid.dims)
