"""Constraint geometry: the gauge ``g = exp(J)``, its connection ``grad J`` and the flows it induces.

Velocities split into a vertical part along ``grad J`` (mode seeking) and a
horizontal part along the level sets of ``J`` (equiprobable exploration).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import Density, Grid, Region, region_mass
from .dynamics import DriftSpec, Trajectory, simulate_batch
from .errors import (
    DegenerateContourError,
    DimensionalityError,
    DomainError,
    InvariantViolationError,
    OptimizationError,
    RegionShapeError,
    StabilityError,
)
from .maxent import ConstraintSet, gibbs_density, indicator_complement

STATIONARY_TOL = 1e-10

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)


@dataclass(frozen=True, eq=False)
class GaugeStructure:
    constraints: ConstraintSet
    grid: Grid

    def __post_init__(self):
        if self.constraints.has_barrier:
            raise InvariantViolationError("the gauge is built from smooth constraints; add barriers to the drift instead")

    @cached_property
    def connection(self) -> np.ndarray:
        """``grad J`` at every grid node, shape ``(*grid.shape, dims)``."""
        c = self.constraints.gradient(self.grid.coords)
        c.setflags(write=False)
        return c

    @cached_property
    def field(self) -> Density:
        return gibbs_density(self.constraints, self.grid)

    def potential(self, x) -> np.ndarray:
        return self.constraints.potential(x)

    def gradient(self, x) -> np.ndarray:
        return self.constraints.gradient(np.asarray(x, dtype=float))

    def _in_grid(self, pts, what: str):
        if not np.all(self.grid.contains(pts)):
            raise DomainError(f"{what} leaves the grid")


def parallel_transport(gs: GaugeStructure, path, p_start: float) -> np.ndarray:
    """Integrate ``d ln p = -grad J . dx`` along a polyline, returning ``p`` at each vertex.

    Each segment uses 5-point Gauss-Legendre quadrature of the one-form, so
    the result depends only on ``grad J``, never on values of ``J``.
    """
    if not p_start > 0:
        raise InvariantViolationError("p_start must be positive")
    pts = gs.grid._as_points(path).reshape(-1, gs.grid.dims)
    gs._in_grid(pts, "path")
    a, b = pts[:-1], pts[1:]
    d = b - a
    s = 0.5 * (_GL_NODES + 1.0)
    nodes = a[:, None, :] + s[None, :, None] * d[:, None, :]
    g = gs.gradient(nodes)
    dj = 0.5 * np.einsum("q,sqk,sk->s", _GL_WEIGHTS, g, d)
    log_p = np.concatenate([[0.0], -np.cumsum(dj)])
    return p_start * np.exp(log_p)


@dataclass(frozen=True, eq=False)
class GaugeSplit:
    point: np.ndarray
    velocity: np.ndarray
    vertical: np.ndarray
    horizontal: np.ndarray
    residual: float
    degenerate: bool = False


def split_velocity(gs: GaugeStructure, point, velocity) -> GaugeSplit:
    """Orthogonal projection of ``velocity`` onto ``span(grad J)`` and its complement.

    At a stationary point the split is undefined; everything is reported as
    horizontal and ``degenerate`` is set.
    """
    x = np.asarray(point, dtype=float).reshape(gs.grid.dims)
    v = np.asarray(velocity, dtype=float).reshape(gs.grid.dims)
    g = gs.gradient(x)
    norm = np.linalg.norm(g)
    if norm <= STATIONARY_TOL:
        return GaugeSplit(x, v, np.zeros_like(v), v.copy(), 0.0, degenerate=True)
    n = g / norm
    vertical = (v @ n) * n
    horizontal = v - vertical
    return GaugeSplit(x, v, vertical, horizontal, float(abs(horizontal @ g)))


def vertical_flow(gs: GaugeStructure, x0, step: float, tol: float = 1e-8, max_steps: int = 1_000_000) -> Trajectory:
    """Gradient descent on ``J`` until ``|grad J| < tol``; raises if ``J`` ever increases."""
    if not step > 0:
        raise InvariantViolationError("step must be positive")
    x = gs.grid._as_points(x0).reshape(gs.grid.dims).copy()
    gs._in_grid(x, "start point")
    path = [x.copy()]
    g = gs.gradient(x)
    for _ in range(max_steps):
        if np.linalg.norm(g) < tol:
            return Trajectory(np.array(path), step)
        nxt = x - step * g
        gs._in_grid(nxt, "vertical flow")
        if gs.constraints.delta_potential(nxt, x) > 0:
            raise StabilityError(f"J increased along the flow; step {step:g} is too large")
        x = nxt
        path.append(x.copy())
        g = gs.gradient(x)
    raise OptimizationError(f"vertical flow did not reach |grad J| < {tol:g} in {max_steps} steps", [])


def _tangent(gs: GaugeStructure, x: np.ndarray) -> np.ndarray:
    g = gs.gradient(x)
    norm = np.hypot(g[0], g[1])
    if norm <= STATIONARY_TOL:
        raise DegenerateContourError(f"grad J vanishes near {x.tolist()}; the level set is degenerate there")
    return np.array([-g[1], g[0]]) / norm


def horizontal_flow(gs: GaugeStructure, x0, arc_steps: int, step: float) -> Trajectory:
    """Unit-speed motion along the level set of ``J`` through ``x0`` (2D only).

    RK4 on the unit tangent, then one Newton step along ``grad J`` back to
    ``J = J(x0)``.  The orbit runs counter-clockwise around minima.
    """
    if gs.grid.dims != 2:
        raise DimensionalityError("horizontal flow needs a two-dimensional state space")
    x = gs.grid._as_points(x0).reshape(2).copy()
    gs._in_grid(x, "start point")
    ref = x.copy()
    path = [x.copy()]
    for _ in range(int(arc_steps)):
        k1 = _tangent(gs, x)
        k2 = _tangent(gs, x + 0.5 * step * k1)
        k3 = _tangent(gs, x + 0.5 * step * k2)
        k4 = _tangent(gs, x + step * k3)
        x = x + step * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        g = gs.gradient(x)
        gg = g @ g
        if gg <= STATIONARY_TOL**2:
            raise DegenerateContourError("grad J vanished during the contour projection")
        x = x - float(gs.constraints.delta_potential(x, ref)) * g / gg
        gs._in_grid(x, "horizontal flow")
        path.append(x.copy())
    return Trajectory(np.array(path), step)


def is_sublevel_set(gs: GaugeStructure, a: Region) -> bool:
    """True iff the nodes of ``a`` are exactly ``{J <= max_A J}`` on the grid."""
    if a.grid != gs.grid or a.is_empty:
        return False
    j = gs.constraints.potential_field(gs.grid)
    level = np.max(j[a.mask])
    return bool(np.array_equal(a.mask, j <= level))


def lariat_drift(gs: GaugeStructure, a: Region, kappa: float = 50.0, diffusion: float = 1.0, solenoidal=None) -> DriftSpec:
    """Drift for ``J + kappa * 1[outside A]``: the constraint strengthened on the complement."""
    pot = gs.constraints + ConstraintSet.of(indicator_complement(a, kappa))
    return DriftSpec(pot, gs.grid, solenoidal=solenoidal, diffusion=diffusion)


def trapping_check(
    gs: GaugeStructure,
    a: Region,
    drift: DriftSpec,
    n_traj: int = 100,
    horizon: float = 50.0,
    dt: float = 0.01,
    seed: int = 0,
) -> dict:
    """Occupation, first-exit and re-entry statistics of trajectories started inside ``a``.

    Recurrence is asymptotic; the re-entry count here is a finite-horizon
    statistic and nothing more.
    """
    if not is_sublevel_set(gs, a):
        raise RegionShapeError("the attractor region must be a sublevel set {J <= j0} of the gauge potential")
    if drift.grid != gs.grid:
        raise DimensionalityError("drift and gauge live on different grids")
    smooth = drift.potential.smooth_potential_field(gs.grid)
    j = gs.constraints.potential_field(gs.grid)
    if np.max(np.abs(smooth - j)) > 1e-10 * max(1.0, np.max(np.abs(j))):
        raise InvariantViolationError("the drift's smooth potential differs from the gauge constraints")
    rng = np.random.default_rng(seed)
    inside = gs.grid.coords[a.mask]
    x0s = inside[rng.integers(0, len(inside), size=int(n_traj))]
    steps = int(round(horizon / dt))
    states = simulate_batch(drift, x0s, steps, dt, int(rng.integers(2**63 - 1)))
    in_a = a.contains(states)  # (steps+1, chains)
    out = ~in_a
    exited = out.any(axis=0)
    first = np.argmax(out, axis=0)
    reentries = int(np.sum(out[:-1] & in_a[1:]))
    return {
        "outside_fraction": float(out.mean()),
        "mean_first_exit": float(np.mean(first[exited]) * dt) if exited.any() else None,
        "n_exited": int(exited.sum()),
        "n_reentries": reentries,
        "gibbs_mass_A": region_mass(gs.field, a),
        "n_traj": int(n_traj),
        "horizon": float(steps * dt),
    }


def hausdorff_distance(a, b) -> float:
    """Symmetric Hausdorff distance between two point sets of shape ``(n, dims)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))
