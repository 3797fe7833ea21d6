"""Constrained maximum entropy on a grid, solved through its convex dual.

The max-ent density for moment constraints ``E[J_k] = C_k`` is the Gibbs form
``exp(-sum_k lam_k J_k) / Z``; the multipliers minimise the dual
``ln Z(lam) + sum_k lam_k C_k``, whose gradient is ``C - E[J]`` and whose
Hessian is ``Cov[J]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Density, Grid, Region, kl_divergence
from .errors import (
    DegenerateConstraintError,
    DimensionalityError,
    FeasibilityError,
    NumericInputError,
    ScalingError,
    SupportMismatchError,
)

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
FEASIBILITY_MARGIN = 1e-9
KAPPA_CAP = 700.0
_FD_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class Constraint:
    """A constraint function ``J`` with optional target ``C = E[J]``.

    ``func`` maps points of shape ``(..., dims)`` to values of shape ``(...)``.
    ``barrier`` marks piecewise-constant constraints: their gradient is zero
    almost everywhere, and samplers treat them by accept/reject.
    """

    func: Callable[[np.ndarray], np.ndarray]
    target: Optional[float] = None
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = "J"
    barrier: bool = False
    support_limited: bool = False

    def field(self, grid: Grid) -> np.ndarray:
        vals = grid.evaluate(self.func)
        if not np.all(np.isfinite(vals)):
            raise NumericInputError(f"constraint {self.name!r} is not finite on the grid")
        return vals

    def value(self, x) -> np.ndarray:
        return np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.barrier:
            return np.zeros_like(x)
        if self.grad is not None:
            return np.broadcast_to(np.asarray(self.grad(x), dtype=float), x.shape).copy()
        out = np.empty_like(x)
        for k in range(x.shape[-1]):
            e = np.zeros(x.shape[-1])
            e[k] = _FD_STEP
            out[..., k] = (self.value(x + e) - self.value(x - e)) / (2 * _FD_STEP)
        return out


def linear(coef=1.0, target: Optional[float] = None, name: str = "linear") -> Constraint:
    """``J(x) = coef . x``."""
    c = np.atleast_1d(np.asarray(coef, dtype=float))
    return Constraint(
        func=lambda x: np.asarray(x)[..., : c.size] @ c,
        grad=lambda x: np.broadcast_to(c, np.shape(x)),
        target=target,
        name=name,
    )


def quadratic(center=0.0, scale=1.0, target: Optional[float] = None, name: str = "quadratic") -> Constraint:
    """``J(x) = sum_i (x_i - m_i)^2 / s_i``."""
    m = np.atleast_1d(np.asarray(center, dtype=float))
    s = np.atleast_1d(np.asarray(scale, dtype=float))
    if np.any(s <= 0):
        raise ValueError("quadratic scale must be positive")
    return Constraint(
        func=lambda x: np.sum((np.asarray(x) - m) ** 2 / s, axis=-1),
        grad=lambda x: 2.0 * (np.asarray(x) - m) / s,
        target=target,
        name=name,
    )


def quadratic_form(precision, center=None, target: Optional[float] = None, name: str = "quadratic-form") -> Constraint:
    """``J(x) = (x - m)^T P (x - m) / 2`` for a symmetric matrix ``P``."""
    p = np.atleast_2d(np.asarray(precision, dtype=float))
    p = 0.5 * (p + p.T)
    m = np.zeros(p.shape[0]) if center is None else np.atleast_1d(np.asarray(center, dtype=float))

    def func(x):
        d = np.asarray(x) - m
        return 0.5 * np.einsum("...i,ij,...j->...", d, p, d)

    return Constraint(func=func, grad=lambda x: (np.asarray(x) - m) @ p, target=target, name=name)


def indicator_complement(region: Region, kappa: float = 50.0, target: Optional[float] = None) -> Constraint:
    """``J = kappa`` outside ``region`` and 0 inside (kappa capped at 700)."""
    limited = kappa > KAPPA_CAP
    if limited:
        log.warning("indicator-complement kappa %.3g capped at %.0f; distances become support-limited", kappa, KAPPA_CAP)
        kappa = KAPPA_CAP
    k = float(kappa)
    return Constraint(
        func=lambda x: k * (~region.contains(x)).astype(float),
        target=target,
        name="indicator-complement",
        barrier=True,
        support_limited=limited,
    )


def constant(c: float) -> Constraint:
    return Constraint(func=lambda x: np.full(np.shape(x)[:-1], float(c)), grad=lambda x: np.zeros(np.shape(x)), name="constant")


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Constraints with one multiplier each; the potential is ``sum lam_k J_k + offset``."""

    constraints: tuple = ()
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    offset: float = 0.0

    def __post_init__(self):
        cons = tuple(self.constraints)
        lam = np.atleast_1d(np.asarray(self.multipliers, dtype=float)).copy()
        if lam.size == 0 and cons:
            lam = np.zeros(len(cons))
        if lam.shape != (len(cons),):
            raise DimensionalityError(f"{len(cons)} constraints but {lam.size} multipliers")
        if not np.all(np.isfinite(lam)):
            raise NumericInputError("multipliers must be finite")
        lam.setflags(write=False)
        object.__setattr__(self, "constraints", cons)
        object.__setattr__(self, "multipliers", lam)

    @classmethod
    def of(cls, *constraints: Constraint, multipliers: Sequence[float] | None = None) -> "ConstraintSet":
        lam = np.ones(len(constraints)) if multipliers is None else multipliers
        return cls(tuple(constraints), lam)

    def __len__(self):
        return len(self.constraints)

    def with_multipliers(self, multipliers) -> "ConstraintSet":
        return replace(self, multipliers=np.asarray(multipliers, dtype=float))

    def shifted(self, c: float) -> "ConstraintSet":
        """Same gauge up to an additive constant in the potential."""
        return replace(self, offset=self.offset + float(c))

    def scaled(self, factor: float) -> "ConstraintSet":
        return replace(self, multipliers=self.multipliers * float(factor), offset=self.offset * float(factor))

    def __add__(self, other: "ConstraintSet") -> "ConstraintSet":
        return ConstraintSet(
            self.constraints + other.constraints,
            np.concatenate([self.multipliers, other.multipliers]),
            self.offset + other.offset,
        )

    @property
    def targets(self) -> np.ndarray:
        return np.array([np.nan if c.target is None else c.target for c in self.constraints])

    @property
    def has_barrier(self) -> bool:
        return any(c.barrier for c in self.constraints)

    @property
    def support_limited(self) -> bool:
        return any(c.support_limited for c in self.constraints)

    def features(self, grid: Grid) -> np.ndarray:
        """Stacked constraint fields, shape ``(k, *grid.shape)``."""
        if not self.constraints:
            return np.zeros((0,) + grid.shape)
        return np.stack([c.field(grid) for c in self.constraints])

    def _field(self, grid: Grid, which) -> np.ndarray:
        v = np.zeros(grid.shape)
        for c, lam in zip(self.constraints, self.multipliers):
            if which(c) and lam != 0.0:
                v = v + lam * c.field(grid)
        return v

    def potential_field(self, grid: Grid) -> np.ndarray:
        """``sum lam_k J_k`` on the grid (offset excluded: it never affects a density)."""
        return self._field(grid, lambda c: True)

    def smooth_potential_field(self, grid: Grid) -> np.ndarray:
        return self._field(grid, lambda c: not c.barrier)

    def barrier_field(self, grid: Grid) -> np.ndarray:
        return self._field(grid, lambda c: c.barrier)

    def potential(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.zeros(x.shape[:-1])
        for c, lam in zip(self.constraints, self.multipliers):
            v = v + lam * c.value(x)
        return v + self.offset

    def delta_potential(self, x, ref) -> np.ndarray:
        """``V(x) - V(ref)`` computed constraint-wise, so the offset cancels exactly."""
        x = np.asarray(x, dtype=float)
        ref = np.asarray(ref, dtype=float)
        d = np.zeros(np.broadcast_shapes(x.shape, ref.shape)[:-1])
        for c, lam in zip(self.constraints, self.multipliers):
            d = d + lam * (c.value(x) - c.value(ref))
        return d

    def gradient(self, x) -> np.ndarray:
        """Gradient of the smooth part of the potential at points ``(..., dims)``."""
        x = np.asarray(x, dtype=float)
        g = np.zeros_like(x)
        for c, lam in zip(self.constraints, self.multipliers):
            if not c.barrier and lam != 0.0:
                g = g + lam * c.gradient(x)
        return g


@dataclass(frozen=True, eq=False)
class MaxEntSolution:
    density: Density
    multipliers: np.ndarray
    moment_residuals: np.ndarray
    iterations: int
    converged: bool
    constraints: ConstraintSet

    @property
    def max_residual(self) -> float:
        return float(np.max(np.abs(self.moment_residuals))) if self.moment_residuals.size else 0.0


def _log_partition(v: np.ndarray, weights: np.ndarray) -> tuple[float, np.ndarray]:
    """``ln ∫ exp(-v)`` and the normalised Gibbs values, with ``v`` recentred at its minimum."""
    if not np.all(np.isfinite(v)):
        raise ScalingError("potential is not finite on the grid")
    vmin = float(v.min())
    u = np.exp(-(v - vmin))
    z = float(np.sum(weights * u))
    if not (np.isfinite(z) and z > 0):
        raise ScalingError(f"partition function {z!r} out of range; recentre the constraints")
    return np.log(z) - vmin, u / z


def gibbs_density(constraints: ConstraintSet, grid: Grid) -> Density:
    """``exp(-sum lam_k J_k) / Z`` on the grid; no constraints gives the uniform density."""
    _, values = _log_partition(constraints.potential_field(grid), grid.weights)
    return Density(grid, values)


def dual_value(constraints: ConstraintSet, grid: Grid) -> float:
    """``ln Z(lam) + sum lam_k C_k``; constraints without a target contribute only through ``Z``."""
    log_z, _ = _log_partition(constraints.potential_field(grid), grid.weights)
    c = np.nan_to_num(constraints.targets, nan=0.0)
    return log_z + float(constraints.multipliers @ c)


def dual_gradient(constraints: ConstraintSet, grid: Grid) -> np.ndarray:
    """``C_k - E[J_k]`` under the current Gibbs density."""
    p = gibbs_density(constraints, grid)
    feats = constraints.features(grid)
    means = np.array([grid.integrate(f * p.values) for f in feats])
    return np.nan_to_num(constraints.targets, nan=0.0) - means


def _check_feasible(feats: np.ndarray, targets: np.ndarray, names):
    for f, c, name in zip(feats, targets, names):
        if np.isnan(c):
            raise FeasibilityError(f"constraint {name!r} has no target")
        lo, hi = float(f.min()), float(f.max())
        if not (lo + FEASIBILITY_MARGIN <= c <= hi - FEASIBILITY_MARGIN):
            raise FeasibilityError(f"target {c!r} for {name!r} outside attainable range ({lo!r}, {hi!r})")


def _check_independent(feats: np.ndarray, grid: Grid):
    k = feats.shape[0]
    if k == 0:
        return
    w = grid.weights / grid.weights.sum()
    flat = feats.reshape(k, -1)
    centred = flat - (flat @ w.ravel())[:, None]
    gram = (centred * w.ravel()) @ centred.T
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-10 * max(ev[-1], 1e-300):
        raise DegenerateConstraintError("constraint functions are collinear (singular dual Hessian)")


def solve(
    constraints: ConstraintSet,
    grid: Grid,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    initial: Optional[np.ndarray] = None,
) -> MaxEntSolution:
    """Find multipliers with ``E[J_k] = C_k`` by damped Newton on the dual.

    Falls back to a gradient step when the dual Hessian is numerically
    singular.  Exceeding ``max_iter`` returns an unconverged solution carrying
    its residuals rather than raising.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    feats = constraints.features(grid)
    targets = constraints.targets
    _check_feasible(feats, targets, [c.name for c in constraints.constraints])
    _check_independent(feats, grid)
    k = feats.shape[0]
    flat = feats.reshape(k, -1)
    wflat = grid.weights.ravel()

    lam = np.zeros(k) if initial is None else np.asarray(initial, dtype=float).copy()
    if lam.shape != (k,):
        lam = np.zeros(k)

    def evaluate(lam_):
        v = lam_ @ flat if k else np.zeros(flat.shape[1])
        log_z, p = _log_partition(v, wflat)
        pw = p * wflat
        mean = flat @ pw
        return log_z + lam_ @ targets, p, mean, pw

    dual, p, mean, pw = evaluate(lam)
    it = 0
    converged = False
    while True:
        g = targets - mean
        if k == 0 or np.max(np.abs(g)) < tol:
            converged = True
            break
        if it >= max_iter:
            break
        centred = flat - mean[:, None]
        hess = (centred * pw) @ centred.T
        try:
            if np.linalg.cond(hess) > 1e12:
                raise np.linalg.LinAlgError
            step = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = -g
        slope = float(g @ step)
        alpha = 1.0
        slack = 1e-12 * max(1.0, abs(dual))
        while True:
            cand = lam + alpha * step
            try:
                dual_c, p_c, mean_c, pw_c = evaluate(cand)
            except ScalingError:
                dual_c = np.inf
            if dual_c <= dual + 1e-4 * alpha * slope + slack or alpha < 1e-10:
                break
            alpha *= 0.5
        if not np.isfinite(dual_c):
            break
        lam, dual, p, mean, pw = cand, dual_c, p_c, mean_c, pw_c
        it += 1
    if not converged:
        log.warning("max-ent solve did not converge in %d iterations (max residual %.3e)", it, np.max(np.abs(mean - targets)))
    solved = constraints.with_multipliers(lam)
    density = Density(grid, p.reshape(grid.shape))
    return MaxEntSolution(
        density=density,
        multipliers=lam,
        moment_residuals=mean - targets,
        iterations=it,
        converged=converged,
        constraints=solved,
    )


@dataclass(frozen=True, eq=False)
class RetargetResult:
    solution: MaxEntSolution
    kl: float
    symmetrized_kl: float
    metric_distance: float
    support_limited: bool

    @property
    def distance(self) -> float:
        return self.kl


def retarget(
    current: MaxEntSolution,
    new_constraints: ConstraintSet,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> RetargetResult:
    """Re-solve after a change of constraints, warm-started from ``current``.

    Reports ``KL(p_new || p_old)``, the symmetrised KL and its square root
    (a local metric: for small changes it is the Fisher-Rao length).
    """
    grid = current.density.grid
    init = current.multipliers if len(new_constraints) == len(current.multipliers) else None
    sol = solve(new_constraints, grid, tol=tol, max_iter=max_iter, initial=init)
    limited = new_constraints.support_limited or current.constraints.support_limited
    try:
        fwd = kl_divergence(sol.density, current.density)
        bwd = kl_divergence(current.density, sol.density)
    except SupportMismatchError:
        fwd = bwd = np.inf
        limited = True
    sym = fwd + bwd
    return RetargetResult(sol, fwd, sym, float(np.sqrt(max(sym, 0.0))), limited)
