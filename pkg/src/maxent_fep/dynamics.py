"""Langevin sampling, Fokker-Planck evolution, occupation measures and currents.

Dynamics follow ``dX = -(D I + Q) grad V dt + sqrt(2 D) dW`` with ``Q``
constant and antisymmetric, so ``exp(-V)/Z`` is stationary for every ``D`` and
``Q``.  The density evolves under the conservative (Smoluchowski) form::

    dp/dt = div(D grad p + p (D I + Q) grad V)

discretised by finite volumes: Scharfetter-Gummel fluxes for the reversible
part and a discrete-curl flux for the solenoidal part.  Both vanish exactly on
``exp(-V)``, so the Gibbs density is a fixed point of the discrete scheme.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np
import scipy.sparse as sp

from .core import Density, Grid, Region
from .errors import (
    ConservationError,
    DimensionalityError,
    DomainError,
    InvariantViolationError,
    StabilityError,
    WindowError,
)
from .maxent import ConstraintSet

log = logging.getLogger(__name__)

MASS_TOL = 1e-6
MIN_EMPIRICAL_SAMPLES = 1000
_CHUNK = 1 << 18


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Potential ``V``, solenoidal matrix ``Q`` and scalar diffusion ``D`` on a grid."""

    potential: ConstraintSet
    grid: Grid
    solenoidal: Optional[np.ndarray] = None
    diffusion: float = 1.0

    def __post_init__(self):
        d = self.grid.dims
        q = np.zeros((d, d)) if self.solenoidal is None else np.atleast_2d(np.asarray(self.solenoidal, dtype=float))
        if q.shape != (d, d):
            raise DimensionalityError(f"Q must be {d}x{d}, got {q.shape}")
        if not np.array_equal(q + q.T, np.zeros_like(q)):
            raise InvariantViolationError("Q must be exactly antisymmetric")
        if not self.diffusion > 0:
            raise InvariantViolationError("diffusion D must be positive")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "solenoidal", q)
        object.__setattr__(self, "diffusion", float(self.diffusion))

    @property
    def mobility(self) -> np.ndarray:
        """``D I + Q``."""
        return self.diffusion * np.eye(self.grid.dims) + self.solenoidal

    def stationary_density(self) -> Density:
        from .maxent import gibbs_density

        return gibbs_density(self.potential, self.grid)

    def hessian_bound(self) -> float:
        """max over nodes of ``||(D I + Q) Hess V||_2`` for the smooth potential."""
        v = self.potential.smooth_potential_field(self.grid)
        g = self.grid.gradient(v)
        hess = np.stack([self.grid.gradient(g[..., k]) for k in range(self.grid.dims)], axis=-2)
        hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
        m = np.einsum("ij,...jk->...ik", self.mobility, hess)
        return float(np.max(np.linalg.norm(m.reshape(-1, self.grid.dims, self.grid.dims), ord=2, axis=(1, 2))))


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    dt: float
    seed: Optional[int] = None

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or len(s) < 1:
            raise DimensionalityError("states must be a (steps, dims) array with at least one row")
        if not self.dt > 0:
            raise InvariantViolationError("dt must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "states", s)

    def __len__(self):
        return len(self.states)

    @property
    def dims(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt

    def window(self, burn_in: int = 0) -> np.ndarray:
        return self.states[burn_in:]

    def to_csv(self, path) -> Path:
        names = ["x", "y"][: self.dims]
        data = np.column_stack([self.times, self.states])
        return _write_csv(path, ["t"] + names, data)


@dataclass(frozen=True, eq=False)
class CurrentField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape + (self.grid.dims,):
            raise DimensionalityError("current values must have shape (*grid.shape, dims)")
        if not np.all(np.isfinite(v)):
            raise InvariantViolationError("current field must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def max_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=-1)))

    def to_csv(self, path) -> Path:
        d = self.grid.dims
        coords = self.grid.coords.reshape(-1, d)
        data = np.column_stack([coords, self.values.reshape(-1, d)])
        header = ["x", "y"][:d] + ["vx", "vy"][:d]
        return _write_csv(path, header, data)


def density_to_csv(p: Density, path) -> Path:
    d = p.grid.dims
    data = np.column_stack([p.grid.coords.reshape(-1, d), p.values.reshape(-1)])
    return _write_csv(path, ["x", "y"][:d] + ["p"], data)


def _write_csv(path, header, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")
    return path


# --------------------------------------------------------------------------
# Langevin sampling


@numba.njit(cache=True)
def _interp_grad(x0, x1, lower, spacing, npts, table, out):
    s0 = (x0 - lower[0]) / spacing[0]
    i0 = int(np.floor(s0))
    i0 = min(max(i0, 0), npts[0] - 2)
    t0 = s0 - i0
    if npts[1] == 1:
        for k in range(out.shape[0]):
            out[k] = (1.0 - t0) * table[i0, 0, k] + t0 * table[i0 + 1, 0, k]
        return
    s1 = (x1 - lower[1]) / spacing[1]
    i1 = int(np.floor(s1))
    i1 = min(max(i1, 0), npts[1] - 2)
    t1 = s1 - i1
    for k in range(out.shape[0]):
        out[k] = (
            (1.0 - t0) * (1.0 - t1) * table[i0, i1, k]
            + t0 * (1.0 - t1) * table[i0 + 1, i1, k]
            + (1.0 - t0) * t1 * table[i0, i1 + 1, k]
            + t0 * t1 * table[i0 + 1, i1 + 1, k]
        )


@numba.njit(cache=True)
def _nearest_barrier(x0, x1, lower, spacing, npts, barrier):
    i0 = int(np.rint((x0 - lower[0]) / spacing[0]))
    i0 = min(max(i0, 0), npts[0] - 1)
    i1 = 0
    if npts[1] > 1:
        i1 = int(np.rint((x1 - lower[1]) / spacing[1]))
        i1 = min(max(i1, 0), npts[1] - 1)
    return barrier[i0, i1]


@numba.njit(cache=True)
def _reflect(y, lo, hi):
    width = hi - lo
    r = (y - lo) % (2.0 * width)
    if r > width:
        r = 2.0 * width - r
    return lo + r


@numba.njit(cache=True)
def _em_chunk(x, noise, uniforms, out, dt, noise_scale, mobility, lower, upper, spacing, npts, table, barrier, use_barrier):
    n_steps, n_chains, dims = noise.shape
    g = np.empty(dims)
    prop = np.empty(dims)
    for s in range(n_steps):
        for c in range(n_chains):
            x1 = x[c, 1] if dims > 1 else 0.0
            _interp_grad(x[c, 0], x1, lower, spacing, npts, table, g)
            for i in range(dims):
                drift = 0.0
                for j in range(dims):
                    drift -= mobility[i, j] * g[j]
                prop[i] = _reflect(x[c, i] + dt * drift + noise_scale * noise[s, c, i], lower[i], upper[i])
            accept = True
            if use_barrier:
                p1 = prop[1] if dims > 1 else 0.0
                db = _nearest_barrier(prop[0], p1, lower, spacing, npts, barrier) - _nearest_barrier(
                    x[c, 0], x1, lower, spacing, npts, barrier
                )
                if db > 0.0 and uniforms[s, c] >= np.exp(-db):
                    accept = False
            if accept:
                for i in range(dims):
                    x[c, i] = prop[i]
            for i in range(dims):
                out[s, c, i] = x[c, i]


def _drift_tables(drift: DriftSpec):
    grid = drift.grid
    coords = grid.coords
    table = drift.potential.gradient(coords)
    barrier = drift.potential.barrier_field(grid)
    if grid.dims == 1:
        table = table[:, None, :]
        barrier = barrier[:, None]
        npts = np.array([grid.points[0], 1], dtype=np.int64)
    else:
        npts = np.array(grid.points, dtype=np.int64)
    return np.ascontiguousarray(table), np.ascontiguousarray(barrier), npts


def simulate_batch(drift: DriftSpec, x0s, steps: int, dt: float, seed: int, check_stability: bool = True) -> np.ndarray:
    """Run independent chains in lockstep; returns states of shape ``(steps + 1, chains, dims)``."""
    grid = drift.grid
    x0s = np.array(x0s, dtype=float).reshape(-1, grid.dims)
    if not np.all(grid.contains(x0s)):
        raise DomainError("initial state outside the grid")
    if not dt > 0:
        raise InvariantViolationError("dt must be positive")
    if check_stability:
        bound = drift.hessian_bound()
        if bound > 0 and dt > 0.1 / bound:
            raise StabilityError(f"dt={dt:g} exceeds stability heuristic 0.1/max|Hess V| = {0.1 / bound:g}")
    table, barrier, npts = _drift_tables(drift)
    use_barrier = bool(np.any(barrier != 0))
    lower = np.asarray(grid.lower)
    upper = np.asarray(grid.upper)
    spacing = np.asarray(grid.spacing)
    mobility = np.ascontiguousarray(drift.mobility)
    scale = float(np.sqrt(2.0 * drift.diffusion * dt))
    n_chains = x0s.shape[0]
    states = np.empty((steps + 1, n_chains, grid.dims))
    states[0] = x0s
    x = x0s.copy()
    rng = np.random.default_rng(seed)
    dummy_u = np.zeros((1, 1))
    done = 0
    while done < steps:
        n = min(_CHUNK, steps - done)
        noise = rng.standard_normal((n, n_chains, grid.dims))
        uniforms = rng.random((n, n_chains)) if use_barrier else dummy_u
        _em_chunk(x, noise, uniforms, states[done + 1 : done + 1 + n], dt, scale, mobility, lower, upper, spacing, npts, table, barrier, use_barrier)
        done += n
    return states


def simulate(drift: DriftSpec, x0, steps: int, dt: float, seed: int) -> Trajectory:
    """Euler-Maruyama with reflecting walls; deterministic given ``seed``.

    Barrier (piecewise-constant) constraints enter through a Metropolis
    accept/reject on their jump, since their gradient is a delta function.
    """
    states = simulate_batch(drift, [x0], steps, dt, seed)
    return Trajectory(states[:, 0, :], dt, seed)


def occupation_fraction(traj: Trajectory, a: Region, burn_in: int = 0) -> float:
    """Fraction of post-burn-in samples whose nearest grid node lies in ``a``."""
    window = traj.window(burn_in)
    if len(window) == 0:
        raise WindowError("no samples after burn-in")
    if a.is_empty:
        return 0.0
    return float(np.mean(a.contains(window)))


def empirical_density(traj: Trajectory, grid: Grid, burn_in: int = 0) -> Density:
    """Nearest-node histogram divided by cell volume, normalised on the grid."""
    window = traj.window(burn_in)
    if len(window) < MIN_EMPIRICAL_SAMPLES:
        raise WindowError(f"need at least {MIN_EMPIRICAL_SAMPLES} post-burn-in samples, got {len(window)}")
    idx = np.ravel_multi_index(grid.nearest_index(window), grid.shape)
    counts = np.bincount(idx, minlength=grid.size).reshape(grid.shape)
    return Density.from_unnormalized(grid, counts / (len(window) * grid.cell_volumes))


def window_statistics(traj: Trajectory, n_windows: int = 10, burn_in: int = 0):
    """Per-window means and variances over disjoint windows."""
    window = traj.window(burn_in)
    if len(window) < 2 * n_windows:
        raise WindowError("trajectory too short for the requested windows")
    chunks = np.array_split(window, n_windows)
    means = np.array([c.mean(axis=0) for c in chunks])
    variances = np.array([c.var(axis=0) for c in chunks])
    return means, variances


# --------------------------------------------------------------------------
# Fokker-Planck


def _bernoulli(x: np.ndarray) -> np.ndarray:
    """``x / (exp(x) - 1)`` with the removable singularity at 0 filled in."""
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-12
    out[nz] = x[nz] / np.expm1(x[nz])
    return out


def _cell_edges(grid: Grid, axis: int) -> np.ndarray:
    w = grid.axis_weights[axis]
    return grid.lower[axis] + np.concatenate([[0.0], np.cumsum(w)])


def fokker_planck_operator(drift: DriftSpec) -> sp.csr_matrix:
    """Sparse generator ``L`` with ``dp/dt = L p`` on flattened grid values.

    Control volumes are the quadrature weights, so ``w . (L p) = 0`` exactly
    and the quadrature mass is conserved.
    """
    grid = drift.grid
    shape = grid.shape
    n = grid.size
    v = drift.potential.potential_field(grid)
    v = v - v.min()
    d = drift.diffusion
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []

    def add(r, c, x):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(x.ravel())

    for axis in range(grid.dims):
        h = grid.spacing[axis]
        w = grid.axis_weights[axis]
        lo = [slice(None)] * grid.dims
        hi = [slice(None)] * grid.dims
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        dv = v[hi] - v[lo]
        a_out = d / h * _bernoulli(dv)  # flux i -> i+1 per unit p_i
        a_in = d / h * _bernoulli(-dv)  # flux i+1 -> i per unit p_{i+1}
        wshape = [1] * grid.dims
        wshape[axis] = -1
        w_lo = w[:-1].reshape(wshape)
        w_hi = w[1:].reshape(wshape)
        i_lo, i_hi = idx[lo], idx[hi]
        # flux F = a_out p_lo - a_in p_hi leaves lo and enters hi
        add(i_lo, i_lo, -a_out / w_lo)
        add(i_lo, i_hi, a_in / w_lo)
        add(i_hi, i_lo, a_out / w_hi)
        add(i_hi, i_hi, -a_in / w_hi)

    q = drift.solenoidal
    if grid.dims == 2 and q[0, 1] != 0.0:
        a = q[0, 1]
        ex, ey = _cell_edges(grid, 0), _cell_edges(grid, 1)
        corners = np.stack(np.meshgrid(ex, ey, indexing="ij"), axis=-1)
        vmin = drift.potential.potential_field(grid).min()
        vc = drift.potential.potential(corners) - drift.potential.offset - vmin
        wx, wy = grid.axis_weights
        vol = np.multiply.outer(wx, wy)

        # x-faces between (i, j) and (i+1, j) sit at ex[i+1] spanning [ey[j], ey[j+1]]
        top, bot = vc[1:-1, 1:], vc[1:-1, :-1]
        for src, side in ((slice(0, -1), 0), (slice(1, None), 1)):
            vn = v[src, :]
            coef = -0.5 * a * (np.exp(vn - top) - np.exp(vn - bot))
            i_src = idx[src, :]
            add(idx[:-1, :], i_src, -coef / vol[:-1, :])
            add(idx[1:, :], i_src, coef / vol[1:, :])
        # y-faces between (i, j) and (i, j+1) sit at ey[j+1] spanning [ex[i], ex[i+1]]
        right, left = vc[1:, 1:-1], vc[:-1, 1:-1]
        for src in (slice(0, -1), slice(1, None)):
            vn = v[:, src]
            coef = 0.5 * a * (np.exp(vn - right) - np.exp(vn - left))
            i_src = idx[:, src]
            add(idx[:, :-1], i_src, -coef / vol[:, :-1])
            add(idx[:, 1:], i_src, coef / vol[:, 1:])

    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return mat.tocsr()


def cfl_limit(drift: DriftSpec) -> float:
    """Largest explicit step allowed: the diffusive CFL bound and diagonal positivity."""
    grid = drift.grid
    h = min(grid.spacing)
    cfl = h * h / (2.0 * drift.diffusion * grid.dims)
    diag = -fokker_planck_operator(drift).diagonal()
    return float(min(cfl, 1.0 / diag.max())) if diag.max() > 0 else cfl


def evolve_fokker_planck(
    p0: Density,
    drift: DriftSpec,
    t_final: float,
    dt: float,
    save_every: int = 1,
) -> list[Density]:
    """Explicit finite-volume evolution; snapshot ``k`` is at time ``k * save_every * dt``."""
    if p0.grid != drift.grid:
        raise DimensionalityError("initial density and drift live on different grids")
    n_steps = int(round(t_final / dt))
    if n_steps < 0 or abs(n_steps * dt - t_final) > 1e-9 * max(1.0, abs(t_final)):
        raise ValueError("t_final must be a nonnegative multiple of dt")
    limit = cfl_limit(drift)
    if dt > limit * (1 + 1e-12):
        raise StabilityError(f"dt={dt:g} exceeds explicit stability limit {limit:g}")
    grid = drift.grid
    op = fokker_planck_operator(drift)
    w = grid.weights.ravel()
    p = p0.values.ravel().copy()
    mass0 = float(w @ p)
    out = [p0]
    for step in range(1, n_steps + 1):
        p = p + dt * (op @ p)
        if step % save_every == 0 or step == n_steps:
            neg = p < 0
            if neg.any():
                if p[neg].min() < -1e-12 * p.max():
                    raise StabilityError(f"negative density {p[neg].min():.3e} at step {step}")
                p[neg] = 0.0
            mass = float(w @ p)
            if abs(mass - mass0) > MASS_TOL:
                raise ConservationError(f"mass drifted by {mass - mass0:.3e} at step {step}")
            if step % save_every == 0:
                out.append(Density(grid, (p / mass).reshape(grid.shape)))
    return out


def fokker_planck_rhs(p: Density, drift: DriftSpec) -> np.ndarray:
    """``dp/dt`` of the discrete scheme, equal to minus the discrete divergence of the current."""
    return (fokker_planck_operator(drift) @ p.values.ravel()).reshape(p.grid.shape)


# --------------------------------------------------------------------------
# currents


def stationary_current(p: Density, drift: DriftSpec) -> CurrentField:
    """Probability current ``-p (D I + Q) grad V - D grad p`` at grid nodes.

    The reversible part is evaluated as ``-D exp(-V) grad(p exp(V))`` so that
    it vanishes to rounding on the Gibbs density.
    """
    grid = drift.grid
    if p.grid != grid:
        raise DimensionalityError("density and drift live on different grids")
    v = drift.potential.potential_field(grid)
    v = v - v.min()
    u = p.values * np.exp(np.minimum(v, 700.0))
    rev = -drift.diffusion * np.exp(-v)[..., None] * grid.gradient(u)
    gv = grid.gradient(v)
    sol = -p.values[..., None] * np.einsum("ij,...j->...i", drift.solenoidal, gv)
    return CurrentField(grid, rev + sol)


def _diff4(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    f = np.moveaxis(f, axis, 0)
    out = np.gradient(f, h, axis=0, edge_order=2)
    if f.shape[0] >= 5:
        out[2:-2] = (-f[4:] + 8 * f[3:-1] - 8 * f[1:-3] + f[:-4]) / (12 * h)
    return np.moveaxis(out, 0, axis)


def divergence(current: CurrentField) -> np.ndarray:
    """Fourth-order (interior) finite-difference divergence at grid nodes."""
    g = current.grid
    return sum(_diff4(current.values[..., k], g.spacing[k], k) for k in range(g.dims))
