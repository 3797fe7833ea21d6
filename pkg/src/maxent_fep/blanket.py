"""Linear-Gaussian particular partitions (external, blanket, internal states).

A :class:`GaussianSystem` is a joint Gaussian over ordered blocks ``eta``
(external), ``b`` (blanket) and ``mu`` (internal).  Conditioning is done by
Schur complements, which makes the expected states given a blanket state,
the synchronisation map between them, and the variational free energy all
closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Density, Grid, entropy
from .errors import (
    DegeneracyError,
    DimensionalityError,
    InvariantViolationError,
    NonInjectiveSyncError,
    OptimizationError,
)

BLOCKS = ("eta", "b", "mu")
SYM_TOL = 1e-12
EIG_TOL = 1e-10
BLANKET_TOL = 1e-10
INJECTIVE_TOL = 1e-8


def _gauss_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    d = np.atleast_1d(x) - mean
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, d)
    return float(-0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 0.5 * d.size * np.log(2 * np.pi))


def gaussian_kl(m0, s0, m1, s1) -> float:
    """``KL(N(m0, s0) || N(m1, s1))``."""
    m0, m1 = np.atleast_1d(m0), np.atleast_1d(m1)
    s0, s1 = np.atleast_2d(s0), np.atleast_2d(s1)
    k = m0.size
    inv1 = np.linalg.inv(s1)
    d = m1 - m0
    _, ld0 = np.linalg.slogdet(s0)
    _, ld1 = np.linalg.slogdet(s1)
    return float(0.5 * (np.trace(inv1 @ s0) + d @ inv1 @ d - k + ld1 - ld0))


@dataclass(frozen=True, eq=False)
class GaussianSystem:
    """Joint Gaussian with named, contiguous blocks.

    ``given`` records blocks already conditioned out (name -> value).  With
    ``blanketed=True`` the constructor verifies that ``eta`` and ``mu`` are
    conditionally independent given ``b``.
    """

    mean: np.ndarray
    cov: np.ndarray
    dims: dict
    given: dict = field(default_factory=dict)
    blanketed: bool = False

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float)).copy()
        dims = {k: int(v) for k, v in self.dims.items()}
        n = sum(dims.values())
        if any(v < 1 for v in dims.values()):
            raise DimensionalityError("every block needs dimension >= 1")
        if mean.shape != (n,) or cov.shape != (n, n):
            raise DimensionalityError(f"blocks sum to {n} but mean/cov have shapes {mean.shape}/{cov.shape}")
        if np.max(np.abs(cov - cov.T)) > SYM_TOL:
            raise InvariantViolationError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov)[0] <= EIG_TOL:
            raise InvariantViolationError("covariance is not positive definite")
        for a in (mean, cov):
            a.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "given", {k: np.asarray(v, dtype=float) for k, v in self.given.items()})
        if self.blanketed:
            pc = self.partial_covariance("eta", "mu", "b")
            if np.max(np.abs(pc)) > BLANKET_TOL:
                raise InvariantViolationError(f"eta and mu are not independent given b (partial cov {np.max(np.abs(pc)):.2e})")

    # construction -----------------------------------------------------

    @classmethod
    def from_generator(cls, cov_bb, cross_eta_b, cross_mu_b, cond_eta, cond_mu, mean=None) -> "GaussianSystem":
        """Blanketed system: ``eta`` and ``mu`` each regress on ``b`` with independent residuals.

        The ``eta``-``mu`` cross-covariance is derived, not free:
        ``S_eta_b S_bb^-1 S_b_mu``.
        """
        s_bb = np.atleast_2d(np.asarray(cov_bb, dtype=float))
        s_eb = np.atleast_2d(np.asarray(cross_eta_b, dtype=float))
        s_mb = np.atleast_2d(np.asarray(cross_mu_b, dtype=float))
        c_e = np.atleast_2d(np.asarray(cond_eta, dtype=float))
        c_m = np.atleast_2d(np.asarray(cond_mu, dtype=float))
        de, db, dm = s_eb.shape[0], s_bb.shape[0], s_mb.shape[0]
        if s_eb.shape != (de, db) or s_mb.shape != (dm, db) or c_e.shape != (de, de) or c_m.shape != (dm, dm):
            raise DimensionalityError("generator blocks have inconsistent shapes")
        inv_bb = np.linalg.inv(s_bb)
        s_ee = c_e + s_eb @ inv_bb @ s_eb.T
        s_mm = c_m + s_mb @ inv_bb @ s_mb.T
        s_em = s_eb @ inv_bb @ s_mb.T
        cov = np.block([[s_ee, s_eb, s_em], [s_eb.T, s_bb, s_mb.T], [s_em.T, s_mb, s_mm]])
        cov = 0.5 * (cov + cov.T)
        mean = np.zeros(de + db + dm) if mean is None else mean
        return cls(mean, cov, {"eta": de, "b": db, "mu": dm}, blanketed=True)

    @classmethod
    def random_blanketed(cls, rng: np.random.Generator, dims=(1, 1, 1), scale: float = 1.0) -> "GaussianSystem":
        de, db, dm = dims

        def spd(k):
            a = rng.normal(size=(k, k))
            return scale * (a @ a.T / k + 0.5 * np.eye(k))

        return cls.from_generator(
            spd(db),
            rng.normal(size=(de, db)) * scale,
            rng.normal(size=(dm, db)) * scale,
            spd(de),
            spd(dm),
            mean=rng.normal(size=de + db + dm),
        )

    # block access ------------------------------------------------------

    @property
    def names(self) -> tuple:
        return tuple(self.dims)

    def index(self, name: str) -> np.ndarray:
        if name not in self.dims:
            raise DimensionalityError(f"no block {name!r}; have {self.names}")
        start = 0
        for k, d in self.dims.items():
            if k == name:
                return np.arange(start, start + d)
            start += d
        raise AssertionError

    def _idx(self, names) -> np.ndarray:
        if isinstance(names, str):
            names = (names,)
        return np.concatenate([self.index(n) for n in names])

    def block_mean(self, names) -> np.ndarray:
        return self.mean[self._idx(names)]

    def block_cov(self, names, other=None) -> np.ndarray:
        i = self._idx(names)
        j = i if other is None else self._idx(other)
        return self.cov[np.ix_(i, j)]

    def marginal_logpdf(self, names, x) -> float:
        return _gauss_logpdf(np.concatenate([np.atleast_1d(v) for v in x]), self.block_mean(names), self.block_cov(names))

    def regression(self, target, given):
        """Affine map ``given -> E[target | given]`` as (matrix, offset)."""
        s_gg = self.block_cov(given)
        _check_invertible(s_gg, given)
        k = self.block_cov(target, given) @ np.linalg.inv(s_gg)
        return k, self.block_mean(target) - k @ self.block_mean(given)

    def conditional_cov(self, target, given) -> np.ndarray:
        s_gg = self.block_cov(given)
        _check_invertible(s_gg, given)
        s_tg = self.block_cov(target, given)
        return self.block_cov(target) - s_tg @ np.linalg.solve(s_gg, s_tg.T)

    def partial_covariance(self, a: str, c: str, given: str) -> np.ndarray:
        """Cross-covariance of ``a`` and ``c`` after conditioning on ``given``."""
        s_gg = self.block_cov(given)
        return self.block_cov(a, c) - self.block_cov(a, given) @ np.linalg.solve(s_gg, self.block_cov(given, c))


def _check_invertible(s: np.ndarray, name):
    if np.linalg.eigvalsh(s)[0] <= EIG_TOL:
        raise DegeneracyError(f"covariance of block {name!r} is singular")


def condition(sys: GaussianSystem, block: str, value) -> GaussianSystem:
    """Conditional Gaussian over the remaining blocks (Schur complement)."""
    value = np.atleast_1d(np.asarray(value, dtype=float))
    if block in sys.given:
        if np.array_equal(sys.given[block], value):
            return sys
        raise ValueError(f"block {block!r} already conditioned on a different value")
    if value.shape != (sys.dims.get(block, -1),):
        raise DimensionalityError(f"value for {block!r} has shape {value.shape}, block has dim {sys.dims.get(block)}")
    rest = [n for n in sys.names if n != block]
    if not rest:
        raise DimensionalityError("cannot condition on the only block")
    s_gg = sys.block_cov(block)
    _check_invertible(s_gg, block)
    s_rg = sys.block_cov(rest, block)
    gain = s_rg @ np.linalg.inv(s_gg)
    mean = sys.block_mean(rest) + gain @ (value - sys.block_mean(block))
    cov = sys.block_cov(rest) - gain @ s_rg.T
    cov = 0.5 * (cov + cov.T)
    given = dict(sys.given)
    given[block] = value
    return GaussianSystem(mean, cov, {n: sys.dims[n] for n in rest}, given=given)


@dataclass(frozen=True, eq=False)
class SyncMap:
    """Affine maps ``b -> mu_hat_b``, ``b -> eta_hat_b`` and ``sigma: mu_hat -> eta_hat``."""

    mu_matrix: np.ndarray
    mu_offset: np.ndarray
    eta_matrix: np.ndarray
    eta_offset: np.ndarray
    eta_injective: bool

    @property
    def sigma_matrix(self) -> np.ndarray:
        return self.eta_matrix @ np.linalg.pinv(self.mu_matrix)

    @property
    def sigma_offset(self) -> np.ndarray:
        return self.eta_offset - self.sigma_matrix @ self.mu_offset

    def bold_mu(self, b) -> np.ndarray:
        return self.mu_matrix @ np.atleast_1d(b) + self.mu_offset

    def bold_eta(self, b) -> np.ndarray:
        return self.eta_matrix @ np.atleast_1d(b) + self.eta_offset

    def bold_mu_inverse(self, mu_hat) -> np.ndarray:
        """Left inverse of ``bold_mu`` on its image."""
        return np.linalg.pinv(self.mu_matrix) @ (np.atleast_1d(mu_hat) - self.mu_offset)

    def sigma(self, mu_hat) -> np.ndarray:
        mu_hat = np.asarray(mu_hat, dtype=float)
        return mu_hat @ self.sigma_matrix.T + self.sigma_offset

    def sigma_inverse(self, eta_hat) -> np.ndarray:
        """``bold_mu o bold_eta^-1``; needs ``bold_eta`` injective."""
        if not self.eta_injective:
            raise NonInjectiveSyncError("b -> eta_hat_b is not injective, so sigma has no inverse")
        b = np.linalg.pinv(self.eta_matrix) @ (np.atleast_1d(eta_hat) - self.eta_offset)
        return self.bold_mu(b)


def _injective(m: np.ndarray) -> bool:
    if m.shape[0] < m.shape[1]:
        return False
    return bool(np.linalg.svd(m, compute_uv=False).min() > INJECTIVE_TOL)


def build_sync_map(sys: GaussianSystem) -> SyncMap:
    """Regressions of ``mu`` and ``eta`` on ``b`` and their composition ``sigma``."""
    for n in BLOCKS:
        if n not in sys.dims:
            raise DimensionalityError(f"system lacks block {n!r}")
    k_mu, c_mu = sys.regression("mu", "b")
    if not _injective(k_mu):
        raise NonInjectiveSyncError("b -> mu_hat_b is rank deficient; sigma = eta o mu^-1 does not exist")
    k_eta, c_eta = sys.regression("eta", "b")
    return SyncMap(k_mu, c_mu, k_eta, c_eta, _injective(k_eta))


@dataclass(frozen=True, eq=False)
class RecognitionDensity:
    """``q(eta; sigma(mu))``: Gaussian whose mean is the synchronised image of ``mu``."""

    sync: SyncMap
    covariance: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if np.linalg.eigvalsh(0.5 * (c + c.T))[0] <= EIG_TOL:
            raise InvariantViolationError("recognition covariance must be positive definite")
        object.__setattr__(self, "covariance", c)

    def mean(self, mu) -> np.ndarray:
        return self.sync.sigma(mu)


def recognition_density(sys: GaussianSystem, covariance=None, sync: Optional[SyncMap] = None) -> RecognitionDensity:
    sync = build_sync_map(sys) if sync is None else sync
    cov = sys.conditional_cov("eta", "b") if covariance is None else covariance
    return RecognitionDensity(sync, cov)


def posterior_eta(sys: GaussianSystem, b):
    """Mean and covariance of ``p(eta | b)``."""
    k, c = sys.regression("eta", "b")
    return k @ np.atleast_1d(b) + c, sys.conditional_cov("eta", "b")


def surprisal(sys: GaussianSystem, mu, b) -> float:
    """``-ln p(mu, b)``."""
    return -sys.marginal_logpdf(("mu", "b"), (mu, b))


def variational_free_energy(sys: GaussianSystem, q: RecognitionDensity, mu, b) -> tuple[float, float]:
    """``F = KL(q(.; sigma(mu)) || p(eta | b)) - ln p(mu, b)`` and the bound gap (the KL term)."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if mu.shape != (sys.dims["mu"],) or b.shape != (sys.dims["b"],):
        raise DimensionalityError("mu or b has the wrong dimension")
    if q.covariance.shape != (sys.dims["eta"],) * 2:
        raise DimensionalityError("recognition covariance does not match the eta block")
    m_post, s_post = posterior_eta(sys, b)
    gap = gaussian_kl(q.mean(mu), q.covariance, m_post, s_post)
    return gap + surprisal(sys, mu, b), gap


def free_energy_gradient(sys: GaussianSystem, q: RecognitionDensity, mu, b) -> np.ndarray:
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    m_post, s_post = posterior_eta(sys, b)
    s = q.sync.sigma_matrix
    g_kl = s.T @ np.linalg.solve(s_post, q.mean(mu) - m_post)
    prec = np.linalg.inv(sys.block_cov(("mu", "b")))
    z = np.concatenate([mu, np.atleast_1d(b)]) - sys.block_mean(("mu", "b"))
    g_s = (prec @ z)[: mu.size]
    return g_kl + g_s


def free_energy_hessian(sys: GaussianSystem, q: RecognitionDensity) -> np.ndarray:
    _, s_post = posterior_eta(sys, np.zeros(sys.dims["b"]))
    s = q.sync.sigma_matrix
    prec = np.linalg.inv(sys.block_cov(("mu", "b")))
    dm = sys.dims["mu"]
    return s.T @ np.linalg.solve(s_post, s) + prec[:dm, :dm]


@dataclass(frozen=True)
class FreeEnergyMinimum:
    mu: np.ndarray
    iterations: int
    free_energy: float
    bound_gap: float
    trace: tuple = ()


def minimize_free_energy(
    sys: GaussianSystem,
    b,
    tol: float = 1e-10,
    mu0=None,
    q: Optional[RecognitionDensity] = None,
    max_iter: int = 50,
) -> FreeEnergyMinimum:
    """Damped Newton on ``F(mu, b)`` over ``mu`` with ``b`` fixed."""
    q = recognition_density(sys) if q is None else q
    b = np.atleast_1d(np.asarray(b, dtype=float))
    mu = np.zeros(sys.dims["mu"]) if mu0 is None else np.atleast_1d(np.asarray(mu0, dtype=float)).copy()
    hess = free_energy_hessian(sys, q)
    f, gap = variational_free_energy(sys, q, mu, b)
    trace = [f]
    for it in range(max_iter + 1):
        step = -np.linalg.solve(hess, free_energy_gradient(sys, q, mu, b))
        if np.linalg.norm(step) < 0.1 * tol:
            return FreeEnergyMinimum(mu, it, f, gap, tuple(trace))
        if it == max_iter:
            break
        alpha = 1.0
        while True:
            cand = mu + alpha * step
            f_c, gap_c = variational_free_energy(sys, q, cand, b)
            if f_c <= f + 1e-12 * max(1.0, abs(f)) or alpha < 1e-8:
                break
            alpha *= 0.5
        mu, f, gap = cand, f_c, gap_c
        trace.append(f)
    raise OptimizationError(f"free-energy minimisation did not converge in {max_iter} iterations", trace)


def free_energy_by_quadrature(sys: GaussianSystem, q: RecognitionDensity, mu, b, grid: Optional[Grid] = None) -> dict:
    """Recompute ``-F`` as ``S[q] - E_q[-ln p(eta|b)] - (-ln p(mu, b))`` with grid functionals (1D eta)."""
    if sys.dims["eta"] != 1:
        raise DimensionalityError("quadrature route needs a one-dimensional eta block")
    m_q = float(q.mean(mu)[0])
    s_q = float(q.covariance[0, 0])
    m_p, s_p = posterior_eta(sys, b)
    m_p, s_p = float(m_p[0]), float(s_p[0, 0])
    if grid is None:
        lo = min(m_q - 12 * np.sqrt(s_q), m_p - 12 * np.sqrt(s_p))
        hi = max(m_q + 12 * np.sqrt(s_q), m_p + 12 * np.sqrt(s_p))
        grid = Grid.line(lo, hi, 4001)
    qd = Density.gaussian(grid, m_q, s_q)
    x = grid.axes[0]
    neg_log_post = 0.5 * (x - m_p) ** 2 / s_p + 0.5 * np.log(2 * np.pi * s_p)
    s_q_num = entropy(qd)
    cross = grid.integrate(qd.values * neg_log_post)
    surp = surprisal(sys, mu, b)
    return {"entropy_q": s_q_num, "cross_entropy": cross, "surprisal": surp, "neg_free_energy": s_q_num - cross - surp}


@dataclass(frozen=True, eq=False)
class DualReport:
    mu_hat: np.ndarray
    eta_hat: np.ndarray
    sigma_inv_eta_hat: np.ndarray
    maxent_mean: np.ndarray
    maxent_cov: np.ndarray
    target_mean: np.ndarray
    target_cov: np.ndarray
    mean_error: float
    cov_error: float
    blanket_violation: float
    route: str
    tol: float = 1e-8

    @property
    def maxent_match_error(self) -> float:
        return max(self.mean_error, self.cov_error)

    @property
    def matches(self) -> bool:
        return self.maxent_match_error <= self.tol


def _grid_maxent_gaussian(mean: float, var: float):
    """Solve the 1D max-ent problem with first and second moment constraints on a grid."""
    from .maxent import ConstraintSet, linear, quadratic, solve

    sd = np.sqrt(var)
    grid = Grid.line(mean - 14 * sd, mean + 14 * sd, 2001)
    cons = ConstraintSet.of(linear(1.0, target=mean), quadratic(mean, 1.0, target=var))
    sol = solve(cons, grid, tol=1e-13 * max(1.0, abs(mean), var), max_iter=200)
    m = sol.density.mean()
    c = sol.density.covariance()
    return m, c


def maxent_dual_check(sys: GaussianSystem, b=None, eta=None, tol: float = 1e-8) -> DualReport:
    """Max-ent density over ``mu`` under ``E[mu] = sigma^-1(eta_hat)`` and a covariance constraint.

    With ``b`` given, the target is ``p(mu | eta, b)`` at ``eta`` (default
    ``eta_hat_b``), which equals ``p(mu | b)`` exactly when ``b`` is a
    blanket.  Without ``b``, the marginal version compares against ``p(mu)``.
    """
    sync = build_sync_map(sys)
    if b is None:
        mu_hat = sys.block_mean("mu")
        eta_hat = sys.block_mean("eta")
        cov_c = sys.block_cov("mu")
        t_mean, t_cov = mu_hat, cov_c
    else:
        b = np.atleast_1d(np.asarray(b, dtype=float))
        mu_hat = sync.bold_mu(b)
        eta_hat = sync.bold_eta(b)
        cov_c = sys.conditional_cov("mu", "b")
        eta_obs = eta_hat if eta is None else np.atleast_1d(np.asarray(eta, dtype=float))
        inner = condition(condition(sys, "b", b), "eta", eta_obs)
        t_mean, t_cov = inner.block_mean("mu"), inner.block_cov("mu")
    m_star = sync.sigma_inverse(eta_hat)
    if sys.dims["mu"] == 1:
        me_mean, me_cov = _grid_maxent_gaussian(float(m_star[0]), float(cov_c[0, 0]))
        route = "grid"
    else:
        # the max-ent density with fixed mean and covariance is the Gaussian with those moments
        me_mean, me_cov = m_star.copy(), cov_c.copy()
        route = "closed-form"
    pc = sys.partial_covariance("eta", "mu", "b")
    return DualReport(
        mu_hat=mu_hat,
        eta_hat=eta_hat,
        sigma_inv_eta_hat=m_star,
        maxent_mean=np.atleast_1d(me_mean),
        maxent_cov=np.atleast_2d(me_cov),
        target_mean=t_mean,
        target_cov=t_cov,
        mean_error=float(np.max(np.abs(np.atleast_1d(me_mean) - t_mean))),
        cov_error=float(np.max(np.abs(np.atleast_2d(me_cov) - t_cov))),
        blanket_violation=float(np.max(np.abs(pc))),
        route=route,
        tol=tol,
    )


def system_from_config(spec: dict) -> GaussianSystem:
    """Build a system from ``{"generator": {...}}`` or ``{"dims", "mean", "covariance"}``."""
    if "generator" in spec:
        g = spec["generator"]
        return GaussianSystem.from_generator(
            g["cov_bb"], g["cross_eta_b"], g["cross_mu_b"], g["cond_eta"], g["cond_mu"], mean=g.get("mean")
        )
    dims = spec["dims"]
    return GaussianSystem(spec["mean"], spec["covariance"], dict(zip(BLOCKS, dims)), blanketed=spec.get("blanketed", False))


def blanket_report(sys: GaussianSystem, b) -> dict:
    """JSON-ready summary of inference at blanket state ``b``."""
    sync = build_sync_map(sys)
    q = recognition_density(sys, sync=sync)
    opt = minimize_free_energy(sys, b, q=q)
    dual = maxent_dual_check(sys, b)
    return {
        "mu_hat": sync.bold_mu(b).tolist(),
        "eta_hat": sync.bold_eta(b).tolist(),
        "sigma_matrix": sync.sigma_matrix.tolist(),
        "F_at_opt": opt.free_energy,
        "bound_gap": opt.bound_gap,
        "maxent_match_error": dual.maxent_match_error,
    }
