"""Named numerical checks that turn identities and inequalities into pass/fail reports.

Every check returns a :class:`CheckReport` carrying the measured values and
a signed ``slack``: positive means the bound holds with room to spare,
negative means it is violated by that amount.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .blanket import (
    GaussianSystem,
    RecognitionDensity,
    build_sync_map,
    posterior_eta,
    surprisal,
    variational_free_energy,
)
from .core import Density, entropy, fisher_information, kl_divergence, mutual_information
from .dynamics import Trajectory
from .errors import DimensionalityError, WindowError

PASS, FAIL = "pass", "fail"
HYPOTHESIS_NOT_MET = "hypothesis-not-met"
STATIONARITY_VIOLATION = "stationarity-violation"


@dataclass
class CheckReport:
    name: str
    digest: str
    measured: dict
    target: dict
    slack: float
    tolerance: float
    status: str
    runtime: float = 0.0
    notes: str = ""

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def to_dict(self, include_runtime: bool = False) -> dict:
        d = {
            "name": self.name,
            "digest": self.digest,
            "status": self.status,
            "passed": self.passed,
            "slack": _jsonable(self.slack),
            "tolerance": self.tolerance,
            "measured": _jsonable(self.measured),
            "target": _jsonable(self.target),
        }
        if self.notes:
            d["notes"] = self.notes
        if include_runtime:
            d["runtime"] = self.runtime
        return d


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def digest(*items, seed: Optional[int] = None) -> str:
    """Short sha256 over array bytes and JSON-able scalars."""
    h = hashlib.sha256()
    for it in items:
        if isinstance(it, Density):
            it = it.values
        if isinstance(it, Trajectory):
            it = it.states
        if isinstance(it, np.ndarray):
            h.update(np.ascontiguousarray(it, dtype=float).tobytes())
        else:
            h.update(json.dumps(_jsonable(it), sort_keys=True).encode())
    if seed is not None:
        h.update(f"seed={seed}".encode())
    return h.hexdigest()[:16]


def _report(name, dig, measured, target, slack, tol, t0, status=None, notes="") -> CheckReport:
    if status is None:
        status = PASS if slack >= -tol else FAIL
    return CheckReport(name, dig, measured, target, float(slack), tol, status, time.perf_counter() - t0, notes)


def _same_grid(snapshots, *others):
    g = snapshots[0].grid
    for s in list(snapshots) + [o for o in others if o is not None]:
        if s.grid != g:
            raise DimensionalityError("snapshots and reference live on different grids")


def check_lyapunov(snapshots: Sequence[Density], reference: Density, tol: float = 1e-9, digest_: Optional[str] = None) -> CheckReport:
    """``KL(p_t || reference)`` must not increase between consecutive snapshots."""
    t0 = time.perf_counter()
    _same_grid(snapshots, reference)
    kls = np.array([kl_divergence(p, reference) for p in snapshots])
    diffs = np.diff(kls)
    worst = float(diffs.max()) if diffs.size else 0.0
    return _report(
        "lyapunov",
        digest_ or digest(*snapshots, reference),
        {"kl": kls, "max_increase": worst},
        {"max_increase": 0.0},
        -worst,
        tol,
        t0,
    )


def check_de_bruijn(
    snapshots: Sequence[Density],
    reference: Density,
    dt: float,
    diffusion: float = 1.0,
    tol: float = 0.01,
    index: Optional[int] = None,
    abs_tol: float = 1e-8,
    digest_: Optional[str] = None,
) -> CheckReport:
    """Central difference of ``KL(p_t || reference)`` against ``-D * Fisher(p_t, reference)``.

    Checked at ``index`` (default: the middle snapshot).  When both sides are
    below ``abs_tol`` the comparison is absolute, since a relative error at
    stationarity means nothing.
    """
    t0 = time.perf_counter()
    if len(snapshots) < 3:
        raise WindowError("the de Bruijn check needs at least three snapshots")
    _same_grid(snapshots, reference)
    i = len(snapshots) // 2 if index is None else int(index)
    if not 0 < i < len(snapshots) - 1:
        raise WindowError("check index must be an interior snapshot")
    kl_prev = kl_divergence(snapshots[i - 1], reference)
    kl_next = kl_divergence(snapshots[i + 1], reference)
    lhs = (kl_next - kl_prev) / (2 * dt)
    rhs = -diffusion * fisher_information(snapshots[i], reference)
    if abs(rhs) < abs_tol:
        err = abs(lhs - rhs)
        slack, tol_used, mode = abs_tol - err, abs_tol, "absolute"
    else:
        err = abs(lhs - rhs) / abs(rhs)
        slack, tol_used, mode = tol - err, tol, "relative"
    return _report(
        "de-bruijn",
        digest_ or digest(*snapshots, reference, dt, diffusion),
        {"dkl_dt": lhs, "minus_d_fisher": rhs, "error": err, "mode": mode, "index": i, "dt": dt},
        {"relative_tol": tol, "absolute_tol": abs_tol},
        slack,
        tol_used,
        t0,
        status=PASS if slack >= 0 else FAIL,
    )


def check_mod_log_sobolev(p: Density, snapshots: Sequence[Density], dt: float, c: float = 1.0, tol: float = 1e-12, digest_: Optional[str] = None) -> CheckReport:
    """``int p ln p <= 0 <= C int |d_t p|^2``.

    The operational hypothesis is ``max p < 1``: then ``ln p < 0``
    pointwise, which is the regime the inequality is stated for.  Outside
    it the report says so instead of failing.
    """
    t0 = time.perf_counter()
    if len(snapshots) < 2:
        raise WindowError("need at least two snapshots for the kinetic term")
    _same_grid(list(snapshots) + [p])
    neg_entropy = -entropy(p)
    rates = [(b.values - a.values) / dt for a, b in zip(snapshots[:-1], snapshots[1:])]
    kinetic = float(c * np.mean([p.grid.integrate(r**2) for r in rates]))
    pmax = float(p.values.max())
    measured = {"positive_entropy": neg_entropy, "kinetic": kinetic, "max_density": pmax, "C": c}
    slack = min(-neg_entropy, kinetic)
    dig = digest_ or digest(p, *snapshots, dt, c)
    if pmax >= 1.0:
        return _report("mod-log-sobolev", dig, measured, {"max_density": "< 1"}, slack, tol, t0, status=HYPOTHESIS_NOT_MET,
                       notes="density exceeds 1 somewhere; the inequality is outside its stated scope")
    return _report("mod-log-sobolev", dig, measured, {"chain": "int p ln p <= 0 <= C int |dp/dt|^2"}, slack, tol, t0)


def check_bogoliubov_chain(sys: GaussianSystem, trials: int = 1000, seed: int = 0, tol: float = 1e-10, strict_fraction: float = 0.99) -> CheckReport:
    """``F(q mismatched) >= F(q with exact covariance) >= -ln p(mu, b)`` over random draws.

    Each trial draws ``b`` from its marginal, ``mu`` near ``mu_hat_b`` and a
    recognition covariance scaled by a random SPD factor.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    sync = build_sync_map(sys)
    de, db, dm = sys.dims["eta"], sys.dims["b"], sys.dims["mu"]
    _, s_post = posterior_eta(sys, np.zeros(db))
    q_opt = RecognitionDensity(sync, s_post)
    chol_b = np.linalg.cholesky(sys.block_cov("b"))
    chol_m = np.linalg.cholesky(sys.conditional_cov("mu", "b"))
    chol_p = np.linalg.cholesky(s_post)
    min_slack = np.inf
    strict = 0
    for _ in range(int(trials)):
        b = sys.block_mean("b") + chol_b @ rng.normal(size=db)
        mu = sync.bold_mu(b) + chol_m @ rng.normal(size=dm)
        a = rng.normal(size=(de, de))
        factor = a @ a.T / de + 0.1 * np.eye(de)
        q_bad = RecognitionDensity(sync, chol_p @ factor @ chol_p.T)
        f_tilde, _ = variational_free_energy(sys, q_bad, mu, b)
        f_opt, _ = variational_free_energy(sys, q_opt, mu, b)
        s = surprisal(sys, mu, b)
        lo = min(f_tilde - f_opt, f_opt - s)
        min_slack = min(min_slack, lo)
        strict += lo > 1e-12
    b = sys.block_mean("b")
    eq_gap = abs(variational_free_energy(sys, q_opt, sync.bold_mu(b), b)[0] - surprisal(sys, sync.bold_mu(b), b))
    frac = strict / max(int(trials), 1)
    status = PASS if (min_slack >= -tol and frac >= strict_fraction and eq_gap <= tol) else FAIL
    return _report(
        "bogoliubov-chain",
        digest(sys.mean, sys.cov, trials, seed=seed),
        {"min_slack": min_slack, "strict_fraction": frac, "equality_gap_at_expected_state": eq_gap, "trials": int(trials)},
        {"min_slack": -tol, "strict_fraction": strict_fraction},
        min_slack,
        tol,
        t0,
        status=status,
    )


def check_second_law_ledger(joint_snapshots: Sequence[Density], tol: float = 1e-6, digest_: Optional[str] = None) -> CheckReport:
    """Subadditivity ``S[x, y] <= S[x] + S[y]`` and ``I >= 0`` along 2D snapshots."""
    t0 = time.perf_counter()
    if not joint_snapshots:
        raise WindowError("no snapshots")
    if joint_snapshots[0].grid.dims != 2:
        raise DimensionalityError("the ledger needs joint two-dimensional snapshots")
    _same_grid(joint_snapshots)
    mi = np.array([mutual_information(p) for p in joint_snapshots])
    slack = np.array([entropy(p.marginal(0)) + entropy(p.marginal(1)) - entropy(p) for p in joint_snapshots])
    worst = float(min(slack.min(), mi.min()))
    return _report(
        "second-law-ledger",
        digest_ or digest(*joint_snapshots),
        {"mutual_information": mi, "subadditivity_slack": slack},
        {"min_slack": -tol},
        worst,
        tol,
        t0,
    )


def _batch_se(x: np.ndarray, n_batches: int) -> float:
    means = np.array([c.mean() for c in np.array_split(x, n_batches)])
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def check_stochastic_entropy(traj: Trajectory, p: Density, burn_in: int = 0, n_batches: int = 20, digest_: Optional[str] = None) -> CheckReport:
    """Time average of ``-ln p(x_t)`` against ``entropy(p)`` within 3 batch-means standard errors.

    Split-half means more than 5 standard errors apart mark the window as
    non-stationary.
    """
    t0 = time.perf_counter()
    x = traj.window(burn_in)
    if len(x) < 2 * n_batches:
        raise WindowError("trajectory window too short for batch means")
    s = -p.log_pdf_at(x)
    mean = float(s.mean())
    se = _batch_se(s, n_batches)
    half = len(s) // 2
    h1, h2 = s[:half], s[half:]
    se_split = float(np.hypot(_batch_se(h1, n_batches // 2), _batch_se(h2, n_batches // 2)))
    split_diff = float(abs(h1.mean() - h2.mean()))
    target = entropy(p)
    err = abs(mean - target)
    measured = {"mean_surprisal": mean, "standard_error": se, "split_half_difference": split_diff, "samples": len(s)}
    dig = digest_ or digest(traj, p, burn_in, seed=traj.seed)
    if split_diff > 5 * se_split:
        return _report("stochastic-entropy", dig, measured, {"entropy": target}, 3 * se - err, 0.0, t0, status=STATIONARITY_VIOLATION)
    return _report("stochastic-entropy", dig, measured, {"entropy": target, "band": "3 s.e."}, 3 * se - err, 0.0, t0,
                   status=PASS if err <= 3 * se and se > 0 else FAIL)


def suite_exit_code(reports: Sequence[CheckReport]) -> int:
    """0 iff every report passed, ignoring those whose hypothesis was not met."""
    return 0 if all(r.passed or r.status == HYPOTHESIS_NOT_MET for r in reports) else 1


def reports_to_json(reports: Sequence[CheckReport], include_runtime: bool = False) -> str:
    return json.dumps([r.to_dict(include_runtime) for r in reports], indent=2, sort_keys=True)


def bound_check(name: str, measured: dict, target: dict, slack: float, tolerance: float = 0.0, digest_: str = "", status: Optional[str] = None, notes: str = "") -> CheckReport:
    """Report for an ad-hoc bound: passes iff ``slack >= -tolerance`` unless ``status`` is given."""
    return _report(name, digest_, measured, target, slack, tolerance, time.perf_counter(), status=status, notes=notes)


def negative_control(report: CheckReport) -> CheckReport:
    """Invert a report built from input that must fail: it passes only if the underlying check did not."""
    ok = report.status in (FAIL, STATIONARITY_VIOLATION)
    return CheckReport(
        f"negative-control:{report.name}",
        report.digest,
        {**report.measured, "underlying_status": report.status},
        report.target,
        -report.slack,
        report.tolerance,
        PASS if ok else FAIL,
        report.runtime,
        "underlying check must fail on this input",
    )
