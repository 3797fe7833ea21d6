"""Registry of named experiments run by the command line tool.

Each experiment is a function ``(ctx, params, outdir) -> list[CheckReport]``
that writes its artifacts under ``outdir`` only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize

from . import blanket as bl
from . import diagnostics as dg
from .core import Density, Grid, Region, fisher_information, kl_divergence, region_mass, total_variation
from .dynamics import (
    DriftSpec,
    Trajectory,
    _write_csv,
    density_to_csv,
    divergence,
    empirical_density,
    evolve_fokker_planck,
    occupation_fraction,
    simulate,
    stationary_current,
)
from .gauge import GaugeStructure, horizontal_flow, lariat_drift, trapping_check, vertical_flow
from .maxent import ConstraintSet, constant, gibbs_density, indicator_complement, linear, quadratic, quadratic_form, solve


@dataclass(frozen=True)
class Context:
    config: dict
    config_hash: str

    def digest(self, seed=None) -> str:
        return dg.digest(self.config_hash, seed=seed)

    def grid(self) -> Grid:
        g = self.config["grid"]
        if g.get("dims", 1) == 2:
            return Grid.square(g["lower"], g["upper"], g["points"])
        return Grid.line(g["lower"], g["upper"], g["points"])

    def constraints(self, smooth_only: bool = False) -> ConstraintSet:
        grid = self.grid()
        specs = self.config.get("constraints", [])
        smooth = [s for s in specs if s["preset"] != "indicator_complement"]
        base = ConstraintSet.of(*[_build(s, grid, None) for s in smooth], multipliers=[s.get("multiplier", 1.0) for s in smooth])
        if smooth_only:
            return base
        bars = [s for s in specs if s["preset"] == "indicator_complement"]
        if not bars:
            return base
        extra = ConstraintSet.of(*[_build(s, grid, base) for s in bars], multipliers=[s.get("multiplier", 1.0) for s in bars])
        return base + extra

    def drift(self, constraints: ConstraintSet | None = None) -> DriftSpec:
        d = self.config.get("drift", {})
        cs = self.constraints() if constraints is None else constraints
        return DriftSpec(cs, self.grid(), solenoidal=d.get("Q"), diffusion=d.get("D", 1.0))

    def region(self, spec: dict) -> Region:
        return build_region(self.grid(), self.constraints(smooth_only=True), spec)

    def system(self) -> bl.GaussianSystem:
        b = self.config.get("blanket", {})
        if "generator" in b:
            return bl.system_from_config(b)
        rng = np.random.default_rng(b.get("seed", 0))
        return bl.GaussianSystem.random_blanketed(rng, tuple(b.get("dims", (1, 1, 1))))


def build_region(grid: Grid, smooth: ConstraintSet, spec: dict) -> Region:
    if "box" in spec:
        lo, hi = spec["box"]
        return Region.box(grid, lo, hi)
    j = smooth.potential_field(grid)
    return Region(grid, j <= spec["sublevel"])


def _build(spec: dict, grid: Grid, smooth: ConstraintSet | None):
    p = spec["preset"]
    t = spec.get("target")
    if p == "linear":
        return linear(spec.get("coef", 1.0), target=t)
    if p == "quadratic":
        return quadratic(spec.get("center", 0.0), spec.get("scale", 1.0), target=t)
    if p == "quadratic_form":
        return quadratic_form(spec["precision"], spec.get("center"), target=t)
    if p == "constant":
        return constant(spec["c"])
    if p == "indicator_complement":
        return indicator_complement(build_region(grid, smooth, spec["region"]), spec.get("kappa", 50.0), target=t)
    raise ValueError(p)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(dg._jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def _batch_se(x: np.ndarray, n_batches: int = 20) -> float:
    means = np.array([c.mean() for c in np.array_split(x, n_batches)])
    return float(means.std(ddof=1) / np.sqrt(n_batches))


# --------------------------------------------------------------------------


def maxent_solve(ctx: Context, params: dict, out: Path):
    grid = ctx.grid()
    cs = ctx.constraints()
    tol = params.get("tol", 1e-10)
    sol = solve(cs, grid, tol=tol, max_iter=params.get("max_iter", 200))
    density_to_csv(sol.density, out / "density.csv")
    _write_json(out / "multipliers.json", {
        "names": [c.name for c in cs.constraints],
        "multipliers": sol.multipliers,
        "residuals": sol.moment_residuals,
        "iterations": sol.iterations,
        "converged": sol.converged,
    })
    reports = [dg.bound_check("maxent-moments", {"max_residual": sol.max_residual, "iterations": sol.iterations},
                              {"max_residual": tol}, tol - sol.max_residual, digest_=ctx.digest())]
    if "expected_multipliers" in params:
        mtol = params.get("multiplier_tol", 1e-6)
        err = float(np.max(np.abs(sol.multipliers - np.asarray(params["expected_multipliers"]))))
        reports.append(dg.bound_check("maxent-multipliers", {"multipliers": sol.multipliers, "max_error": err},
                                      {"expected": params["expected_multipliers"], "tol": mtol}, mtol - err, digest_=ctx.digest()))
    return reports


def fp_relax(ctx: Context, params: dict, out: Path):
    grid = ctx.grid()
    drift = ctx.drift()
    p_inf = drift.stationary_density()
    p0 = Density.gaussian(grid, params.get("initial_mean", 2.0), params.get("initial_var", 0.25) * np.eye(grid.dims))
    dt = params["dt"]
    every = params.get("save_every", 1)
    snaps = evolve_fokker_planck(p0, drift, params["t_final"], dt, save_every=every)
    t = np.arange(len(snaps)) * dt * every
    kls = np.array([kl_divergence(p, p_inf) for p in snaps])
    fis = np.array([drift.diffusion * fisher_information(p, p_inf) for p in snaps])
    _write_csv(out / "kl.csv", ["t", "kl", "d_fisher"], np.column_stack([t, kls, fis]))
    density_to_csv(snaps[-1], out / "final_density.csv")
    reports = [
        dg.check_lyapunov(snaps, p_inf, digest_=ctx.digest()),
        dg.check_de_bruijn(snaps, p_inf, dt * every, diffusion=drift.diffusion, digest_=ctx.digest()),
    ]
    if "expected_slope" in params:
        lo, hi = params.get("slope_window", (0.2, 1.2))
        sel = (t >= lo) & (t <= hi)
        slope = float(np.polyfit(t[sel], np.log(kls[sel]), 1)[0])
        want = params["expected_slope"]
        reports.append(dg.bound_check("kl-log-slope", {"slope": slope, "window": [lo, hi]}, {"slope": want, "relative_tol": 0.1},
                                      0.1 * abs(want) - abs(slope - want), digest_=ctx.digest()))
    return reports


def langevin_sample(ctx: Context, params: dict, out: Path):
    grid = ctx.grid()
    drift = ctx.drift()
    p = drift.stationary_density()
    burn = params.get("burn_in", 1000)
    every = params.get("write_every", 100)
    x0 = params.get("x0", [0.0] * grid.dims)
    mean_ref = p.mean()
    var_ref = np.diag(p.covariance())
    reports = []
    for seed in params["seeds"]:
        tr = simulate(drift, x0, params["steps"], params["dt"], seed)
        Trajectory(tr.states[::every], tr.dt * every, seed).to_csv(out / f"trajectory_seed{seed}.csv")
        w = tr.window(burn)
        for k in range(grid.dims):
            m_se = _batch_se(w[:, k])
            m_err = abs(float(w[:, k].mean()) - mean_ref[k])
            reports.append(dg.bound_check(f"langevin-mean[{k}]", {"mean": float(w[:, k].mean()), "standard_error": m_se},
                                          {"mean": mean_ref[k], "band": "3 s.e."}, 3 * m_se - m_err, digest_=ctx.digest(seed)))
            sq = (w[:, k] - mean_ref[k]) ** 2
            v_se = _batch_se(sq)
            v_err = abs(float(sq.mean()) - var_ref[k])
            reports.append(dg.bound_check(f"langevin-variance[{k}]", {"variance": float(sq.mean()), "standard_error": v_se},
                                          {"variance": var_ref[k], "band": "3 s.e."}, 3 * v_se - v_err, digest_=ctx.digest(seed)))
        reports.append(dg.check_stochastic_entropy(tr, p, burn, digest_=ctx.digest(seed)))
        if "region" in params:
            a = ctx.region(params["region"])
            occ = occupation_fraction(tr, a, burn)
            mass = region_mass(p, a)
            tol = params.get("occupation_tol", 0.02)
            reports.append(dg.bound_check("occupation", {"occupation": occ}, {"gibbs_mass": mass, "tol": tol},
                                          tol - abs(occ - mass), digest_=ctx.digest(seed)))
    return reports


def ness_current(ctx: Context, params: dict, out: Path):
    grid = ctx.grid()
    drift = ctx.drift()
    p = drift.stationary_density()
    cur = stationary_current(p, drift)
    cur.to_csv(out / "current.csv")
    div = float(np.max(np.abs(divergence(cur))))
    dtol = params.get("divergence_tol", 1e-6)
    cmin = params.get("current_min", 0.01)
    reports = [
        dg.bound_check("ness-current-magnitude", {"max_norm": cur.max_norm()}, {"min": cmin}, cur.max_norm() - cmin, digest_=ctx.digest()),
        dg.bound_check("ness-current-divergence", {"max_abs_divergence": div}, {"max": dtol}, dtol - div, digest_=ctx.digest()),
    ]
    hist = Grid.square(grid.lower[0], grid.upper[0], params.get("histogram_points", 41))
    p_hist = gibbs_density(drift.potential, hist)
    tv_tol = params.get("tv_tol", 0.05)
    for seed in params["seeds"]:
        tr = simulate(drift, [0.0] * grid.dims, params["steps"], params["dt"], seed)
        emp = empirical_density(tr, hist, params.get("burn_in", 1000))
        density_to_csv(emp, out / f"empirical_seed{seed}.csv")
        tv = total_variation(emp, p_hist)
        reports.append(dg.bound_check("ness-empirical-tv", {"tv": tv}, {"max": tv_tol}, tv_tol - tv, digest_=ctx.digest(seed)))
        reports.append(dg.check_stochastic_entropy(tr, p, params.get("burn_in", 1000), digest_=ctx.digest(seed)))
    return reports


def blanket_abil(ctx: Context, params: dict, out: Path):
    seed = params.get("seeds", [0])[0]
    rng = np.random.default_rng(seed)
    tol = params.get("tol", 1e-6)
    errs = []
    for _ in range(params.get("n_systems", 100)):
        db = int(rng.integers(1, 3))
        dims = (int(rng.integers(1, 4)), db, int(rng.integers(db, 4)))
        sys = bl.GaussianSystem.random_blanketed(rng, dims)
        b = sys.block_mean("b") + rng.normal(size=db)
        res = bl.minimize_free_energy(sys, b, mu0=rng.normal(size=dims[2]) * 5)
        errs.append(float(np.max(np.abs(res.mu - bl.build_sync_map(sys).bold_mu(b)))))
    worst = max(errs)
    sys = ctx.system()
    b = np.asarray(ctx.config.get("blanket", {}).get("b", sys.block_mean("b")), dtype=float)
    _write_json(out / "blanket.json", bl.blanket_report(sys, b))
    _write_json(out / "abil.json", {"argmin_errors": errs})
    return [
        dg.bound_check("abil-argmin", {"max_error": worst, "systems": len(errs)}, {"max_error": tol}, tol - worst, digest_=ctx.digest(seed)),
        dg.check_bogoliubov_chain(sys, trials=params.get("trials", 1000), seed=seed),
    ]


def maxent_fep_dual(ctx: Context, params: dict, out: Path):
    sys = ctx.system()
    b = np.asarray(params.get("b", ctx.config.get("blanket", {}).get("b", sys.block_mean("b"))), dtype=float)
    tol = params.get("tol", 1e-8)
    good = bl.maxent_dual_check(sys, b, tol=tol)
    eps = params.get("broken_perturbation", 0.2)
    cov = np.array(sys.cov)
    i, j = sys.index("eta")[0], sys.index("mu")[0]
    delta = eps * np.sqrt(cov[i, i] * cov[j, j])
    cov[i, j] += delta
    cov[j, i] += delta
    broken = bl.maxent_dual_check(bl.GaussianSystem(sys.mean, cov, sys.dims), b, tol=tol)
    mmin = params.get("mismatch_min", 1e-3)
    _write_json(out / "dual.json", {
        "route": good.route,
        "sigma_inv_eta_hat": good.sigma_inv_eta_hat,
        "mu_hat": good.mu_hat,
        "maxent_match_error": good.maxent_match_error,
        "broken_match_error": broken.maxent_match_error,
        "broken_blanket_violation": broken.blanket_violation,
    })
    return [
        dg.bound_check("maxent-fep-dual", {"match_error": good.maxent_match_error, "route": good.route}, {"max": tol},
                       tol - good.maxent_match_error, digest_=ctx.digest()),
        dg.bound_check("maxent-fep-dual-broken-blanket", {"match_error": broken.maxent_match_error}, {"min": mmin},
                       broken.maxent_match_error - mmin, digest_=ctx.digest()),
    ]


def _mode_and_curvature(gs: GaugeStructure):
    grid = gs.grid
    j = gs.constraints.potential_field(grid)
    start = grid.coords[np.unravel_index(np.argmin(j), grid.shape)]
    res = optimize.minimize(lambda x: float(gs.constraints.delta_potential(x, start)), start,
                            jac=lambda x: gs.gradient(x), method="BFGS", options={"gtol": 1e-13})
    mode = res.x
    h = 1e-4
    hess = np.array([(gs.gradient(mode + h * e) - gs.gradient(mode - h * e)) / (2 * h) for e in np.eye(grid.dims)])
    return mode, float(np.linalg.eigvalsh(0.5 * (hess + hess.T))[0])


def gauge_flows(ctx: Context, params: dict, out: Path):
    grid = ctx.grid()
    gs = GaugeStructure(ctx.constraints(smooth_only=True), grid)
    seed = params.get("seeds", [0])[0]
    rng = np.random.default_rng(seed)
    tol = params.get("tol", 1e-6)
    step = params.get("step", 0.1)
    mode, curv = _mode_and_curvature(gs)
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    centre, half = 0.5 * (lo + hi), 0.25 * (hi - lo)
    ends = []
    for _ in range(params.get("n_starts", 100)):
        x0 = centre + half * rng.uniform(-1, 1, size=grid.dims)
        ends.append(vertical_flow(gs, x0, step, tol * curv).states[-1])
    ends = np.array(ends)
    dist = float(np.max(np.linalg.norm(ends - mode, axis=1)))
    _write_csv(out / "vertical_endpoints.csv", ["x", "y"][: grid.dims], ends)
    reports = [dg.bound_check("vertical-flow-mode", {"max_distance": dist, "mode": mode}, {"max": tol}, tol - dist, digest_=ctx.digest(seed))]
    if grid.dims == 2:
        x0 = np.asarray(params.get("orbit_start", (mode + np.array([1.0, 0.0])).tolist()), dtype=float)
        orbit = horizontal_flow(gs, x0, params.get("orbit_steps", 6283), params.get("orbit_step", 1e-3))
        orbit.to_csv(out / "orbit.csv")
        drift_j = float(np.max(np.abs(gs.constraints.delta_potential(orbit.states, x0))))
        closure = float(np.linalg.norm(orbit.states[-1] - x0))
        reports.append(dg.bound_check("horizontal-flow-level", {"max_j_drift": drift_j, "closure": closure}, {"max": 1e-5},
                                      1e-5 - drift_j, digest_=ctx.digest()))
    return reports


def trapping(ctx: Context, params: dict, out: Path):
    grid = ctx.grid()
    gs = GaugeStructure(ctx.constraints(smooth_only=True), grid)
    a = ctx.region(params["region"])
    kappa = params.get("kappa", 50.0)
    d = ctx.config.get("drift", {})
    drift = lariat_drift(gs, a, kappa, diffusion=d.get("D", 1.0), solenoidal=d.get("Q"))
    seed = params["seeds"][0]
    rep = trapping_check(gs, a, drift, params.get("n_traj", 100), params.get("horizon", 50.0), params.get("dt", 0.01), seed)
    _write_json(out / "trapping.json", rep)
    if kappa >= 50:
        slack, target = 1e-3 - rep["outside_fraction"], {"max": 1e-3}
    else:
        tol = params.get("tol", 0.02)
        slack = tol - abs(rep["outside_fraction"] - (1 - rep["gibbs_mass_A"]))
        target = {"outside_fraction": 1 - rep["gibbs_mass_A"], "tol": tol}
    return [dg.bound_check("trapping", rep, target, slack, digest_=ctx.digest(seed),
                           notes="finite-horizon statistic; recurrence itself is asymptotic")]


def diagnostics_suite(ctx: Context, params: dict, out: Path):
    """A fixed battery of checks on small reference problems, with negative controls."""
    seed = params.get("seeds", [0])[0]
    steps = params.get("steps", 200_000)
    dig = ctx.digest(seed)
    reports = []

    g1 = Grid.line(-8, 8, 401)
    d1 = DriftSpec(ConstraintSet.of(quadratic(0.0, 2.0)), g1)
    p1 = d1.stationary_density()
    snaps = evolve_fokker_planck(Density.gaussian(g1, 2.0, 0.25), d1, 2.0, 4e-4, save_every=25)
    reports.append(dg.check_lyapunov(snaps, p1, digest_=dig))
    reports.append(dg.check_de_bruijn(snaps, p1, 0.01, digest_=dig))
    reports.append(dg.check_mod_log_sobolev(p1, snaps, 0.01, digest_=dig))
    reports.append(dg.negative_control(dg.check_lyapunov(snaps[::-1], p1, digest_=dig)))

    sys = bl.GaussianSystem.random_blanketed(np.random.default_rng(seed), (2, 1, 2))
    reports.append(dg.check_bogoliubov_chain(sys, trials=1000, seed=seed))

    g2 = Grid.square(-6, 6, 61)
    rho = 0.5
    prec = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))
    d2 = DriftSpec(ConstraintSet.of(quadratic_form(prec)), g2)
    joint = evolve_fokker_planck(Density.gaussian(g2, [1.0, -1.0], 0.5 * np.eye(2)), d2, 2.0, 2e-3, save_every=50)
    reports.append(dg.check_second_law_ledger(joint, digest_=dig))

    tr = simulate(d1, [0.0], steps, 0.01, seed)
    reports.append(dg.check_stochastic_entropy(tr, p1, 1000, digest_=dig))
    reports.append(dg.negative_control(dg.check_stochastic_entropy(Trajectory(np.zeros(2000), 0.01), p1, digest_=dig)))
    _write_csv(out / "kl.csv", ["t", "kl"], np.column_stack([np.arange(len(snaps)) * 0.01, [kl_divergence(s, p1) for s in snaps]]))

    if params.get("inject_failure", False):
        rep = dg.check_lyapunov(snaps[::-1], p1, digest_=dig)
        rep.name = "lyapunov[injected-failure]"
        reports.append(rep)
    return reports


@dataclass(frozen=True)
class Experiment:
    name: str
    func: Callable
    description: str
    anchor: str
    stochastic: bool = False


REGISTRY = {
    e.name: e
    for e in [
        Experiment("maxent-solve", maxent_solve, "solve moment constraints for the max-ent density", "exponential family from a mean constraint"),
        Experiment("fp-relax", fp_relax, "Fokker-Planck relaxation to the Gibbs density", "constraint as potential; KL as Lyapunov function"),
        Experiment("langevin-sample", langevin_sample, "Euler-Maruyama sampling and occupation statistics", "occupation-time ergodicity", True),
        Experiment("ness-current", ness_current, "solenoidal steady state: density and probability current", "effective equilibrium of a NESS", True),
        Experiment("blanket-abil", blanket_abil, "free-energy minimiser equals the expected internal state", "approximate Bayesian inference lemma", True),
        Experiment("maxent-fep-dual", maxent_fep_dual, "max-ent over internal states reproduces p(mu | b)", "max-ent / free-energy duality"),
        Experiment("gauge-flows", gauge_flows, "vertical descent to the mode and horizontal level-set orbits", "funnel: gauge force and parallel exploration", True),
        Experiment("trapping", trapping, "occupation of an attractor under a strengthened potential", "lariat and local ergodicity", True),
        Experiment("diagnostics-suite", diagnostics_suite, "battery of identity and inequality checks", "Lyapunov, de Bruijn, Bogoliubov, subadditivity, stochastic entropy", True),
    ]
}
