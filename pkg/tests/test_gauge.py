import numpy as np
import pytest

from maxent_fep.core import Grid, Region
from maxent_fep.dynamics import DriftSpec
from maxent_fep.errors import (
    DegenerateContourError,
    DimensionalityError,
    DomainError,
    InvariantViolationError,
    RegionShapeError,
    StabilityError,
)
from maxent_fep.gauge import (
    GaugeStructure,
    hausdorff_distance,
    horizontal_flow,
    is_sublevel_set,
    lariat_drift,
    parallel_transport,
    split_velocity,
    trapping_check,
    vertical_flow,
)
from maxent_fep.maxent import ConstraintSet, gibbs_density, indicator_complement, linear, quadratic_form

GRID = Grid.square(-4, 4, 81)


def bowl(precision=np.eye(2), center=None, grid=GRID):
    return GaugeStructure(ConstraintSet.of(quadratic_form(precision, center), multipliers=[1.0]), grid)


def sublevel(gs, level):
    return Region(gs.grid, gs.constraints.potential_field(gs.grid) <= level)


# structure ----------------------------------------------------------------


def test_connection_matches_numerical_gradient():
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]), center=[0.3, -0.2])
    numeric = GRID.gradient(gs.constraints.potential_field(GRID))
    # second-order differences are exact on quadratics
    assert np.max(np.abs(gs.connection - numeric)) < 1e-8


def test_field_is_gibbs_density():
    gs = bowl()
    assert np.max(np.abs(gs.field.values - gibbs_density(gs.constraints, GRID).values)) < 1e-12


def test_barrier_constraints_rejected():
    a = Region.box(GRID, [-1, -1], [1, 1])
    with pytest.raises(InvariantViolationError):
        GaugeStructure(ConstraintSet.of(indicator_complement(a), multipliers=[1.0]), GRID)


# parallel transport -------------------------------------------------------


def test_transport_closed_loop():
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]))
    t = np.linspace(0, 2 * np.pi, 200)
    loop = np.column_stack([1.5 * np.cos(t) + 0.2, np.sin(t)])
    loop[-1] = loop[0]
    assert parallel_transport(gs, loop, 0.7)[-1] == pytest.approx(0.7, abs=1e-8)


def test_transport_along_isocontour_is_constant():
    gs = bowl()
    t = np.linspace(0, np.pi, 50)
    values = parallel_transport(gs, np.column_stack([np.cos(t), np.sin(t)]), 1.0)
    # chords of a circle dip inside it; the transported value is exact at vertices
    assert np.max(np.abs(values - 1.0)) < 1e-12


def test_transport_unit_potential_drop():
    gs = GaugeStructure(ConstraintSet.of(linear([1.0, 0.0]), multipliers=[1.0]), GRID)
    values = parallel_transport(gs, [[-0.5, 0.2], [0.5, 0.2]], 2.0)
    assert values[-1] == pytest.approx(2.0 / np.e, abs=1e-6)


def test_transport_matches_closed_form_endpoint(rng):
    gs = bowl(np.array([[1.5, -0.3], [-0.3, 0.8]]), center=[0.2, 0.1])
    start, end = np.array([-2.0, 1.0]), np.array([1.5, -0.5])
    expected = 0.3 * np.exp(-float(gs.constraints.delta_potential(end, start)))
    ends = []
    for _ in range(10):
        mid = rng.uniform(-3, 3, size=(rng.integers(1, 6), 2))
        ends.append(parallel_transport(gs, np.vstack([start, mid, end]), 0.3)[-1])
    assert np.max(np.abs(np.array(ends) - expected)) < 1e-6


def test_transport_errors():
    gs = bowl()
    with pytest.raises(DomainError):
        parallel_transport(gs, [[0, 0], [5, 0]], 1.0)
    with pytest.raises(InvariantViolationError):
        parallel_transport(gs, [[0, 0], [1, 0]], 0.0)


# split --------------------------------------------------------------------


def test_split_hand_projection():
    s = split_velocity(bowl(), [1.0, 0.0], [1.0, 1.0])
    assert np.allclose(s.vertical, [1.0, 0.0], atol=1e-15)
    assert np.allclose(s.horizontal, [0.0, 1.0], atol=1e-15)
    assert s.residual < 1e-10


def test_split_pure_components():
    gs = bowl()
    g = gs.gradient([0.6, -0.8])
    assert np.allclose(split_velocity(gs, [0.6, -0.8], 2 * g).horizontal, 0.0, atol=1e-15)
    assert np.allclose(split_velocity(gs, [0.6, -0.8], [g[1], -g[0]]).vertical, 0.0, atol=1e-15)


def test_split_at_stationary_point():
    s = split_velocity(bowl(), [0.0, 0.0], [1.0, 2.0])
    assert s.degenerate
    assert np.array_equal(s.vertical, [0.0, 0.0])
    assert np.array_equal(s.horizontal, [1.0, 2.0])


def test_split_reconstructs_velocity(rng):
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]))
    for _ in range(200):
        x, v = rng.uniform(-3, 3, 2), rng.normal(size=2) * 5
        s = split_velocity(gs, x, v)
        assert np.max(np.abs(s.vertical + s.horizontal - v)) < 1e-12
        assert abs(s.vertical @ s.horizontal) < 1e-10


def test_split_invariant_under_rescaling():
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]))
    big = GaugeStructure(gs.constraints.scaled(3.7), GRID)
    a, b = split_velocity(gs, [1.0, -0.4], [0.3, 2.0]), split_velocity(big, [1.0, -0.4], [0.3, 2.0])
    assert np.allclose(a.vertical, b.vertical, atol=1e-14)


# vertical flow ------------------------------------------------------------


def test_vertical_flow_reaches_mode():
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]), center=[0.5, -1.0])
    tr = vertical_flow(gs, [3.0, 3.0], 0.1, tol=1e-8)
    end = tr.states[-1]
    # |grad J| < tol at the end, so |x - mode| < tol / lambda_min
    assert np.linalg.norm(end - [0.5, -1.0]) < 1e-8 / np.linalg.eigvalsh([[2.0, 0.5], [0.5, 1.0]])[0]
    j = gs.potential(tr.states)
    assert np.all(np.diff(j) <= 0)


def test_vertical_flow_from_mode_is_empty():
    assert len(vertical_flow(bowl(), [0.0, 0.0], 0.1)) == 1


def test_vertical_flow_rejects_large_step():
    with pytest.raises(StabilityError):
        vertical_flow(bowl(), [1.0, 0.5], 2.5)


def test_vertical_flow_direction_is_surprisal_descent():
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]))
    tr = vertical_flow(gs, [3.0, -2.0], 0.05)
    steps = np.diff(tr.states, axis=0)[:20]
    # -ln p = J + ln Z, so its gradient is the connection; use the grid density as the oracle
    log_p = np.log(gs.field.values)
    surprisal_grad = -GRID.gradient(log_p)
    from scipy.interpolate import RegularGridInterpolator

    interp = [RegularGridInterpolator(GRID.axes, surprisal_grad[..., k], method="cubic") for k in range(2)]
    for x, s in zip(tr.states[:20], steps):
        g = np.array([f(x)[0] for f in interp])
        assert np.allclose(s / np.linalg.norm(s), -g / np.linalg.norm(g), atol=1e-8)


def test_vertical_flow_stays_in_sublevel_set(rng):
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]))
    level = 2.0
    for x0 in rng.uniform(-1.5, 1.5, size=(10, 2)):
        if gs.potential(x0) > level:
            continue
        tr = vertical_flow(gs, x0, 0.1)
        assert np.all(gs.potential(tr.states) <= level)


# horizontal flow ----------------------------------------------------------


def test_horizontal_circle_orbit():
    gs = bowl()
    step = 2 * np.pi / 2000
    tr = horizontal_flow(gs, [1.0, 0.0], 2000, step)
    r = np.linalg.norm(tr.states, axis=1)
    assert np.max(np.abs(r - 1.0)) < 1e-5
    assert np.linalg.norm(tr.states[-1] - [1.0, 0.0]) < 1e-3
    p = np.exp(-gs.potential(tr.states))
    assert np.ptp(p) < 1e-5


def test_horizontal_single_step_tangency():
    gs = bowl()
    h = 1e-2
    x1 = np.array([1.0, 0.0]) + h * np.array([0.0, 1.0])
    assert abs(float(gs.constraints.delta_potential(x1, [1.0, 0.0]))) == pytest.approx(h**2 / 2, rel=1e-12)


def test_horizontal_ellipse_drift():
    gs = bowl(np.diag([4.0, 0.5]))
    tr = horizontal_flow(gs, [0.5, 0.0], 3000, 0.005)
    drift = np.abs(gs.constraints.delta_potential(tr.states, tr.states[0]))
    assert np.max(drift) < 1e-5


def test_horizontal_flow_errors():
    with pytest.raises(DegenerateContourError):
        horizontal_flow(bowl(), [0.0, 0.0], 10, 0.01)
    gs1 = GaugeStructure(ConstraintSet.of(linear(), multipliers=[1.0]), Grid.line(-1, 1, 21))
    with pytest.raises(DimensionalityError):
        horizontal_flow(gs1, [0.0], 10, 0.01)


# gauge invariance -----------------------------------------------------------


def test_constant_shift_is_bitwise_invariant():
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]))
    shifted = GaugeStructure(gs.constraints.shifted(17.25), GRID)
    assert np.array_equal(gs.connection, shifted.connection)
    assert np.array_equal(vertical_flow(gs, [2.0, 1.0], 0.1).states, vertical_flow(shifted, [2.0, 1.0], 0.1).states)
    assert np.array_equal(horizontal_flow(gs, [1.0, 0.0], 300, 0.01).states, horizontal_flow(shifted, [1.0, 0.0], 300, 0.01).states)
    a = split_velocity(gs, [1.0, 0.3], [0.4, -1.0])
    b = split_velocity(shifted, [1.0, 0.3], [0.4, -1.0])
    assert np.array_equal(a.vertical, b.vertical) and np.array_equal(a.horizontal, b.horizontal)


def test_rescaling_preserves_paths_as_sets():
    gs = bowl(np.array([[2.0, 0.5], [0.5, 1.0]]))
    big = GaugeStructure(gs.constraints.scaled(2.0), GRID)
    a = vertical_flow(gs, [2.0, 1.0], 0.02).states
    b = vertical_flow(big, [2.0, 1.0], 0.01).states
    assert hausdorff_distance(a, b) < GRID.spacing[0]
    ha = horizontal_flow(gs, [1.0, 0.0], 800, 0.01).states
    hb = horizontal_flow(big, [1.0, 0.0], 800, 0.01).states
    assert hausdorff_distance(ha, hb) < GRID.spacing[0]


# trapping -----------------------------------------------------------------


def test_sublevel_detection():
    gs = bowl()
    assert is_sublevel_set(gs, sublevel(gs, 2.0))
    assert not is_sublevel_set(gs, Region.box(GRID, [0, 0], [2, 2]))


def test_trapping_strengthened_potential():
    gs = bowl()
    a = sublevel(gs, 2.0)
    rep = trapping_check(gs, a, lariat_drift(gs, a, kappa=50.0), n_traj=100, horizon=50.0, seed=0)
    assert rep["outside_fraction"] < 1e-3
    assert set(rep) >= {"outside_fraction", "mean_first_exit", "n_reentries", "gibbs_mass_A"}


def test_trapping_without_strengthening_matches_gibbs_mass():
    gs = bowl()
    a = sublevel(gs, 2.0)
    rep = trapping_check(gs, a, lariat_drift(gs, a, kappa=0.0), n_traj=100, horizon=50.0, seed=0)
    # the chains start inside A, so early samples bias the fraction downward slightly
    assert rep["outside_fraction"] == pytest.approx(1 - rep["gibbs_mass_A"], abs=0.02)
    assert rep["n_reentries"] > 0


def test_trapping_requires_sublevel_set():
    gs = bowl()
    box = Region.box(GRID, [0, 0], [2, 2])
    with pytest.raises(RegionShapeError):
        trapping_check(gs, box, lariat_drift(gs, box), n_traj=2, horizon=0.1)


def test_trapping_requires_matching_potential():
    gs = bowl()
    a = sublevel(gs, 2.0)
    other = DriftSpec(ConstraintSet.of(quadratic_form(2 * np.eye(2)), multipliers=[1.0]), GRID)
    with pytest.raises(InvariantViolationError):
        trapping_check(gs, a, other, n_traj=2, horizon=0.1)
