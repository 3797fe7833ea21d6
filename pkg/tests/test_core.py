import numpy as np
import pytest
from scipy import stats

from maxent_fep.core import (
    Density,
    Grid,
    Region,
    entropy,
    fisher_information,
    gregory_weights,
    integrate,
    kl_divergence,
    mutual_information,
    region_mass,
    restrict,
    total_variation,
)
from maxent_fep.errors import (
    DegenerateRegionError,
    DimensionalityError,
    InvariantViolationError,
    NumericInputError,
    SupportMismatchError,
)

STD = Grid.line(-8, 8, 2001)


def bivariate(rho, n=201, lim=8.0):
    g = Grid.square(-lim, lim, n)
    return Density.gaussian(g, [0, 0], [[1, rho], [rho, 1]])


# grid ---------------------------------------------------------------------


def test_grid_shape_and_spacing():
    g = Grid((0.0, -1.0), (1.0, 1.0), (11, 21))
    assert g.shape == (11, 21)
    assert g.size == 231
    assert g.spacing == pytest.approx((0.1, 0.1))
    assert g.coords.shape == (11, 21, 2)


@pytest.mark.parametrize(
    "args, exc",
    [
        (((0.0,), (1.0,), (7,)), InvariantViolationError),
        (((1.0,), (0.0,), (10,)), InvariantViolationError),
        (((0.0,), (np.inf,), (10,)), NumericInputError),
        (((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (9, 9, 9)), DimensionalityError),
    ],
)
def test_grid_rejects_bad_construction(args, exc):
    with pytest.raises(exc):
        Grid(*args)


def test_quadrature_weights_exact_for_cubics():
    g = Grid.line(-1.0, 2.0, 31)
    x = g.axes[0]
    for k in range(4):
        assert g.integrate(x**k) == pytest.approx((2.0 ** (k + 1) - (-1.0) ** (k + 1)) / (k + 1), abs=1e-13)
    assert gregory_weights(10, 0.5).sum() == pytest.approx(4.5)


def test_grid_arrays_are_read_only():
    g = Grid.line(0, 1, 11)
    with pytest.raises(ValueError):
        g.coords[0] = 5.0


# integrate ----------------------------------------------------------------


def test_integrate_constant():
    assert integrate(np.ones(101), Grid.line(0, 1, 101)) == pytest.approx(1.0, abs=1e-14)


def test_integrate_linear():
    g = Grid.line(0, 1, 101)
    assert integrate(g.axes[0], g) == pytest.approx(0.5, abs=1e-14)


def test_integrate_gaussian_normalisation():
    x = STD.axes[0]
    assert integrate(np.exp(-x**2 / 2) / np.sqrt(2 * np.pi), STD) == pytest.approx(1.0, abs=1e-8)


def test_integrate_is_linear(rng):
    g = Grid.line(0, 3, 50)
    f, h = rng.normal(size=50), rng.normal(size=50)
    assert integrate(2 * f - 3 * h, g) == pytest.approx(2 * integrate(f, g) - 3 * integrate(h, g), abs=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_integrate_rejects_nonfinite(bad):
    f = np.ones(20)
    f[3] = bad
    with pytest.raises(NumericInputError):
        integrate(f, Grid.line(0, 1, 20))


def test_integrate_rejects_wrong_shape():
    with pytest.raises(DimensionalityError):
        integrate(np.ones(19), Grid.line(0, 1, 20))


# density ------------------------------------------------------------------


def test_density_validates_normalisation_and_sign():
    g = Grid.line(0, 1, 11)
    with pytest.raises(InvariantViolationError):
        Density(g, np.full(11, 2.0))
    bad = np.ones(11)
    bad[0] = -0.1
    with pytest.raises(InvariantViolationError):
        Density.from_unnormalized(g, bad)
    with pytest.raises(NumericInputError):
        Density(g, np.full(11, np.nan))
    with pytest.raises(DegenerateRegionError):
        Density.from_unnormalized(g, np.zeros(11))


def test_density_values_immutable():
    p = Density.uniform(Grid.line(0, 1, 11))
    with pytest.raises(ValueError):
        p.values[0] = 0.0


def test_density_moments():
    p = Density.gaussian(Grid.line(-10, 14, 2401), 2.0, 0.25)
    assert p.mean()[0] == pytest.approx(2.0, abs=1e-10)
    assert p.covariance()[0, 0] == pytest.approx(0.25, abs=1e-10)


def test_bin_masses_sum_to_one():
    p = Density.gaussian(Grid.square(-5, 5, 41), [0, 0], np.eye(2))
    assert p.bin_masses().sum() == pytest.approx(1.0, abs=1e-14)


def test_log_pdf_interpolates_log_density():
    p = Density.gaussian(STD, 0.0, 1.0)
    x = np.array([0.0, 0.1234, -2.5])
    assert np.allclose(p.log_pdf_at(x), stats.norm.logpdf(x), atol=1e-5)


# entropy --------------------------------------------------------------------


def test_entropy_uniform_unit_interval():
    assert entropy(Density.uniform(Grid.line(0, 1, 101))) == pytest.approx(0.0, abs=1e-14)


def test_entropy_uniform_on_two():
    assert entropy(Density.uniform(Grid.line(0, 2, 101))) == pytest.approx(np.log(2), abs=1e-12)


def test_entropy_standard_gaussian():
    assert entropy(Density.gaussian(STD, 0, 1)) == pytest.approx(0.5 * np.log(2 * np.pi * np.e), abs=1e-4)


def test_entropy_zero_log_zero_convention():
    g = Grid.line(0, 2, 201)
    p = restrict(Density.uniform(g), Region.box(g, 0.0, 1.0))
    assert np.isfinite(entropy(p))


# kl -------------------------------------------------------------------------


def test_kl_self_is_zero():
    p = Density.gaussian(STD, 0.3, 1.2)
    assert kl_divergence(p, p) == 0.0


def test_kl_mean_shift():
    p, q = Density.gaussian(STD, 0, 1), Density.gaussian(STD, 1, 1)
    assert kl_divergence(p, q) == pytest.approx(0.5, abs=1e-4)


def test_kl_variance_change():
    g = Grid.line(-16, 16, 4001)
    p, q = Density.gaussian(g, 0, 1), Density.gaussian(g, 0, 4)
    assert kl_divergence(p, q) == pytest.approx(np.log(2) + 1 / 8 - 1 / 2, abs=1e-4)


def test_kl_support_mismatch():
    g = Grid.line(0, 2, 201)
    p = Density.uniform(g)
    q = restrict(p, Region.box(g, 0.0, 1.0))
    with pytest.raises(SupportMismatchError):
        kl_divergence(p, q)
    assert kl_divergence(q, p) == pytest.approx(np.log(2), abs=1e-2)


def test_kl_tolerates_underflowed_gaussian_tails():
    # q ~ 1e-14 at the edges is tiny, not absent
    p, q = Density.gaussian(STD, 2.0, 0.5), Density.gaussian(STD, 0, 1)
    assert kl_divergence(p, q) > 0


def test_kl_grid_mismatch():
    with pytest.raises(DimensionalityError):
        kl_divergence(Density.uniform(Grid.line(0, 1, 11)), Density.uniform(Grid.line(0, 1, 12)))


# fisher ---------------------------------------------------------------------


def test_fisher_identical_is_zero():
    p = Density.gaussian(STD, 0, 1)
    assert fisher_information(p, p) == pytest.approx(0.0, abs=1e-20)


def test_fisher_mean_shift():
    assert fisher_information(Density.gaussian(STD, 0.5, 1), Density.gaussian(STD, 0, 1)) == pytest.approx(0.25, abs=1e-3)


def test_fisher_nonnegative_random(rng):
    g = Grid.line(0, 1, 64)
    for _ in range(20):
        p = Density.from_unnormalized(g, rng.uniform(0.1, 1, 64))
        q = Density.from_unnormalized(g, rng.uniform(0.1, 1, 64))
        assert fisher_information(p, q) >= 0


def test_fisher_rejects_vanishing_reference():
    g = Grid.line(0, 2, 201)
    ref = restrict(Density.uniform(g), Region.box(g, 0.0, 1.0))
    with pytest.raises(SupportMismatchError):
        fisher_information(Density.uniform(g), ref)


# mutual information --------------------------------------------------------


def test_mi_independent():
    assert mutual_information(bivariate(0.0)) == pytest.approx(0.0, abs=1e-4)


@pytest.mark.parametrize("rho", [0.5, 0.9])
def test_mi_correlated(rho):
    n = 201 if rho < 0.8 else 401
    assert mutual_information(bivariate(rho, n)) == pytest.approx(-0.5 * np.log(1 - rho**2), abs=1e-3)


def test_mi_rejects_1d():
    with pytest.raises(DimensionalityError):
        mutual_information(Density.uniform(Grid.line(0, 1, 11)))


# restrict / regions --------------------------------------------------------


def test_restrict_uniform():
    g = Grid.line(0, 2, 201)
    p = restrict(Density.uniform(g), Region.box(g, 0.0, 1.0))
    inside = g.axes[0] <= 1.0
    assert region_mass(p, Region.box(g, 0.0, 1.0)) == pytest.approx(1.0, abs=1e-12)
    assert np.all(p.values[~inside] == 0)
    assert np.allclose(p.values[inside][5:-5], 1.0, atol=2e-2)


def test_restrict_gaussian_mass():
    p = Density.gaussian(STD, 0, 1)
    a = Region.box(STD, -1.0, 1.0)
    # nodes at +-1 are included; the quadrature mass converges to the CDF value
    assert region_mass(p, a) == pytest.approx(stats.norm.cdf(1) - stats.norm.cdf(-1), abs=2e-3)
    assert region_mass(restrict(p, a), a) == pytest.approx(1.0, abs=1e-12)


def test_restrict_full_is_identity():
    p = Density.gaussian(STD, 0, 1)
    assert np.allclose(restrict(p, Region.full(STD)).values, p.values, atol=1e-15)


def test_restrict_zero_mass():
    g = Grid.line(0, 2, 201)
    p = restrict(Density.uniform(g), Region.box(g, 0.0, 1.0))
    with pytest.raises(DegenerateRegionError):
        restrict(p, Region.box(g, 1.5, 2.0))


def test_region_empty_requires_flag():
    g = Grid.line(0, 1, 11)
    with pytest.raises(InvariantViolationError):
        Region(g, np.zeros(11, dtype=bool))
    assert Region.empty(g).is_empty


def test_region_contains_by_nearest_node():
    g = Grid.line(0, 1, 11)
    a = Region.box(g, 0.0, 0.5)
    assert a.contains([0.54]).item() and not a.contains([0.56]).item()


def test_total_variation_bounds():
    p, q = Density.gaussian(STD, 0, 1), Density.gaussian(STD, 20 / 3, 0.01)
    assert total_variation(p, p) == 0.0
    assert total_variation(p, q) == pytest.approx(1.0, abs=1e-6)


def test_refinement_converges_at_least_second_order():
    def functionals(n):
        g = Grid.line(0, 3, n)
        x = g.axes[0]
        p = Density.from_unnormalized(g, np.exp(-x) * (1 + 0.3 * np.sin(3 * x)))
        q = Density.from_unnormalized(g, np.exp(-x**2 / 4))
        return np.array([entropy(p), kl_divergence(p, q)])

    v1, v2, v4 = functionals(81), functionals(161), functionals(321)
    assert np.all(np.abs(v2 - v4) * 4 < np.abs(v1 - v2))
