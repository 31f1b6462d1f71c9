import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdtflab.curvature import christoffel, curvature, deturck_vector, laplace_beltrami
from rdtflab.field_core import GridSpec, MetricField, ScalarField, identity_field, partial_derivatives

from conftest import conformal_metric, gaussian_f


def conformal_R_oracle(grid, f):
    """R of e^{2f} delta in two dimensions: -2 e^{-2f} Laplacian f (analytic for the Gaussian f)."""
    r2 = grid.radius() ** 2
    lap = f * (4 * r2 - 4)  # f = a exp(-r^2)
    return -2 * np.exp(-2 * f) * lap


def test_flat_curvature_vanishes(small_grid):
    g = MetricField.flat(small_grid)
    b = curvature(g)
    assert np.all(b.scalar.values == 0) and np.all(b.riem_norm.values == 0)
    assert np.all(christoffel(g).values == 0)
    assert np.all(deturck_vector(g).values == 0)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.3, 3.0))
def test_constant_metric_is_flat(scale):
    grid = GridSpec(2, 1.0, 17)
    g = MetricField.flat(grid, scale)
    assert np.max(np.abs(curvature(g).scalar.values)) < 1e-12


def test_christoffel_conformal_oracle():
    grid = GridSpec(2, 1.0, 129)
    f = gaussian_f(grid)
    gam = christoffel(conformal_metric(grid, f)).values
    x, y = np.moveaxis(grid.coords(), -1, 0)
    df = [-2 * x * f, -2 * y * f]
    inner = (slice(2, -2),) * 2
    for k in range(2):
        for i in range(2):
            for j in range(2):
                exact = (i == k) * df[j] + (j == k) * df[i] - (i == j) * df[k]
                assert np.max(np.abs(gam[..., k, i, j] - exact)[inner]) < 5e-4


def test_conformal_scalar_curvature_converges():
    errs = []
    for N in (65, 129, 257):
        grid = GridSpec(2, 1.0, N)
        f = gaussian_f(grid)
        R = curvature(conformal_metric(grid, f)).scalar.values
        exact = conformal_R_oracle(grid, f)
        inner = (slice(2, -2),) * 2
        errs.append(np.max(np.abs(R - exact)[inner]) / np.max(np.abs(exact)))
    assert errs[1] <= 1e-3
    assert np.log2(errs[0] / errs[1]) >= 1.9 and np.log2(errs[1] / errs[2]) >= 1.9


def test_deturck_field_vanishes_for_2d_conformal():
    grid = GridSpec(2, 1.0, 33)
    X = deturck_vector(conformal_metric(grid, gaussian_f(grid, 0.3))).values
    assert np.max(np.abs(X)) < 1e-12


def _random_bump_metric(grid, seed=3):
    rng = np.random.default_rng(seed)
    bump = np.exp(-4 * grid.radius() ** 2)
    a = rng.normal(size=(2, 2)) * 0.1
    return MetricField(grid, identity_field(grid) + bump[..., None, None] * (a + a.T))


def test_riemann_norm_equals_abs_scalar_in_2d():
    # |Rm| = |R| in two dimensions; the two stencils agree to second order
    gaps = []
    for N in (65, 129):
        b = curvature(_random_bump_metric(GridSpec(2, 1.0, N)))
        assert np.array_equal(b.ricci.values, np.swapaxes(b.ricci.values, -1, -2))
        inner = (slice(2, -2),) * 2
        gaps.append(np.max(np.abs(b.riem_norm.values - np.abs(b.scalar.values))[inner]))
    assert gaps[1] < 1e-3 * np.max(np.abs(b.scalar.values))
    assert gaps[0] / gaps[1] > 3.5


def test_laplace_beltrami_flat_and_constants():
    grid = GridSpec(2, 1.0, 33)
    x, y = np.moveaxis(grid.coords(), -1, 0)
    lap = laplace_beltrami(MetricField.flat(grid), ScalarField(grid, x * x + y * y)).values
    assert np.allclose(lap[1:-1, 1:-1], 4.0)
    g = conformal_metric(grid, gaussian_f(grid, 0.2))
    assert np.max(np.abs(laplace_beltrami(g, ScalarField(grid, np.full(grid.shape, 3.0))).values)) < 1e-12


def test_laplace_beltrami_conformal_oracle():
    # in 2D the conformal Laplacian is e^{-2f} times the flat one
    grid = GridSpec(2, 1.0, 129)
    f = gaussian_f(grid)
    x, y = np.moveaxis(grid.coords(), -1, 0)
    u = np.sin(x) * np.cos(2 * y)
    lap = laplace_beltrami(conformal_metric(grid, f), ScalarField(grid, u)).values
    exact = -5 * u * np.exp(-2 * f)
    assert np.max(np.abs(lap - exact)[2:-2, 2:-2]) < 2e-3


def test_three_dimensional_conformal_curvature():
    # R of e^{2f} delta in 3D: -e^{-2f} (4 Laplacian f + 2 |df|^2)
    errs = []
    for N in (21, 41):
        grid = GridSpec(3, 1.0, N)
        f = gaussian_f(grid)
        r2 = grid.radius() ** 2
        exact = -np.exp(-2 * f) * (4 * f * (4 * r2 - 6) + 8 * r2 * f * f)
        R = curvature(conformal_metric(grid, f)).scalar.values
        inner = (slice(3, -3),) * 3
        errs.append(np.max(np.abs(R - exact)[inner]) / np.max(np.abs(exact)))
    assert errs[1] < 1e-2
    assert np.log2(errs[0] / errs[1]) > 1.8
