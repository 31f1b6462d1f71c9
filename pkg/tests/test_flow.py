import numpy as np
import pytest

from conftest import conformal_metric, gaussian_f
from rdtflab.field_core import GridSpec, MetricField, identity_field, integrate
from rdtflab.flow import (
    CFLViolation,
    FlowTrajectory,
    conjugate_heat_solve,
    delta_source,
    distance_barrier_check,
    fit_gaussian_tail,
    geodesic_distance,
    geometric_snapshots,
    heat_kernel,
    kernel_source_mass,
    load_trajectory,
    pairing,
    rdtf_step,
    run_flow,
    save_trajectory,
    scalar_evolution_residual,
    solve_conjugate,
    solve_forward,
    stable_dt,
)
from rdtflab.weak_scalar import bump, smooth_bump_metric


# ------------------------------------------------------------------ stepping

def test_flat_metric_is_a_fixed_point(small_grid):
    g = MetricField.flat(small_grid)
    dt = stable_dt(g)
    for _ in range(50):
        g = rdtf_step(g, dt)
    assert np.max(np.abs(g.perturbation())) < 1e-14


def test_cfl_violation_is_rejected(small_grid):
    g = MetricField.flat(small_grid)
    with pytest.raises(CFLViolation):
        rdtf_step(g, 2 * stable_dt(g))


def test_stable_dt_scales_with_inverse_metric(small_grid):
    g = MetricField.flat(small_grid)
    shrunk = MetricField.flat(small_grid, scale=0.5)
    assert stable_dt(shrunk) == pytest.approx(0.5 * stable_dt(g))
    assert stable_dt(g) == pytest.approx(0.1 * small_grid.spacing**2)


def test_step_preserves_reflection_symmetry():
    grid = GridSpec(2, 1.0, 33)
    g = smooth_bump_metric(grid, 0.08, direction=np.eye(2))
    for _ in range(5):
        g = rdtf_step(g, stable_dt(g))
    v = g.values
    assert np.allclose(v[..., 0, 0], v[::-1, :, 0, 0], atol=1e-14)
    assert np.allclose(v[..., 0, 0], v[..., 1, 1].T, atol=1e-14)


def test_heun_is_second_order_in_time():
    grid = GridSpec(2, 1.0, 33)
    g0 = smooth_bump_metric(grid, 0.08)
    T = 40 * stable_dt(g0)

    def advance(nsteps):
        g = g0
        for _ in range(nsteps):
            g = rdtf_step(g, T / nsteps)
        return g.values

    a, b, c = advance(40), advance(80), advance(160)
    ratio = np.max(np.abs(a - b)) / np.max(np.abs(b - c))
    assert 3.5 < ratio < 4.5


def test_run_flow_rejects_large_or_unglued_data(small_grid):
    big = MetricField(small_grid, 2.5 * identity_field(small_grid))
    with pytest.raises(ValueError):
        run_flow(big, 1e-3)
    lumpy = conformal_metric(small_grid, 0.05 * np.ones(small_grid.shape))
    with pytest.raises(ValueError):
        run_flow(lumpy, 1e-3)
    run_flow(lumpy, 1e-4, strict_collar=False)


def test_snapshots_are_landed_exactly(flat_traj):
    for t in flat_traj.snapshot_times:
        assert flat_traj.metric(t).time_tag == t
    assert flat_traj.t_end == pytest.approx(0.01, rel=0, abs=1e-15)
    assert np.all(np.diff(flat_traj.times) > 0)


def test_geometric_snapshots():
    s = geometric_snapshots(1.0, 4, 2.0)
    assert s == [0.125, 0.25, 0.5, 1.0]


def test_collar_stays_flat_under_dirichlet_pin(bump_traj):
    assert bump_traj.scheme["boundary"] == "dirichlet"
    for _, g in bump_traj.slices:
        outer = np.zeros(g.grid.shape, dtype=bool)
        outer[0, :] = outer[-1, :] = outer[:, 0] = outer[:, -1] = True
        assert np.max(np.abs(g.perturbation()[outer])) == 0.0


def test_perturbation_decays_under_flow(bump_traj):
    devs = [d["sup_dev"] for d in bump_traj.diagnostics]
    assert devs[-1] < devs[0]
    assert devs[-1] < np.max(np.abs(bump_traj.initial.perturbation()))


def test_slice_lookup_errors(flat_traj):
    with pytest.raises(KeyError):
        flat_traj.metric(0.123456)
    with pytest.raises(ValueError):
        flat_traj.coefficients(1.0)
    traj = FlowTrajectory(flat_traj.initial)
    traj.append(0.1, flat_traj.initial)
    with pytest.raises(ValueError):
        traj.append(0.05, flat_traj.initial)


def test_coefficient_cache_is_bounded(bump_traj):
    bump_traj.cache_size = 4
    try:
        for k in range(len(bump_traj.slices)):
            bump_traj.coefficients_by_index(k)
        assert len(bump_traj._coef_cache) <= 4
    finally:
        bump_traj.cache_size = 64


# -------------------------------------------------------- scalar equations

def test_conjugate_solution_is_nonnegative_and_validated(bump_traj):
    grid = bump_traj.grid
    u = bump(grid, (0.0, 0.0), 0.3)
    phi = conjugate_heat_solve(bump_traj, u, 0.02, 0.01)
    assert phi.values.min() >= -1e-12
    with pytest.raises(ValueError):
        conjugate_heat_solve(bump_traj, u, 0.01, 0.02)
    with pytest.raises(ValueError):
        conjugate_heat_solve(bump_traj, type(u)(grid, -u.values), 0.02, 0.01)


def test_conjugate_mass_drift_matches_curvature(bump_traj):
    # d/dt int phi dmu = 0 in the continuum for the conjugate equation
    grid = bump_traj.grid
    u = bump(grid, (0.0, 0.0), 0.3).values
    phi, _ = solve_conjugate(bump_traj, u, 0.02, 0.004)
    m_T = pairing(bump_traj, np.ones(grid.shape), u, 0.02)
    m_t = pairing(bump_traj, np.ones(grid.shape), phi, 0.004)
    assert abs(m_t - m_T) < 1e-3 * m_T


def test_forward_conjugate_duality(bump_traj):
    grid = bump_traj.grid
    w0 = bump(grid, (0.2, 0.0), 0.3).values
    phiT = bump(grid, (-0.1, 0.1), 0.3).values
    s, t = 0.004, 0.02
    w, _ = solve_forward(bump_traj, w0, s, t)
    phi, _ = solve_conjugate(bump_traj, phiT, t, s)
    lhs = pairing(bump_traj, phiT, w, t)
    rhs = pairing(bump_traj, phi, w0, s)
    assert abs(lhs - rhs) <= 1e-2 * abs(rhs)


def test_flat_kernel_matches_gaussian(flat_traj):
    s, t = 1e-3, 1e-2
    tau = t - s
    errs = []
    for N in (33, 65):
        grid = GridSpec(2, 1.0, N)
        traj = run_flow(MetricField.flat(grid), t, snapshot_times=[s, t], keep_every=4)
        k = heat_kernel(traj, grid.nearest_node((0.0, 0.0)), s, t)
        exact = np.exp(-grid.radius() ** 2 / (4 * tau)) / (4 * np.pi * tau)
        errs.append(np.max(np.abs(k.density.values - exact)) / exact.max())
    assert errs[1] < 2e-2
    assert errs[0] / errs[1] > 3.5
    k = heat_kernel(flat_traj, flat_traj.grid.nearest_node((0.0, 0.0)), s, t)
    assert k.mass == pytest.approx(1.0, abs=1e-3)
    fit = fit_gaussian_tail(k, flat_traj)
    assert fit.D == pytest.approx(4.0, rel=0.15)
    assert fit.satisfied


def test_kernel_masses_on_curved_flow(bump_traj):
    y = bump_traj.grid.nearest_node((0.1, 0.0))
    k = heat_kernel(bump_traj, y, 0.004, 0.02)
    assert 0.99 <= k.mass <= 1.01
    assert 0.99 <= kernel_source_mass(bump_traj, y, 0.004, 0.02) <= 1.01
    with pytest.raises(ValueError):
        heat_kernel(bump_traj, (0, 0), 0.004, 0.02)
    with pytest.raises(ValueError):
        heat_kernel(bump_traj, y, 0.02, 0.004)


def test_delta_source_has_unit_mass(bump_traj):
    node = bump_traj.grid.nearest_node((0.0, 0.0))
    w = delta_source(bump_traj, node, 0.01)
    assert integrate(w, bump_traj.grid, bump_traj.coefficients(0.01).sqrt_det) == pytest.approx(1.0)


def test_scalar_curvature_evolution_residual_converges(bump_traj):
    rel = []
    for N in (81, 161):
        grid = GridSpec(2, 1.0, N)
        traj = run_flow(smooth_bump_metric(grid, 0.08), 0.006, snapshot_times=[0.0045, 0.005, 0.0055, 0.006])
        k = traj.slice_index(0.005)
        times = traj.times
        dRdt = (traj.coefficients_by_index(k + 2).R - traj.coefficients_by_index(k).R) / (times[k + 1] - times[k - 1])
        inner = (slice(N // 10, -(N // 10)),) * 2
        res = scalar_evolution_residual(traj, 0.005).values
        rel.append(np.max(np.abs(res[inner])) / np.max(np.abs(dRdt[inner])))
    assert rel[1] < 1e-2
    assert rel[0] / rel[1] > 4
    with pytest.raises(ValueError):
        scalar_evolution_residual(bump_traj, bump_traj.times[0])


# ------------------------------------------------------------------ distance

def test_flat_distance_is_exact_on_axes_and_diagonals(small_grid):
    g = MetricField.flat(small_grid)
    c = small_grid.nearest_node((0.0, 0.0))
    d = geodesic_distance(g, c).values
    i = np.arange(small_grid.points_per_axis)
    exact = np.abs(i - c[0]) * small_grid.spacing
    assert np.allclose(d[:, c[1]], exact)
    assert np.allclose(d[i, i], np.sqrt(2) * exact)


def test_distance_scales_under_homothety(small_grid):
    c = small_grid.nearest_node((0.0, 0.0))
    d1 = geodesic_distance(MetricField.flat(small_grid), c).values
    d4 = geodesic_distance(MetricField.flat(small_grid, scale=4.0), c).values
    assert np.allclose(d4, 2 * d1)


def test_distance_triangle_inequality(small_grid):
    g = conformal_metric(small_grid, gaussian_f(small_grid, 0.2))
    a, b = (3, 5), (20, 17)
    da, db = geodesic_distance(g, a).values, geodesic_distance(g, b).values
    assert np.all(da <= da[b] + db + 1e-12)


def test_distance_converges_to_conformal_oracle():
    # radial distance for e^{2f} delta from the centre: int_0^r e^{f(s)} ds
    errs = []
    for N in (33, 129):
        grid = GridSpec(2, 1.0, N)
        g = conformal_metric(grid, gaussian_f(grid, 0.2))
        c = grid.nearest_node((0.0, 0.0))
        d = geodesic_distance(g, c).values[c[0]:, c[1]]
        r = grid.axis()[c[0]:]
        integrand = np.exp(0.2 * np.exp(-r**2))
        exact = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(r))])
        errs.append(np.max(np.abs(d - exact)) / exact.max())
    assert errs[1] < 3e-3
    assert errs[1] < errs[0]


def test_distance_barrier_holds_on_smooth_flow(bump_traj):
    grid = bump_traj.grid
    x0 = grid.nearest_node((0.0, 0.0))
    t = bump_traj.times[len(bump_traj.times) // 2]
    # stay off the axes and diagonals, where the stencil distance has kinks
    angles = np.deg2rad([22.0, 112.0, 200.0, 290.0])
    nodes = [grid.nearest_node((0.6 * np.cos(a), 0.6 * np.sin(a))) for a in angles]
    out = distance_barrier_check(bump_traj, x0, t, 0.3, nodes)
    assert out["holds"], out


# ---------------------------------------------------------------- checkpoint

def test_save_and_load_roundtrip(flat_traj, tmp_path):
    save_trajectory(flat_traj, tmp_path)
    back = load_trajectory(tmp_path)
    assert np.array_equal(back.times, flat_traj.times)
    assert back.snapshot_times == flat_traj.snapshot_times
    for (_, a), (_, b) in zip(back.slices, flat_traj.slices):
        assert np.array_equal(a.values, b.values)
    assert back.diagnostics == flat_traj.diagnostics
