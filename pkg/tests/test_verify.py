import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdtflab import verify as vf
from rdtflab.field_core import GridSpec, MetricField
from rdtflab.flow import run_flow


# ------------------------------------------------------------------ fitting

def test_fit_power_law_recovers_exponent():
    rng = np.random.default_rng(1)
    t = np.geomspace(1e-4, 1e-2, 20)
    v = 3.0 * t**-0.75 * np.exp(0.01 * rng.standard_normal(t.size))
    rep = vf.fit_power_law("q", t, v, -0.75)
    assert rep.passed
    assert rep.fitted == pytest.approx(-0.75, abs=0.02)
    assert rep.constant >= 3.0 * 0.97
    assert rep.decades == pytest.approx(2.0)
    assert not vf.fit_power_law("q", t, v, -0.5).passed


def test_fit_power_law_zero_and_sign_handling():
    t = np.geomspace(1e-4, 1e-2, 10)
    rep = vf.fit_power_law("q", t, np.zeros_like(t), -1.0)
    assert rep.passed and rep.note == "identically zero"
    with pytest.raises(ValueError):
        vf.fit_power_law("q", t, -np.ones_like(t), -1.0)


@pytest.mark.parametrize("times", [np.geomspace(1e-4, 1e-2, 5), np.geomspace(1e-3, 1e-2, 20)])
def test_check_range_rejects_short_windows(times):
    with pytest.raises(vf.InsufficientRangeError):
        vf.check_range(times)


def test_fit_row_matches_header():
    t = np.geomspace(1e-4, 1e-2, 10)
    rep = vf.fit_power_law("q", t, t, 1.0)
    assert len(rep.row()) == len(vf.FIT_HEADER)


def test_flat_decay_fits_are_trivially_satisfied(flat_traj):
    reports = vf.decay_fits(flat_traj)
    assert all(r.passed and r.note == "identically zero" for r in reports)


@pytest.mark.parametrize("beta", [0.0, 0.5, 0.7, -0.1])
def test_beta_outside_open_interval_is_rejected(beta):
    with pytest.raises(ValueError):
        vf.check_beta(beta)


# ----------------------------------------------------------- shrinking balls

def test_schedule_partial_sums_reach_closed_form():
    for beta in (0.1, 0.25, 0.45):
        s = vf.ShrinkingBallSchedule((0, 0), beta, 0.01)
        assert s.radius(3) == pytest.approx((0.01 / 8) ** beta)
        acc = s.accumulated()
        assert np.all(np.diff(acc) >= 0)
        # geometric remainder after k terms: (t / 2^k)^beta / (2^beta - 1)
        k = np.arange(1, s.k_max + 1)
        remainder = (0.01 / 2.0**k) ** beta / (2**beta - 1)
        assert np.allclose(s.rho_infinity - acc, remainder, rtol=1e-6, atol=1e-14)
        if beta >= 0.25:
            assert abs(acc[-1] - s.rho_infinity) <= 1e-10


def test_lambda_exponent():
    assert vf.lambda_exponent(0.25, 3.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        vf.tail_series_constant(0.25, 1.5, 4.0)


@settings(max_examples=80, deadline=None)
@given(beta=st.floats(0.05, 0.45), slack=st.floats(0.05, 3.0), D=st.floats(0.5, 8.0),
       logt=st.floats(-6.0, 0.0))
def test_tail_series_is_bounded_by_closed_form(beta, slack, D, logt):
    gamma = 1.0 / (1.0 - 2.0 * beta) + slack
    t = 10.0**logt
    lam = vf.lambda_exponent(beta, gamma)
    assert vf.tail_series(t, beta, D) <= vf.tail_series_constant(beta, gamma, D) * t**lam * (1 + 1e-12)


def test_iteration_replay_on_flat_flow(flat_traj):
    x = flat_traj.grid.nearest_node((0.0, 0.0))
    steps = vf.iteration_replay(flat_traj, x, 0.25, 1e-2)
    assert steps and all(s.holds for s in steps)
    assert all(s.a_k == 0.0 for s in steps)


def test_iteration_replay_on_curved_flow(bump_traj):
    x = bump_traj.grid.nearest_node((0.0, 0.0))
    steps = vf.iteration_replay(bump_traj, x, 0.25, 0.02)
    assert all(s.holds for s in steps)
    assert all(s.distance <= s.accumulated + 1e-12 for s in steps)


# ------------------------------------------------------------ beta-weak bound

def test_resolution_floor_time():
    # diffusive floor h^2 dominates here
    assert vf.resolution_floor_time(0.01, 0.25, 1.0) == pytest.approx(1e-4)
    # ball-radius floor (h / C)^(1/beta) dominates here
    assert vf.resolution_floor_time(0.1, 0.25, 0.2) == pytest.approx(0.5**4)


def test_beta_weak_on_flat_flow_is_zero(flat_traj):
    x = flat_traj.grid.nearest_node((0.0, 0.0))
    rep = vf.beta_weak_report(flat_traj, x, 0.25, decade=(1e-3, 1e-2))
    assert rep.estimate == 0.0


def test_beta_weak_infimum_is_monotone_in_ball_size(cone_traj):
    x = cone_traj.grid.nearest_node((0.0, 0.0))
    rep = vf.beta_weak_report(cone_traj, x, 0.45, decade=(1e-3, 1e-2))
    C = sorted(rep.raw)
    raws = [rep.raw[c] for c in C]
    assert all(a >= b for a, b in zip(raws, raws[1:]))
    assert rep.inf_then_lim <= rep.lim_then_inf + 1e-15 or rep.inf_then_lim == min(rep.raw.values())


def test_beta_weak_refuses_subcell_balls(flat_traj):
    x = flat_traj.grid.nearest_node((0.0, 0.0))
    with pytest.raises(vf.ResolutionFloorError):
        vf.beta_weak_report(flat_traj, x, 0.45, C_ladder=(0.01,), decade=(1e-4, 1e-3))


def test_lower_bound_fit_reports_slack_on_flat(flat_traj):
    x = flat_traj.grid.nearest_node((0.0, 0.0))
    rep = vf.lower_bound_decay_fit(flat_traj, x, 0.0, 0.25)
    assert rep.passed and rep.note == "bound slack"


# ------------------------------------------------------------------ Davies

def test_davies_regions_reject_overlap():
    grid = GridSpec(2, 1.0, 33)
    with pytest.raises(ValueError):
        vf.davies_regions(grid, (0.0, 0.0), 0.9, 1.0, 2.0, 0.25, 1.0, 0.0)


def _flat_double_integral(grid, U1, U2, tau):
    """Explicit flat heat kernel summed over node pairs."""
    xs = grid.coords()[U1]
    ys = grid.coords()[U2]
    d2 = np.sum((xs[:, None, :] - ys[None, :, :]) ** 2, axis=-1)
    return float(np.sum(np.exp(-d2 / (4 * tau)) / (4 * np.pi * tau))) * grid.cell_volume**2


def test_davies_double_integral_matches_flat_kernel():
    grid = GridSpec(2, 1.0, 65)
    t, T = 1e-3, 2e-2
    traj = run_flow(MetricField.flat(grid), T, snapshot_times=[t, T])
    r = grid.radius()
    U1 = r <= 0.15
    U2 = (r >= 0.45) & (r <= 0.7)
    lhs = vf.davies_double_integral(traj, U1, U2, t, T)
    exact = _flat_double_integral(grid, U1, U2, T - t)
    assert lhs == pytest.approx(exact, rel=1e-3)


def test_flat_kernel_violates_stated_gaussian_factor_but_not_sharp_one():
    # point masses: lhs / (vol1 vol2)^1/2 = (vol1 vol2)^1/2 exp(-d^2/4tau) / (4 pi tau)
    tau, vol = 1e-2, 1e-2
    for d in (0.3, 0.5, 0.8):
        lhs = vol * vol * math.exp(-d * d / (4 * tau)) / (4 * math.pi * tau)
        stated = vf.davies_bound(1.0, 1.0 + tau, d, 0.0, 0.0, vol, vol)
        sharp = vf.davies_bound(1.0, 1.0 + tau, d, 0.0, 0.0, vol, vol, vf.SHARP_GAUSSIAN_FACTOR)
        assert lhs <= sharp
        if d * d / tau > 4 * math.log(4 * math.pi * tau / vol):
            assert lhs > stated


def test_duality_gap_is_small(bump_traj):
    grid = bump_traj.grid
    x = grid.nearest_node((0.1, 0.0))
    target = (grid.radius() <= 0.3).astype(float)
    conj, fwd = vf.duality_gap(bump_traj, target, x, 0.006, 0.02)
    assert conj == pytest.approx(fwd, rel=2e-2)


def test_measured_constants_on_flat(flat_traj):
    assert vf.measured_constants(flat_traj) == (0.0, 0.0)


# -------------------------------------------------------- energy pipeline

def test_admissible_eta_formula():
    assert vf.admissible_eta(2, 1.0, 0.0) == pytest.approx(1.0)
    assert vf.admissible_eta(3, 2.0, 0.2) == pytest.approx((1 / 4) * ((6 + 0.2) / 2 + 1))


class _Trace:
    def __init__(self, t, E, M):
        self.times, self.values, self.annulus_mass = t, E, M

    def derivative(self):
        from rdtflab.weak_scalar import EnergyTrace

        return EnergyTrace(self.times, self.values, self.times, self.annulus_mass, 0.0).derivative()


def test_energy_inequality_accepts_decaying_and_rejects_growing():
    t = np.linspace(0.01, 0.5, 40)
    c4, gamma = 2.0, 1.0
    decaying = _Trace(t, np.exp(-t), np.zeros_like(t))
    c5, _, ok = vf.energy_inequality_check(decaying, c4, gamma, 0.0)
    assert ok and c5 == 0.0
    assert np.all(vf.gronwall_check(decaying, c4, gamma, c5) >= 0)
    growing = _Trace(t, np.exp(5 * t), np.zeros_like(t))
    _, _, ok = vf.energy_inequality_check(growing, c4, gamma, 0.0)
    assert not ok


def test_energy_inequality_calibrates_source_constant():
    t = np.linspace(0.05, 0.5, 30)
    M = np.full_like(t, 0.1)
    E = 0.3 * t  # dE/dt = 0.3, needs c5 t^-2 M >= 0.3 - c4 t^2 E
    c5, slack, ok = vf.energy_inequality_check(_Trace(t, E, M), 0.0, 1.0, 1e-9)
    assert c5 > 0
    assert ok == bool(np.all(slack >= 0))


def test_pipeline_snapshots_are_geometric():
    s = vf.pipeline_snapshots(1.0, octaves=2, per_octave=2)
    assert s == pytest.approx([0.5 ** 1.5, 0.5, 0.5**0.5, 1.0])


def test_sup_ball_gradient_integral_flat(small_grid):
    assert vf.sup_ball_gradient_integral(MetricField.flat(small_grid), 4.0) == 0.0
