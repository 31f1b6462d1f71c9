"""Experiments on stored flows: decay-rate fits, the beta-weak lower bound, the
shrinking-ball iteration, the Davies double-integral bound and the energy pipeline.

Every constant is an output: exponents come from log-log least squares,
multiplicative constants from envelopes of measured data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import linregress

from .field_core import GridSpec, ScalarField, ball_sums, integrate, partial_derivatives
from .flow import (
    FlowTrajectory,
    geodesic_distance,
    heat_kernel,
    fit_gaussian_tail,
    run_flow,
    solve_conjugate,
    solve_forward,
    delta_source,
)
from .weak_scalar import (
    bump,
    cutoff_from_distance,
    energy_functional,
    gluing_error_check,
    lower_bound_gap,
    make_cutoff,
    make_w1p_cone,
    raw_cone,
    test_battery,
)

log = logging.getLogger(__name__)

MIN_SAMPLES = 8
MIN_DECADES = 1.5
EXPONENT_TOL = 0.15
ZERO_FLOOR = 1e-13
DEFAULT_C_LADDER = (0.5, 1.0, 2.0, 4.0, 8.0)


class InsufficientRangeError(ValueError):
    pass


class ResolutionFloorError(ValueError):
    pass


def check_beta(beta: float) -> None:
    if not 0 < beta < 0.5:
        raise ValueError(f"beta must lie strictly inside (0, 1/2), got {beta}")


# ---------------------------------------------------------------- fitting

@dataclass
class FitReport:
    quantity: str
    predicted: float | None
    fitted: float | None
    stderr: float | None
    constant: float | None
    t_range: tuple[float, float]
    samples: int
    tol: float = EXPONENT_TOL
    passed: bool = False
    note: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def decades(self) -> float:
        return math.log10(self.t_range[1] / self.t_range[0])

    def row(self) -> list:
        fmt = lambda v: "" if v is None else f"{v:.6g}"
        return [self.quantity, fmt(self.predicted), fmt(self.fitted), fmt(self.stderr), fmt(self.constant),
                f"{self.t_range[0]:.6g}", f"{self.t_range[1]:.6g}", self.samples, int(self.passed), self.note]


FIT_HEADER = ["quantity", "predicted", "fitted", "stderr", "constant", "t_min", "t_max", "samples", "passed", "note"]


def check_range(times: Sequence[float]) -> tuple[float, float]:
    times = np.asarray(times, dtype=float)
    if times.size < MIN_SAMPLES:
        raise InsufficientRangeError(f"fit needs >= {MIN_SAMPLES} samples, got {times.size}")
    lo, hi = float(times.min()), float(times.max())
    if lo <= 0 or math.log10(hi / lo) < MIN_DECADES - 1e-9:
        raise InsufficientRangeError(f"fit needs >= {MIN_DECADES} decades of t, got [{lo:.3g}, {hi:.3g}]")
    return lo, hi


def fit_power_law(quantity: str, times, values, predicted: float | None, tol: float = EXPONENT_TOL) -> FitReport:
    """Least-squares slope of log(value) against log(t); constant = max of value * t^-predicted."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = check_range(times)
    if np.all(np.abs(values) <= ZERO_FLOOR):
        return FitReport(quantity, predicted, None, None, 0.0, (lo, hi), int(times.size), tol, True,
                         "identically zero")
    if np.any(values <= 0):
        raise ValueError(f"{quantity}: power-law fit needs positive values")
    res = linregress(np.log(times), np.log(values))
    slope = float(res.slope)
    ref = slope if predicted is None else predicted
    const = float(np.max(values * times ** (-ref)))
    passed = predicted is None or abs(slope - predicted) <= tol
    return FitReport(quantity, predicted, slope, float(res.stderr), const, (lo, hi), int(times.size), tol, passed)


def snapshot_series(traj: FlowTrajectory, key: str, t_lo: float = 0.0, t_hi: float = np.inf):
    pairs = [(t, d[key]) for t, d in traj.snapshot_diagnostics() if t_lo * (1 - 1e-12) <= t <= t_hi * (1 + 1e-12)]
    t, v = zip(*pairs) if pairs else ((), ())
    return np.array(t), np.array(v)


DECAY_TARGETS = (("sup_dg", -0.5), ("sup_d2g", -1.0), ("sup_R", -1.0), ("sup_dR", -1.5))


def decay_fits(traj: FlowTrajectory, t_lo: float = 1e-4, t_hi: float = 1e-2,
               targets=DECAY_TARGETS, tol: float = EXPONENT_TOL) -> list[FitReport]:
    """Log-log slopes of the derivative and curvature sup-norms against the generic smooth-flow exponents."""
    out = []
    for key, pred in targets:
        t, v = snapshot_series(traj, key, t_lo, t_hi)
        out.append(fit_power_law(key, t, v, pred, tol))
    return out


def x_norm_ratio(traj: FlowTrajectory) -> dict:
    from .field_core import c0_deviation, x_norm

    eps = c0_deviation(traj.initial)
    xn = x_norm(traj)
    return {"eps": eps, "x_norm": xn.value, "ratio": xn.value / eps if eps else 0.0}


# ------------------------------------------------------------ W^{1,p} data

def sup_ball_gradient_integral(g, p: float, radius: float = 1.0) -> float:
    """``sup_x int_{B(x, radius)} |dg|^p dx`` over grid nodes."""
    grid = g.grid
    d = partial_derivatives(g.values, grid.spacing, grid.dim)
    mag = np.sqrt(np.sum(d * d, axis=(-3, -2, -1)))
    return float(ball_sums(mag**p, grid, radius).max())


def w1p_estimates_check(traj: FlowTrajectory, p: float, A: float | None = None,
                        t_lo: float = 1e-4, t_hi: float = 1e-2, tol: float = EXPONENT_TOL) -> list[FitReport]:
    """Slopes of the local L^p gradient mass (0), sup|dg| (-n/2p) and sup|d2g| (-n/4p - 3/4)."""
    n = traj.grid.dim
    if A is None:
        A = sup_ball_gradient_integral(traj.initial, p)
    times = [t for t in traj.snapshot_times if t_lo * (1 - 1e-12) <= t <= t_hi * (1 + 1e-12)]
    mass = [sup_ball_gradient_integral(traj.metric(t), p) for t in times]
    reports = [fit_power_law("ball_Lp_gradient", times, mass, 0.0, tol)]
    reports[0].extra["C_over_A"] = max(mass) / A if A else 0.0
    for key, pred in (("sup_dg", -n / (2 * p)), ("sup_d2g", -(n / (4 * p) + 0.75))):
        t, v = snapshot_series(traj, key, t_lo, t_hi)
        rep = fit_power_law(key, t, v, pred, tol)
        rep.extra["C"] = rep.constant / (A + 1)
        reports.append(rep)
    for rep in reports:
        rep.extra["A"] = A
    return reports


# ------------------------------------------------------------ shrinking balls

@dataclass(frozen=True)
class ShrinkingBallSchedule:
    x: tuple[int, ...]
    beta: float
    t: float
    k_max: int = 200

    def __post_init__(self):
        check_beta(self.beta)
        if self.t <= 0:
            raise ValueError("t must be positive")

    def radius(self, i: int) -> float:
        return (self.t / 2**i) ** self.beta

    def radii(self) -> np.ndarray:
        return np.array([self.radius(i) for i in range(1, self.k_max + 1)])

    def accumulated(self) -> np.ndarray:
        return np.cumsum(self.radii())

    @property
    def rho_infinity(self) -> float:
        return self.t**self.beta / (2**self.beta - 1)


def tail_series(t: float, beta: float, D: float, k_max: int = 400) -> float:
    """``sum_i (2^i/t) exp(-r_i^2 / (D t/2^i))`` with ``r_i = (t/2^i)^beta``."""
    total = 0.0
    for i in range(1, k_max + 1):
        ti = t / 2**i
        total += math.exp(-(ti ** (2 * beta - 1)) / D) / ti
    return total


def lambda_exponent(beta: float, gamma: float) -> float:
    return -1.0 - (2 * beta - 1) * gamma


def tail_series_constant(beta: float, gamma: float, D: float) -> float:
    """Closed-form C3 with ``sum <= C3 t^lambda``.

    Uses ``exp(-y) <= (gamma/e)^gamma y^-gamma`` termwise, then the geometric sum.
    """
    lam = lambda_exponent(beta, gamma)
    if lam <= 0:
        raise ValueError(f"lambda = {lam:.3g} must be positive (need gamma > 1/(1 - 2 beta))")
    return (gamma / math.e) ** gamma * D**gamma / (2**lam - 1)


@dataclass
class ReplayStep:
    k: int
    node: tuple[int, ...]
    a_k: float
    radius: float
    accumulated: float
    distance: float
    bound: float
    holds: bool


def iteration_replay(traj: FlowTrajectory, x: Sequence[int], beta: float, t: float,
                     C1: float | None = None, C2: float = 1.0, D: float = 4.0) -> list[ReplayStep]:
    """Replay the argmin chain ``a_k = inf_{B(x_{k-1}, r_k)} R(., t/2^k) = R(x_k, t/2^k)``.

    ``C1`` defaults to the measured ``sup_t t sup|R|``.  Each step checks
    ``R(x, t) >= a_k - 2 C1 C2 sum_{i<=k} (2^i/t) exp(-r_i^2/(D t/2^i))`` and
    ``|x_k - x| <= sum_{i<=k} r_i``.  R at ``t/2^k`` is interpolated linearly
    between stored slices; the chain stops when ``r_k < 2h`` or ``t/2^k``
    falls below the first stored slice.
    """
    check_beta(beta)
    grid = traj.grid
    h = grid.spacing
    if C1 is None:
        C1 = max(tt * d["sup_R"] for tt, d in zip(traj.times, traj.diagnostics))
    sched = ShrinkingBallSchedule(tuple(x), beta, t)
    x0 = np.asarray(grid.node_position(x))
    R_xt = traj.coefficients(t).R[tuple(x)]
    coords = grid.coords()
    steps, node, series, acc = [], tuple(int(i) for i in x), 0.0, 0.0
    for k in range(1, sched.k_max + 1):
        r = sched.radius(k)
        tk = t / 2**k
        if r < 2 * h or tk < traj.times[0]:
            break
        R = traj.coefficients(tk).R
        centre = grid.node_position(node)
        ball = np.sum((coords - centre) ** 2, axis=-1) <= r * r * (1 + 1e-12)
        masked = np.where(ball, R, np.inf)
        node = tuple(int(i) for i in np.unravel_index(int(np.argmin(masked)), masked.shape))
        a_k = float(R[node])
        series += (2**k / t) * math.exp(-r * r / (D * tk))
        acc += r
        bound = a_k - 2 * C1 * C2 * series
        dist = float(np.linalg.norm(grid.node_position(node) - x0))
        holds = R_xt >= bound - 1e-12 and dist <= acc * (1 + 1e-10)
        steps.append(ReplayStep(k, node, a_k, r, acc, dist, bound, bool(holds)))
    if not steps:
        raise ResolutionFloorError("iteration depth exhausted by resolution before the first step")
    return steps


# ------------------------------------------------------------ beta-weak bound

@dataclass
class BetaWeakReport:
    estimate: float
    raw: dict
    extrapolated: dict
    inf_then_lim: float
    lim_then_inf: float
    decade: tuple[float, float]
    radii: dict


def resolution_floor_time(h: float, beta: float, C_min: float, diffusive: float = 1.0) -> float:
    """Smallest t at which the ``C_min t^beta`` ball spans one cell and the flow has
    smoothed the grid scale (``t >= diffusive * h^2``)."""
    return max((h / C_min) ** (1.0 / beta), diffusive * h * h)


def beta_weak_report(traj: FlowTrajectory, x: Sequence[int], beta: float,
                     C_ladder: Sequence[float] = DEFAULT_C_LADDER, lam: float = 0.5,
                     decade: tuple[float, float] | None = None, diffusive: float = 1.0) -> BetaWeakReport:
    """Ball infima of R over the smallest resolvable t-decade for each C in the ladder.

    The liminf as t -> 0 is read two ways: the raw minimum over the decade,
    and ``m0`` from a fit ``m(t) = m0 + b t^lam``.  The per-C liminf is the
    smaller of the two.
    """
    check_beta(beta)
    grid = traj.grid
    h = grid.spacing
    C_ladder = sorted(float(c) for c in C_ladder)
    times = np.array(traj.snapshot_times)
    if decade is None:
        t_floor = resolution_floor_time(h, beta, C_ladder[0], diffusive)
        usable = times[times >= t_floor * (1 - 1e-9)]
        if usable.size == 0:
            raise ResolutionFloorError(f"no stored slice above the resolution floor t = {t_floor:.3g}")
        decade = (float(usable.min()), float(usable.min()) * 10)
    sel = times[(times >= decade[0] * (1 - 1e-12)) & (times <= decade[1] * (1 + 1e-12))]
    if sel.size == 0:
        raise ResolutionFloorError("no stored slices in the requested decade")
    if C_ladder[0] * sel.min() ** beta < h:
        raise ResolutionFloorError(
            f"ball radius {C_ladder[0] * sel.min() ** beta:.3g} at t = {sel.min():.3g} is below one cell (h = {h:.3g})")
    dist = grid.radius(grid.node_position(x))
    raw, extrap, radii = {}, {}, {}
    for C in C_ladder:
        m = []
        for t in sel:
            R = traj.scalar_curvature(t)
            m.append(float(R[dist <= C * t**beta * (1 + 1e-12)].min()))
        m = np.array(m)
        raw[C] = float(m.min())
        if sel.size >= 3:
            b, m0 = np.polyfit(sel**lam, m, 1)
            extrap[C] = float(m0)
        else:
            extrap[C] = raw[C]
        radii[C] = (C * sel.min() ** beta, C * sel.max() ** beta)
    per_c = {C: min(raw[C], extrap[C]) for C in C_ladder}
    inf_then_lim = min(per_c.values())
    # the swapped order: for each t take the inf over the ladder first, then the liminf in t
    lim_then_inf = min(raw[C_ladder[-1]], extrap[C_ladder[-1]])
    return BetaWeakReport(inf_then_lim, raw, extrap, inf_then_lim, lim_then_inf, decade, radii)


def beta_weak_estimate(traj: FlowTrajectory, x: Sequence[int], beta: float,
                       C_ladder: Sequence[float] = DEFAULT_C_LADDER, **kwargs) -> float:
    return beta_weak_report(traj, x, beta, C_ladder, **kwargs).estimate


def lower_bound_decay_fit(traj: FlowTrajectory, x: Sequence[int], kappa: float, beta: float,
                          gamma: float = 3.0, t_lo: float = 0.0, t_hi: float = np.inf,
                          lam_min: float = 0.0) -> FitReport:
    """Fit the deficit ``max(kappa - R(x, t), 0)`` against t.

    Passes when the fitted exponent exceeds ``lam_min`` and the deficit
    shrinks toward t -> 0; an identically zero deficit is reported as
    bound slack, which passes.
    """
    check_beta(beta)
    predicted = lambda_exponent(beta, gamma)
    times = np.array([t for t in traj.snapshot_times if t_lo <= t <= t_hi])
    lo, hi = check_range(times)
    deficit = np.array([max(kappa - traj.scalar_curvature(t)[tuple(x)], 0.0) for t in times])
    if np.all(deficit == 0):
        return FitReport("deficit", predicted, None, None, 0.0, (lo, hi), int(times.size), passed=True,
                         note="bound slack")
    pos = deficit > 0
    if pos.sum() < 2:
        return FitReport("deficit", predicted, None, None, float(deficit.max()), (lo, hi), int(times.size),
                         passed=False, note="deficit too sparse to fit")
    res = linregress(np.log(times[pos]), np.log(deficit[pos]))
    order = np.argsort(times)
    shrinking = deficit[order][0] <= deficit[order][-1]
    passed = res.slope > lam_min and shrinking
    const = float(np.max(deficit[pos] * times[pos] ** (-res.slope)))
    return FitReport("deficit", predicted, float(res.slope), float(res.stderr), const, (lo, hi), int(times.size),
                     passed=bool(passed))


# ------------------------------------------------------------ Davies bound

@dataclass
class DaviesSample:
    t: float
    T: float
    lhs: float
    rhs: float
    distance: float
    vol_T_U1: float
    vol_t_U2: float
    volume_bound_ok: bool
    holds: bool
    rhs_sharp: float = 0.0
    holds_sharp: bool = False
    lhs_forward: float = 0.0


def measured_constants(traj: FlowTrajectory) -> tuple[float, float]:
    """``c2 eps = sup_t |g(t) - delta|`` and ``c3 eps = sup_t t |Rm|`` over stored slices."""
    c2 = max([float(np.max(np.abs(traj.initial.perturbation())))] + [d["sup_dev"] for d in traj.diagnostics])
    c3 = max(t * d["sup_Rm"] for t, d in zip(traj.times, traj.diagnostics))
    return c2, c3


def davies_regions(grid: GridSpec, x0: Sequence[float], t: float, T: float, C: float, beta: float,
                   gamma: float, c2eps: float) -> tuple[np.ndarray, np.ndarray, float]:
    """U1 = B(x0, C T^beta) and the annulus U2 that carries supp phi'(t^gamma d_t)."""
    r = grid.radius(x0)
    r1 = C * T**beta
    inner = 1.0 / (2 * (1 + c2eps) * t**gamma)
    outer = 1.0 / ((1 - c2eps) * t**gamma)
    if r1 >= inner:
        raise ValueError(f"U1 (radius {r1:.3g}) overlaps U2 (inner radius {inner:.3g})")
    return r <= r1, (r >= inner) & (r <= outer), inner - r1


STATED_GAUSSIAN_FACTOR = 2.0
SHARP_GAUSSIAN_FACTOR = 4.0


def davies_bound(t: float, T: float, dist: float, c2eps: float, c3eps: float, vol1: float, vol2: float,
                 factor: float = STATED_GAUSSIAN_FACTOR) -> float:
    """``(T/t)^(c3eps/2) exp(-d^2 / (factor (1+c2eps)^2 (T-t))) Vol_T(U1)^1/2 Vol_t(U2)^1/2``.

    ``factor = 2`` is the stated form; ``factor = 4`` is the flat Davies
    constant, the largest that the flat heat kernel satisfies for all d.
    """
    return ((T / t) ** (c3eps / 2) * math.exp(-dist**2 / (factor * (1 + c2eps) ** 2 * (T - t)))
            * math.sqrt(vol1) * math.sqrt(vol2))


def davies_double_integral(traj: FlowTrajectory, U1: np.ndarray, U2: np.ndarray, t: float, T: float) -> float:
    """``int_{U2} int_{U1} Phi(y, T; x, t) dmu_T(y) dmu_t(x)`` via the conjugate solve from ``1_{U1}``.

    ``davies_check`` also evaluates the same integral forward (solve from
    ``1_{U2}`` at t, integrate over U1 at T) and reports the relative gap.
    """
    _, rec = solve_conjugate(traj, U1.astype(float), T, t, record=[t])
    return integrate(rec[t] * U2, traj.grid, traj.coefficients(t).sqrt_det)


def davies_check(traj: FlowTrajectory, x0: Sequence[float], pairs: Sequence[tuple[float, float]],
                 C: float = 0.25, beta: float = 0.25, gamma: float = 1.0,
                 constants: tuple[float, float] | None = None) -> tuple[FitReport, list[DaviesSample]]:
    c2eps, c3eps = measured_constants(traj) if constants is None else constants
    grid = traj.grid
    samples = []
    for T in sorted({T for _, T in pairs}):
        ts = sorted(t for t, TT in pairs if TT == T)
        U1_cache = {}
        for t in ts:
            U1, U2, d = davies_regions(grid, x0, t, T, C, beta, gamma, c2eps)
            U1_cache[t] = (U1, U2, d)
        # one conjugate solve per T (U1 depends on T only)
        U1 = next(iter(U1_cache.values()))[0]
        _, rec = solve_conjugate(traj, U1.astype(float), T, min(ts), record=ts)
        vol1 = integrate(U1.astype(float), grid, traj.coefficients(T).sqrt_det)
        for t in ts:
            _, U2, d = U1_cache[t]
            dens_t = traj.coefficients(t).sqrt_det
            lhs = integrate(rec[t] * U2, grid, dens_t)
            vol2 = integrate(U2.astype(float), grid, dens_t)
            rhs = davies_bound(t, T, d, c2eps, c3eps, vol1, vol2)
            sharp = davies_bound(t, T, d, c2eps, c3eps, vol1, vol2, SHARP_GAUSSIAN_FACTOR)
            W, _ = solve_forward(traj, U2.astype(float), t, T)
            lhs_fwd = integrate(W * U1, grid, traj.coefficients(T).sqrt_det)
            n = grid.dim
            vol_ok = vol1 <= (1 + c2eps) ** (n / 2) * np.sum(U1) * grid.cell_volume * (1 + 1e-12)
            samples.append(DaviesSample(t, T, lhs, rhs, d, vol1, vol2, bool(vol_ok), bool(lhs <= rhs),
                                        sharp, bool(lhs <= sharp), lhs_fwd))
    ok = all(s.holds for s in samples)
    ratio = max(s.lhs / s.rhs for s in samples) if samples else 0.0
    rep = FitReport("davies", None, None, None, ratio, (min(p[0] for p in pairs), max(p[1] for p in pairs)),
                    len(samples), passed=ok, note=f"c2eps={c2eps:.4g} c3eps={c3eps:.4g}")
    rep.extra.update(held=sum(s.holds for s in samples),
                     sharp_held=sum(s.holds_sharp for s in samples),
                     volume_bounds_ok=all(s.volume_bound_ok for s in samples),
                     route_gap=max(abs(s.lhs - s.lhs_forward) / max(s.lhs, s.lhs_forward, 1e-300) for s in samples))
    return rep, samples


def duality_gap(traj: FlowTrajectory, target: np.ndarray, x: Sequence[int], t: float, T: float) -> tuple[float, float]:
    """Compare the conjugate route ``phi_t(x)`` with the forward-kernel route ``int Phi(y,T;x,t) target(y) dmu_T``."""
    _, rec = solve_conjugate(traj, target, T, t, record=[t])
    conj = float(rec[t][tuple(x)])
    w, _ = solve_forward(traj, delta_source(traj, x, t), t, T)
    fwd = integrate(w * target, traj.grid, traj.coefficients(T).sqrt_det)
    return conj, fwd


# ------------------------------------------------------------ energy pipeline

def admissible_eta(n: int, gamma: float, c3eps: float) -> float:
    """Lower bound the time-decay exponent must exceed in the energy inequality."""
    return (1.0 / (2 * gamma)) * ((n * gamma + c3eps) / 2 + 1)


@dataclass
class PipelineResult:
    checks: dict
    reports: list
    energy: list
    davies: list
    details: dict


def energy_inequality_check(trace, c4: float, gamma: float, tol: float):
    """Fit ``c5 eps`` on the even samples, verify ``dE/dt <= c4 t^2g E + c5eps t^-2 M`` on all samples."""
    t, dE = trace.derivative()
    E = trace.values[1:-1]
    M = trace.annulus_mass[1:-1]
    excess = dE - c4 * t ** (2 * gamma) * E
    src = t**-2.0 * M
    calib = np.arange(t.size) % 2 == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(src[calib] > 0, excess[calib] / src[calib], 0.0)
    c5eps = float(max(0.0, ratios.max())) if ratios.size else 0.0
    slack = c4 * t ** (2 * gamma) * E + c5eps * src + tol - dE
    return c5eps, slack, bool(np.all(slack >= 0))


def gronwall_check(trace, c4: float, gamma: float, c5eps: float) -> np.ndarray:
    """Integrated form: ``E(T) <= exp(c4 T^(1+2g)/(1+2g)) (E(t) + int_t^T c5eps s^-2 M(s) ds)``."""
    t, E, M = trace.times, trace.values, trace.annulus_mass
    T = t[-1]
    src = c5eps * t**-2.0 * M
    cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(t) * (src[1:] + src[:-1]))])
    tail = cum[-1] - cum
    factor = math.exp(c4 / (1 + 2 * gamma) * T ** (1 + 2 * gamma))
    return factor * (E + tail) - E[-1]


@dataclass(frozen=True)
class ConeParams:
    sigma: float = 0.6
    amplitude: float = 0.05
    p: float = 4.0
    r_in: float | None = None
    r_out: float | None = None

    def radii(self, grid: GridSpec) -> tuple[float, float]:
        r_in = grid.half_width / 4 if self.r_in is None else self.r_in
        r_out = grid.half_width / 2 if self.r_out is None else self.r_out
        return r_in, r_out

    def build(self, grid: GridSpec):
        r_in, r_out = self.radii(grid)
        return make_w1p_cone(grid, (0.0,) * grid.dim, self.sigma, self.amplitude, self.p, r_in=r_in, r_out=r_out)


def pipeline_snapshots(T_max: float, octaves: int = 12, per_octave: int = 8) -> list[float]:
    return sorted(T_max * 2 ** (-k / per_octave) for k in range(octaves * per_octave))


def theorem45_pipeline(grid: GridSpec, cone: ConeParams = ConeParams(), kappa: float = 0.0, beta: float = 0.25,
                       gamma: float = 1.0, T_ladder: Sequence[float] = (0.5,), C: float = 0.25, eta: float = 1.5,
                       samples: int = 24, davies_pairs: int = 10, seed: int = 0, keep_every: int = 16,
                       battery_reach: float | None = None, bw_tol: float = 0.02,
                       trajectory: FlowTrajectory | None = None) -> PipelineResult:
    """Flow a cone datum centred at the origin and run the energy argument for the lower bound.

    Stages: distributional lower bound on a test battery, admissibility of
    eta, E(t) >= 0, the differential energy inequality with ``c5 eps``
    calibrated on half the samples, the small-t limit of E against the
    gluing constant, the integrated (Gronwall) form, the Davies bound at
    random (t, T) pairs and the final ball-infimum estimate.
    """
    check_beta(beta)
    n = grid.dim
    centre = (0.0,) * n
    x0 = grid.nearest_node(centre)
    r_in, r_out = cone.radii(grid)
    g0 = cone.build(grid)
    if trajectory is not None and not np.allclose(trajectory.initial.values, g0.values, atol=1e-14):
        raise ValueError("supplied trajectory does not start from the requested cone datum")
    checks, reports, details = {}, [], {}

    reach = 0.9 * r_in if battery_reach is None else battery_reach
    gaps = [lower_bound_gap(g0, u, kappa) for u in test_battery(grid, centre, reach)]
    details["battery_gaps"] = gaps
    checks["battery_nonnegative"] = bool(min(gaps) >= -1e-12)
    if not checks["battery_nonnegative"]:
        raise ValueError(f"datum fails the distributional lower bound on the battery: {gaps}")

    T_max = max(T_ladder)
    if trajectory is None:
        trajectory = run_flow(g0, T_max, snapshot_times=sorted(set(pipeline_snapshots(T_max)) | set(T_ladder)),
                              keep_every=keep_every)
    traj = trajectory
    if traj.t_end < T_max * (1 - 1e-12):
        raise ResolutionFloorError(f"trajectory ends at {traj.t_end:.3g} < T = {T_max:.3g}")
    c2eps, c3eps = measured_constants(traj)
    details["c2eps"], details["c3eps"] = c2eps, c3eps
    eta_min = admissible_eta(n, gamma, c3eps)
    details["eta_min"] = eta_min
    if not eta > eta_min:
        raise ValueError(f"eta = {eta} is not admissible; need eta > {eta_min:.4g}")
    checks["eta_admissible"] = True

    profile = make_cutoff("phi_radial")
    g_local = raw_cone(grid, centre, cone.sigma, cone.amplitude, -np.eye(n))
    chi = make_cutoff("chi_space", r_in, r_out, centre)
    eps = float(np.max(np.abs(g_local.perturbation())[grid.radius(centre) <= r_out]))
    edge = grid.half_width - grid.collar_width
    inner = make_cutoff("chi_space", 0.5 * edge, edge, centre).on_grid(grid)
    snaps = np.array(traj.snapshot_times)
    energies = []
    for T in T_ladder:
        phi_T = bump(grid, centre, C * T**beta).values
        ts = np.unique(snaps[snaps <= T * (1 + 1e-12)])
        if ts.size > samples:
            ts = ts[np.unique(np.round(np.linspace(0, ts.size - 1, samples)).astype(int))]
        _, rec = solve_conjugate(traj, phi_T, T, float(ts.min()), record=list(ts))
        rec[float(ts[-1])] = phi_T
        psi, annulus = {}, {}
        for t in ts:
            d = geodesic_distance(traj.metric(t), x0, t).values
            psi[t], annulus[t] = cutoff_from_distance(d, t, gamma, profile)
        trace = energy_functional(traj, {t: rec[t] for t in ts}, psi, kappa, annulus, beta=beta, gamma=gamma, T=T)
        energies.append(trace)
        tol = 1e-6 * max(1e-12, float(np.max(np.abs(trace.values)))) / T
        c5eps, slack, ok = energy_inequality_check(trace, profile.c4, gamma, tol)
        u0 = ScalarField(grid, np.maximum(rec[float(ts.min())], 0.0) * inner.values)
        c3_glue = gluing_error_check(g_local, chi, u0)
        E0 = float(trace.values[0])
        gron = gronwall_check(trace, profile.c4, gamma, c5eps)
        key = f"T={T:g}"
        checks[f"energy_nonnegative[{key}]"] = bool(np.all(trace.values >= -1e-12))
        checks[f"energy_inequality[{key}]"] = ok
        checks[f"energy_limit[{key}]"] = bool(E0 <= 5 * c3_glue * eps + 1e-14)
        checks[f"gronwall[{key}]"] = bool(np.all(gron >= -1e-12))
        details[key] = {"c5eps": c5eps, "min_slack": float(slack.min()) if slack.size else 0.0, "E0": E0,
                        "t0": float(ts.min()), "c3_glue": c3_glue, "eps": eps,
                        "et_exponent": (beta * n - gamma * n) / 2 + eta + 2 * gamma * eta - 1}

    pairs = davies_pairs_sample(traj, grid, centre, T_max, C, beta, gamma, c2eps, davies_pairs, seed)
    drep, dsamples = davies_check(traj, centre, pairs, C, beta, gamma, (c2eps, c3eps))
    checks["davies"] = drep.passed
    reports.append(drep)

    est = beta_weak_report(traj, x0, beta)
    details["beta_weak"] = est
    details["beta_weak_passed"] = bool(est.estimate >= kappa - bw_tol)
    return PipelineResult(checks, reports, energies, dsamples, details)


def davies_pairs_sample(traj: FlowTrajectory, grid: GridSpec, centre, T_max: float, C: float, beta: float,
                        gamma: float, c2eps: float, count: int, seed: int) -> list[tuple[float, float]]:
    """Random stored (t, T) pairs, T in [T_max/2, T_max], whose annulus U2 reaches inside the collar."""
    snaps = np.array(traj.snapshot_times)
    interior = ~grid.collar_mask()
    candidates = []
    for T in snaps[snaps >= T_max / 2 * (1 - 1e-12)]:
        for t in snaps[snaps < T]:
            try:
                _, U2, _ = davies_regions(grid, centre, float(t), float(T), C, beta, gamma, c2eps)
            except ValueError:
                continue
            if np.any(U2 & interior):
                candidates.append((float(t), float(T)))
    if len(candidates) < count:
        raise ResolutionFloorError(f"only {len(candidates)} (t, T) pairs keep U2 inside the box")
    rng = np.random.default_rng(seed)
    return [candidates[int(i)] for i in sorted(rng.choice(len(candidates), count, replace=False))]
