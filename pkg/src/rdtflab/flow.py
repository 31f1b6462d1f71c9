"""Ricci-DeTurck flow against the Euclidean background, scalar heat kernels and distances.

The flow is ``d_t g = -2 Ric(g) - L_{X(g)} g`` with ``X^k = -g^ij Gamma^k_ij``,
advanced with explicit Heun (RK2) steps of size ``dt = sigma h^2 / max(1, |g^-1|)``.
Scalar equations along a stored trajectory interpolate the per-slice
coefficients (inverse metric, volume density, DeTurck field, scalar curvature)
linearly in time.
"""

from __future__ import annotations

import csv
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .curvature import (
    Geometry,
    diff,
    directional_derivative,
    inverse_components,
    laplace_beltrami_array,
    lie_derivative_components,
    riemann_norm_components,
    to_components,
    to_nodes,
)
from .field_core import (
    EIGEN_FLOOR,
    GridSpec,
    MetricField,
    NonInvertibleMetricError,
    ScalarField,
    identity_field,
    integrate,
    min_eigenvalue,
    read_field_binary,
    second_partials,
    write_field_binary,
)

log = logging.getLogger(__name__)

SIGMA_DEFAULT = 0.1
SCALAR_SIGMA = 0.15


class CFLViolation(ValueError):
    pass


def max_inverse_eigenvalue(g: np.ndarray) -> float:
    """Largest eigenvalue of g^-1 over all nodes (node-major input)."""
    return float(1.0 / np.min(min_eigenvalue(g)))


def stable_dt(g: MetricField, sigma: float = SIGMA_DEFAULT) -> float:
    return sigma * g.grid.spacing**2 / max(1.0, max_inverse_eigenvalue(g.values))


def _check_pd_components(gcf: np.ndarray) -> None:
    lam = min_eigenvalue(to_nodes(gcf, 2))
    bad = ~(lam > EIGEN_FLOOR)
    if np.any(bad):
        node = np.unravel_index(int(np.argmax(bad)), lam.shape)
        raise NonInvertibleMetricError(tuple(int(i) for i in node), float(lam[node]))


def _rhs(gcf: np.ndarray, h: float) -> np.ndarray:
    geo = Geometry(gcf, h)
    out = -2.0 * geo.ricci() - lie_derivative_components(geo.deturck(), gcf, geo.dg, h)
    return out


def _outer_layer(shape: tuple[int, ...]) -> np.ndarray:
    mask = np.zeros(shape, bool)
    for a in range(len(shape)):
        idx = [slice(None)] * len(shape)
        idx[a] = [0, -1]
        mask[tuple(idx)] = True
    return mask


def _heun(gcf: np.ndarray, dt: float, h: float, pinned: np.ndarray | None = None) -> np.ndarray:
    """Heun step; nodes in ``pinned`` keep their input values (Dirichlet layer)."""
    k1 = _rhs(gcf, h)
    if pinned is not None:
        k1[..., pinned] = 0.0
    mid = gcf + dt * k1
    _check_pd_components(mid)
    k2 = _rhs(mid, h)
    if pinned is not None:
        k2[..., pinned] = 0.0
    new = gcf + 0.5 * dt * (k1 + k2)
    _check_pd_components(new)
    return new


def rdtf_step(g: MetricField, dt: float, sigma: float = SIGMA_DEFAULT, pin_boundary: bool = False) -> MetricField:
    """One Heun step of the Ricci-DeTurck flow; ``pin_boundary`` freezes the outermost node layer."""
    limit = stable_dt(g, sigma)
    if dt > limit * (1 + 1e-12):
        raise CFLViolation(f"dt = {dt:.3e} exceeds sigma h^2 / max(1, |g^-1|) = {limit:.3e}")
    pinned = _outer_layer(g.grid.shape) if pin_boundary else None
    new = _heun(to_components(g.values, 2), dt, g.grid.spacing, pinned)
    t = None if g.time_tag is None else g.time_tag + dt
    return MetricField(g.grid, to_nodes(new, 2), time_tag=t)


# ------------------------------------------------------------ diagnostics

def slice_diagnostics(g: MetricField, mask: np.ndarray | None = None) -> dict[str, float]:
    """Sup-norms of g - delta, its first/second derivatives, R, |Rm| and dR (over ``mask`` if given)."""
    grid = g.grid
    h, n = grid.spacing, grid.dim
    gcf = to_components(g.values, 2)
    geo = Geometry(gcf, h)
    ric = geo.ricci()
    R = geo.trace_with_inverse(ric)
    dev = g.values - identity_field(grid)
    d1 = sum(geo.dg[i][j][k] ** 2 for i in range(n) for j in range(n) for k in range(n))
    d2 = np.sum(second_partials(dev, h, n) ** 2, axis=(-4, -3, -2, -1))
    dR = sum(diff(R, h, k) ** 2 for k in range(n))
    rm = riemann_norm_components(geo.riemann(), gcf, geo.ginv)
    m = np.ones(grid.shape, bool) if mask is None else mask
    return {
        "sup_dev": float(np.max(np.abs(dev[m]))),
        "sup_dg": float(np.sqrt(d1[m].max())),
        "sup_d2g": float(np.sqrt(d2[m].max())),
        "sup_R": float(np.max(np.abs(R[m]))),
        "sup_Rm": float(np.max(rm[m])),
        "sup_dR": float(np.sqrt(dR[m].max())),
        "min_R": float(np.min(R[m])),
    }


DIAGNOSTIC_KEYS = ("sup_dev", "sup_dg", "sup_d2g", "sup_R", "sup_Rm", "sup_dR", "min_R")


@dataclass
class SliceCoefficients:
    ginv: np.ndarray  # component-first
    sqrt_det: np.ndarray
    X: np.ndarray  # component-first
    R: np.ndarray


@dataclass
class FlowTrajectory:
    """Stored slices of a Ricci-DeTurck flow.

    ``slices`` holds ``(t, g(t))`` with strictly increasing ``t > 0``; the
    initial datum is kept separately.  ``snapshot_times`` marks the slices
    that were requested explicitly (the rest are dense storage for the
    scalar solvers).
    """

    initial: MetricField
    slices: list[tuple[float, MetricField]] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    scheme: dict = field(default_factory=dict)
    snapshot_times: list[float] = field(default_factory=list)
    _coef_cache: OrderedDict = field(default_factory=OrderedDict, repr=False)
    cache_size: int = 64
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def grid(self) -> GridSpec:
        return self.initial.grid

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.slices])

    @property
    def t_end(self) -> float:
        return self.slices[-1][0]

    def append(self, t: float, g: MetricField, diagnostics: dict | None = None) -> None:
        if self.slices and t <= self.slices[-1][0]:
            raise ValueError("slice times must be strictly increasing")
        if t <= 0:
            raise ValueError("stored slices need t > 0")
        self.slices.append((t, g.with_time(t)))
        self.diagnostics.append(diagnostics if diagnostics is not None else slice_diagnostics(g))

    def slice_index(self, t: float, rtol: float = 1e-9) -> int:
        times = self.times
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > rtol * max(1.0, abs(t)):
            raise KeyError(f"no slice at t = {t}")
        return k

    def metric(self, t: float) -> MetricField:
        return self.slices[self.slice_index(t)][1]

    def snapshot_diagnostics(self) -> list[tuple[float, dict]]:
        out = []
        for t in self.snapshot_times:
            k = self.slice_index(t)
            out.append((t, self.diagnostics[k]))
        return out

    def _all_times(self) -> np.ndarray:
        return np.concatenate([[0.0], self.times])

    def _metric_by_index(self, k: int) -> MetricField:
        return self.initial if k == 0 else self.slices[k - 1][1]

    def coefficients_by_index(self, k: int) -> SliceCoefficients:
        cache = self._coef_cache
        with self._lock:
            if k in cache:
                cache.move_to_end(k)
                return cache[k]
        g = self._metric_by_index(k)
        geo = Geometry(to_components(g.values, 2), self.grid.spacing)
        R = geo.trace_with_inverse(geo.ricci())
        coef = SliceCoefficients(geo.ginv, np.sqrt(geo.det), np.array(geo.deturck()), R)
        with self._lock:
            cache[k] = coef
            while len(cache) > self.cache_size:
                cache.popitem(last=False)
        return coef

    def coefficients(self, t: float) -> SliceCoefficients:
        """Coefficients at time t, linear in time between stored slices."""
        times = self._all_times()
        if t < 0 or t > times[-1] * (1 + 1e-12):
            raise ValueError(f"t = {t} outside trajectory span [0, {times[-1]}]")
        k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
        t0, t1 = times[k], times[k + 1]
        lam = (t - t0) / (t1 - t0)
        if lam <= 1e-12:
            return self.coefficients_by_index(k)
        if lam >= 1 - 1e-12:
            return self.coefficients_by_index(k + 1)
        a, b = self.coefficients_by_index(k), self.coefficients_by_index(k + 1)
        return SliceCoefficients(*((1 - lam) * x + lam * y for x, y in
                                   ((a.ginv, b.ginv), (a.sqrt_det, b.sqrt_det), (a.X, b.X), (a.R, b.R))))

    def scalar_curvature(self, t: float) -> np.ndarray:
        k = self.slice_index(t)
        return self.coefficients_by_index(k + 1).R

    def volume_density(self, t: float) -> np.ndarray:
        if t == 0:
            return self.coefficients_by_index(0).sqrt_det
        return self.coefficients_by_index(self.slice_index(t) + 1).sqrt_det


def geometric_snapshots(t_end: float, count: int = 10, ratio: float = 2.0) -> list[float]:
    """``t_end * ratio**-k`` for k = 0..count-1, ascending."""
    return sorted(t_end * ratio ** (-k) for k in range(count))


def run_flow(
    g0: MetricField,
    t_end: float,
    snapshot_times: Sequence[float] | None = None,
    sigma: float = SIGMA_DEFAULT,
    keep_every: int | None = None,
    strict_collar: bool = True,
    dt: float | None = None,
) -> FlowTrajectory:
    """Integrate the flow from ``g0`` up to ``t_end``, landing exactly on snapshot times.

    ``keep_every`` additionally stores every k-th step (needed by the kernel
    and conjugate solvers).  With ``strict_collar`` the datum must already be
    flat on the boundary collar and the outermost node layer is held at
    delta; otherwise the boundary evolves with one-sided differences.
    """
    dev = float(np.max(np.abs(g0.perturbation())))
    if not dev < 1.0:
        raise ValueError(f"||g0 - delta||_C0 = {dev:.3f} must be < 1")
    if strict_collar and g0.collar_defect() > 1e-12:
        raise ValueError(f"g0 is not flat on the boundary collar (defect {g0.collar_defect():.2e})")
    if snapshot_times is None:
        snapshot_times = geometric_snapshots(t_end)
    snaps = sorted(float(t) for t in snapshot_times if 0 < t <= t_end * (1 + 1e-12))
    if not snaps or abs(snaps[-1] - t_end) > 1e-12 * t_end:
        snaps.append(t_end)
    h = g0.grid.spacing
    step = dt if dt is not None else stable_dt(g0, sigma)
    traj = FlowTrajectory(g0, scheme={"scheme": "heun", "sigma": sigma, "dt": step, "keep_every": keep_every,
                                      "boundary": "dirichlet" if strict_collar else "free"},
                          snapshot_times=list(snaps))
    gcf = to_components(g0.values, 2)
    pinned = _outer_layer(g0.grid.shape) if strict_collar else None
    t, n_steps, k_snap = 0.0, 0, 0
    while k_snap < len(snaps):
        target = snaps[k_snap]
        lam_max = 1.0 / float(np.min(min_eigenvalue(to_nodes(gcf, 2))))
        local = min(step, sigma * h * h / max(1.0, lam_max))
        this_dt = min(local, target - t)
        landing = this_dt >= target - t - 1e-15 * max(1.0, target)
        gcf = _heun(gcf, this_dt, h, pinned)
        t = target if landing else t + this_dt
        n_steps += 1
        store = landing or (keep_every is not None and n_steps % keep_every == 0)
        if store and (not traj.slices or t > traj.slices[-1][0]):
            traj.append(t, MetricField(g0.grid, to_nodes(gcf, 2), time_tag=t))
        if landing:
            k_snap += 1
    traj.scheme["steps"] = n_steps
    log.debug("run_flow: %d steps, %d slices", n_steps, len(traj.slices))
    return traj


# ------------------------------------------------------- scalar equations

def _scalar_dt(traj: FlowTrajectory, sigma: float = SCALAR_SIGMA) -> float:
    lam = max(max_inverse_eigenvalue(traj.initial.values),
              max(max_inverse_eigenvalue(g.values) for _, g in traj.slices[:: max(1, len(traj.slices) // 8)]))
    return sigma * traj.grid.spacing**2 / max(1.0, lam)


def _forward_rate(c: SliceCoefficients, w: np.ndarray, h: float) -> np.ndarray:
    return laplace_beltrami_array(w, c.ginv, c.sqrt_det, h) - directional_derivative(c.X, w, h)


def _conjugate_rate(c: SliceCoefficients, phi: np.ndarray, h: float) -> np.ndarray:
    """Rate in reversed time s = -t: ``Delta phi - R phi + X.d phi``."""
    return laplace_beltrami_array(phi, c.ginv, c.sqrt_det, h) - c.R * phi + directional_derivative(c.X, phi, h)


def _time_grid(a: float, b: float, dt: float) -> np.ndarray:
    n = max(1, int(np.ceil((b - a) / dt - 1e-9)))
    return np.linspace(a, b, n + 1)


def solve_forward(traj: FlowTrajectory, w0: np.ndarray, s: float, t: float,
                  record: Sequence[float] = ()) -> tuple[np.ndarray, dict[float, np.ndarray]]:
    """Solve ``d_t w = Delta_g w - X.dw`` from time s to t (Heun)."""
    h = traj.grid.spacing
    times = _time_grid(s, t, _scalar_dt(traj))
    marks = {float(r) for r in record}
    out, w = {}, np.array(w0, dtype=float)
    for a, b in zip(times[:-1], times[1:]):
        k1 = _forward_rate(traj.coefficients(a), w, h)
        k2 = _forward_rate(traj.coefficients(b), w + (b - a) * k1, h)
        w = w + 0.5 * (b - a) * (k1 + k2)
        for r in list(marks):
            if abs(r - b) < 1e-12 * max(1.0, b):
                out[r] = w.copy()
                marks.discard(r)
    return w, out


def solve_conjugate(traj: FlowTrajectory, phi_T: np.ndarray, T: float, t: float,
                    record: Sequence[float] = ()) -> tuple[np.ndarray, dict[float, np.ndarray]]:
    """Solve ``d_t phi = -Delta phi + R phi - X.d phi`` backwards from T to t."""
    h = traj.grid.spacing
    times = _time_grid(t, T, _scalar_dt(traj))
    for r in record:  # make every requested time a node of the time grid
        if t < r < T and not np.any(np.isclose(times, r, rtol=0, atol=1e-13)):
            times = np.sort(np.append(times, r))
    times = times[::-1]
    marks = {float(r) for r in record}
    out, phi = {}, np.array(phi_T, dtype=float)
    if any(abs(r - T) < 1e-13 for r in marks):
        out[T] = phi.copy()
    for a, b in zip(times[:-1], times[1:]):
        ds = a - b
        k1 = _conjugate_rate(traj.coefficients(a), phi, h)
        k2 = _conjugate_rate(traj.coefficients(b), phi + ds * k1, h)
        phi = phi + 0.5 * ds * (k1 + k2)
        for r in list(marks):
            if abs(r - b) < 1e-12 * max(1.0, abs(b)):
                out[r] = phi.copy()
                marks.discard(r)
    return phi, out


def conjugate_heat_solve(traj: FlowTrajectory, terminal: ScalarField, T: float, t: float) -> ScalarField:
    """Conjugate heat equation along the flow, from ``phi_T = terminal`` back to time t."""
    if not 0 <= t < T:
        raise ValueError(f"need 0 <= t < T, got t = {t}, T = {T}")
    if np.any(terminal.values < 0):
        raise ValueError("terminal data must be nonnegative")
    if np.any(terminal.values[traj.grid.collar_mask()] != 0):
        raise ValueError("terminal data must vanish on the boundary collar")
    phi, _ = solve_conjugate(traj, terminal.values, T, t)
    return ScalarField(traj.grid, phi)


def pairing(traj: FlowTrajectory, phi: np.ndarray, w: np.ndarray, t: float) -> float:
    """``int phi w dmu_t``."""
    return integrate(phi * w, traj.grid, traj.coefficients(t).sqrt_det)


# ----------------------------------------------------------------- kernels

@dataclass
class KernelField:
    source: tuple[int, ...]
    s: float
    t: float
    density: ScalarField
    mass: float


def delta_source(traj: FlowTrajectory, node: Sequence[int], s: float) -> np.ndarray:
    """Nodal delta with unit mass against dmu_s."""
    grid = traj.grid
    w = np.zeros(grid.shape)
    node = tuple(node)
    w[node] = 1.0 / (grid.cell_volume * traj.coefficients(s).sqrt_det[node])
    return w


def heat_kernel(traj: FlowTrajectory, y: Sequence[int], s: float, t: float) -> KernelField:
    """Forward kernel ``x -> Phi(x, t; y, s)`` of ``d_t - Delta_g(t) + X.d``."""
    if not s < t:
        raise ValueError(f"need s < t, got s = {s}, t = {t}")
    y = tuple(int(i) for i in y)
    if traj.grid.collar_mask()[y]:
        raise ValueError(f"source node {y} lies in the boundary collar")
    w, _ = solve_forward(traj, delta_source(traj, y, s), s, t)
    mass = integrate(w, traj.grid, traj.coefficients(t).sqrt_det)
    return KernelField(y, s, t, ScalarField(traj.grid, w), mass)


def kernel_source_mass(traj: FlowTrajectory, x: Sequence[int], s: float, t: float) -> float:
    """``int Phi(x, t; y, s) dmu_s(y)`` via the conjugate solve from a delta at (x, t)."""
    phi, _ = solve_conjugate(traj, delta_source(traj, x, t), t, s)
    return integrate(phi, traj.grid, traj.coefficients(s).sqrt_det)


def tail_masses(kernel: KernelField, traj: FlowTrajectory, radii: Sequence[float]) -> np.ndarray:
    grid = traj.grid
    dist = grid.radius(grid.node_position(kernel.source))
    dens = kernel.density.values * traj.coefficients(kernel.t).sqrt_det
    return np.array([integrate(dens * (dist > r), grid) for r in radii])


@dataclass
class TailFit:
    C2: float
    D: float
    radii: np.ndarray
    tails: np.ndarray
    satisfied: bool


def fit_gaussian_tail(kernel: KernelField, traj: FlowTrajectory, radii: Sequence[float] | None = None,
                      floor: float = 1e-9) -> TailFit:
    """Least-squares fit of ``log tail = log C2 - r^2 / (D (t - s))``; C2 is then raised to envelope all samples.

    Default radii stop where the ball around the source would cross into the
    boundary collar, so the box does not truncate the tail.
    """
    tau = kernel.t - kernel.s
    if radii is None:
        grid = traj.grid
        edge = grid.half_width - grid.collar_width - np.max(np.abs(grid.node_position(kernel.source)))
        radii = np.linspace(2 * grid.spacing, min(6 * np.sqrt(tau), edge), 24)
    radii = np.asarray(radii, dtype=float)
    tails = tail_masses(kernel, traj, radii)
    ok = tails > floor
    if ok.sum() < 3:
        raise ValueError("too few tail samples above the floor to fit")
    slope, _ = np.polyfit(radii[ok] ** 2, np.log(tails[ok]), 1)
    D = -1.0 / (slope * tau)
    C2 = float(np.max(tails[ok] * np.exp(radii[ok] ** 2 / (D * tau))))
    bound = C2 * np.exp(-radii**2 / (D * tau))
    return TailFit(C2, D, radii, tails, bool(np.all(tails[ok] <= bound[ok] * (1 + 1e-12))))


# ------------------------------------------------------- evolution residual

def scalar_evolution_residual(traj: FlowTrajectory, t: float) -> ScalarField:
    """``d_t R - (Delta R - X.dR + 2|Ric|^2)`` at a stored interior slice."""
    times = traj.times
    k = traj.slice_index(t)
    if k == 0 or k == len(times) - 1:
        raise ValueError(f"t = {t} is not bracketed by stored slices")
    t0, t1, t2 = times[k - 1], times[k], times[k + 1]
    h = traj.grid.spacing
    Rs = [traj.coefficients_by_index(j + 1).R for j in (k - 1, k, k + 1)]
    a, b = t1 - t0, t2 - t1
    dRdt = (-b / (a * (a + b))) * Rs[0] + ((b - a) / (a * b)) * Rs[1] + (a / (b * (a + b))) * Rs[2]
    g = traj.slices[k][1]
    geo = Geometry(to_components(g.values, 2), h)
    ric = geo.ricci()
    R = geo.trace_with_inverse(ric)
    n = geo.n
    gi = geo.ginv
    ric_up = [[sum(gi[i, a_] * gi[j, b_] * ric[a_, b_] for a_ in range(n) for b_ in range(n))
               for j in range(n)] for i in range(n)]
    ric_sq = sum(ric[i, j] * ric_up[i][j] for i in range(n) for j in range(n))
    rhs = (laplace_beltrami_array(R, gi, np.sqrt(geo.det), h)
           - directional_derivative(geo.deturck(), R, h) + 2.0 * ric_sq)
    return ScalarField(traj.grid, dRdt - rhs)


# ----------------------------------------------------------------- distance

@dataclass
class DistanceField:
    base: tuple[int, ...]
    time: float | None
    values: np.ndarray


_GRAPH_CACHE: dict = {}


def _stencil_edges(grid: GridSpec):
    key = (grid.dim, grid.points_per_axis)
    if key not in _GRAPH_CACHE:
        shape = grid.shape
        index = np.arange(np.prod(shape)).reshape(shape)
        offsets = [o for o in np.ndindex(*(3,) * grid.dim)]
        offsets = [tuple(c - 1 for c in o) for o in offsets]
        offsets = [o for o in offsets if any(o) and next(c for c in o if c != 0) > 0]
        edges = []
        for o in offsets:
            src = tuple(slice(max(0, -c), shape[0] - max(0, c)) for c in o)
            dst = tuple(slice(max(0, c), shape[0] - max(0, -c)) for c in o)
            edges.append((np.array(o, dtype=float), src, dst, index[src].ravel(), index[dst].ravel()))
        _GRAPH_CACHE[key] = edges
    return _GRAPH_CACHE[key]


def edge_lengths(g: np.ndarray, grid: GridSpec, offset: np.ndarray, src, dst) -> np.ndarray:
    """Metric length of the straight segment, metric taken at the segment midpoint."""
    v = offset * grid.spacing
    gm = 0.5 * (g[src] + g[dst])
    return np.sqrt(np.einsum("i,...ij,j->...", v, gm, v)).ravel()


def geodesic_distance(g: MetricField, x0: Sequence[int], time: float | None = None,
                      edge_length=edge_lengths) -> DistanceField:
    """Dijkstra distance from node ``x0`` on the 3^n-stencil graph."""
    grid = g.grid
    rows, cols, data = [], [], []
    for off, src, dst, i_src, i_dst in _stencil_edges(grid):
        rows.append(i_src)
        cols.append(i_dst)
        data.append(edge_length(g.values, grid, off, src, dst))
    size = int(np.prod(grid.shape))
    graph = coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(size, size)).tocsr()
    x0 = tuple(int(i) for i in x0)
    start = int(np.ravel_multi_index(x0, grid.shape))
    d = dijkstra(graph, directed=False, indices=start)
    return DistanceField(x0, time, d.reshape(grid.shape))


def distance_barrier_check(traj: FlowTrajectory, x0: Sequence[int], t: float, r0: float,
                           sample_nodes: Sequence[Sequence[int]]) -> dict:
    """Measure ``(d_t - Delta) d`` (DeTurck-corrected) against the distance-barrier lower bound.

    The Ricci-flow distance pulled back along the DeTurck diffeomorphisms has
    time derivative ``d_t d + X.dd``; the Laplacian is the compact
    Laplace-Beltrami operator.  K is the largest Ricci eigenvalue over the
    r0-ball divided by (n - 1).
    """
    times = traj.times
    k = traj.slice_index(t)
    if k == 0 or k == len(times) - 1:
        raise ValueError("t must be bracketed by stored slices")
    h = traj.grid.spacing
    n = traj.grid.dim
    ds = [geodesic_distance(traj.slices[j][1], x0, times[j]).values for j in (k - 1, k, k + 1)]
    ddt = (ds[2] - ds[0]) / (times[k + 1] - times[k - 1])
    g = traj.slices[k][1]
    geo = Geometry(to_components(g.values, 2), h)
    lap = laplace_beltrami_array(ds[1], geo.ginv, np.sqrt(geo.det), h)
    xdd = directional_derivative(geo.deturck(), ds[1], h)
    ric = to_nodes(geo.ricci(), 2)
    # Ricci eigenvalues relative to g: eig(g^-1 Ric)
    rel = np.linalg.eigvals(np.linalg.solve(g.values, ric)).real.max(axis=-1)
    ball = ds[1] < r0
    K = max(float(rel[ball].max()) / (n - 1), 0.0)
    bound = -(n - 1) * (2.0 / 3.0 * K * r0 + 1.0 / r0)
    tol = 5 * h
    values = []
    for node in sample_nodes:
        node = tuple(int(i) for i in node)
        if ds[1][node] >= r0:
            values.append(float(ddt[node] + xdd[node] - lap[node]))
    values = np.array(values)
    return {"K": K, "bound": bound, "tol": tol, "values": values,
            "holds": bool(values.size > 0 and np.all(values >= bound - tol))}


# ------------------------------------------------------------- checkpoints

def save_trajectory(traj: FlowTrajectory, directory: str | Path) -> Path:
    """One binary field file per slice plus ``manifest.csv`` of times and diagnostics."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_field_binary(traj.initial, directory / "slice_00000.bin")
    rows = [["index", "t", "file", "snapshot", *DIAGNOSTIC_KEYS]]
    rows.append([0, repr(0.0), "slice_00000.bin", 1] + [""] * len(DIAGNOSTIC_KEYS))
    snaps = set(traj.snapshot_times)
    for k, ((t, g), diag) in enumerate(zip(traj.slices, traj.diagnostics), start=1):
        name = f"slice_{k:05d}.bin"
        write_field_binary(g, directory / name)
        rows.append([k, repr(float(t)), name, int(t in snaps)] + [repr(diag[key]) for key in DIAGNOSTIC_KEYS])
    with open(directory / "manifest.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return directory / "manifest.csv"


def load_trajectory(directory: str | Path) -> FlowTrajectory:
    directory = Path(directory)
    with open(directory / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    initial = read_field_binary(directory / rows[0]["file"])
    traj = FlowTrajectory(initial)
    for row in rows[1:]:
        t = float(row["t"])
        g = read_field_binary(directory / row["file"])
        traj.append(t, g, {key: float(row[key]) for key in DIAGNOSTIC_KEYS})
        if row["snapshot"] == "1":
            traj.snapshot_times.append(t)
    return traj
