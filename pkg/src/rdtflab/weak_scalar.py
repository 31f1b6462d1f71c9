"""Rough test metrics, cutoffs, gluing to flat space and the distributional scalar curvature.

With the Euclidean background the pairing against a test function u is

    <<R_g, u>> = int ( -V . d(u sqrt g) + F u sqrt g ) dx

where ``V^k = g^ij g^kl (d_j g_il - d_l g_ij)`` and
``F = -d_k g^ij Gamma^k_ij + d_k g^ik Gamma^j_ji + g^ij (Gamma^k_kl Gamma^l_ij - Gamma^k_jl Gamma^l_ik)``.
Only first derivatives of g enter, so the pairing makes sense for W^{1,p}
metrics.  For smooth g it equals ``int R u dmu_g``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import convolve

from .curvature import Geometry, diff, to_components
from .field_core import (
    GridSpec,
    MetricField,
    ScalarField,
    VectorField,
    c0_deviation,
    identity_field,
    integrate,
    partial_derivatives,
)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ cutoffs

def smoothstep(x: np.ndarray) -> np.ndarray:
    """Quintic smoothstep, 0 for x <= 0 and 1 for x >= 1, C^2."""
    x = np.clip(x, 0.0, 1.0)
    return x**3 * (10 - 15 * x + 6 * x * x)


def smoothstep_d1(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return 30 * x * x * (1 - x) ** 2


def smoothstep_d2(x: np.ndarray) -> np.ndarray:
    inside = (x > 0) & (x < 1)
    x = np.clip(x, 0.0, 1.0)
    return np.where(inside, 60 * x * (1 - x) * (1 - 2 * x), 0.0)


CUTOFF_KINDS = ("chi_space", "phi_radial")


@dataclass(frozen=True)
class CutoffProfile:
    """Radial profile ``1 - smoothstep((s - r_in)/(r_out - r_in))``.

    ``chi_space`` is evaluated on the grid at Euclidean distance from
    ``center``; ``phi_radial`` is the one-variable profile composed with a
    distance (default transition on [1/2, 1]).  ``c4`` bounds ``|phi'|`` and
    ``-phi''/phi``.
    """

    kind: str
    r_in: float
    r_out: float
    center: tuple[float, ...] | None = None
    c4: float = field(default=0.0)

    @property
    def width(self) -> float:
        return self.r_out - self.r_in

    def __call__(self, s) -> np.ndarray:
        return 1.0 - smoothstep((np.asarray(s, dtype=float) - self.r_in) / self.width)

    def d1(self, s) -> np.ndarray:
        return -smoothstep_d1((np.asarray(s, dtype=float) - self.r_in) / self.width) / self.width

    def d2(self, s) -> np.ndarray:
        return -smoothstep_d2((np.asarray(s, dtype=float) - self.r_in) / self.width) / self.width**2

    def on_grid(self, grid: GridSpec) -> ScalarField:
        center = self.center if self.center is not None else (0.0,) * grid.dim
        return ScalarField(grid, self(grid.radius(center)))


def make_cutoff(kind: str, r_in: float | None = None, r_out: float | None = None,
                center: Sequence[float] | None = None) -> CutoffProfile:
    if kind not in CUTOFF_KINDS:
        raise ValueError(f"unknown cutoff kind {kind!r}; expected one of {CUTOFF_KINDS}")
    if kind == "phi_radial":
        r_in = 0.5 if r_in is None else r_in
        r_out = 1.0 if r_out is None else r_out
    if r_in is None or r_out is None:
        raise ValueError("chi_space needs r_in and r_out")
    if not 0 <= r_in < r_out:
        raise ValueError(f"need 0 <= r_in < r_out, got r_in = {r_in}, r_out = {r_out}")
    w = r_out - r_in
    x = np.linspace(0.0, 0.5, 200001)
    neg_curv = float((smoothstep_d2(x) / (1.0 - smoothstep(x))).max()) / w**2
    c4 = max(15.0 / 8.0 / w, neg_curv) * (1 + 1e-9)
    return CutoffProfile(kind, float(r_in), float(r_out),
                         None if center is None else tuple(float(c) for c in center), c4)


# ------------------------------------------------------------------ gluing

def glue_to_flat(g_local: MetricField, chi: CutoffProfile) -> MetricField:
    """``chi g_local + (1 - chi) delta``; exact copies where chi is 0 or 1."""
    grid = g_local.grid
    c = chi.on_grid(grid).values
    if np.any((c > 0) & grid.collar_mask()):
        raise ValueError("cutoff support reaches the boundary collar")
    flat = identity_field(grid)
    mixed = flat + c[..., None, None] * (g_local.values - flat)
    out = np.where((c == 1.0)[..., None, None], g_local.values, mixed)
    out = np.where((c == 0.0)[..., None, None], flat, out)
    return MetricField(grid, out)


def make_w1p_cone(grid: GridSpec, center: Sequence[float] | None = None, sigma: float = 0.6,
                  amplitude: float = 0.05, p: float = 4.0, direction: np.ndarray | None = None,
                  r_in: float | None = None, r_out: float | None = None) -> MetricField:
    """``delta + a eta(x) |x - x_c|^sigma A`` with a smoothstep bump eta.

    Default direction ``A = -I`` (a conformal factor ``1 - a r^sigma``, whose
    scalar curvature is positive near the tip).  Default bump: 1 on
    ``B(x_c, L/4)``, 0 outside ``B(x_c, L/2)``.
    """
    n = grid.dim
    if not p > n:
        raise ValueError(f"need p > n, got p = {p}, n = {n}")
    if not 1 - n / p < sigma < 1:
        raise ValueError(f"need 1 - n/p < sigma < 1 for a W^1,p cone, got sigma = {sigma}")
    if not 0 <= amplitude < 0.5:
        raise ValueError(f"amplitude must lie in [0, 0.5), got {amplitude}")
    center = (0.0,) * n if center is None else tuple(float(c) for c in center)
    r_in = grid.half_width / 4 if r_in is None else r_in
    r_out = grid.half_width / 2 if r_out is None else r_out
    A = -np.eye(n) if direction is None else np.asarray(direction, dtype=float)
    if A.shape != (n, n) or not np.array_equal(A, A.T):
        raise ValueError("direction must be a symmetric n x n matrix")
    return glue_to_flat(raw_cone(grid, center, sigma, amplitude, A), make_cutoff("chi_space", r_in, r_out, center))


def raw_cone(grid: GridSpec, center: Sequence[float], sigma: float, amplitude: float,
             direction: np.ndarray) -> MetricField:
    """The unglued cone ``delta + a |x - x_c|^sigma A`` on the whole box."""
    r = grid.radius(center)
    return MetricField(grid, identity_field(grid) + amplitude * (r**sigma)[..., None, None] * direction)


def smooth_bump_metric(grid: GridSpec, amplitude: float = 0.05, radius: float | None = None,
                       center: Sequence[float] | None = None, direction: np.ndarray | None = None) -> MetricField:
    """``delta + a b(x) A`` with a C-infinity bump b of the given radius (default L/2).

    The default direction mixes a diagonal and an off-diagonal part so the
    DeTurck field does not vanish.
    """
    n = grid.dim
    center = (0.0,) * n if center is None else center
    radius = grid.half_width / 2 if radius is None else radius
    if direction is None:
        direction = np.eye(n)
        direction[0, 0], direction[0, 1], direction[1, 0] = -0.5, 0.5, 0.5
    b = bump(grid, center, radius).values
    return MetricField(grid, identity_field(grid) + amplitude * b[..., None, None] * np.asarray(direction))


def gradient_power_integral(g: MetricField, p: float, center: Sequence[float], radius: float = 1.0) -> float:
    """``int_{B(center, radius)} |dg|^p dx`` with the Frobenius norm over (i, j, k)."""
    grid = g.grid
    d = partial_derivatives(g.values, grid.spacing, grid.dim)
    mag = np.sqrt(np.sum(d * d, axis=(-3, -2, -1)))
    return integrate(mag**p * (grid.radius(center) < radius), grid)


# ------------------------------------------------- distributional curvature

@dataclass
class DistributionalScalarTerms:
    V: VectorField
    F: ScalarField
    volume_ratio: ScalarField
    value: float


def _vf_components(gcf: np.ndarray, h: float):
    n = gcf.shape[0]
    rng = range(n)
    geo = Geometry(gcf, h)
    gi, dg, gam = geo.ginv, geo.dg, geo.gam
    V = []
    for k in rng:
        v = 0.0
        for i in rng:
            for j in rng:
                for l in rng:
                    v = v + gi[i, j] * gi[k, l] * (dg[i][l][j] - dg[i][j][l])
        V.append(v)
    # d_k g^ij = -g^ia g^jb d_k g_ab
    dgi = [[[-sum(gi[i, a] * gi[j, b] * dg[a][b][k] for a in rng for b in rng) for k in rng]
            for j in rng] for i in rng]
    F = 0.0
    for i in rng:
        for j in rng:
            for k in rng:
                F = F - dgi[i][j][k] * gam[k][i][j] + dgi[i][k][k] * gam[j][j][i]
                for l in rng:
                    F = F + gi[i, j] * (gam[k][k][l] * gam[l][i][j] - gam[k][j][l] * gam[l][i][k])
    return np.array(V), F, np.sqrt(geo.det)


def distributional_scalar(g: MetricField, u: ScalarField) -> DistributionalScalarTerms:
    """The first-derivative pairing of the scalar curvature with ``u``."""
    grid = g.grid
    if np.any(u.values[grid.collar_mask()] != 0):
        raise ValueError("test function must vanish on the boundary collar")
    h = grid.spacing
    V, F, vol = _vf_components(to_components(g.values, 2), h)
    w = u.values * vol
    integrand = -sum(V[k] * diff(w, h, k) for k in range(grid.dim)) + F * w
    value = integrate(integrand, grid)
    return DistributionalScalarTerms(VectorField(grid, np.moveaxis(V, 0, -1)), ScalarField(grid, F),
                                     ScalarField(grid, vol), value)


def pairing_value(g: MetricField, u: ScalarField) -> float:
    return distributional_scalar(g, u).value


def classical_pairing(g: MetricField, u: ScalarField) -> float:
    """``int R u dmu_g`` with R from the coordinate curvature formula."""
    geo = Geometry(to_components(g.values, 2), g.grid.spacing)
    R = geo.trace_with_inverse(geo.ricci())
    return integrate(R * u.values, g.grid, np.sqrt(geo.det))


def lower_bound_gap(g: MetricField, u: ScalarField, kappa: float) -> float:
    """``<<R_g, u>> - kappa int u dmu_g``; the distributional bound R >= kappa holds on u iff this is >= 0."""
    terms = distributional_scalar(g, u)
    return terms.value - kappa * integrate(u.values, g.grid, terms.volume_ratio.values)


@dataclass
class MollificationOracle:
    scales: list[float]
    values: list[float]
    extrapolated: float
    order: float | None


def mollifier_kernel(dim: int, nodes: int) -> np.ndarray:
    """Normalized C-infinity bump on the node stencil of radius ``nodes``."""
    ax = np.arange(-nodes, nodes + 1) / nodes
    r2 = sum(np.meshgrid(*([ax**2] * dim), indexing="ij"))
    k = np.where(r2 < 1, np.exp(-1.0 / np.maximum(1 - r2, 1e-300)), 0.0)
    return k / k.sum()


def mollify(g: MetricField, nodes: int) -> MetricField:
    grid = g.grid
    flat = identity_field(grid)
    k = mollifier_kernel(grid.dim, nodes)
    dev = g.values - flat
    out = np.empty_like(dev)
    for i in range(grid.dim):
        for j in range(i, grid.dim):
            out[..., i, j] = out[..., j, i] = convolve(dev[..., i, j], k, mode="constant")
    return MetricField(grid, flat + out)


def mollification_oracle(g: MetricField, u: ScalarField, multiples: Sequence[int] = (4, 8, 16)) -> MollificationOracle:
    """Classical pairing of mollified metrics at radii ``m h``, extrapolated to zero radius.

    Three radii in ratio 2 allow Aitken extrapolation with a fitted order;
    if the differences do not shrink geometrically the finest value is kept.
    """
    scales, values = [], []
    for m in multiples:
        scales.append(m * g.grid.spacing)
        values.append(classical_pairing(mollify(g, m), u))
    v1, v2, v3 = values[:3]
    d1, d2 = v2 - v1, v3 - v2
    order = None
    extrap = v1
    if d1 != 0 and d2 / d1 > 1.0 + 1e-12:
        ratio = d2 / d1
        order = float(np.log2(ratio))
        extrap = v1 - d1 / (ratio - 1.0)
    return MollificationOracle(scales, values, float(extrap), order)


def gluing_error_check(g_local: MetricField, chi: CutoffProfile, u: ScalarField) -> float:
    """``|<<R_{g0}, u>> - <<R_{g_local}, u>>| / ||g_local - delta||_C0``; the empirical gluing constant."""
    eps = c0_deviation(g_local)
    if eps == 0:
        return 0.0
    g0 = glue_to_flat(g_local, chi)
    return abs(pairing_value(g0, u) - pairing_value(g_local, u)) / eps


# ------------------------------------------------------------ test functions

def bump(grid: GridSpec, center: Sequence[float], radius: float) -> ScalarField:
    """C-infinity bump ``exp(1 - 1/(1 - (r/radius)^2))`` inside the ball, 0 outside."""
    s = grid.radius(center) / radius
    out = np.zeros(grid.shape)
    inside = s < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return ScalarField(grid, out)


def test_battery(grid: GridSpec, center: Sequence[float], reach: float, count: int = 5) -> list[ScalarField]:
    """``count`` bumps inside ``B(center, reach)``: one centred, the rest offset around it."""
    c = np.asarray(center, dtype=float)
    out = [bump(grid, c, reach)]
    for k in range(count - 1):
        ang = 2 * np.pi * k / max(1, count - 1)
        off = np.zeros(grid.dim)
        off[0], off[1] = np.cos(ang), np.sin(ang)
        out.append(bump(grid, c + 0.45 * reach * off, 0.5 * reach))
    return out


# ----------------------------------------------------------------- energy

def negative_part(R: ScalarField, kappa: float) -> ScalarField:
    """``(R - kappa)_- = max(kappa - R, 0)``."""
    return ScalarField(R.grid, np.maximum(kappa - R.values, 0.0))


def cutoff_from_distance(dist: np.ndarray, t: float, gamma: float,
                         profile: CutoffProfile) -> tuple[np.ndarray, np.ndarray]:
    """``phi(t^gamma d)`` and the mask of nodes where ``phi'`` is nonzero."""
    s = t**gamma * dist
    return profile(s), (s > profile.r_in) & (s < profile.r_out)


@dataclass
class EnergyTrace:
    times: np.ndarray
    values: np.ndarray
    f_sup: np.ndarray
    annulus_mass: np.ndarray
    kappa: float
    beta: float | None = None
    gamma: float | None = None
    T: float | None = None

    def derivative(self) -> tuple[np.ndarray, np.ndarray]:
        """Centred differences of E at interior sample times."""
        t, e = self.times, self.values
        a, b = t[1:-1] - t[:-2], t[2:] - t[1:-1]
        d = (-b / (a * (a + b))) * e[:-2] + ((b - a) / (a * b)) * e[1:-1] + (a / (b * (a + b))) * e[2:]
        return t[1:-1], d


def energy_functional(traj, phi: Mapping[float, np.ndarray], psi: Mapping[float, np.ndarray], kappa: float,
                      annulus: Mapping[float, np.ndarray] | None = None, **params) -> EnergyTrace:
    """``E(t) = int (R - kappa)_- phi_t psi_t dmu_t`` at the common sample times of ``phi`` and ``psi``."""
    if set(phi) != set(psi):
        raise ValueError("phi and psi must be sampled at the same times")
    times = np.array(sorted(phi))
    grid = traj.grid
    vals, fsup, amass = [], [], []
    for t in times:
        k = traj.slice_index(t)
        coef = traj.coefficients_by_index(k + 1)
        f = np.maximum(kappa - coef.R, 0.0)
        vals.append(integrate(f * phi[t] * psi[t], grid, coef.sqrt_det))
        fsup.append(float(f.max()))
        mask = annulus[t] if annulus is not None else np.zeros(grid.shape, bool)
        amass.append(integrate(phi[t] * mask, grid, coef.sqrt_det))
    return EnergyTrace(times, np.array(vals), np.array(fsup), np.array(amass), kappa,
                       params.get("beta"), params.get("gamma"), params.get("T"))
