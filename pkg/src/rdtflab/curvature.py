"""Christoffel symbols, curvature and the DeTurck field against the Euclidean background.

Public functions take and return node-major fields.  The hot kernels work on
component-first arrays (``g[i, j]`` is an ``N**n`` array) and loop over the
few tensor components explicitly, which is several times faster than
einsum over short trailing axes.

Conventions: ``Gamma^k_ij`` is stored at ``gam[k][i][j]``;
``R^l_ijk = d_i Gamma^l_jk - d_j Gamma^l_ik + Gamma^l_im Gamma^m_jk - Gamma^l_jm Gamma^m_ik``;
``Ric_jk = R^i_ijk``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field_core import (
    Field,
    GridSpec,
    MetricField,
    ScalarField,
    Sym2Field,
    VectorField,
    check_positive_definite,
)


@dataclass(frozen=True)
class ConnectionField:
    grid: GridSpec
    values: np.ndarray  # node-major, [..., k, i, j] = Gamma^k_ij


@dataclass(frozen=True)
class CurvatureBundle:
    ricci: Sym2Field
    scalar: ScalarField
    riem_norm: ScalarField


# ------------------------------------------------------------ array helpers

def to_components(a: np.ndarray, rank: int) -> np.ndarray:
    """Node-major -> component-first copy."""
    if rank == 0:
        return a
    return np.ascontiguousarray(np.moveaxis(a, tuple(range(a.ndim - rank, a.ndim)), tuple(range(rank))))


def to_nodes(a: np.ndarray, rank: int) -> np.ndarray:
    if rank == 0:
        return a
    return np.ascontiguousarray(np.moveaxis(a, tuple(range(rank)), tuple(range(a.ndim - rank, a.ndim))))


def diff(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Centred first difference, second-order one-sided on the two end layers."""
    out = np.empty_like(a)
    idx = [slice(None)] * a.ndim

    def at(s):
        idx[axis] = s
        return tuple(idx)

    out[at(slice(1, -1))] = (a[at(slice(2, None))] - a[at(slice(None, -2))]) / (2 * h)
    out[at(0)] = (-3 * a[at(0)] + 4 * a[at(1)] - a[at(2)]) / (2 * h)
    out[at(-1)] = (3 * a[at(-1)] - 4 * a[at(-2)] + a[at(-3)]) / (2 * h)
    return out


def inverse_components(g) -> tuple[np.ndarray, np.ndarray]:
    n = len(g)
    if n == 2:
        det = g[0][0] * g[1][1] - g[0][1] * g[1][0]
        gi = np.empty((2, 2) + det.shape)
        gi[0, 0] = g[1][1] / det
        gi[1, 1] = g[0][0] / det
        gi[0, 1] = gi[1, 0] = -g[0][1] / det
        return gi, det
    cof = np.empty((3, 3) + g[0][0].shape)
    for i in range(3):
        for j in range(3):
            i1, i2 = (i + 1) % 3, (i + 2) % 3
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            cof[j, i] = g[i1][j1] * g[i2][j2] - g[i1][j2] * g[i2][j1]
    det = g[0][0] * cof[0, 0] + g[0][1] * cof[1, 0] + g[0][2] * cof[2, 0]
    return cof / det, det


class Geometry:
    """Derived quantities of a component-first metric array, computed once."""

    def __init__(self, g: np.ndarray, spacing: float):
        n = g.shape[0]
        self.n, self.h, self.g = n, spacing, g
        rng = range(n)
        self.ginv, self.det = inverse_components(g)
        gi = self.ginv
        dg = [[[None] * n for _ in rng] for _ in rng]
        for i in rng:
            for j in range(i, n):
                for k in rng:
                    dg[i][j][k] = dg[j][i][k] = diff(g[i, j], spacing, k)
        self.dg = dg  # dg[i][j][k] = d_k g_ij
        low = [[[None] * n for _ in rng] for _ in rng]
        for l in rng:
            for i in rng:
                for j in range(i, n):
                    low[l][i][j] = low[l][j][i] = 0.5 * (dg[j][l][i] + dg[i][l][j] - dg[i][j][l])
        gam = [[[None] * n for _ in rng] for _ in rng]
        for k in rng:
            for i in rng:
                for j in range(i, n):
                    v = gi[k, 0] * low[0][i][j]
                    for l in range(1, n):
                        v = v + gi[k, l] * low[l][i][j]
                    gam[k][i][j] = gam[k][j][i] = v
        self.gam = gam
        self.trace = [sum(gam[i][i][m] for i in rng) for m in rng]  # Gamma^i_im

    def deturck(self) -> list:
        n, gi, gam = self.n, self.ginv, self.gam
        return [-sum(gi[i, j] * gam[k][i][j] for i in range(n) for j in range(n)) for k in range(n)]

    def ricci(self) -> np.ndarray:
        n, h, gam, tr = self.n, self.h, self.gam, self.trace
        rng = range(n)
        dtr = [[diff(tr[k], h, j) for k in rng] for j in rng]  # dtr[j][k] = d_j Gamma^i_ik
        ric = np.empty((n, n) + self.det.shape)
        for j in rng:
            for k in range(j, n):
                v = sum(diff(gam[i][j][k], h, i) for i in rng) - 0.5 * (dtr[j][k] + dtr[k][j])
                v = v + sum(tr[m] * gam[m][j][k] for m in rng)
                v = v - sum(gam[i][j][m] * gam[m][i][k] for i in rng for m in rng)
                ric[j, k] = ric[k, j] = v
        return ric

    def riemann(self) -> np.ndarray:
        n, h, gam = self.n, self.h, self.gam
        rng = range(n)
        dgam = {}
        for l in rng:
            for j in rng:
                for k in rng:
                    for i in rng:
                        dgam[l, j, k, i] = diff(gam[l][j][k], h, i) if (l, k, j, i) not in dgam else dgam[l, k, j, i]
        riem = np.empty((n, n, n, n) + self.det.shape)
        for l in rng:
            for i in rng:
                for j in rng:
                    for k in rng:
                        v = dgam[l, j, k, i] - dgam[l, i, k, j]
                        for m in rng:
                            v = v + gam[l][i][m] * gam[m][j][k] - gam[l][j][m] * gam[m][i][k]
                        riem[l, i, j, k] = v
        return riem

    def trace_with_inverse(self, s: np.ndarray) -> np.ndarray:
        return sum(self.ginv[i, j] * s[i, j] for i in range(self.n) for j in range(self.n))


def riemann_norm_components(riem: np.ndarray, g: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    low = np.einsum("pl...,lijk...->pijk...", g, riem)
    up = np.einsum("ijkl...,ia...,jb...,kc...,ld...->abcd...", low, ginv, ginv, ginv, ginv, optimize=True)
    return np.sqrt(np.maximum(np.einsum("ijkl...,ijkl...->...", low, up), 0.0))


def lie_derivative_components(X, g: np.ndarray, dg, h: float) -> np.ndarray:
    """``(L_X g)_ij = X^k d_k g_ij + g_kj d_i X^k + g_ik d_j X^k``."""
    n = len(X)
    rng = range(n)
    dX = [[diff(X[k], h, i) for i in rng] for k in rng]  # dX[k][i] = d_i X^k
    out = np.empty_like(g)
    for i in rng:
        for j in range(i, n):
            v = sum(X[k] * dg[i][j][k] for k in rng)
            v = v + sum(g[k, j] * dX[k][i] + g[i, k] * dX[k][j] for k in rng)
            out[i, j] = out[j, i] = v
    return out


def rdtf_rhs_components(g: np.ndarray, h: float) -> np.ndarray:
    """``-2 Ric(g) - L_{X(g)} g`` for a component-first metric array."""
    geo = Geometry(g, h)
    return -2.0 * geo.ricci() - lie_derivative_components(geo.deturck(), g, geo.dg, h)


def scalar_curvature_components(g: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray, Geometry]:
    geo = Geometry(g, h)
    ric = geo.ricci()
    return geo.trace_with_inverse(ric), ric, geo


def laplace_beltrami_array(f: np.ndarray, ginv: np.ndarray, sqrt_det: np.ndarray, h: float) -> np.ndarray:
    """Divergence-form Laplacian ``(1/sqrt g) d_i(sqrt g g^ij d_j f)``, ``ginv`` component-first.

    Diagonal fluxes live on cell faces (compact three-point stencil, zero flux
    through the box boundary); mixed terms use centred differences.
    """
    dim = f.ndim
    div = np.zeros_like(f)
    for a in range(dim):
        A = sqrt_det * ginv[a, a]
        lo = [slice(None)] * dim
        hi = [slice(None)] * dim
        lo[a] = slice(None, -1)
        hi[a] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        flux = 0.5 * (A[lo] + A[hi]) * (f[hi] - f[lo]) / h
        div[lo] += flux / h
        div[hi] -= flux / h
    for a in range(dim):
        for b in range(dim):
            if a != b:
                div += diff(sqrt_det * ginv[a, b] * diff(f, h, b), h, a)
    return div / sqrt_det


def directional_derivative(X, f: np.ndarray, h: float) -> np.ndarray:
    return sum(X[k] * diff(f, h, k) for k in range(len(X)))


# -------------------------------------------------------------- field API

def _geometry(g: MetricField) -> Geometry:
    check_positive_definite(g.values)
    return Geometry(to_components(g.values, 2), g.grid.spacing)


def christoffel(g: MetricField) -> ConnectionField:
    geo = _geometry(g)
    gam = to_nodes(np.array(geo.gam), 3)
    gam.flags.writeable = False
    return ConnectionField(g.grid, gam)


def deturck_vector(g: MetricField) -> VectorField:
    geo = _geometry(g)
    return VectorField(g.grid, to_nodes(np.array(geo.deturck()), 1))


def curvature(g: MetricField) -> CurvatureBundle:
    geo = _geometry(g)
    ric = geo.ricci()
    scalar = geo.trace_with_inverse(ric)
    rn = riemann_norm_components(geo.riemann(), geo.g, geo.ginv)
    return CurvatureBundle(Sym2Field(g.grid, to_nodes(ric, 2)), ScalarField(g.grid, scalar), ScalarField(g.grid, rn))


def laplace_beltrami(g: MetricField, f: ScalarField | Field) -> ScalarField:
    check_positive_definite(g.values)
    gi, det = inverse_components(to_components(g.values, 2))
    return ScalarField(g.grid, laplace_beltrami_array(f.values, gi, np.sqrt(det), g.grid.spacing))
