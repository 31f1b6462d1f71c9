"""Tensor fields on a uniform box grid, finite differences, quadrature and norms.

Fields store node-major arrays: a field on an ``N**n`` lattice carrying
tensor components has shape ``(N,)*n + component_shape``.  Derivative
indices are appended last, so ``gradient`` of a metric returns an array
with ``out[..., i, j, k] == d_k g_ij``.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.signal import fftconvolve

if TYPE_CHECKING:  # pragma: no cover
    from .flow import FlowTrajectory

EIGEN_FLOOR = 1e-10


class GridMismatchError(ValueError):
    pass


class NonInvertibleMetricError(ValueError):
    """Raised when a metric has a node whose smallest eigenvalue is below the floor."""

    def __init__(self, node: tuple[int, ...], min_eigenvalue: float):
        self.node = node
        self.min_eigenvalue = min_eigenvalue
        super().__init__(
            f"metric not positive definite at node {node}: "
            f"min eigenvalue {min_eigenvalue:.3e} < {EIGEN_FLOOR:g}"
        )


@dataclass(frozen=True)
class GridSpec:
    dim: int
    half_width: float
    points_per_axis: int
    collar_width: float | None = None

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")
        if self.points_per_axis < 16:
            raise ValueError("points_per_axis must be >= 16")
        if self.collar_width is None:
            object.__setattr__(self, "collar_width", max(4 * self.spacing, self.half_width / 8))
        if self.collar_width < 4 * self.spacing - 1e-12:
            raise ValueError(
                f"collar_width {self.collar_width} must be >= 4h = {4 * self.spacing}"
            )

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.points_per_axis - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.points_per_axis)

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (dim,)``."""
        ax = self.axis()
        return np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"), axis=-1)

    def radius(self, center: Sequence[float] | None = None) -> np.ndarray:
        x = self.coords()
        if center is not None:
            x = x - np.asarray(center, dtype=float)
        return np.sqrt(np.sum(x * x, axis=-1))

    def collar_mask(self) -> np.ndarray:
        """True on nodes within ``collar_width`` of the box boundary."""
        x = np.abs(self.coords())
        return np.any(x >= self.half_width - self.collar_width - 1e-12, axis=-1)

    def nearest_node(self, point: Sequence[float]) -> tuple[int, ...]:
        p = np.asarray(point, dtype=float)
        idx = np.rint((p + self.half_width) / self.spacing).astype(int)
        idx = np.clip(idx, 0, self.points_per_axis - 1)
        return tuple(int(i) for i in idx)

    def node_position(self, node: Sequence[int]) -> np.ndarray:
        return -self.half_width + self.spacing * np.asarray(node, dtype=float)

    def refined(self, points_per_axis: int) -> "GridSpec":
        """Same box and collar, different resolution."""
        return GridSpec(self.dim, self.half_width, points_per_axis, self.collar_width)


class Field:
    """Immutable tensor field; ``rank`` trailing component axes of length ``dim``."""

    rank: int | None = None

    def __init__(self, grid: GridSpec, values, rank: int | None = None):
        values = np.array(values, dtype=float)
        if rank is None:
            rank = self.rank if self.rank is not None else values.ndim - grid.dim
        expected = grid.shape + (grid.dim,) * rank
        if values.shape != expected:
            raise ValueError(f"field shape {values.shape} does not match {expected}")
        values.flags.writeable = False
        self.grid = grid
        self.values = values
        self._rank = rank

    @property
    def tensor_rank(self) -> int:
        return self._rank

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.grid.dim}, N={self.grid.points_per_axis}, rank={self._rank})"


class ScalarField(Field):
    rank = 0


class VectorField(Field):
    """Contravariant components ``X^k`` in the last axis."""

    rank = 1


class Sym2Field(Field):
    rank = 2

    def __init__(self, grid: GridSpec, values):
        super().__init__(grid, values)
        if not np.array_equal(self.values, np.swapaxes(self.values, -1, -2)):
            raise ValueError("Sym2Field values are not exactly symmetric")


class MetricField(Sym2Field):
    def __init__(self, grid: GridSpec, values, time_tag: float | None = None):
        super().__init__(grid, values)
        check_positive_definite(self.values)
        if time_tag is not None and time_tag < 0:
            raise ValueError("time_tag must be >= 0")
        self.time_tag = time_tag

    @classmethod
    def flat(cls, grid: GridSpec, scale: float = 1.0) -> "MetricField":
        return cls(grid, scale * identity_field(grid))

    def perturbation(self) -> np.ndarray:
        return self.values - identity_field(self.grid)

    def collar_defect(self) -> float:
        """Max |g - delta| over the boundary collar (zero for admissible flow data)."""
        dev = np.abs(self.perturbation())[self.grid.collar_mask()]
        return float(dev.max()) if dev.size else 0.0

    def with_time(self, t: float) -> "MetricField":
        out = object.__new__(MetricField)
        out.grid, out.values, out._rank, out.time_tag = self.grid, self.values, 2, t
        return out


def identity_field(grid: GridSpec) -> np.ndarray:
    return np.broadcast_to(np.eye(grid.dim), grid.shape + (grid.dim, grid.dim)).copy()


def min_eigenvalue(g: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    if n == 2:
        a, b, d = g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]
        half_tr = 0.5 * (a + d)
        disc = np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * b, 0.0))
        return half_tr - disc
    return np.linalg.eigvalsh(g)[..., 0]


def check_positive_definite(g: np.ndarray) -> None:
    lam = min_eigenvalue(g)
    bad = ~(lam > EIGEN_FLOOR)
    if np.any(bad):
        node = np.unravel_index(int(np.argmax(bad)), lam.shape)
        raise NonInvertibleMetricError(tuple(int(i) for i in node), float(lam[node]))


def inverse_and_det(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form inverse and determinant of node-wise 2x2 / 3x3 matrices."""
    n = g.shape[-1]
    if n == 2:
        a, b, c, d = g[..., 0, 0], g[..., 0, 1], g[..., 1, 0], g[..., 1, 1]
        det = a * d - b * c
        inv = np.empty_like(g)
        inv[..., 0, 0] = d / det
        inv[..., 0, 1] = -b / det
        inv[..., 1, 0] = -c / det
        inv[..., 1, 1] = a / det
        return inv, det
    cof = np.empty_like(g)
    for i in range(3):
        for j in range(3):
            i1, i2 = (i + 1) % 3, (i + 2) % 3
            j1, j2 = (j + 1) % 3, (j + 2) % 3
            cof[..., j, i] = g[..., i1, j1] * g[..., i2, j2] - g[..., i1, j2] * g[..., i2, j1]
    det = np.einsum("...j,...j->...", g[..., 0, :], cof[..., :, 0])
    return cof / det[..., None, None], det


def _as_array(f) -> tuple[np.ndarray, GridSpec | None]:
    if isinstance(f, Field):
        return f.values, f.grid
    return np.asarray(f, dtype=float), None


def partial_derivatives(values: np.ndarray, spacing: float, dim: int) -> np.ndarray:
    """Stack of ``d_k values`` along a new last axis (second order everywhere)."""
    parts = np.gradient(values, spacing, axis=tuple(range(dim)), edge_order=2)
    return np.stack(parts, axis=-1)


def gradient(f: Field) -> Field:
    """Coordinate derivative; the new derivative index is the last component axis."""
    values, grid = _as_array(f)
    if grid is None:
        raise TypeError("gradient expects a Field")
    d = partial_derivatives(values, grid.spacing, grid.dim)
    if f.tensor_rank == 0:
        return VectorField(grid, d)
    return Field(grid, d, rank=f.tensor_rank + 1)


def second_partials(values: np.ndarray, spacing: float, dim: int) -> np.ndarray:
    """Compact second differences ``d_a d_b values`` stacked on two new last axes.

    Diagonal entries use the three-point stencil, mixed entries the four-corner
    stencil; boundary layers fall back to repeated one-sided differences.
    """
    h2 = spacing * spacing
    first = partial_derivatives(values, spacing, dim)
    out = np.empty(values.shape + (dim, dim))
    for a in range(dim):
        da = np.gradient(first[..., a], spacing, axis=a, edge_order=2)
        inner = [slice(None)] * values.ndim
        inner[a] = slice(1, -1)
        plus = [slice(None)] * values.ndim
        plus[a] = slice(2, None)
        minus = [slice(None)] * values.ndim
        minus[a] = slice(None, -2)
        da[tuple(inner)] = (values[tuple(plus)] - 2 * values[tuple(inner)] + values[tuple(minus)]) / h2
        out[..., a, a] = da
        for b in range(a + 1, dim):
            dab = np.gradient(first[..., a], spacing, axis=b, edge_order=2)
            out[..., a, b] = dab
            out[..., b, a] = dab
    return out


# ---------------------------------------------------------------- norms

@dataclass(frozen=True)
class NormResult:
    kind: str
    value: float
    p: float | None = None
    tau: float | None = None
    detail: dict | None = None

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"norm value must be >= 0, got {self.value}")
        if self.kind == "W1p_weighted" and (self.p is None or self.tau is None):
            raise ValueError("weighted norms carry p and tau")


def _same_grid(a: Field, b: Field) -> None:
    if a.grid != b.grid:
        raise GridMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")


def c0_distance(g: Field, h: Field) -> NormResult:
    _same_grid(g, h)
    return NormResult("C0", float(np.max(np.abs(g.values - h.values))))


def c0_deviation(g: MetricField) -> float:
    """``||g - delta||_C0`` as a bare float."""
    return float(np.max(np.abs(g.perturbation())))


def japanese_bracket(grid: GridSpec) -> np.ndarray:
    return np.sqrt(1.0 + grid.radius() ** 2)


def weighted_w1p_terms(g: MetricField, p: float, tau: float) -> tuple[float, float]:
    """The two integrals of the weighted W^{1,p}_{-tau} norm before the p-th root."""
    grid = g.grid
    n = grid.dim
    dev = g.perturbation()
    dgrad = partial_derivatives(dev, grid.spacing, n)
    w = japanese_bracket(grid)
    mag0 = np.sqrt(np.sum(dev * dev, axis=(-2, -1)))
    mag1 = np.sqrt(np.sum(dgrad * dgrad, axis=(-3, -2, -1)))
    vol = grid.cell_volume
    zeroth = float(np.sum((mag0 * w**tau) ** p * w ** (-n)) * vol)
    first = float(np.sum((mag1 * w ** (tau + 1)) ** p * w ** (-n)) * vol)
    return zeroth, first


def weighted_w1p_norm(g: MetricField, p: float, tau: float) -> NormResult:
    """Weighted Sobolev norm of ``g - delta`` with weight ``<x> = (1+|x|^2)^(1/2)``.

    Node-centred midpoint quadrature: every node owns a cell of volume h^n.
    """
    if p <= g.grid.dim:
        raise ValueError(f"weighted W^1,p norm needs p > n = {g.grid.dim}, got p = {p}")
    zeroth, first = weighted_w1p_terms(g, p, tau)
    return NormResult("W1p_weighted", (zeroth + first) ** (1.0 / p), p=p, tau=tau)


def lp_norm(f: ScalarField, p: float, weight: np.ndarray | None = None) -> NormResult:
    vals = np.abs(f.values)
    if weight is not None:
        vals = vals * weight
    if np.isinf(p):
        return NormResult("Lp", float(vals.max()), p=p)
    return NormResult("Lp", float((np.sum(vals**p) * f.grid.cell_volume) ** (1.0 / p)), p=p)


def integrate(values: np.ndarray, grid: GridSpec, density: np.ndarray | None = None) -> float:
    """Node-centred quadrature of a scalar array, optionally against a density."""
    if density is not None:
        values = values * density
    return float(np.sum(values) * grid.cell_volume)


def ball_kernel(grid: GridSpec, radius: float) -> np.ndarray:
    m = int(np.floor(radius / grid.spacing + 1e-9))
    ax = np.arange(-m, m + 1) * grid.spacing
    mesh = np.meshgrid(*([ax] * grid.dim), indexing="ij")
    r2 = sum(c * c for c in mesh)
    return (r2 <= radius * radius + 1e-12).astype(float)


def ball_sums(values: np.ndarray, grid: GridSpec, radius: float) -> np.ndarray:
    """Quadrature of ``values`` over B(x, radius) for every node x (zero outside the box)."""
    k = ball_kernel(grid, radius)
    out = fftconvolve(values, k, mode="same") * grid.cell_volume
    return np.maximum(out, 0.0) if np.all(values >= 0) else out


def dyadic_radii(grid: GridSpec) -> list[float]:
    radii, r = [], grid.spacing
    while r <= grid.half_width * (1 + 1e-12):
        radii.append(r)
        r *= 2
    return radii


def _interp_time_integral(times: np.ndarray, vals: np.ndarray, a: float, b: float) -> np.ndarray:
    """Integral over [a, b] of the piecewise-linear-in-time interpolant of ``vals``."""
    a = max(a, times[0])
    b = min(b, times[-1])
    if b <= a:
        return np.zeros(vals.shape[1:])
    knots = np.concatenate([[a], times[(times > a) & (times < b)], [b]])
    flat = vals.reshape(len(times), -1)
    idx = np.clip(np.searchsorted(times, knots, side="right") - 1, 0, len(times) - 2)
    t0, t1 = times[idx], times[idx + 1]
    lam = ((knots - t0) / (t1 - t0))[:, None]
    samples = (1 - lam) * flat[idx] + lam * flat[idx + 1]
    dt = np.diff(knots)[:, None]
    total = np.sum(0.5 * dt * (samples[1:] + samples[:-1]), axis=0)
    return total.reshape(vals.shape[1:])


def x_norm(traj: "FlowTrajectory") -> NormResult:
    """Koch-Lamm X-norm of ``g(t) - delta`` on the stored slices.

    Spatial suprema run over grid nodes, the radius supremum over the dyadic
    ladder ``h, 2h, ..., L``; time integrals use the piecewise-linear
    interpolant of slice values (initial datum at t = 0 included).
    """
    if traj is None or len(traj.slices) < 1:
        raise ValueError("x_norm needs a trajectory with at least one slice")
    grid = traj.grid
    n = grid.dim
    q = n + 4
    times = np.array([0.0] + [t for t, _ in traj.slices])
    metrics = [traj.initial] + [g for _, g in traj.slices]
    linf = max(c0_deviation(g) for g in metrics)
    grad_sq = []
    for g in metrics:
        d = partial_derivatives(g.perturbation(), grid.spacing, n)
        grad_sq.append(np.sum(d * d, axis=(-3, -2, -1)))
    grad_sq = np.stack(grad_sq)
    grad_q = grad_sq ** (q / 2)
    best, best_r = 0.0, None
    for r in dyadic_radii(grid):
        l2 = np.stack([ball_sums(s, grid, r) for s in grad_sq])
        lq = np.stack([ball_sums(s, grid, r) for s in grad_q])
        term1 = r ** (-n / 2) * np.sqrt(np.maximum(_interp_time_integral(times, l2, 0.0, r * r), 0))
        term2 = r ** (2 / q) * np.maximum(_interp_time_integral(times, lq, r * r / 2, r * r), 0) ** (1 / q)
        val = float(np.max(term1 + term2))
        if val > best:
            best, best_r = val, r
    return NormResult("Xnorm", linf + best, detail={"linf": linf, "gradient_part": best, "argmax_radius": best_r,
                                                    "t_span": float(times[-1])})


# ------------------------------------------------------- serialization

_MAGIC = b"RDTF"
_HEADER = struct.Struct("<4sBBBxIdd")  # magic, version, dim, rank, N, L, w


def write_field_binary(f: Field, path: str | Path) -> None:
    """Flat little-endian layout: header (dim, N, L, w) then float64 row-major payload."""
    g = f.grid
    header = _HEADER.pack(_MAGIC, 1, g.dim, f.tensor_rank, g.points_per_axis, g.half_width, g.collar_width)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_field_binary(path: str | Path) -> Field:
    data = Path(path).read_bytes()
    magic, version, dim, rank, N, L, w = _HEADER.unpack_from(data)
    if magic != _MAGIC or version != 1:
        raise ValueError(f"{path}: not a field file")
    grid = GridSpec(dim, L, N, w)
    vals = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(grid.shape + (dim,) * rank)
    cls = {0: ScalarField, 1: VectorField}.get(rank)
    if cls is not None:
        return cls(grid, vals)
    if rank == 2 and np.array_equal(vals, np.swapaxes(vals, -1, -2)):
        try:
            return MetricField(grid, vals)
        except NonInvertibleMetricError:
            return Sym2Field(grid, vals)
    return Field(grid, vals, rank=rank)


def field_to_csv(f: Field) -> str:
    """One row per node: node indices, coordinates, flattened components."""
    g = f.grid
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    comps = ["".join(str(i) for i in idx) for idx in np.ndindex(*((g.dim,) * f.tensor_rank))]
    w.writerow([f"i{a}" for a in range(g.dim)] + [f"x{a}" for a in range(g.dim)]
               + [f"v{c}" if c else "v" for c in comps])
    coords = g.coords().reshape(-1, g.dim)
    vals = f.values.reshape(coords.shape[0], -1)
    for k, node in enumerate(np.ndindex(*g.shape)):
        w.writerow(list(node) + [repr(float(c)) for c in coords[k]] + [repr(float(v)) for v in vals[k]])
    return buf.getvalue()
