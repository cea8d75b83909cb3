"""Numerical witnesses for two constructions behind the regularizer's motivation.

1. In one dimension any smooth density pair is connected by a flow whose
   particles move at constant velocity: x travels on a straight line to
   z(x) = F1^{-1}(F0(x)).
2. A smooth divergence-free field that vanishes outside a box can be added to
   a velocity without changing the density evolution, so the velocity solving
   the density equation is far from unique.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

QUAD_LO, QUAD_HI, QUAD_POINTS = -10.0, 10.0, 20_001
BISECT_TOL = 1e-10
FD_STEP = 1e-5
MIN_MASS = 0.999


def normal_pdf(mu: float = 0.0, sigma: float = 1.0) -> Callable:
    def pdf(x):
        u = (np.asarray(x, dtype=float) - mu) / sigma
        return np.exp(-0.5 * u * u) / (sigma * math.sqrt(2.0 * math.pi))

    return pdf


def mixture_pdf(weights: Sequence[float], mus: Sequence[float], sigmas: Sequence[float]) -> Callable:
    parts = [normal_pdf(m, s) for m, s in zip(mus, sigmas)]

    def pdf(x):
        return sum(w * p(x) for w, p in zip(weights, parts))

    return pdf


@dataclass
class _Cdf:
    """C^1 piecewise-cubic CDF built from trapezoid increments and the density's nodal values."""

    nodes: np.ndarray
    values: np.ndarray
    slopes: np.ndarray

    @classmethod
    def of(cls, pdf: Callable, nodes: np.ndarray) -> "_Cdf":
        p = np.asarray(pdf(nodes), dtype=float)
        if np.any(~np.isfinite(p)) or np.any(p < 0):
            raise ValueError("density must be finite and non-negative on the quadrature grid")
        dx = np.diff(nodes)
        F = np.concatenate([[0.0], np.cumsum(0.5 * dx * (p[:-1] + p[1:]))])
        if F[-1] < MIN_MASS:
            raise ValueError(f"density mass over [{nodes[0]}, {nodes[-1]}] is {F[-1]:.6f} < {MIN_MASS}")
        return cls(nodes, F, p)

    @property
    def mass(self) -> float:
        return float(self.values[-1])

    def __call__(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), self.nodes[0], self.nodes[-1])
        i = np.clip(np.searchsorted(self.nodes, x, side="right") - 1, 0, len(self.nodes) - 2)
        x0, h = self.nodes[i], self.nodes[i + 1] - self.nodes[i]
        s = (x - x0) / h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return (h00 * self.values[i] + h10 * h * self.slopes[i]
                + h01 * self.values[i + 1] + h11 * h * self.slopes[i + 1])

    def inverse(self, u) -> np.ndarray:
        """Vectorized bisection for F(z) = u on the quadrature range."""
        u = np.asarray(u, dtype=float)
        lo = np.full(u.shape, self.nodes[0])
        hi = np.full(u.shape, self.nodes[-1])
        steps = int(math.ceil(math.log2((hi.max() - lo.min()) / BISECT_TOL)))
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            below = self(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)


@dataclass
class Transport1D:
    p0: Callable
    p1: Callable
    grid: np.ndarray
    z: np.ndarray = field(repr=False)
    cdf0: _Cdf = field(repr=False)
    cdf1: _Cdf = field(repr=False)

    def z_of(self, x) -> np.ndarray:
        # normalize each CDF so inversion never asks for more mass than the range holds
        u = self.cdf0(x) / self.cdf0.mass * self.cdf1.mass
        return self.cdf1.inverse(u)

    def dzdx(self, x, step: float = FD_STEP) -> np.ndarray:
        """Central differences whose step moves z (not x) by about ``step``.

        Between well separated modes of p1 the map is very steep, and a fixed
        x-step would be dominated by the third-order Taylor term.
        """
        x = np.asarray(x, dtype=float)
        slope = self.p0(x) / np.maximum(self.p1(self.z_of(x)), np.finfo(float).tiny)
        h = step / np.maximum(1.0, slope)
        return (self.z_of(x + h) - self.z_of(x - h)) / (2.0 * h)

    def residual(self, step: float = FD_STEP) -> np.ndarray:
        """p0(x) - p1(z(x)) dz/dx on the grid; zero for an exact transport."""
        return self.p0(self.grid) - self.p1(self.z) * self.dzdx(self.grid, step)

    def min_jacobian(self, xis=np.linspace(0.0, 1.0, 101)) -> float:
        """min over xi in [0,1] and the grid of (1 - xi) + xi dz/dx."""
        d = self.dzdx(self.grid)
        xis = np.asarray(xis)[:, None]
        return float(np.min((1.0 - xis) + xis * d[None, :]))


def solve_transport_1d(p0: Callable, p1: Callable, x_grid, quad=(QUAD_LO, QUAD_HI, QUAD_POINTS)) -> Transport1D:
    """Monotone z(x) with p0(x) = p1(z) dz/dx, by matching cumulative distributions."""
    nodes = np.linspace(*quad)
    grid = np.asarray(x_grid, dtype=float)
    if grid.min() < nodes[0] or grid.max() > nodes[-1]:
        raise ValueError("x grid must lie inside the quadrature range")
    cdf0, cdf1 = _Cdf.of(p0, nodes), _Cdf.of(p1, nodes)
    tr = Transport1D(p0=p0, p1=p1, grid=grid, z=np.empty(0), cdf0=cdf0, cdf1=cdf1)
    tr.z = tr.z_of(grid)
    return tr


def straight_line_flow(transport: Transport1D, x, t, t0: float = 0.0, t1: float = 1.0) -> np.ndarray:
    """Position at time t of the particle moving at constant speed from x to z(x)."""
    xi = (np.asarray(t, dtype=float) - t0) / (t1 - t0)
    x = np.asarray(x, dtype=float)
    return x + xi * (transport.z_of(x) - x)


def total_variation(samples: np.ndarray, pdf: Callable, bins: int = 40, bounds=(-4.0, 4.0)) -> float:
    """Half the L1 distance between the sample histogram and the density's bin masses."""
    edges = np.linspace(*bounds, bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    emp = counts / len(samples)
    fine = np.linspace(bounds[0], bounds[1], 200 * bins + 1)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(fine) * (pdf(fine)[:-1] + pdf(fine)[1:]))])
    ref = np.diff(cdf[::200])
    # mass outside the histogram range counts fully on both sides
    out_emp = 1.0 - emp.sum()
    out_ref = max(0.0, 1.0 - ref.sum())
    return 0.5 * (float(np.sum(np.abs(emp - ref))) + abs(out_emp - out_ref))


# ---------------------------------------------------------------------------
# compactly supported divergence-free field


@dataclass(frozen=True)
class BoxField:
    """u_i = -c_i (L_i/pi) (1 + cos(pi z_i/L_i)) prod_{j != i} sin(pi z_j/L_j) inside |z_i| < L_i, zero outside."""

    half_widths: tuple
    coeffs: tuple

    def __post_init__(self):
        L, c = np.asarray(self.half_widths, dtype=float), np.asarray(self.coeffs, dtype=float)
        if L.ndim != 1 or len(L) < 2 or len(c) != len(L):
            raise ValueError("need matching half_widths and coeffs with dimension >= 2")
        if np.any(L <= 0):
            raise ValueError("half_widths must be positive")

    @property
    def dim(self) -> int:
        return len(self.half_widths)

    @property
    def balanced(self) -> bool:
        return abs(sum(self.coeffs)) <= 1e-12 * max(1.0, sum(abs(c) for c in self.coeffs))

    def inside(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.all(np.abs(z) < np.asarray(self.half_widths), axis=1)

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        L, c = np.asarray(self.half_widths), np.asarray(self.coeffs)
        arg = np.pi * z / L
        s, co = np.sin(arg), np.cos(arg)
        u = np.empty_like(z)
        for i in range(self.dim):
            others = np.prod(np.delete(s, i, axis=1), axis=1)
            u[:, i] = -c[i] * (L[i] / np.pi) * (1.0 + co[:, i]) * others
        return np.where(self.inside(z)[:, None], u, 0.0)

    def analytic_divergence(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        prod = np.prod(np.sin(np.pi * z / np.asarray(self.half_widths)), axis=1)
        return np.where(self.inside(z), sum(self.coeffs) * prod, 0.0)


def boundary_layer_norm(field_: BoxField, delta: float, points_per_dim: int = 201) -> float:
    """max ||u|| over points a distance ``delta`` inside each face of the box."""
    L = np.asarray(field_.half_widths, dtype=float)
    worst = 0.0
    for i in range(field_.dim):
        axes = [np.linspace(-l + delta, l - delta, points_per_dim) for l in np.delete(L, i)]
        face = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        for sign in (-1.0, 1.0):
            z = np.insert(face, i, sign * (L[i] - delta), axis=1)
            worst = max(worst, float(np.max(np.linalg.norm(field_(z), axis=1))))
    return worst


def jacobian_fd(fn: Callable, z, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian, shape (N, out, D)."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    cols = []
    for j in range(z.shape[1]):
        e = np.zeros(z.shape[1])
        e[j] = step
        cols.append((fn(z + e) - fn(z - e)) / (2.0 * step))
    return np.stack(cols, axis=2)


def box_field_divergence(field_: BoxField, z, step: float = FD_STEP) -> np.ndarray:
    """Central-difference divergence at each row of z."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    div = np.zeros(len(z))
    for j in range(field_.dim):
        e = np.zeros(field_.dim)
        e[j] = step
        div += (field_(z + e)[:, j] - field_(z - e)[:, j]) / (2.0 * step)
    return div


@dataclass
class VariationReport:
    max_velocity: float
    max_jacobian: float
    min_density: float


def gaussian_density(dim: int) -> Callable:
    def pdf(z):
        z = np.atleast_2d(z)
        return np.exp(-0.5 * np.sum(z * z, axis=1)) / (2.0 * math.pi) ** (dim / 2.0)

    return pdf


def box_grid(field_: BoxField, points_per_dim: int = 41) -> np.ndarray:
    axes = [np.linspace(-L, L, points_per_dim) for L in field_.half_widths]
    return np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)


def verify_variation_boundedness(field_: BoxField, p1: Callable, grid=None) -> VariationReport:
    """max |v'| and max |dv'/dz| for v' = u / p1 over a grid of the closed box."""
    grid = box_grid(field_) if grid is None else np.atleast_2d(np.asarray(grid, dtype=float))
    dens = p1(grid)
    floor = float(np.min(dens))
    if not floor > np.finfo(float).tiny:
        raise FloatingPointError(f"density underflows inside the box (min {floor:.3g})")

    def vprime(z):
        return field_(z) / p1(z)[:, None]

    v = vprime(grid)
    J = jacobian_fd(vprime, grid)
    report = VariationReport(float(np.max(np.abs(v))), float(np.max(np.abs(J))), floor)
    if not (math.isfinite(report.max_velocity) and math.isfinite(report.max_jacobian)):
        raise FloatingPointError("v' or its Jacobian is not finite on the grid")
    return report


# ---------------------------------------------------------------------------
# the full witness table


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool


BIMODAL = dict(weights=(0.5, 0.5), mus=(-2.0, 2.0), sigmas=(0.5, 0.5))


def run_checks(seed: int = 0, samples: int = 100_000, box_points: int = 10_000) -> list:
    rng = np.random.default_rng(seed)
    checks = []
    p0, p1 = normal_pdf(), mixture_pdf(**BIMODAL)
    grid = np.linspace(-4.0, 4.0, 801)
    tr = solve_transport_1d(p0, p1, grid)
    res = float(np.max(np.abs(tr.residual())))
    checks.append(Check("transport residual sup-norm", res, 1e-4, res < 1e-4))
    mono = float(np.min(np.diff(tr.z)))
    checks.append(Check("z(x) strictly increasing (min increment)", mono, 0.0, mono > 0.0))
    jac = tr.min_jacobian()
    checks.append(Check("min (1-xi) + xi dz/dx", jac, 0.0, jac > 0.0))
    pushed = straight_line_flow(tr, rng.standard_normal(samples), 1.0)
    tv = total_variation(pushed, p1)
    checks.append(Check("pushforward total variation", tv, 0.02, tv < 0.02))
    for dim in (2, 3):
        L = tuple(rng.uniform(0.5, 2.0, dim))
        c = rng.standard_normal(dim)
        c = tuple(c - c.mean())
        fld = BoxField(L, c)
        z = rng.uniform(-1.0, 1.0, (box_points, dim)) * np.asarray(L)
        div = float(np.max(np.abs(box_field_divergence(fld, z))))
        checks.append(Check(f"box field |div u| (D={dim})", div, 1e-6, div < 1e-6))
    fld = BoxField((1.0, 1.0), (1.0, -1.0))
    report = verify_variation_boundedness(fld, gaussian_density(2))
    finite = math.isfinite(report.max_velocity) and math.isfinite(report.max_jacobian)
    checks.append(Check("max |dv'/dz| finite", report.max_jacobian, math.inf, finite))
    return checks
