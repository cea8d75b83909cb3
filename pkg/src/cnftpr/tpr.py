"""Trajectory polynomial regularization.

States sampled at n times along each trajectory are projected onto the span of
a degree-d polynomial basis; the loss is the mean squared residual of that
projection. The projector comes from an SVD of the basis matrix and is a
constant as far as gradients are concerned.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad

MIN_GAP = 1e-6  # relative to t1 - t0
MAX_TRIES = 100


class MissingSample(KeyError):
    pass


@dataclass(frozen=True)
class TprConfig:
    n: int = 4
    degree: int = 1
    alpha: float = 5.0
    pin_endpoints: bool = True
    solver_order: int = 5

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.n < self.degree + 2:
            raise ValueError(f"need n >= degree + 2 (got n={self.n}, d={self.degree}); fewer points interpolate exactly")
        if self.degree > self.solver_order - 1:
            raise ValueError(f"degree {self.degree} exceeds what an order-{self.solver_order} solver integrates exactly")
        if self.pin_endpoints and self.n < 2:
            raise ValueError("pinned endpoints need n >= 2")


@dataclass(frozen=True)
class Basis:
    T: np.ndarray  # n x (d+1), T[i, j] = P_j(tau_i)
    U: np.ndarray  # n x (d+1), orthonormal columns spanning T
    singular_values: np.ndarray

    @property
    def projector(self) -> np.ndarray:
        """I - U U^T: maps a trajectory matrix to its least-squares residual."""
        return np.eye(self.T.shape[0]) - self.U @ self.U.T


def sample_times(rng: np.random.Generator, config: TprConfig, t0: float = 0.0, t1: float = 1.0) -> np.ndarray:
    """n sorted times in [t0, t1]; interior points uniform, endpoints pinned if configured."""
    if not t1 > t0:
        raise ValueError("need t1 > t0")
    span = t1 - t0
    n_free = config.n - 2 if config.pin_endpoints else config.n
    for _ in range(MAX_TRIES):
        free = rng.uniform(t0, t1, size=n_free)
        taus = np.concatenate([[t0], free, [t1]]) if config.pin_endpoints else free
        taus = np.sort(taus)
        if np.all(np.diff(taus) >= MIN_GAP * span):
            return taus
    return np.linspace(t0, t1, config.n)


def normalized_time(taus, t0: float, t1: float) -> np.ndarray:
    return 2.0 * (np.asarray(taus, dtype=float) - t0) / (t1 - t0) - 1.0


def polynomial_basis(taus, degree: int, t0: float = 0.0, t1: float = 1.0, basis_matrix: Optional[np.ndarray] = None) -> Basis:
    """Monomials of time rescaled to [-1, 1], plus the SVD of the resulting matrix.

    ``basis_matrix`` overrides the monomials with any n x (d+1) matrix.
    """
    if basis_matrix is None:
        s = normalized_time(taus, t0, t1)
        T = np.vander(s, degree + 1, increasing=True)
    else:
        T = np.asarray(basis_matrix, dtype=float)
    k = T.shape[1]
    if T.shape[0] < k:
        raise ValueError("fewer sample times than basis functions")
    U, sv, _ = np.linalg.svd(T, full_matrices=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise np.linalg.LinAlgError("basis matrix is rank deficient (duplicate sample times?)")
    return Basis(T=T, U=U[:, :k], singular_values=sv)


def tpr_residual(rows: Sequence, basis: Basis, batch: Optional[int] = None):
    """(1/n) ||(I - U U^T) Y||_F^2 / batch.

    ``rows`` is either an (n, m) array or a sequence of n equally-shaped blocks,
    block i holding y(tau_i) for the whole batch (the i-th row of Y, unflattened).
    ``batch`` defaults to the number of rows in each block (1 for a matrix).
    """
    P = basis.projector
    n = P.shape[0]
    if isinstance(rows, np.ndarray):
        if rows.ndim != 2 or rows.shape[0] != n:
            raise ValueError(f"Y has {rows.shape[0]} rows but basis has {n}")
        batch = 1 if batch is None else batch
        R = P @ rows
        return float(np.sum(R * R)) / (n * batch)
    rows = list(rows)
    if len(rows) != n:
        raise ValueError(f"got {len(rows)} sampled states for {n} sample times")
    if batch is None:
        batch = ad.value(rows[0]).shape[0]
    terms = [ad.total(ad.square(ad.lincomb(P[i], rows))) for i in range(n) if np.any(P[i] != 0.0)]
    if not terms:
        return ad.mul(ad.total(rows[0]), 0.0)
    acc = terms[0] if len(terms) == 1 else ad.lincomb([1.0] * len(terms), terms)
    return ad.mul(acc, 1.0 / (n * batch))


def trajectory_rows(solution, taus, dim: int) -> list:
    """y(tau_i) blocks (delta-logp column dropped) from a solution's sampled states."""
    rows = []
    for tau in taus:
        key = float(tau)
        if key not in solution.sampled:
            raise MissingSample(f"no sampled state at t={key}; pass the taus as mandatory times")
        state = solution.sampled[key]
        width = ad.value(state).shape[1]
        rows.append(state if width == dim else ad.take_cols(state, 0, dim))
    return rows


def tpr_loss(solution, taus, config: TprConfig, dim: int, t0: float = 0.0, t1: float = 1.0):
    basis = polynomial_basis(taus, config.degree, t0, t1)
    return tpr_residual(trajectory_rows(solution, taus, dim), basis)


def normal_equations_residual(Y: np.ndarray, T: np.ndarray) -> float:
    """(1/n) ||Y - T (T^T T)^{-1} T^T Y||^2: the unstable textbook form, kept as a cross-check."""
    C = np.linalg.solve(T.T @ T, T.T @ Y)
    R = Y - T @ C
    return float(np.sum(R * R)) / Y.shape[0]
