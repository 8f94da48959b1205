"""Implicit-feedback weighted matrix factorization solved by alternating least squares.

Objective over visit counts M with R = [M > 0] and C = 1 + gamma * M::

    1/2 sum_ij C_ij (R_ij - hu_i . hl_j)^2 + lambda1/2 (sum |hu_i|^2 + sum |hl_j|^2)

Each half-sweep solves the regularized weighted normal equations exactly, so
the objective never increases.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class WmfConfig:
    f: int = 64
    gamma: float = 15.0
    lambda1: float = 0.001
    sweeps: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.f < 1:
            raise ValueError("f must be a positive integer")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not self.lambda1 > 0:
            raise ValueError("lambda1 must be positive")
        if self.sweeps < 1:
            raise ValueError("sweeps must be a positive integer")


@dataclass
class LatentFactors:
    HU: np.ndarray
    HL: np.ndarray
    trace: list[float] = field(default_factory=list)

    @property
    def f(self) -> int:
        return self.HU.shape[1]


def confidence(m, gamma: float):
    return 1.0 + gamma * np.asarray(m, dtype=np.float64)


def _check_shapes(M: np.ndarray, HU: np.ndarray, HL: np.ndarray):
    if HU.shape[0] != M.shape[0] or HL.shape[0] != M.shape[1] or HU.shape[1] != HL.shape[1]:
        raise ValueError(f"factor shapes {HU.shape}, {HL.shape} do not fit matrix {M.shape}")


def wmf_objective(M, factors: LatentFactors, gamma: float, lambda1: float) -> float:
    M = np.asarray(M, dtype=np.float64)
    _check_shapes(M, factors.HU, factors.HL)
    R = (M > 0).astype(np.float64)
    C = confidence(M, gamma)
    resid = R - factors.HU @ factors.HL.T
    fit = 0.5 * float((C * resid * resid).sum())
    reg = 0.5 * lambda1 * float((factors.HU ** 2).sum() + (factors.HL ** 2).sum())
    return fit + reg


def _solve_side(C: np.ndarray, R: np.ndarray, other: np.ndarray, lambda1: float, side: str) -> np.ndarray:
    # Row i solves (other^T C_i other + lambda1 I) x = other^T (C_i * R_i).
    f = other.shape[1]
    A = np.einsum("ij,jf,jg->ifg", C, other, other) + lambda1 * np.eye(f)
    b = (C * R) @ other
    try:
        return np.linalg.solve(A, b[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        for i in range(len(A)):
            try:
                np.linalg.cholesky(A[i])
            except np.linalg.LinAlgError:
                raise np.linalg.LinAlgError(f"singular normal equations for {side} row {i}") from None
        raise


def als_sweep(M, factors: LatentFactors, gamma: float, lambda1: float) -> LatentFactors:
    """One alternation: all user rows given HL, then all attraction rows given HU."""
    M = np.asarray(M, dtype=np.float64)
    _check_shapes(M, factors.HU, factors.HL)
    R = (M > 0).astype(np.float64)
    C = confidence(M, gamma)
    HU = _solve_side(C, R, factors.HL, lambda1, "user")
    HL = _solve_side(C.T, R.T, HU, lambda1, "attraction")
    return LatentFactors(HU, HL, list(factors.trace))


def init_factors(n_users: int, n_items: int, f: int, seed: int) -> LatentFactors:
    rng = np.random.default_rng(seed)
    hi = 1.0 / np.sqrt(f)
    return LatentFactors(rng.uniform(0.0, hi, size=(n_users, f)), rng.uniform(0.0, hi, size=(n_items, f)))


def factorize(M, config: WmfConfig = WmfConfig()) -> LatentFactors:
    """Seeded initialisation followed by ``config.sweeps`` ALS sweeps.

    ``trace`` holds the objective before the first sweep and after each one.
    """
    M = np.asarray(M, dtype=np.float64)
    factors = init_factors(M.shape[0], M.shape[1], config.f, config.seed)
    trace = [wmf_objective(M, factors, config.gamma, config.lambda1)]
    for _ in range(config.sweeps):
        factors = als_sweep(M, factors, config.gamma, config.lambda1)
        trace.append(wmf_objective(M, factors, config.gamma, config.lambda1))
    factors.trace = trace
    return factors
