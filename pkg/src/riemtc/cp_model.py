"""Regularized least-squares completion objective, its gradient and RMSE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError
from .kernels import cp_values, residual_at_observed, sparse_mttkrp
from .tensor_core import ObservedTensor, check_factors


@dataclass(frozen=True)
class ProblemConfig:
    """
    ``lam`` is the weight of ``(lam/2) * sum_i ||U_i||_F^2``; ``p`` is the
    sampling rate ``|Omega| / prod(dims)`` of the training set.
    """

    rank: int
    p: float
    lam: float = 0.0

    def __post_init__(self):
        if self.rank < 1:
            raise DomainError("rank must be >= 1")
        if not 0.0 < self.p <= 1.0:
            raise DomainError(f"sampling rate must lie in (0, 1], got {self.p}")
        if self.lam < 0:
            raise DomainError("lambda must be non-negative")

    @classmethod
    def from_data(cls, data: ObservedTensor, rank: int, lam: float = 0.0) -> "ProblemConfig":
        if data.nnz == 0:
            raise DomainError("training set is empty")
        return cls(rank=rank, p=data.sampling_rate, lam=lam)


def objective_from_residual(factors, residual, cfg: ProblemConfig) -> float:
    fit = 0.5 / cfg.p * float(residual @ residual)
    if cfg.lam:
        fit += 0.5 * cfg.lam * sum(float(np.vdot(U, U)) for U in factors)
    return fit


def objective(factors, data: ObservedTensor, cfg: ProblemConfig) -> float:
    """``(1/2p) ||P_Omega([[U]] - T*)||^2 + (lam/2) sum_i ||U_i||^2``."""
    res = residual_at_observed(factors, data)
    return objective_from_residual(check_factors(factors), res, cfg)


def gradient_from_residual(factors, residual, subs, cfg: ProblemConfig) -> tuple:
    out = []
    for i, U in enumerate(factors):
        D = sparse_mttkrp(residual, subs, factors, i)
        D /= cfg.p
        if cfg.lam:
            D += cfg.lam * U
        out.append(D)
    return tuple(out)


def euclidean_gradient(factors, data: ObservedTensor, cfg: ProblemConfig) -> tuple:
    """Partial derivatives ``(1/p) S_(i) KR_i + lam U_i`` for every mode."""
    factors = check_factors(factors, dims=data.dims, rank=cfg.rank)
    res = residual_at_observed(factors, data)
    return gradient_from_residual(factors, res, data.subs, cfg)


def rmse(factors, eval_set: ObservedTensor) -> float:
    """Root-mean-square error of ``[[U]]`` against ``eval_set`` on its indices."""
    if eval_set.nnz == 0:
        raise DomainError("evaluation set is empty")
    factors = check_factors(factors, dims=eval_set.dims)
    diff = cp_values(factors, eval_set.subs) - eval_set.values
    return float(np.sqrt(diff @ diff / eval_set.nnz))
