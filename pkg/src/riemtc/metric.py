"""
Preconditioned metric on the product of factor-matrix spaces.

At a point ``U`` the metric is ``g_U(xi, eta) = sum_i tr(xi_i H_i eta_i^T)``
with ``H_i = (KR_i)^T KR_i + delta I``, ``KR_i`` being the Khatri-Rao product
of all factors except ``U_i``.  The Riemannian gradient is the Euclidean one
right-multiplied by ``H_i^{-1}`` mode by mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import DomainError, NumericalError
from .kernels import gram_hadamard, gram_matrices


@dataclass(frozen=True)
class Preconditioner:
    """Per-mode SPD matrices ``H`` with their Cholesky factors."""

    H: tuple
    chol: tuple
    delta: float

    @property
    def rank(self) -> int:
        return self.H[0].shape[0]


def default_delta(factors) -> float:
    """``1e-8`` times the mean diagonal entry of the Gram-Hadamard matrices, floored at ``1e-12``."""
    grams = gram_matrices(factors)
    R = factors[0].shape[1]
    mean_diag = np.mean([np.trace(gram_hadamard(factors, i, grams)) / R for i in range(len(factors))])
    return max(1e-8 * float(mean_diag), 1e-12)


def _from_matrices(H, delta) -> Preconditioner:
    chol = []
    for i, Hi in enumerate(H):
        try:
            chol.append(cho_factor(Hi, lower=True, check_finite=True))
        except (LinAlgError, ValueError) as exc:
            raise NumericalError(f"Cholesky of H[{i}] failed (delta={delta:g}): {exc}") from exc
    return Preconditioner(H=tuple(H), chol=tuple(chol), delta=float(delta))


def build_preconditioner(factors, delta: float) -> Preconditioner:
    """``H_i = gram_hadamard(U, i) + delta I`` for every mode, Cholesky-factored."""
    if not delta > 0:
        raise DomainError("delta must be positive")
    grams = gram_matrices(factors)
    R = factors[0].shape[1]
    H = []
    for i in range(len(factors)):
        Hi = gram_hadamard(factors, i, grams)
        Hi = 0.5 * (Hi + Hi.T)
        Hi[np.diag_indices(R)] += delta
        H.append(Hi)
    return _from_matrices(H, delta)


def identity_preconditioner(order: int, rank: int) -> Preconditioner:
    """``H_i = I`` for every mode; turns the metric into the Euclidean one."""
    return _from_matrices([np.eye(rank) for _ in range(order)], 1.0)


def metric_inner(P: Preconditioner, xi, eta) -> float:
    if len(xi) != len(eta) or len(xi) != len(P.H):
        raise DomainError("tangent vectors and preconditioner have different orders")
    total = 0.0
    for H, a, b in zip(P.H, xi, eta):
        if a.shape != b.shape or a.shape[1] != H.shape[0]:
            raise DomainError("tangent vector shapes do not agree")
        total += float(np.vdot(a @ H, b))
    return total


def metric_norm(P: Preconditioner, xi) -> float:
    return float(np.sqrt(max(metric_inner(P, xi, xi), 0.0)))


def riemannian_gradient(euclid_grad, P: Preconditioner) -> tuple:
    """``D_i H_i^{-1}`` for every mode, via the stored Cholesky factors."""
    # H symmetric: X H = D  <=>  H X^T = D^T
    return tuple(cho_solve(c, D.T).T for c, D in zip(P.chol, euclid_grad))
