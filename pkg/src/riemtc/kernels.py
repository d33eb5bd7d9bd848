"""
Sparse kernels for the gradient of the completion objective.

The fast path never forms a matricization of the residual nor a Khatri-Rao
product: the residual is evaluated entry by entry on the observed index set,
the MTTKRP accumulates one scaled row-product per observed entry, and the
Gram matrix of a Khatri-Rao product is obtained as a Hadamard product of small
``R x R`` Gram matrices.  ``naive_gradient_path`` keeps the straightforward
matricize-then-multiply computation around as an oracle and benchmark
baseline.

Parallel reduction: the observed entries are cut into contiguous chunks, one
per worker; every chunk accumulates into its own ``m_i x R`` buffer and the
buffers are summed in chunk order.  Results therefore depend on the chunk
count only through floating-point summation order.  Set the
``RIEMTC_NUM_THREADS`` environment variable to control the worker count.
"""
from __future__ import annotations

import os

import numba
import numpy as np
import scipy.sparse as sp
from numba import njit, prange

from .exceptions import DomainError
from .tensor_core import MAX_DENSE_ENTRIES, ObservedTensor, check_factors, khatri_rao_others

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
if os.environ.get("RIEMTC_NUM_THREADS"):
    numba.set_num_threads(int(os.environ["RIEMTC_NUM_THREADS"]))


def num_chunks() -> int:
    return numba.get_num_threads()


def _stack(factors):
    """Stack factors row-wise and return ``(stack, offsets)``."""
    stack = np.ascontiguousarray(np.vstack(factors))
    offsets = np.zeros(len(factors), dtype=np.int64)
    offsets[1:] = np.cumsum([U.shape[0] for U in factors[:-1]])
    return stack, offsets


def _chunk_bounds(n, chunks):
    chunks = max(1, min(int(chunks), max(n, 1)))
    return np.linspace(0, n, chunks + 1).astype(np.int64)


@njit(parallel=True, cache=True)
def _cp_values_kernel(subs, stack, offsets, out):
    n, k = subs.shape
    R = stack.shape[1]
    for p in prange(n):
        acc = 0.0
        for r in range(R):
            prod = 1.0
            for j in range(k):
                prod *= stack[offsets[j] + subs[p, j], r]
            acc += prod
        out[p] = acc


@njit(parallel=True, cache=True)
def _mttkrp_kernel(subs, svals, stack, offsets, mode, bounds, buffers):
    k = subs.shape[1]
    R = stack.shape[1]
    for c in prange(bounds.shape[0] - 1):
        buf = buffers[c]
        for p in range(bounds[c], bounds[c + 1]):
            row = subs[p, mode]
            sp_ = svals[p]
            for ell in range(R):
                prod = sp_
                for j in range(k):
                    if j != mode:
                        prod *= stack[offsets[j] + subs[p, j], ell]
                buf[row, ell] += prod


# Third-order specializations: row pointers are hoisted out of the rank loop
# so that it compiles to a straight multiply-add over contiguous rows.

@njit(parallel=True, cache=True)
def _cp_values_kernel3(subs, stack, offsets, out):
    R = stack.shape[1]
    for p in prange(subs.shape[0]):
        a = offsets[0] + subs[p, 0]
        b = offsets[1] + subs[p, 1]
        c = offsets[2] + subs[p, 2]
        acc = 0.0
        for r in range(R):
            acc += stack[a, r] * stack[b, r] * stack[c, r]
        out[p] = acc


@njit(parallel=True, cache=True)
def _mttkrp_kernel3(subs, svals, stack, offsets, mode, bounds, buffers):
    R = stack.shape[1]
    j1 = 1 if mode == 0 else 0
    j2 = 1 if mode == 2 else 2
    o1 = offsets[j1]
    o2 = offsets[j2]
    for c in prange(bounds.shape[0] - 1):
        buf = buffers[c]
        for p in range(bounds[c], bounds[c + 1]):
            row = subs[p, mode]
            a = o1 + subs[p, j1]
            b = o2 + subs[p, j2]
            sp_ = svals[p]
            for ell in range(R):
                buf[row, ell] += sp_ * stack[a, ell] * stack[b, ell]


def cp_values(factors, subs) -> np.ndarray:
    """Entries of the CP tensor ``[[U]]`` at the 0-based rows of ``subs``."""
    stack, offsets = _stack(factors)
    out = np.empty(subs.shape[0])
    if len(factors) == 3:
        _cp_values_kernel3(subs, stack, offsets, out)
    else:
        _cp_values_kernel(subs, stack, offsets, out)
    return out


def residual_at_observed(factors, data: ObservedTensor) -> np.ndarray:
    """
    Residual ``[[U]] - T*`` evaluated on the observed index set only.

    Returns an array aligned with ``data.indices``.
    """
    factors = check_factors(factors)
    if tuple(U.shape[0] for U in factors) != data.dims:
        raise DomainError("factor row counts do not match the data dims")
    out = cp_values(factors, data.subs)
    out -= data.values
    return out


def sparse_mttkrp(residual, subs, factors, mode: int, chunks: int | None = None) -> np.ndarray:
    """
    MTTKRP of a sparse tensor with the factors, along ``mode``.

    Computes ``S_(mode) @ KR`` where ``S`` is the sparse tensor with values
    ``residual`` at the 0-based positions ``subs`` and ``KR`` is the
    Khatri-Rao product of all other factors, by accumulating
    ``residual[p] * prod_{j != mode} U[j][subs[p, j], :]`` into row
    ``subs[p, mode]``.

    Parameters
    ----------
    residual : ndarray, shape (n,)
    subs : ndarray of int64, shape (n, k)
        0-based indices (``ObservedTensor.subs``).
    factors : sequence of ndarray
    mode : int
        0-based mode.
    chunks : int, optional
        Number of reduction chunks; defaults to the worker count.
    """
    k = len(factors)
    if not 0 <= mode < k:
        raise DomainError(f"mode {mode} out of range for order {k}")
    residual = np.ascontiguousarray(residual, dtype=float)
    stack, offsets = _stack(factors)
    m, R = factors[mode].shape
    bounds = _chunk_bounds(residual.shape[0], num_chunks() if chunks is None else chunks)
    buffers = np.zeros((bounds.shape[0] - 1, m, R))
    kernel = _mttkrp_kernel3 if k == 3 else _mttkrp_kernel
    kernel(subs, residual, stack, offsets, mode, bounds, buffers)
    if buffers.shape[0] == 1:
        return buffers[0]
    return buffers.sum(axis=0)


def gram_matrices(factors) -> list:
    return [U.T @ U for U in factors]


def gram_hadamard(factors, mode: int, grams=None) -> np.ndarray:
    """
    ``KR.T @ KR`` for the Khatri-Rao product ``KR`` of all factors but
    ``mode``, computed as the Hadamard product of the factor Gram matrices.
    """
    k = len(factors)
    if not 0 <= mode < k:
        raise DomainError(f"mode {mode} out of range for order {k}")
    if grams is None:
        grams = [factors[j].T @ factors[j] for j in range(k) if j != mode]
    else:
        grams = [grams[j] for j in range(k) if j != mode]
    out = grams[0].copy()
    for G in grams[1:]:
        out *= G
    return out


def fast_gradient_path(factors, data: ObservedTensor):
    """Residual, all MTTKRPs and all Gram-Hadamard matrices via the sparse kernels."""
    factors = check_factors(factors, dims=data.dims)
    res = residual_at_observed(factors, data)
    grams = gram_matrices(factors)
    mttkrps = [sparse_mttkrp(res, data.subs, factors, i) for i in range(len(factors))]
    hads = [gram_hadamard(factors, i, grams) for i in range(len(factors))]
    return mttkrps, hads


def sparse_unfold(values, subs, dims, mode: int) -> sp.csr_matrix:
    """Mode-``mode`` matricization of a COO tensor as a scipy CSR matrix."""
    cols = np.zeros(subs.shape[0], dtype=np.int64)
    stride = 1
    for n, m in enumerate(dims):
        if n == mode:
            continue
        cols += subs[:, n] * stride
        stride *= m
    return sp.csr_matrix((values, (subs[:, mode], cols)), shape=(dims[mode], stride))


def naive_gradient_path(factors, data: ObservedTensor, max_entries: int = MAX_DENSE_ENTRIES):
    """
    Reference computation of the MTTKRPs and Gram matrices.

    Forms the sparse matricizations of the residual and the full Khatri-Rao
    products, then multiplies.  Memory grows like ``prod_{j != i} m_j * R``;
    raises ``ResourceError`` past ``max_entries``.
    """
    factors = check_factors(factors, dims=data.dims)
    res = residual_at_observed(factors, data)
    mttkrps, grams = [], []
    for i in range(len(factors)):
        kr = khatri_rao_others(factors, i, max_entries=max_entries)
        S_i = sparse_unfold(res, data.subs, data.dims, i)
        mttkrps.append(np.asarray(S_i @ kr))
        grams.append(kr.T @ kr)
    return mttkrps, grams
