"""
Tensor data structures and small dense oracles.

Conventions
-----------
* Entry indices are 1-based wherever they cross the API (``ObservedTensor``
  construction, ``matricize_index``, COO files).  The only place they are
  shifted to 0-based is ``ObservedTensor.__post_init__``; kernels read the
  cached ``ObservedTensor.subs`` array.
* Modes are 0-based Python axes (``mode=0`` is the first mode).
* Dense tensors are plain ``numpy.ndarray`` objects.  ``unfold`` lays out the
  columns in Fortran order over the remaining modes, which reproduces the
  column index ``1 + sum_{n != i} (l_n - 1) I_n`` with
  ``I_n = prod_{j < n, j != i} m_j``.
* Khatri-Rao products over "all modes but ``i``" always use the order
  ``U[k-1], ..., U[i+1], U[i-1], ..., U[0]`` (see ``others_reversed``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DomainError, ParseError, ResourceError

#: Largest dense tensor the oracles will build.
MAX_DENSE_ENTRIES = 10_000_000

FactorSet = tuple  # tuple of k arrays, factor i of shape (m_i, R)


def check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(m) for m in dims)
    if len(dims) < 2:
        raise DomainError(f"tensor order must be >= 2, got {len(dims)}")
    if any(m < 1 for m in dims):
        raise DomainError(f"all sizes must be >= 1, got {dims}")
    return dims


def check_factors(factors, dims=None, rank=None) -> FactorSet:
    """Validate a factor tuple and return it as a tuple of float arrays."""
    factors = tuple(np.asarray(U, dtype=float) for U in factors)
    if any(U.ndim != 2 for U in factors):
        raise DomainError("every factor must be a 2-D array")
    R = factors[0].shape[1]
    if rank is not None and R != rank:
        raise DomainError(f"factors have {R} columns, expected rank {rank}")
    if any(U.shape[1] != R for U in factors):
        raise DomainError("factors have unequal column counts")
    if dims is not None:
        shape = tuple(U.shape[0] for U in factors)
        if shape != tuple(dims):
            raise DomainError(f"factor row counts {shape} do not match dims {tuple(dims)}")
    return factors


@dataclass(frozen=True)
class ObservedTensor:
    """
    Entries of a tensor revealed on an index set.

    Parameters
    ----------
    dims : sequence of int
        Tensor sizes ``(m_1, ..., m_k)``.
    indices : array_like of int, shape (n, k)
        **1-based** index tuples.  They are sorted lexicographically on
        construction; duplicates are rejected.
    values : array_like of float, shape (n,)
        Observed values, aligned with ``indices``.
    """

    dims: tuple
    indices: np.ndarray
    values: np.ndarray
    subs: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        dims = check_dims(self.dims)
        idx = np.asarray(self.indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if idx.ndim == 1 and idx.size == 0:
            idx = idx.reshape(0, len(dims))
        if idx.ndim != 2 or idx.shape[1] != len(dims):
            raise DomainError(f"indices must have shape (n, {len(dims)})")
        if idx.shape[0] != vals.shape[0]:
            raise DomainError("indices and values differ in length")
        if idx.size and ((idx < 1).any() or (idx > np.array(dims)).any()):
            raise DomainError("index out of range for dims")

        # lexsort keys: last key is primary
        order = np.lexsort(idx.T[::-1])
        idx = idx[order]
        vals = vals[order]
        if idx.shape[0] > 1:
            dup = np.all(idx[1:] == idx[:-1], axis=1)
            if dup.any():
                first = idx[1:][dup][0]
                raise DomainError(f"duplicate index {tuple(int(v) for v in first)}")

        idx.setflags(write=False)
        vals.setflags(write=False)
        subs = np.ascontiguousarray(idx - 1)
        subs.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "subs", subs)

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def nnz(self) -> int:
        return self.values.shape[0]

    @property
    def sampling_rate(self) -> float:
        return self.nnz / float(np.prod(self.dims, dtype=float))

    def with_values(self, values) -> "ObservedTensor":
        """Same index set, new values (no re-sorting or duplicate checks)."""
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.shape[0] != self.nnz:
            raise DomainError("values length does not match the index set")
        new = object.__new__(ObservedTensor)
        values = values.copy()
        values.setflags(write=False)
        for name, val in (("dims", self.dims), ("indices", self.indices),
                          ("values", values), ("subs", self.subs)):
            object.__setattr__(new, name, val)
        return new

    def subset(self, rows) -> "ObservedTensor":
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        return ObservedTensor(self.dims, self.indices[rows], self.values[rows])

    def contains(self, index) -> bool:
        """Binary-search membership test for a 1-based index tuple."""
        key = tuple(int(v) for v in index)
        lo, hi = 0, self.nnz
        while lo < hi:
            mid = (lo + hi) // 2
            row = tuple(int(v) for v in self.indices[mid])
            if row < key:
                lo = mid + 1
            else:
                hi = mid
        return lo < self.nnz and tuple(int(v) for v in self.indices[lo]) == key

    @classmethod
    def from_dense(cls, tensor, mask=None) -> "ObservedTensor":
        """Observed tensor holding ``tensor`` at the True entries of ``mask``."""
        tensor = np.asarray(tensor, dtype=float)
        if mask is None:
            mask = np.ones(tensor.shape, dtype=bool)
        subs = np.argwhere(mask)
        return cls(tensor.shape, subs + 1, tensor[tuple(subs.T)])


def matricize_index(idx, mode: int, dims) -> tuple[int, int]:
    """
    Position of a tensor entry in the mode-``mode`` unfolding.

    ``idx`` is a 1-based index tuple; the returned ``(row, col)`` pair is
    1-based as well.
    """
    dims = check_dims(dims)
    idx = tuple(int(v) for v in idx)
    k = len(dims)
    if len(idx) != k:
        raise DomainError(f"index has {len(idx)} entries, tensor order is {k}")
    if not 0 <= mode < k:
        raise DomainError(f"mode {mode} out of range for order {k}")
    if any(not 1 <= l <= m for l, m in zip(idx, dims)):
        raise DomainError(f"index {idx} out of range for dims {dims}")
    col = 1
    stride = 1
    for n in range(k):
        if n == mode:
            continue
        col += (idx[n] - 1) * stride
        stride *= dims[n]
    return idx[mode], col


def unfold(tensor, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization of a dense tensor."""
    tensor = np.asarray(tensor)
    return np.reshape(np.moveaxis(tensor, mode, 0), (tensor.shape[mode], -1), order="F")


def fold(matrix, mode: int, dims) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    dims = tuple(dims)
    rest = tuple(m for n, m in enumerate(dims) if n != mode)
    return np.moveaxis(np.reshape(matrix, (dims[mode],) + rest, order="F"), 0, mode)


def khatri_rao(A, B) -> np.ndarray:
    """
    Column-wise Kronecker product ``A ⊙ B``.

    Column ``r`` of the result is ``kron(A[:, r], B[:, r])``, so the row index
    of ``B`` varies fastest.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2:
        raise DomainError("khatri_rao expects matrices")
    if A.shape[1] != B.shape[1]:
        raise DomainError(f"column counts differ: {A.shape[1]} vs {B.shape[1]}")
    return np.einsum("ir,jr->ijr", A, B).reshape(A.shape[0] * B.shape[0], A.shape[1])


def others_reversed(factors, mode: int) -> list:
    """Factors other than ``mode``, ordered ``U[k-1], ..., U[mode+1], U[mode-1], ..., U[0]``."""
    return [factors[j] for j in reversed(range(len(factors))) if j != mode]


def khatri_rao_others(factors, mode: int, max_entries: int = MAX_DENSE_ENTRIES) -> np.ndarray:
    """Khatri-Rao product of all factors except ``mode`` (oracle path only)."""
    mats = others_reversed(factors, mode)
    rows = int(np.prod([M.shape[0] for M in mats], dtype=float))
    if rows * mats[0].shape[1] > max_entries:
        raise ResourceError(f"Khatri-Rao product of {rows} x {mats[0].shape[1]} exceeds cap")
    out = mats[0]
    for M in mats[1:]:
        out = khatri_rao(out, M)
    return out


def dense_cp_assemble(factors, max_entries: int = MAX_DENSE_ENTRIES) -> np.ndarray:
    """
    Dense tensor ``sum_r U[0][:, r] ∘ ... ∘ U[k-1][:, r]``.

    Raises ``ResourceError`` when the tensor has more than ``max_entries``
    entries.
    """
    factors = check_factors(factors)
    dims = tuple(U.shape[0] for U in factors)
    if float(np.prod(dims, dtype=float)) > max_entries:
        raise ResourceError(f"dense tensor of shape {dims} exceeds cap of {max_entries} entries")
    out = factors[0]
    for U in factors[1:]:
        out = out[..., None, :] * U
    return out.sum(axis=-1)


def sparse_inner(a, b) -> float:
    """
    Inner product of two value arrays on the same index set.

    Accepts either ``ObservedTensor`` objects (index sets must match) or plain
    value arrays of equal length.
    """
    if isinstance(a, ObservedTensor) and isinstance(b, ObservedTensor):
        if a.dims != b.dims or not np.array_equal(a.indices, b.indices):
            raise DomainError("index sets are not aligned")
        a, b = a.values, b.values
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError("value arrays have different lengths")
    return float(a @ b)


def sparse_norm(a) -> float:
    return float(np.sqrt(sparse_inner(a, a)))


# --- COO text format -------------------------------------------------------

def write_coo(path, data: ObservedTensor) -> None:
    """
    Write ``data`` as text: a ``dims m1 ... mk`` header, then one
    ``i1 ... ik value`` line per entry (1-based indices, shortest
    round-trip float repr).
    """
    lines = ["dims " + " ".join(str(m) for m in data.dims)]
    for row, val in zip(data.indices.tolist(), data.values.tolist()):
        lines.append(" ".join(map(str, row)) + " " + repr(val))
    Path(path).write_text("\n".join(lines) + "\n")


def read_coo(path) -> ObservedTensor:
    """Read a file written by :func:`write_coo`; ``#`` comment lines are skipped."""
    dims = None
    rows = []
    vals = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if dims is None:
                if parts[0] != "dims":
                    raise ParseError("expected 'dims m1 m2 ...' header", lineno)
                try:
                    dims = tuple(int(v) for v in parts[1:])
                except ValueError:
                    raise ParseError("non-integer size in header", lineno) from None
                continue
            if len(parts) != len(dims) + 1:
                raise ParseError(f"expected {len(dims) + 1} fields, got {len(parts)}", lineno)
            try:
                rows.append([int(v) for v in parts[:-1]])
                vals.append(float(parts[-1]))
            except ValueError:
                raise ParseError("could not parse entry", lineno) from None
    if dims is None:
        raise ParseError("missing 'dims' header")
    idx = np.array(rows, dtype=np.int64).reshape(-1, len(dims))
    return ObservedTensor(dims, idx, np.array(vals, dtype=float))
