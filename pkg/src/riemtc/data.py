"""Ratings ingestion, train/test splitting and random initialization."""
from __future__ import annotations

import numpy as np

from .exceptions import DomainError, ParseError
from .tensor_core import ObservedTensor, check_dims

RATINGS_DIMS = (6040, 3952, 150)
SECONDS_PER_WEEK = 604800


def parse_ratings(path, dims=RATINGS_DIMS, with_epoch=False):
    """
    Read a ``UserID::MovieID::Rating::Timestamp`` file into a third-order
    tensor indexed by (user, movie, week).

    The week index is ``1 + (ts - min_ts) // 604800`` clamped to
    ``[1, dims[2]]``.  When a (user, movie, week) cell is rated more than
    once, the rating appearing last in the file is kept.

    With ``with_epoch=True`` returns ``(tensor, min_ts)``.
    """
    dims = check_dims(dims)
    users, movies, ratings, stamps = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            parts = s.split("::")
            if len(parts) != 4:
                raise ParseError(f"expected 4 '::'-separated fields, got {len(parts)}", lineno)
            try:
                u, m, r, ts = int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])
            except ValueError:
                raise ParseError(f"could not parse {s!r}", lineno) from None
            if not (1 <= u <= dims[0] and 1 <= m <= dims[1]):
                raise ParseError(f"user/movie id out of range in {s!r}", lineno)
            users.append(u)
            movies.append(m)
            ratings.append(r)
            stamps.append(ts)
    if not users:
        raise DomainError(f"no ratings found in {path}")

    stamps = np.array(stamps, dtype=np.int64)
    epoch = int(stamps.min())
    weeks = np.clip(1 + (stamps - epoch) // SECONDS_PER_WEEK, 1, dims[2])
    idx = np.column_stack([np.array(users, dtype=np.int64), np.array(movies, dtype=np.int64), weeks])
    vals = np.array(ratings, dtype=float)

    key = ((idx[:, 0] - 1) * dims[1] + (idx[:, 1] - 1)) * dims[2] + (idx[:, 2] - 1)
    # first occurrence in the reversed order = last occurrence in the file
    _, first_rev = np.unique(key[::-1], return_index=True)
    keep = np.sort(len(key) - 1 - first_rev)
    tensor = ObservedTensor(dims, idx[keep], vals[keep])
    return (tensor, epoch) if with_epoch else tensor


def split_train_test(data: ObservedTensor, ratio: float, seed: int):
    """Uniformly random disjoint split with ``round(ratio * n)`` training entries."""
    if not 0.0 < ratio < 1.0:
        raise DomainError("ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.nnz)
    n_train = int(round(ratio * data.nnz))
    return data.subset(perm[:n_train]), data.subset(perm[n_train:])


def init_factors(dims, rank: int, seed: int) -> tuple:
    """Factor matrices with iid standard normal entries."""
    dims = check_dims(dims)
    if rank < 1:
        raise DomainError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    return tuple(rng.standard_normal((m, rank)) for m in dims)
