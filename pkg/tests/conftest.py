import itertools

import numpy as np
import pytest

from riemtc.tensor_core import ObservedTensor


def random_observed(rng, dims, nnz, values=None):
    """ObservedTensor with ``nnz`` distinct uniformly drawn indices."""
    total = int(np.prod(dims))
    lin = rng.choice(total, size=min(nnz, total), replace=False)
    subs = np.column_stack(np.unravel_index(lin, dims))
    if values is None:
        values = rng.standard_normal(subs.shape[0])
    return ObservedTensor(dims, subs + 1, values)


def random_factors(rng, dims, rank):
    return tuple(rng.standard_normal((m, rank)) for m in dims)


def loop_unfold(tensor, mode):
    """Unfolding by explicit enumeration of every entry (independent of reshape tricks)."""
    dims = tensor.shape
    others = [n for n in range(len(dims)) if n != mode]
    ncols = int(np.prod([dims[n] for n in others]))
    out = np.empty((dims[mode], ncols))
    for idx in itertools.product(*[range(m) for m in dims]):
        # column: first remaining mode varies fastest
        col, stride = 0, 1
        for n in others:
            col += idx[n] * stride
            stride *= dims[n]
        out[idx[mode], col] = tensor[idx]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
