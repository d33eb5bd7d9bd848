"""
Synthetic low Tucker-rank tensors with optional Gaussian noise.

``T* = trunc_r(T) + E`` where ``T`` has iid standard normal entries,
``trunc_r`` is the best multilinear rank-``r`` approximation (truncated HOSVD
refined by HOOI), optionally rescaled to unit mean square, and ``E`` is iid Gaussian noise whose variance is set from a
signal-to-noise ratio in dB.  Entries are revealed independently with
probability ``p``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DomainError, ResourceError
from .tensor_core import ObservedTensor, check_dims, unfold, write_coo

MAX_SYNTH_ENTRIES = 10_000_000


def mode_product(G, U, mode: int) -> np.ndarray:
    """``G x_mode U``: contracts mode ``mode`` of ``G`` with the columns of ``U``."""
    out = np.tensordot(U, G, axes=(1, mode))
    return np.moveaxis(out, 0, mode)


def _leading_left_vectors(M, r):
    u, _, _ = np.linalg.svd(M, full_matrices=False)
    return u[:, :r]


def hooi_truncate(T, ranks, tol=1e-10, max_sweeps=50, return_info=False):
    """
    Best multilinear rank-``ranks`` approximation of a dense tensor.

    Starts from the truncated HOSVD and runs HOOI sweeps until the relative
    change of the fit ``||core||^2 / ||T||^2`` is at most ``tol`` or
    ``max_sweeps`` sweeps have been done.

    Returns the approximation, and with ``return_info=True`` also a dict
    with the factor matrices, the core and the fit after every sweep.
    """
    T = np.asarray(T, dtype=float)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != T.ndim:
        raise DomainError("one rank per mode is required")
    if any(not 1 <= r <= m for r, m in zip(ranks, T.shape)):
        raise DomainError(f"ranks {ranks} must lie in [1, dims] for dims {T.shape}")
    if T.size > MAX_SYNTH_ENTRIES:
        raise ResourceError(f"tensor with {T.size} entries exceeds the dense cap")

    k = T.ndim
    normsq = float(np.vdot(T, T))
    factors = [_leading_left_vectors(unfold(T, i), r) for i, r in enumerate(ranks)]

    def core_of(fs):
        G = T
        for j, U in enumerate(fs):
            G = mode_product(G, U.T, j)
        return G

    G = core_of(factors)
    fits = [float(np.vdot(G, G)) / normsq if normsq else 1.0]
    if ranks != T.shape:
        for _ in range(max_sweeps):
            for i in range(k):
                Y = T
                for j in range(k):
                    if j != i:
                        Y = mode_product(Y, factors[j].T, j)
                factors[i] = _leading_left_vectors(unfold(Y, i), ranks[i])
            G = core_of(factors)
            fits.append(float(np.vdot(G, G)) / normsq if normsq else 1.0)
            if abs(fits[-1] - fits[-2]) <= tol * max(abs(fits[-2]), 1e-300):
                break

    out = G
    for j, U in enumerate(factors):
        out = mode_product(out, U, j)
    if return_info:
        return out, {"factors": factors, "core": G, "fits": fits}
    return out


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple
    tucker_rank: tuple
    p: float
    snr_db: float | None = None
    seed: int = 0
    scale: float = 1.0
    test_fraction: float | None = None  # |test| = test_fraction * |Omega| when set
    normalize: bool = False  # rescale the truncated tensor to unit mean square before ``scale``

    def __post_init__(self):
        dims = check_dims(self.dims)
        if len(self.tucker_rank) != len(dims):
            raise DomainError("tucker_rank must have one entry per mode")
        if any(not 1 <= r <= m for r, m in zip(self.tucker_rank, dims)):
            raise DomainError("tucker ranks must lie in [1, m_i]")
        if not 0.0 < self.p < 1.0:
            raise DomainError("p must lie in (0, 1)")
        if self.test_fraction is not None and not self.test_fraction > 0:
            raise DomainError("test_fraction must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "tucker_rank", tuple(int(r) for r in self.tucker_rank))


@dataclass(frozen=True)
class SynthData:
    ground_truth: np.ndarray  # scaled truncated tensor, no noise
    train: ObservedTensor
    test: ObservedTensor
    noise_std: float
    signal_mean_square: float


def generate(cfg: SynthConfig) -> SynthData:
    """Draw a synthetic completion instance; fully determined by ``cfg.seed``."""
    if float(np.prod(cfg.dims, dtype=float)) > MAX_SYNTH_ENTRIES:
        raise ResourceError(f"dims {cfg.dims} exceed the dense cap")
    rng = np.random.default_rng(cfg.seed)
    T = rng.standard_normal(cfg.dims)
    truth = hooi_truncate(T, cfg.tucker_rank)
    signal_ms = float(np.mean(truth ** 2))
    if cfg.normalize:
        truth /= np.sqrt(signal_ms)
        signal_ms = 1.0
    if cfg.snr_db is None:
        sigma = 0.0
        observed = truth.copy()
    else:
        sigma = float(np.sqrt(signal_ms / 10.0 ** (cfg.snr_db / 10.0)))
        observed = truth + sigma * rng.standard_normal(cfg.dims)
    truth = truth * cfg.scale
    observed = observed * cfg.scale
    sigma *= cfg.scale

    mask = rng.random(cfg.dims) < cfg.p
    if not mask.any():
        raise DomainError("no entry was sampled; increase p")
    train = ObservedTensor.from_dense(observed, mask)
    comp = np.argwhere(~mask)
    if cfg.test_fraction is not None:
        n_test = min(comp.shape[0], int(round(cfg.test_fraction * train.nnz)))
        comp = comp[np.sort(rng.choice(comp.shape[0], size=n_test, replace=False))]
    test = ObservedTensor(cfg.dims, comp + 1, observed[tuple(comp.T)])
    return SynthData(truth, train, test, sigma, signal_ms * cfg.scale ** 2)


def manifest(cfg: SynthConfig, data: SynthData) -> dict:
    return {
        "dims": list(cfg.dims),
        "tucker_rank": list(cfg.tucker_rank),
        "p": cfg.p,
        "snr_db": cfg.snr_db,
        "seed": cfg.seed,
        "scale": cfg.scale,
        "normalize": cfg.normalize,
        "test_fraction": cfg.test_fraction,
        "sigma_noise": data.noise_std,
        "noise_calibration": "empirical mean square of the truncated tensor",
        "signal_mean_square": data.signal_mean_square,
        "n_train": data.train.nnz,
        "n_test": data.test.nnz,
    }


def write_synth(out_dir, cfg: SynthConfig, data: SynthData) -> dict:
    """Write ``train.coo``, ``test.coo`` and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_coo(out / "train.coo", data.train)
    write_coo(out / "test.coo", data.test)
    man = manifest(cfg, data)
    (out / "manifest.json").write_text(json.dumps(man, indent=2) + "\n")
    return man
