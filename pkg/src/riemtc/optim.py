"""
Gradient descent and conjugate gradient on the product of factor spaces.

Both methods use the identity retraction (``x + s * eta``) and the identity
vector transport.  ``rgd``/``rcg`` work in the preconditioned metric;
``euclid_gd``/``euclid_cg`` run the same loop with every ``H_i`` set to the
identity.

Stepsize rules
--------------
linemin
    exact minimization of ``h(s) = f(x + s eta)`` (third-order tensors only),
    which is a degree-6 polynomial in ``s``.
armijo
    backtracking from the classical trial stepsize.
rbb1, rbb2
    Riemannian Barzilai-Borwein stepsizes measured in the metric at the
    current iterate; optionally used as the Armijo trial step (``safeguard``).
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cp_model import ProblemConfig, gradient_from_residual, objective_from_residual, rmse
from .exceptions import DivergenceError, DomainError
from .kernels import cp_values, residual_at_observed
from .metric import (
    Preconditioner,
    build_preconditioner,
    default_delta,
    identity_preconditioner,
    metric_inner,
    metric_norm,
    riemannian_gradient,
)
from .tensor_core import ObservedTensor, check_factors

logger = logging.getLogger(__name__)

METHODS = ("rgd", "rcg", "euclid_gd", "euclid_cg")
RULES = ("linemin", "armijo", "rbb1", "rbb2")

RBB_MIN, RBB_MAX = 1e-10, 1e10


@dataclass
class OptimizerConfig:
    method: str = "rgd"
    stepsize_rule: str = "rbb2"
    grad_tol: float = 1e-7
    relchg_tol: float | None = 1e-6
    max_iters: int = 1000
    time_budget: float | None = None
    armijo_sigma: float = 1e-4
    armijo_beta: float = 0.5
    s_min: float = 1e-12
    s_max: float = 1e8
    max_backtracks: int = 50
    delta: float | None = None
    safeguard: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.stepsize_rule not in RULES:
            raise DomainError(f"unknown stepsize rule {self.stepsize_rule!r}; choose from {RULES}")
        if not self.grad_tol > 0:
            raise DomainError("grad_tol must be positive")
        if self.relchg_tol is not None and not self.relchg_tol > 0:
            raise DomainError("relchg_tol must be positive")
        if self.max_iters < 0:
            raise DomainError("max_iters must be non-negative")
        if not (0 < self.armijo_sigma < 1 and 0 < self.armijo_beta < 1):
            raise DomainError("armijo sigma and beta must lie in (0, 1)")
        if not 0 < self.s_min <= self.s_max:
            raise DomainError("need 0 < s_min <= s_max")
        if self.delta is not None and not self.delta > 0:
            raise DomainError("delta must be positive")

    @property
    def preconditioned(self) -> bool:
        return self.method in ("rgd", "rcg")

    @property
    def conjugate(self) -> bool:
        return self.method in ("rcg", "euclid_cg")


@dataclass
class IterationRecord:
    t: int
    objective: float
    train_rmse: float
    test_rmse: float | None
    grad_norm: float
    stepsize: float | None
    seconds: float


@dataclass
class OptimizerState:
    """Everything the direction and stepsize rules look back at."""

    x: tuple
    residual: np.ndarray
    f: float
    egrad: tuple
    grad: tuple
    P: Preconditioner
    t: int = 0
    x_prev: tuple | None = None
    grad_prev: tuple | None = None
    eta_prev: tuple | None = None
    P_prev: Preconditioner | None = None
    s_prev: float | None = None
    f_hist: list = field(default_factory=list)  # objective values, oldest first


@dataclass
class RunResult:
    factors: tuple
    history: list
    stop_reason: str
    delta: float | None

    def __iter__(self):
        # allows ``factors, history = run(...)``
        return iter((self.factors, self.history))


# --- tangent-vector helpers ------------------------------------------------

def _axpy(a, x, y):
    """``a * x + y`` for factor tuples."""
    return tuple(a * xi + yi for xi, yi in zip(x, y))


def _sub(x, y):
    return tuple(xi - yi for xi, yi in zip(x, y))


def _neg(x):
    return tuple(-xi for xi in x)


# --- directions ------------------------------------------------------------

def direction_rgd(grad) -> tuple:
    return _neg(grad)


def direction_rcg(grad, grad_prev, eta_prev, P: Preconditioner, return_beta=False):
    """
    Nonnegative Hestenes-Stiefel direction ``-grad + beta * eta_prev``.

    Falls back to ``-grad`` when the denominator vanishes or the result is
    not a descent direction.
    """
    diff = _sub(grad, grad_prev)
    num = metric_inner(P, diff, grad)
    den = metric_inner(P, diff, eta_prev)
    beta = max(0.0, num / den) if den != 0.0 and np.isfinite(den) else 0.0
    eta = _axpy(beta, eta_prev, _neg(grad)) if beta > 0 else _neg(grad)
    if beta > 0 and metric_inner(P, eta, grad) >= 0:
        beta = 0.0
        eta = _neg(grad)
    return (eta, beta) if return_beta else eta


# --- line minimization -----------------------------------------------------

def linemin_coefficients(factors, eta, data: ObservedTensor, cfg: ProblemConfig) -> np.ndarray:
    """
    Coefficients ``c[0..6]`` (ascending powers) of ``h(s) = f(U + s eta)``.

    The data term expands the CP tensor of ``U + s eta`` on the observed
    entries into ``(E0 - T*) + s E1 + s^2 E2 + s^3 E3`` where ``E1`` collects
    the terms with one factor replaced by its direction, ``E2`` two and ``E3``
    all three; ``h`` is then half the squared norm of that cubic over ``p``
    plus the quadratic regularizer.
    """
    k = len(factors)
    if k != 3:
        raise DomainError("line minimization is implemented for third-order tensors only")
    subs = data.subs
    A = [U[subs[:, j]] for j, U in enumerate(factors)]
    B = [E[subs[:, j]] for j, E in enumerate(eta)]
    # product of (A_j + s B_j) over modes, per entry and column
    e0 = A[0] * A[1] * A[2]
    e1 = B[0] * A[1] * A[2] + A[0] * B[1] * A[2] + A[0] * A[1] * B[2]
    e2 = B[0] * B[1] * A[2] + B[0] * A[1] * B[2] + A[0] * B[1] * B[2]
    e3 = B[0] * B[1] * B[2]
    del A, B
    e = [e0.sum(axis=1) - data.values, e1.sum(axis=1), e2.sum(axis=1), e3.sum(axis=1)]

    c = np.zeros(7)
    for a in range(4):
        for b in range(4):
            c[a + b] += float(e[a] @ e[b])
    c *= 0.5 / cfg.p
    if cfg.lam:
        c[0] += 0.5 * cfg.lam * sum(float(np.vdot(U, U)) for U in factors)
        c[1] += cfg.lam * sum(float(np.vdot(U, E)) for U, E in zip(factors, eta))
        c[2] += 0.5 * cfg.lam * sum(float(np.vdot(E, E)) for E in eta)
    return c


def poly_eval(c, s):
    """Evaluate ``sum_n c[n] s^n`` (ascending coefficients)."""
    return np.polynomial.polynomial.polyval(s, c)


def real_roots(c, imag_tol=1e-8) -> np.ndarray:
    """
    Real roots of ``sum_n c[n] s^n`` via the eigenvalues of the companion
    matrix of the monic polynomial.
    """
    c = np.asarray(c, dtype=float)
    scale = np.max(np.abs(c)) if c.size else 0.0
    if scale == 0:
        return np.empty(0)
    nz = np.nonzero(np.abs(c) > 1e-300)[0]
    c = c[: nz[-1] + 1]
    if c.size < 2:
        return np.empty(0)
    n = c.size - 1
    monic = c[:-1] / c[-1]
    comp = np.zeros((n, n))
    comp[1:, :-1] = np.eye(n - 1)
    comp[:, -1] = -monic
    roots = np.linalg.eigvals(comp)
    keep = np.abs(roots.imag) <= imag_tol * (1 + np.abs(roots.real))
    return np.sort(roots.real[keep])


def stepsize_linemin(factors, eta, data: ObservedTensor, cfg: ProblemConfig, s_min=1e-12) -> float:
    """Positive minimizer of ``h(s) = f(U + s eta)`` among the critical points and ``s_min``."""
    c = linemin_coefficients(factors, eta, data, cfg)
    dc = np.polynomial.polynomial.polyder(c)
    cands = [r for r in real_roots(dc) if r > 0]
    cands.append(s_min)
    cands = np.array(sorted(cands))
    vals = poly_eval(c, cands)
    # argmin returns the first (smallest s) of tied minimizers
    return float(cands[int(np.argmin(vals))])


# --- Armijo and RBB --------------------------------------------------------

def armijo_trial(state: OptimizerState, cfg: OptimizerConfig) -> float:
    # f_hist[-1] = f(x_t), f_hist[-2] = f(x_{t-1}), f_hist[-3] = f(x_{t-2})
    if state.t <= 1 or len(state.f_hist) < 3 or state.eta_prev is None:
        s0 = 1.0
    else:
        slope = metric_inner(state.P_prev, state.eta_prev, state.grad_prev)
        s0 = 2.0 * (state.f_hist[-2] - state.f_hist[-3]) / slope if slope != 0 else 1.0
        if not np.isfinite(s0) or s0 <= 0:
            s0 = 1.0
    return float(min(max(s0, cfg.s_min), cfg.s_max))


def stepsize_armijo(fun, f0, slope, s0, cfg: OptimizerConfig):
    """
    Backtracking on ``fun(s) = f(x + s eta)``.

    ``slope`` is ``g_x(grad, eta)`` (negative for a descent direction).
    Returns ``(s, f(x + s eta), ok)``; ``ok`` is False when the backtracking
    budget ran out and ``s_min`` was returned.
    """
    s = s0
    for _ in range(cfg.max_backtracks + 1):
        s = max(s, cfg.s_min)
        fs = fun(s)
        if np.isfinite(fs) and f0 - fs >= -cfg.armijo_sigma * s * slope:
            return s, fs, True
        if s <= cfg.s_min:
            break
        s *= cfg.armijo_beta
    s = cfg.s_min
    return s, fun(s), False


def stepsize_rbb(z, y, P: Preconditioner, variant: str, s_prev: float | None = None) -> float:
    """
    Barzilai-Borwein stepsize from ``z = x_t - x_{t-1}`` and
    ``y = grad_t - grad_{t-1}``, all products in the metric ``P`` at ``x_t``.
    """
    zy = abs(metric_inner(P, z, y))
    if variant == "rbb1":
        num, den = metric_inner(P, z, z), zy
    elif variant == "rbb2":
        num, den = zy, metric_inner(P, y, y)
    else:
        raise DomainError(f"unknown RBB variant {variant!r}")
    if not den > 1e-300 or not np.isfinite(num / den):
        return 1.0 if s_prev is None else s_prev
    return float(min(max(num / den, RBB_MIN), RBB_MAX))


# --- stopping --------------------------------------------------------------

def check_stop(records, cfg: OptimizerConfig) -> str | None:
    """Return the name of the criterion that fires, or None."""
    last = records[-1]
    if last.grad_norm <= cfg.grad_tol:
        return "grad_tol"
    if cfg.relchg_tol is not None and len(records) >= 2:
        prev = records[-2].train_rmse
        if prev == 0 or abs(last.train_rmse - prev) / abs(prev) <= cfg.relchg_tol:
            return "relchg"
    if last.t >= cfg.max_iters:
        return "max_iters"
    if cfg.time_budget is not None and last.seconds >= cfg.time_budget:
        return "time_budget"
    return None


# --- driver ----------------------------------------------------------------

def run(data: ObservedTensor, problem: ProblemConfig, init, cfg: OptimizerConfig,
        test: ObservedTensor | None = None, callback=None) -> RunResult:
    """
    Minimize the completion objective from ``init``.

    Stops on the first of: metric gradient norm <= ``grad_tol``, relative
    change of the training RMSE <= ``relchg_tol``, ``max_iters`` iterations,
    or ``time_budget`` seconds.  One ``IterationRecord`` per iterate
    (including the initial point) is returned in ``history``.
    """
    x = check_factors(init, dims=data.dims, rank=problem.rank)
    k, R = len(x), problem.rank
    if cfg.stepsize_rule == "linemin" and k != 3:
        raise DomainError("linemin stepsize requires a third-order tensor")
    subs = data.subs
    delta = None
    if cfg.preconditioned:
        delta = cfg.delta if cfg.delta is not None else default_delta(x)
        precondition = lambda U: build_preconditioner(U, delta)
    else:
        ident = identity_preconditioner(k, R)
        precondition = lambda U: ident

    def f_at(U):
        res = cp_values(U, subs)
        res -= data.values
        return objective_from_residual(U, res, problem), res

    def evaluate(U, res=None, f=None):
        if res is None:
            f, res = f_at(U)
        egrad = gradient_from_residual(U, res, subs, problem)
        P = precondition(U)
        grad = riemannian_gradient(egrad, P) if cfg.preconditioned else egrad
        return res, f, egrad, grad, P

    start = time.perf_counter()
    res, f, egrad, grad, P = evaluate(x)
    state = OptimizerState(x=x, residual=res, f=f, egrad=egrad, grad=grad, P=P, f_hist=[f])
    history = []

    def record(s):
        train = float(np.sqrt(state.residual @ state.residual / data.nnz))
        rec = IterationRecord(
            t=state.t,
            objective=state.f,
            train_rmse=train,
            test_rmse=rmse(state.x, test) if test is not None else None,
            grad_norm=metric_norm(state.P, state.grad),
            stepsize=s,
            seconds=time.perf_counter() - start,
        )
        history.append(rec)
        if callback is not None:
            callback(rec, state)
        return rec

    if not np.isfinite(f):
        raise DivergenceError("objective is not finite at the initial point", x, history)
    record(None)

    while True:
        reason = check_stop(history, cfg)
        if reason is not None:
            break

        if cfg.conjugate and state.t >= 1:
            eta = direction_rcg(state.grad, state.grad_prev, state.eta_prev, state.P)
        else:
            eta = direction_rgd(state.grad)
        slope = metric_inner(state.P, state.grad, eta)

        f_new = res_new = None
        rule = cfg.stepsize_rule
        if rule == "linemin":
            s = stepsize_linemin(state.x, eta, data, problem, s_min=cfg.s_min)
        else:
            def trial(s_):
                fs, _ = f_at(_axpy(s_, eta, state.x))
                return fs

            if rule == "armijo":
                s0 = armijo_trial(state, cfg)
            elif state.t == 0:
                s0 = 1.0
            else:
                s0 = stepsize_rbb(_sub(state.x, state.x_prev), _sub(state.grad, state.grad_prev),
                                  state.P, rule, state.s_prev)
            if rule == "armijo" or state.t == 0 or cfg.safeguard:
                s0 = min(max(s0, cfg.s_min), cfg.s_max)
                s, _, ok = stepsize_armijo(trial, state.f, slope, s0, cfg)
                if not ok:
                    logger.warning("backtracking budget exhausted at t=%d; using s_min", state.t)
            else:
                s = s0

        x_new = _axpy(s, eta, state.x)
        f_new, res_new = f_at(x_new)
        if not np.isfinite(f_new):
            raise DivergenceError(f"objective became non-finite at t={state.t + 1}", state.x, history)
        res_new, f_new, egrad_new, grad_new, P_new = evaluate(x_new, res_new, f_new)

        state.x_prev, state.grad_prev, state.eta_prev = state.x, state.grad, eta
        state.P_prev, state.s_prev = state.P, s
        state.x, state.residual, state.f = x_new, res_new, f_new
        state.egrad, state.grad, state.P = egrad_new, grad_new, P_new
        state.t += 1
        state.f_hist = (state.f_hist + [f_new])[-3:]
        record(s)

    return RunResult(factors=state.x, history=history, stop_reason=reason, delta=delta)


def history_rows(history):
    return [asdict(r) for r in history]
