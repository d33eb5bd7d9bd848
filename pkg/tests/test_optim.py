import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riemtc import optim
from riemtc.cp_model import ProblemConfig, euclidean_gradient, objective
from riemtc.data import init_factors
from riemtc.exceptions import DivergenceError, DomainError
from riemtc.metric import build_preconditioner, default_delta, identity_preconditioner, metric_inner, riemannian_gradient
from riemtc.optim import (
    IterationRecord,
    OptimizerConfig,
    OptimizerState,
    armijo_trial,
    check_stop,
    direction_rcg,
    direction_rgd,
    linemin_coefficients,
    poly_eval,
    real_roots,
    run,
    stepsize_armijo,
    stepsize_linemin,
    stepsize_rbb,
)
from riemtc.synth import SynthConfig, generate
from riemtc.tensor_core import ObservedTensor, dense_cp_assemble

from conftest import random_factors, random_observed


@pytest.fixture(scope="module")
def small():
    return generate(SynthConfig((15, 16, 17), (2, 3, 2), 0.4, seed=3))


def descent_setup(seed, lam=0.0, dims=(6, 7, 8), R=3):
    rng = np.random.default_rng(seed)
    data = random_observed(rng, dims, 150)
    U = random_factors(rng, dims, R)
    cfg = ProblemConfig.from_data(data, R, lam)
    D = euclidean_gradient(U, data, cfg)
    P = build_preconditioner(U, default_delta(U))
    return rng, data, U, cfg, D, P


# --- directions ------------------------------------------------------------

class TestDirections:
    def test_rgd(self, rng):
        P = build_preconditioner(random_factors(rng, (3, 4, 5), 2), 0.1)
        g = random_factors(rng, (3, 4, 5), 2)
        eta = direction_rgd(g)
        assert metric_inner(P, eta, g) == pytest.approx(-metric_inner(P, g, g), rel=1e-14)
        assert not any(e.any() for e in direction_rgd(tuple(np.zeros((m, 2)) for m in (3, 4, 5))))

    def test_rcg_equal_gradients_resets(self, rng):
        P = build_preconditioner(random_factors(rng, (3, 4, 5), 2), 0.1)
        g, e = random_factors(rng, (3, 4, 5), 2), random_factors(rng, (3, 4, 5), 2)
        eta, beta = direction_rcg(g, g, e, P, return_beta=True)
        assert beta == 0.0
        for a, b in zip(eta, g):
            np.testing.assert_array_equal(a, -b)

    def test_rcg_negative_quotient_clamped(self):
        P = identity_preconditioner(1, 2)
        g, g_prev = (np.array([[1.0, 0.0]]),), (np.array([[2.0, 1.0]]),)
        # diff = [-1, -1], num = -1; e_prev = [-1, 3] gives den = -2 -> beta = 0.5
        assert direction_rcg(g, g_prev, (np.array([[-1.0, 3.0]]),), P, return_beta=True)[1] == pytest.approx(0.5)
        # e_prev = [1, -3] gives den = 2 -> raw quotient -0.5 -> clamped to 0
        assert direction_rcg(g, g_prev, (np.array([[1.0, -3.0]]),), P, return_beta=True)[1] == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_rcg_identity_and_descent(self, seed):
        rng = np.random.default_rng(seed)
        dims = (4, 5, 6)
        P = build_preconditioner(random_factors(rng, dims, 3), 0.1)
        g, g_prev, e_prev = (random_factors(rng, dims, 3) for _ in range(3))
        eta, beta = direction_rcg(g, g_prev, e_prev, P, return_beta=True)
        assert beta >= 0
        for a, b, c in zip(eta, g, e_prev):
            np.testing.assert_allclose(a + b, beta * c, rtol=1e-12, atol=1e-12)
        assert metric_inner(P, eta, g) < 0


# --- line minimization -----------------------------------------------------

class TestRealRoots:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=5, unique=True))
    def test_recovers_constructed_roots(self, roots):
        roots = sorted(roots)
        if len(roots) > 1 and np.min(np.diff(roots)) < 1e-2:
            return
        c = np.polynomial.polynomial.polyfromroots(roots) * 2.5
        got = real_roots(c)
        assert len(got) == len(roots)
        np.testing.assert_allclose(got, roots, atol=1e-7)

    def test_no_real_roots(self):
        assert real_roots([1.0, 0.0, 1.0]).size == 0

    def test_matches_numpy_roots(self, rng):
        c = rng.standard_normal(6)
        ref = np.roots(c[::-1])
        ref = np.sort(ref[np.abs(ref.imag) <= 1e-8 * (1 + np.abs(ref.real))].real)
        np.testing.assert_allclose(real_roots(c), ref, rtol=1e-9, atol=1e-12)


class TestLinemin:
    @pytest.mark.parametrize("seed", range(5))
    def test_polynomial_fidelity(self, seed):
        rng, data, U, cfg, D, P = descent_setup(seed, lam=0.2)
        eta = direction_rgd(riemannian_gradient(D, P))
        c = linemin_coefficients(U, eta, data, cfg)
        for s in rng.uniform(0, 2, size=10):
            direct = objective(tuple(A + s * E for A, E in zip(U, eta)), data, cfg)
            assert abs(poly_eval(c, s) - direct) <= 1e-10 * abs(direct)

    @pytest.mark.parametrize("seed", range(5))
    def test_derivative_at_zero(self, seed):
        _, data, U, cfg, D, P = descent_setup(seed, lam=0.1)
        eta = direction_rgd(riemannian_gradient(D, P))
        c = linemin_coefficients(U, eta, data, cfg)
        slope = sum(np.sum(d * e) for d, e in zip(D, eta))
        assert c[1] == pytest.approx(slope, rel=1e-10)
        assert c[1] < 0

    @pytest.mark.parametrize("seed", range(5))
    def test_single_factor_closed_form(self, seed):
        _, data, U, cfg, D, _ = descent_setup(seed)
        eta = (-D[0], np.zeros_like(U[1]), np.zeros_like(U[2]))
        c = linemin_coefficients(U, eta, data, cfg)
        assert np.all(np.abs(c[3:]) <= 1e-12 * np.abs(c[:3]).max())
        s = stepsize_linemin(U, eta, data, cfg)
        assert s == pytest.approx(-c[1] / (2 * c[2]), rel=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_returned_step_is_grid_minimal(self, seed):
        _, data, U, cfg, D, P = descent_setup(seed, lam=0.05)
        eta = direction_rgd(riemannian_gradient(D, P))
        s = stepsize_linemin(U, eta, data, cfg)
        assert s > 0
        at = lambda v: objective(tuple(A + v * E for A, E in zip(U, eta)), data, cfg)
        hs = at(s)
        for v in np.linspace(0, 2 * s, 101)[1:]:
            assert hs <= at(v) * (1 + 1e-12)

    def test_rejects_fourth_order(self, rng):
        data = random_observed(rng, (3, 3, 3, 3), 30)
        U = random_factors(rng, (3, 3, 3, 3), 2)
        with pytest.raises(DomainError):
            linemin_coefficients(U, U, data, ProblemConfig.from_data(data, 2))
        with pytest.raises(DomainError):
            run(data, ProblemConfig.from_data(data, 2), U, OptimizerConfig(stepsize_rule="linemin"))


# --- Armijo and RBB --------------------------------------------------------

class TestArmijo:
    def test_accepts_unit_step(self):
        cfg = OptimizerConfig(armijo_sigma=0.1)
        s, fs, ok = stepsize_armijo(lambda s: 3.0 - s + 0.5 * s * s, 3.0, -1.0, 1.0, cfg)
        assert (s, fs, ok) == (1.0, 2.5, True)

    def test_large_sigma_backtracks(self):
        cfg = OptimizerConfig(armijo_sigma=0.99)
        fun = lambda s: 3.0 - s + 0.5 * s * s
        assert 3.0 - fun(1.0) < 0.99 * 1.0
        s, _, ok = stepsize_armijo(fun, 3.0, -1.0, 1.0, cfg)
        assert ok and s < 1.0
        assert 3.0 - fun(s) >= 0.99 * s

    def test_budget_exhausted(self):
        cfg = OptimizerConfig(max_backtracks=3)
        s, _, ok = stepsize_armijo(lambda s: 10.0, 0.0, -1.0, 1.0, cfg)
        assert not ok and s == cfg.s_min

    def test_trial_formula(self, rng):
        P = identity_preconditioner(1, 1)
        st_ = OptimizerState(x=None, residual=None, f=7.0, egrad=None, grad=None, P=P)
        cfg = OptimizerConfig()
        assert armijo_trial(st_, cfg) == 1.0
        st_.t, st_.f_hist = 2, [10.0, 8.0, 7.0]
        st_.P_prev, st_.eta_prev, st_.grad_prev = P, (np.array([[-2.0]]),), (np.array([[4.0]]),)
        # 2 (f(x_1) - f(x_0)) / g(eta_1, grad_1) = 2 (8 - 10) / (-8)
        assert armijo_trial(st_, cfg) == pytest.approx(0.5)


class TestRbb:
    def test_z_equals_y(self, rng):
        P = build_preconditioner(random_factors(rng, (3, 4, 5), 2), 0.1)
        z = random_factors(rng, (3, 4, 5), 2)
        assert stepsize_rbb(z, z, P, "rbb1") == pytest.approx(1.0)
        assert stepsize_rbb(z, z, P, "rbb2") == pytest.approx(1.0)

    def test_y_twice_z(self, rng):
        P = build_preconditioner(random_factors(rng, (3, 4, 5), 2), 0.1)
        z = random_factors(rng, (3, 4, 5), 2)
        y = tuple(2 * a for a in z)
        assert stepsize_rbb(z, y, P, "rbb1") == pytest.approx(0.5)
        assert stepsize_rbb(z, y, P, "rbb2") == pytest.approx(0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31))
    def test_rbb2_not_above_rbb1(self, seed):
        rng = np.random.default_rng(seed)
        P = build_preconditioner(random_factors(rng, (3, 4, 5), 2), 0.1)
        z, y = random_factors(rng, (3, 4, 5), 2), random_factors(rng, (3, 4, 5), 2)
        assert stepsize_rbb(z, y, P, "rbb2") <= stepsize_rbb(z, y, P, "rbb1") * (1 + 1e-12)

    def test_clamp_and_degenerate(self):
        P = identity_preconditioner(1, 1)
        z, y = (np.array([[1.0]]),), (np.array([[1e-12]]),)
        assert stepsize_rbb(z, y, P, "rbb1") == optim.RBB_MAX
        zero = (np.array([[0.0]]),)
        assert stepsize_rbb(z, zero, P, "rbb2", s_prev=0.3) == 0.3


# --- stopping --------------------------------------------------------------

def rec(t, train, grad=1.0, seconds=0.0):
    return IterationRecord(t, 1.0, train, None, grad, None, seconds)


class TestCheckStop:
    def test_identical_errors(self):
        assert check_stop([rec(0, 1.0), rec(1, 1.0)], OptimizerConfig()) == "relchg"

    def test_zero_error_counts_as_converged(self):
        assert check_stop([rec(0, 0.0), rec(1, 0.0)], OptimizerConfig()) == "relchg"

    def test_gradient(self):
        assert check_stop([rec(0, 1.0, grad=1e-9)], OptimizerConfig()) == "grad_tol"

    def test_budget_and_iters(self):
        assert check_stop([rec(0, 1.0), rec(1, 0.5, seconds=10)], OptimizerConfig(time_budget=5)) == "time_budget"
        assert check_stop([rec(0, 1.0), rec(3, 0.5)], OptimizerConfig(max_iters=3)) == "max_iters"
        assert check_stop([rec(0, 1.0), rec(1, 0.5)], OptimizerConfig()) is None

    def test_relchg_disabled(self):
        assert check_stop([rec(0, 1.0), rec(1, 1.0)], OptimizerConfig(relchg_tol=None)) is None


# --- driver ----------------------------------------------------------------

class TestRun:
    def test_exact_init_stops_immediately(self, rng):
        U = random_factors(rng, (5, 6, 7), 2)
        data = ObservedTensor.from_dense(dense_cp_assemble(U), rng.random((5, 6, 7)) < 0.5)
        res = run(data, ProblemConfig.from_data(data, 2), U, OptimizerConfig())
        assert res.stop_reason == "grad_tol"
        assert len(res.history) == 1 and res.history[0].t == 0

    def test_result_unpacks(self, small):
        prob = ProblemConfig.from_data(small.train, 4)
        factors, history = run(small.train, prob, init_factors(small.train.dims, 4, 0), OptimizerConfig(max_iters=3))
        assert len(factors) == 3 and history[-1].t == 3

    @pytest.mark.parametrize("method", optim.METHODS)
    @pytest.mark.parametrize("rule", optim.RULES)
    def test_every_combination_decreases(self, small, method, rule):
        prob = ProblemConfig.from_data(small.train, 4, lam=1e-3)
        # unguarded BB steps along conjugate directions may diverge; guard those pairs
        guard = rule.startswith("rbb") and method.endswith("cg")
        res = run(small.train, prob, init_factors(small.train.dims, 4, 1),
                  OptimizerConfig(method=method, stepsize_rule=rule, max_iters=25, safeguard=guard),
                  test=small.test)
        h = res.history
        assert h[-1].objective < 0.5 * h[0].objective
        assert all(b.seconds >= a.seconds for a, b in zip(h, h[1:]))
        assert all(r.test_rmse is not None for r in h)

    def test_noiseless_recovery_small(self, small):
        prob = ProblemConfig.from_data(small.train, 6)
        res = run(small.train, prob, init_factors(small.train.dims, 6, 0), OptimizerConfig(max_iters=500),
                  test=small.test)
        assert res.history[-1].test_rmse <= 1e-6

    def test_safeguard_is_monotone(self, small):
        prob = ProblemConfig.from_data(small.train, 4)
        res = run(small.train, prob, init_factors(small.train.dims, 4, 2),
                  OptimizerConfig(stepsize_rule="rbb1", safeguard=True, max_iters=40))
        f = [r.objective for r in res.history]
        assert all(b <= a for a, b in zip(f, f[1:]))

    @pytest.mark.parametrize("seed", range(3))
    def test_regularized_iterates_bounded(self, small, seed):
        lam = 0.5
        prob = ProblemConfig.from_data(small.train, 4, lam)
        init = init_factors(small.train.dims, 4, seed)
        f0 = objective(init, small.train, prob)
        bound = np.sqrt(2 * f0 / lam)

        def cb(record, state):
            assert max(np.linalg.norm(A) for A in state.x) <= bound

        run(small.train, prob, init, OptimizerConfig(stepsize_rule="armijo", max_iters=30), callback=cb)

    def test_euclidean_variant_uses_plain_gradient(self, small):
        prob = ProblemConfig.from_data(small.train, 3)
        U = init_factors(small.train.dims, 3, 0)
        D = euclidean_gradient(U, small.train, prob)
        for a, b in zip(riemannian_gradient(D, identity_preconditioner(3, 3)), D):
            np.testing.assert_array_equal(a, b)
        seen = {}

        def cb(record, state):
            seen.setdefault("g", state.grad)
            seen.setdefault("e", state.egrad)

        run(small.train, prob, U, OptimizerConfig(method="euclid_gd", max_iters=0), callback=cb)
        for a, b in zip(seen["g"], D):
            np.testing.assert_array_equal(a, b)

    def test_divergence_reports_last_finite_iterate(self, small, monkeypatch):
        monkeypatch.setattr(optim, "stepsize_linemin", lambda *a, **k: 1e200)
        prob = ProblemConfig.from_data(small.train, 3)
        init = init_factors(small.train.dims, 3, 0)
        with pytest.raises(DivergenceError) as info:
            run(small.train, prob, init, OptimizerConfig(stepsize_rule="linemin"))
        assert all(np.isfinite(A).all() for A in info.value.last_factors)
        assert len(info.value.history) == 1

    def test_time_budget(self, small):
        prob = ProblemConfig.from_data(small.train, 3)
        res = run(small.train, prob, init_factors(small.train.dims, 3, 0), OptimizerConfig(time_budget=1e-9))
        assert res.stop_reason == "time_budget"

    def test_invalid_config(self):
        for kw in (dict(method="newton"), dict(stepsize_rule="exact"), dict(grad_tol=0.0),
                   dict(armijo_sigma=1.0), dict(armijo_beta=0.0)):
            with pytest.raises(DomainError):
                OptimizerConfig(**kw)
