import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minbal.balance import BalanceTarget, Estimand, expand_basis, imbalance, target_profile
from minbal.dispersion import Dispersion, DispersionSpec, primal_f
from minbal.solver import (
    CollinearBasisWarning,
    DualProblem,
    SolverOptions,
    kkt_residual,
    objective,
    prox_weighted_l1,
    smooth_gradient,
    solve_dual,
)

TIGHT = SolverOptions(tol=1e-12, kkt_tol=1e-9)


def problem_for(x, z, kind, delta=None, standardize=False, target=None, **spec_kw):
    basis = expand_basis(np.asarray(x, dtype=float), moments=1, standardize=standardize)
    z = np.asarray(z)
    spec = DispersionSpec(kind, r=int(z.sum()), n=len(z), **spec_kw)
    if delta is None:
        delta = np.zeros(basis.k)
    return DualProblem(basis=basis, z=z, delta=np.asarray(delta, dtype=float), spec=spec, target=target)


def random_problem(rng, kind, n_max=30, k_max=4, standardize=True):
    n = int(rng.integers(8, n_max + 1))
    k = int(rng.integers(1, k_max + 1))
    x = rng.standard_normal((n, k))
    z = np.zeros(n, dtype=int)
    z[rng.choice(n, size=max(k + 2, n // 2), replace=False)] = 1
    basis = expand_basis(x, moments=1, standardize=standardize)
    spec = DispersionSpec(kind, r=int(z.sum()), n=n)
    return basis, z, spec


class TestObjective:
    def test_variance_zero_at_origin(self):
        prob = problem_for([[0.1], [0.2], [0.7], [0.9]], [1, 1, 1, 0], Dispersion.VARIANCE)
        assert objective(prob, np.zeros(2)) == pytest.approx(0.0, abs=1e-15)

    def test_entropy_value_at_origin(self):
        prob = problem_for([[0.3], [0.9]], [1, 0], Dispersion.NEGATIVE_ENTROPY)
        assert objective(prob, np.zeros(2)) == pytest.approx(np.exp(-1.0), abs=1e-14)

    def test_zero_tolerances_leave_smooth_part_only(self):
        rng = np.random.default_rng(1)
        basis, z, spec = random_problem(rng, Dispersion.VARIANCE)
        lam = rng.standard_normal(basis.k)
        p0 = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec)
        dv = basis.delta_vector(0.2)
        p1 = DualProblem(basis=basis, z=z, delta=dv, spec=spec)
        assert objective(p1, lam) == pytest.approx(objective(p0, lam) + float(dv @ np.abs(lam)))

    def test_dimension_mismatch(self):
        prob = problem_for([[0.1], [0.9]], [1, 0], Dispersion.VARIANCE)
        with pytest.raises(ValueError):
            objective(prob, np.zeros(5))


class TestSmoothGradient:
    def test_finite_difference_match(self):
        rng = np.random.default_rng(7)
        for kind in (Dispersion.VARIANCE, Dispersion.NEGATIVE_ENTROPY):
            basis, z, spec = random_problem(rng, kind)
            prob = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec)
            lam = 0.3 * rng.standard_normal(basis.k)
            g = smooth_gradient(prob, lam)
            h = 1e-6
            for j in range(basis.k):
                e = np.zeros(basis.k)
                e[j] = h
                fd = (objective(prob, lam + e) - objective(prob, lam - e)) / (2 * h)
                assert fd == pytest.approx(g[j], rel=1e-6, abs=1e-8)

    def test_gradient_at_origin_is_mean_gap_for_variance(self):
        rng = np.random.default_rng(3)
        basis, z, spec = random_problem(rng, Dispersion.VARIANCE)
        prob = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec)
        expected = basis.values.mean(axis=0) - basis.values[z == 1].mean(axis=0)
        np.testing.assert_allclose(smooth_gradient(prob, np.zeros(basis.k)), expected, atol=1e-12)

    def test_gradient_is_negated_imbalance(self):
        rng = np.random.default_rng(11)
        basis, z, spec = random_problem(rng, Dispersion.NEGATIVE_ENTROPY)
        prob = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec)
        lam = 0.2 * rng.standard_normal(basis.k)
        from minbal.solver import recover_weights

        w = recover_weights(prob, lam)
        imb = imbalance(w, z, basis, prob.target)
        np.testing.assert_allclose(smooth_gradient(prob, lam), -imb, atol=1e-12)


class TestProx:
    def test_inside_dead_zone(self):
        assert prox_weighted_l1(np.array([0.3]), np.array([0.5]))[0] == 0.0

    def test_shrinks_toward_zero(self):
        assert prox_weighted_l1(np.array([-1.2]), np.array([0.5]))[0] == pytest.approx(-0.7)

    def test_identity_at_zero_threshold(self):
        v = np.array([0.4, -2.0, 0.0])
        np.testing.assert_array_equal(prox_weighted_l1(v, np.zeros(3)), v)

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            prox_weighted_l1(np.zeros(2), np.array([0.1, -0.1]))

    @settings(max_examples=100, deadline=None)
    @given(
        v=st.floats(-100, 100),
        t=st.floats(0, 50),
    )
    def test_pointwise_properties(self, v, t):
        out = float(prox_weighted_l1(np.array([v]), np.array([t]))[0])
        assert abs(out) == pytest.approx(max(abs(v) - t, 0.0), abs=1e-12)
        if out != 0.0:
            assert np.sign(out) == np.sign(v)


class TestSolveDual:
    def test_intercept_only_gives_uniform_weights(self):
        x = np.array([[1.0], [2.0], [3.0], [4.0]])
        z = np.array([1, 1, 1, 0])
        basis = expand_basis(x, standardize=False)
        # Huge tolerance on the covariate: only the sum constraint binds.
        prob = DualProblem(
            basis=basis, z=z, delta=np.array([0.0, 1e6]),
            spec=DispersionSpec(Dispersion.NEGATIVE_ENTROPY, r=3, n=4),
        )
        res = solve_dual(prob, TIGHT)
        assert res.converged
        np.testing.assert_allclose(res.weights, [1 / 3, 1 / 3, 1 / 3, 0.0], atol=1e-8)
        assert res.lam[1] == 0.0

    def test_analytic_quadratic_solution(self):
        prob = problem_for([[-1.0], [0.0], [1.0], [2.0]], [1, 1, 1, 0], Dispersion.VARIANCE)
        res = solve_dual(prob, TIGHT)
        assert res.converged
        np.testing.assert_allclose(res.weights, [1 / 12, 1 / 3, 7 / 12, 0.0], atol=1e-9)

    def test_weights_zero_off_respondents(self):
        rng = np.random.default_rng(5)
        basis, z, spec = random_problem(rng, Dispersion.VARIANCE)
        prob = DualProblem(basis=basis, z=z, delta=basis.delta_vector(0.05), spec=spec)
        res = solve_dual(prob)
        assert np.all(res.weights[z == 0] == 0.0)

    def test_objective_trace_non_increasing(self):
        rng = np.random.default_rng(6)
        basis, z, spec = random_problem(rng, Dispersion.NEGATIVE_ENTROPY)
        prob = DualProblem(basis=basis, z=z, delta=basis.delta_vector(0.02), spec=spec)
        res = solve_dual(prob, SolverOptions(track_objective=True))
        trace = res.objective_trace
        assert trace is not None and len(trace) == res.iterations + 1
        slack = 1e-10 * np.maximum(1.0, np.abs(trace[:-1]))
        assert np.all(np.diff(trace) <= slack)

    def test_max_iters_reported_not_raised(self):
        rng = np.random.default_rng(8)
        basis, z, spec = random_problem(rng, Dispersion.NEGATIVE_ENTROPY)
        prob = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec)
        res = solve_dual(prob, SolverOptions(max_iters=2))
        assert not res.converged
        assert res.status == "max_iters"
        assert res.iterations == 2
        assert np.isfinite(res.diagnostics["gradient_map_norm"])

    def test_infeasible_exact_balance_diverges(self):
        # Respondent covariate support cannot reach the overall mean with
        # positive weights summing to one.
        x = np.array([[0.0], [0.5], [1.0], [50.0], [60.0], [70.0]])
        z = np.array([1, 1, 1, 0, 0, 0])
        prob = problem_for(x, z, Dispersion.NEGATIVE_ENTROPY)
        res = solve_dual(prob, SolverOptions(objective_floor=-1e6))
        assert not res.converged
        assert res.status == "diverged"

    def test_collinear_basis_warns(self):
        x = np.column_stack([np.arange(10.0), 2.0 * np.arange(10.0)])
        z = np.resize([1, 0], 10)
        with pytest.warns(CollinearBasisWarning):
            problem = problem_for(x, z, Dispersion.VARIANCE, delta=np.zeros(3))
            solve_dual(problem, SolverOptions(max_iters=50))

    def test_negative_weights_counted_in_diagnostics(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((12, 1)) + 3.0
        z = np.array([1] * 4 + [0] * 8)
        prob = problem_for(x, z, Dispersion.VARIANCE, standardize=True)
        res = solve_dual(prob, TIGHT)
        assert res.diagnostics["negative_weights"] == int(np.sum(res.weights < 0))
        assert res.diagnostics["min_weight"] == pytest.approx(float(res.weights.min()))

    def test_standardization_equivalence(self):
        # Raw basis with per-column sd tolerances equals standardized
        # basis with scalar tolerances.
        rng = np.random.default_rng(21)
        x = rng.standard_normal((30, 3)) * np.array([2.0, 0.3, 5.0])
        z = np.resize([1, 1, 0], 30)
        d = 0.07
        raw = expand_basis(x, standardize=False)
        std = expand_basis(x, standardize=True)
        spec = DispersionSpec(Dispersion.NEGATIVE_ENTROPY, r=int(z.sum()), n=30)
        res_raw = solve_dual(DualProblem(basis=raw, z=z, delta=raw.delta_vector(d), spec=spec), TIGHT)
        res_std = solve_dual(DualProblem(basis=std, z=z, delta=std.delta_vector(d), spec=spec), TIGHT)
        assert res_raw.converged and res_std.converged
        np.testing.assert_allclose(res_raw.weights, res_std.weights, atol=1e-8)


class TestKKT:
    def test_exact_balance_residuals_tiny(self):
        prob = problem_for([[-1.0], [0.0], [1.0], [2.0]], [1, 1, 1, 0], Dispersion.VARIANCE)
        res = solve_dual(prob, TIGHT)
        assert all(abs(e.imbalance) <= 1e-9 for e in res.kkt)
        assert all(e.active for e in res.kkt)

    def test_inactive_when_tolerance_slack(self):
        x = np.array([[1.0], [2.0], [3.0], [4.0]])
        z = np.array([1, 1, 1, 0])
        basis = expand_basis(x, standardize=False)
        prob = DualProblem(
            basis=basis, z=z, delta=np.array([0.0, 1e6]),
            spec=DispersionSpec(Dispersion.NEGATIVE_ENTROPY, r=3, n=4),
        )
        res = solve_dual(prob, TIGHT)
        entry = res.kkt[1]
        assert entry.lam == 0.0
        assert not entry.active
        assert abs(entry.imbalance) < entry.delta

    def test_active_constraints_sit_on_their_boundary(self):
        rng = np.random.default_rng(17)
        hits = 0
        for _ in range(10):
            basis, z, spec = random_problem(rng, Dispersion.NEGATIVE_ENTROPY)
            prob = DualProblem(basis=basis, z=z, delta=basis.delta_vector(0.05), spec=spec)
            res = solve_dual(prob)
            if not res.converged:
                continue
            imb = imbalance(res.weights, z, basis, prob.target)
            for e in res.kkt:
                if e.lam > 0:
                    hits += 1
                    assert abs(imb[e.index] - e.delta) <= 1e-6
                elif e.lam < 0:
                    hits += 1
                    assert abs(imb[e.index] + e.delta) <= 1e-6
                else:
                    assert abs(imb[e.index]) <= e.delta + 1e-6
        assert hits > 0

    def test_kkt_residual_bitwise_equals_imbalance(self):
        rng = np.random.default_rng(19)
        basis, z, spec = random_problem(rng, Dispersion.VARIANCE)
        prob = DualProblem(basis=basis, z=z, delta=basis.delta_vector(0.03), spec=spec)
        res = solve_dual(prob)
        imb = imbalance(res.weights, z, basis, prob.target)
        recomputed = kkt_residual(res, prob)
        for e, e2, v in zip(res.kkt, recomputed, imb):
            assert e.imbalance == e2.imbalance == v

    def test_balance_constraints_hold_within_tolerance(self):
        rng = np.random.default_rng(23)
        for kind in (Dispersion.VARIANCE, Dispersion.NEGATIVE_ENTROPY):
            basis, z, spec = random_problem(rng, kind)
            prob = DualProblem(basis=basis, z=z, delta=basis.delta_vector(0.04), spec=spec)
            res = solve_dual(prob)
            assert res.converged
            imb = imbalance(res.weights, z, basis, prob.target)
            assert np.all(np.abs(imb) <= prob.delta + 1e-6)


class TestOracles:
    def test_variance_matches_equality_constrained_quadratic(self):
        rng = np.random.default_rng(100)
        for _ in range(20):
            basis, z, spec = random_problem(rng, Dispersion.VARIANCE)
            prob = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec)
            res = solve_dual(prob, TIGHT)
            assert res.converged
            a = basis.values[z == 1]
            u = np.full(int(z.sum()), 1.0 / int(z.sum()))
            mu = np.linalg.solve(a.T @ a, prob.target.values - a.T @ u)
            np.testing.assert_allclose(res.weights[z == 1], u + a @ mu, atol=1e-6)

    def test_entropy_matches_damped_newton(self):
        rng = np.random.default_rng(200)
        for _ in range(10):
            basis, z, spec = random_problem(rng, Dispersion.NEGATIVE_ENTROPY)
            r = int(z.sum())
            coef = rng.dirichlet(np.full(r, 2.0))
            target = BalanceTarget(basis.values[z == 1].T @ coef, Estimand.POPULATION_MEAN)
            prob = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec, target=target)
            res = solve_dual(prob, TIGHT)
            assert res.converged
            w_newton = newton_entropy_weights(prob)
            np.testing.assert_allclose(res.weights[z == 1], w_newton, atol=1e-6)

    def test_strong_duality_at_zero_tolerance(self):
        rng = np.random.default_rng(300)
        for kind in (Dispersion.VARIANCE, Dispersion.NEGATIVE_ENTROPY):
            basis, z, spec = random_problem(rng, kind, n_max=25)
            prob = DualProblem(basis=basis, z=z, delta=np.zeros(basis.k), spec=spec)
            res = solve_dual(prob, TIGHT)
            assert res.converged
            primal = float(np.sum(primal_f(res.weights[z == 1], spec)))
            assert res.objective_value == pytest.approx(-primal, abs=1e-8)


def newton_entropy_weights(problem, iters=400):
    """Independent damped Newton minimization of the smooth entropy dual."""
    b = problem.respondent_basis()
    target = problem.target.values
    lam = np.zeros(problem.basis.k)
    for _ in range(iters):
        with np.errstate(over="ignore"):
            w = np.exp(-b @ lam - 1.0)
        g = target - b.T @ w
        if np.linalg.norm(g) < 1e-13:
            break
        hess = b.T @ (w[:, None] * b)
        d = np.linalg.solve(hess, -g)
        f0 = float(np.sum(w) + target @ lam)
        step = 1.0
        while step > 1e-16:
            cand = lam + step * d
            with np.errstate(over="ignore"):
                fc = float(np.sum(np.exp(-b @ cand - 1.0)) + target @ cand)
            if np.isfinite(fc) and fc <= f0 + 1e-4 * step * float(g @ d):
                break
            step *= 0.5
        lam = lam + step * d
    return np.exp(-b @ lam - 1.0)


class TestValidation:
    def test_no_respondents_rejected(self):
        basis = expand_basis(np.array([[1.0], [2.0]]), standardize=False)
        with pytest.raises(ValueError, match="respondent"):
            DualProblem(
                basis=basis, z=np.array([0, 0]), delta=np.zeros(2),
                spec=DispersionSpec(Dispersion.VARIANCE, r=1, n=2),
            )

    def test_negative_delta_rejected(self):
        basis = expand_basis(np.array([[1.0], [2.0], [5.0]]), standardize=False)
        with pytest.raises(ValueError, match="nonnegative"):
            DualProblem(
                basis=basis, z=np.array([1, 1, 0]), delta=np.array([0.0, -0.1]),
                spec=DispersionSpec(Dispersion.VARIANCE, r=2, n=3),
            )

    def test_nonzero_intercept_tolerance_rejected(self):
        basis = expand_basis(np.array([[1.0], [2.0], [5.0]]), standardize=False)
        with pytest.raises(ValueError, match="intercept"):
            DualProblem(
                basis=basis, z=np.array([1, 1, 0]), delta=np.array([0.1, 0.0]),
                spec=DispersionSpec(Dispersion.VARIANCE, r=2, n=3),
            )

    def test_spec_counts_must_match(self):
        basis = expand_basis(np.array([[1.0], [2.0], [5.0]]), standardize=False)
        with pytest.raises(ValueError, match="match"):
            DualProblem(
                basis=basis, z=np.array([1, 1, 0]), delta=np.zeros(2),
                spec=DispersionSpec(Dispersion.VARIANCE, r=1, n=3),
            )
