import numpy as np
import pytest

from taco.errors import NoConvergence, NumericalOverflow, SupportMismatch, ZeroEntries
from taco.measures import Coupling, DiscreteMeasure
from taco.sinkhorn import (
    CostSpec,
    SinkhornConfig,
    sinkhorn_divergence,
    solve,
    tilt_residual,
)


def ipf_oracle(a, b, K, n_iter=5000, tol=1e-13):
    """Brute-force iterative proportional fitting on kernel K."""
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(n_iter):
        u = a / (K @ v)
        v = b / (K.T @ u)
        P = u[:, None] * K * v[None, :]
        if np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum() < tol:
            break
    return u[:, None] * K * v[None, :]


def atoms(points, weights=None):
    points = np.asarray(points, dtype=float)
    if weights is None:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    return DiscreteMeasure(points, weights)


class TestSolve:
    def test_constant_cost_gives_product(self):
        mu = atoms([[0.0], [1.0], [2.0]], [0.2, 0.3, 0.5])
        nu = atoms([[0.0], [5.0]], [0.4, 0.6])
        cost = CostSpec("custom_matrix", matrix=np.full((3, 2), 7.0))
        for eps in (0.1, 1.0, 10.0):
            plan, _ = solve(mu, nu, cost, SinkhornConfig(epsilon=eps, tol=1e-12))
            expect = mu.weights[:, None] * nu.weights[None, :]
            assert np.allclose(plan.weights, expect, atol=1e-12)

    def test_single_atoms(self):
        mu = atoms([[1.0, 1.0]])
        nu = atoms([[-2.0, 3.0]])
        plan, _ = solve(mu, nu, CostSpec(), SinkhornConfig(epsilon=0.5))
        assert plan.weights.shape == (1, 1)
        assert plan.weights[0, 0] == pytest.approx(1.0)

    def test_matches_ipf_2x2(self):
        mu = atoms([[0.0], [1.0]])
        nu = atoms([[0.0], [1.0]])
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        plan, _ = solve(mu, nu, CostSpec("custom_matrix", matrix=C),
                        SinkhornConfig(epsilon=1.0, tol=1e-13))
        K = mu.weights[:, None] * np.exp(-C / 1.0) * nu.weights[None, :]
        oracle = ipf_oracle(mu.weights, nu.weights, K)
        assert np.allclose(plan.weights, oracle, atol=1e-12)

    def test_matches_ipf_random(self):
        rng = np.random.default_rng(123)
        for _ in range(20):
            n, m = rng.integers(2, 6, size=2)
            a = rng.dirichlet(np.ones(n)) + 0.01
            a /= a.sum()
            b = rng.dirichlet(np.ones(m)) + 0.01
            b /= b.sum()
            C = rng.random((n, m))
            eps = float(rng.uniform(0.3, 2.0))
            mu = DiscreteMeasure(np.arange(n, dtype=float)[:, None], a)
            nu = DiscreteMeasure(np.arange(m, dtype=float)[:, None], b)
            plan, _ = solve(mu, nu, CostSpec("custom_matrix", matrix=C),
                            SinkhornConfig(epsilon=eps, tol=1e-12))
            K = a[:, None] * np.exp(-C / eps) * b[None, :]
            oracle = ipf_oracle(a, b, K)
            assert np.allclose(plan.weights, oracle, atol=1e-8)

    def test_log_form_foc(self):
        rng = np.random.default_rng(5)
        mu = atoms(rng.normal(size=(6, 2)))
        nu = atoms(rng.normal(size=(5, 2)))
        cfg = SinkhornConfig(epsilon=0.7, tol=1e-11)
        plan, pot = solve(mu, nu, CostSpec(), cfg)
        C = CostSpec().table(mu.points, nu.points)
        base = mu.weights[:, None] * nu.weights[None, :]
        resid = np.log(plan.weights / base) - (pot.f[:, None] + pot.g[None, :] - C) / cfg.epsilon
        assert resid.max() - resid.min() <= 10 * cfg.tol

    def test_marginal_feasibility(self):
        rng = np.random.default_rng(8)
        mu = atoms(rng.normal(size=(7, 1)))
        nu = atoms(rng.normal(size=(4, 1)))
        cfg = SinkhornConfig(epsilon=0.4, tol=1e-10)
        plan, _ = solve(mu, nu, CostSpec("absolute"), cfg)
        r = np.abs(plan.weights.sum(axis=1) - mu.weights).sum()
        c = np.abs(plan.weights.sum(axis=0) - nu.weights).sum()
        assert r + c <= 2 * cfg.tol

    def test_gauge(self):
        rng = np.random.default_rng(2)
        mu = atoms(rng.normal(size=(5, 1)))
        nu = atoms(rng.normal(size=(6, 1)))
        _, pot = solve(mu, nu, CostSpec(), SinkhornConfig(epsilon=1.0))
        assert abs(np.dot(pot.g, nu.weights)) < 1e-9

    def test_entropy_monotone_in_epsilon(self):
        rng = np.random.default_rng(4)
        mu = atoms(rng.normal(size=(6, 1)))
        nu = atoms(rng.normal(size=(6, 1)))
        ents = []
        for eps in (0.2, 1.0, 5.0):
            plan, _ = solve(mu, nu, CostSpec(), SinkhornConfig(epsilon=eps, tol=1e-9))
            P = plan.weights
            ents.append(-float(np.sum(P[P > 0] * np.log(P[P > 0]))))
        assert ents[0] <= ents[1] + 1e-9 <= ents[2] + 2e-9

    def test_no_convergence_raises_with_residual(self):
        rng = np.random.default_rng(17)
        mu = atoms(rng.normal(size=(3, 1)), [0.6, 0.3, 0.1])
        nu = atoms(rng.normal(size=(4, 1)))
        with pytest.raises(NoConvergence) as exc:
            solve(mu, nu, CostSpec(), SinkhornConfig(epsilon=0.2, max_iter=1, tol=1e-14))
        assert exc.value.residual is not None

    def test_nonfinite_cost_rejected(self):
        mu = atoms([[0.0]])
        nu = atoms([[1.0]])
        bad = CostSpec("custom_matrix", matrix=np.array([[np.inf]]))
        with pytest.raises(NumericalOverflow):
            solve(mu, nu, bad, SinkhornConfig(epsilon=1.0))


class TestDivergence:
    def test_self_divergence_zero(self):
        rng = np.random.default_rng(1)
        p = atoms(rng.normal(size=(8, 2)))
        assert abs(sinkhorn_divergence(p, p, epsilon=0.5)) < 1e-6

    def test_two_atoms_limit(self):
        p = atoms([[0.0]])
        q = atoms([[3.0]])
        # single feasible coupling: exactly d**2 at any epsilon
        assert sinkhorn_divergence(p, q, epsilon=0.05) == pytest.approx(9.0, abs=1e-8)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(10)
        p = atoms(rng.normal(size=(3, 2)), rng.dirichlet(np.ones(3)))
        q = atoms(rng.normal(size=(3, 2)), rng.dirichlet(np.ones(3)))
        eps = 0.8
        cfg = SinkhornConfig(epsilon=eps, tol=1e-11)
        cost = CostSpec()

        def ot(a, b):
            plan, _ = solve(a, b, cost, cfg)
            C = cost.table(a.points, b.points)
            base = a.weights[:, None] * b.weights[None, :]
            P = plan.weights
            kl = float(np.sum(P[P > 0] * np.log(P[P > 0] / base[P > 0])))
            return float(np.sum(P * C)) + eps * kl

        expect = ot(p, q) - 0.5 * ot(p, p) - 0.5 * ot(q, q)
        assert sinkhorn_divergence(p, q, epsilon=eps) == pytest.approx(expect, abs=1e-9)

    def test_nonnegative(self):
        rng = np.random.default_rng(14)
        for _ in range(5):
            p = atoms(rng.normal(size=(5, 2)))
            q = atoms(rng.normal(size=(6, 2)) + 0.5)
            assert sinkhorn_divergence(p, q, epsilon=1.0) > -1e-8


class TestTiltResidual:
    def grid_plan(self, W):
        W = np.asarray(W, dtype=float)
        nx, ny = W.shape
        return Coupling(np.arange(nx, dtype=float)[:, None],
                        np.arange(ny, dtype=float)[:, None], W, mode="grid")

    def test_identity(self):
        rng = np.random.default_rng(0)
        P = self.grid_plan(rng.random((4, 4)) + 0.1)
        phi, psi, residual = tilt_residual(P, P)
        assert residual < 1e-9
        assert np.allclose(phi, 0.0, atol=1e-9)
        assert np.allclose(psi, 0.0, atol=1e-9)

    def test_product_couplings_additive_logratio(self):
        rng = np.random.default_rng(6)
        m1, n1 = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(5))
        m2, n2 = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(5))
        P1 = self.grid_plan(m1[:, None] * n1[None, :])
        P2 = self.grid_plan(m2[:, None] * n2[None, :])
        phi, psi, residual = tilt_residual(P1, P2)
        assert residual < 1e-9
        lr = np.log(m2 / m1)
        assert np.allclose(phi, lr - lr.mean(), atol=1e-7)
        lr = np.log(n2 / n1)
        assert np.allclose(psi, lr - lr.mean(), atol=1e-7)

    def test_shared_cost_plans_separable(self):
        rng = np.random.default_rng(9)
        C = rng.random((4, 4))
        cost = CostSpec("custom_matrix", matrix=C)
        cfg = SinkhornConfig(epsilon=0.5, tol=1e-12)
        pts = np.arange(4, dtype=float)[:, None]
        mu1 = DiscreteMeasure(pts, rng.dirichlet(np.ones(4)) + 0.05)
        nu1 = DiscreteMeasure(pts, rng.dirichlet(np.ones(4)) + 0.05)
        mu2 = DiscreteMeasure(pts, rng.dirichlet(np.ones(4)) + 0.05)
        nu2 = DiscreteMeasure(pts, rng.dirichlet(np.ones(4)) + 0.05)
        p1, _ = solve(mu1, nu1, cost, cfg)
        p2, _ = solve(mu2, nu2, cost, cfg)
        _, _, residual = tilt_residual(p1, p2)
        assert residual < 1e-6

    def test_different_costs_not_separable(self):
        rng = np.random.default_rng(21)
        pts = np.arange(4, dtype=float)[:, None]
        mu = DiscreteMeasure(pts, rng.dirichlet(np.ones(4)) + 0.05)
        nu = DiscreteMeasure(pts, rng.dirichlet(np.ones(4)) + 0.05)
        cfg = SinkhornConfig(epsilon=0.5, tol=1e-12)
        C1 = rng.random((4, 4))
        C2 = rng.random((4, 4))
        p1, _ = solve(mu, nu, CostSpec("custom_matrix", matrix=C1), cfg)
        p2, _ = solve(mu, nu, CostSpec("custom_matrix", matrix=C2), cfg)
        _, _, residual = tilt_residual(p1, p2)
        assert residual > 1e-2

    def test_zero_entries_rejected(self):
        P = self.grid_plan(np.array([[0.5, 0.5], [0.0, 0.0]]) + 1e-30)
        Q = self.grid_plan(np.ones((2, 2)))
        bad = Coupling(P.x, P.y, np.array([[0.5, 0.5], [0.0, 0.0]]), mode="grid")
        with pytest.raises(ZeroEntries):
            tilt_residual(bad, Q)

    def test_support_mismatch(self):
        P = self.grid_plan(np.ones((2, 2)))
        Q = self.grid_plan(np.ones((3, 3)))
        with pytest.raises(SupportMismatch):
            tilt_residual(P, Q)
