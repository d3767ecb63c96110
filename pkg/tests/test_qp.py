import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from qp_oracle import active_set_solve, random_qp
from rfmpc.qp import (
    DimensionMismatch,
    QpProblem,
    QpSolver,
    SolverSettings,
    SolverStatus,
    dump_problem,
    load_problem,
    solve,
)


def kkt_residuals(qp, r):
    P = qp.P.toarray()
    stat = P @ r.z + qp.c + qp.A_eq.T @ r.y + qp.A_ineq.T @ r.lam
    return (
        np.max(np.abs(stat)),
        np.max(np.abs(qp.A_eq @ r.z - qp.b_eq), initial=0.0),
        np.max(qp.A_ineq @ r.z - qp.b_ineq, initial=0.0),
    )


class TestAnalytic:
    def test_single_bound(self):
        qp = QpProblem(sp.eye(4), [-1.0, 0, 0, 0], [[1.0, 0, 0, 0]], [0.5])
        r = solve(qp)
        assert r.status is SolverStatus.OPTIMAL
        assert np.allclose(r.z, [0.5, 0, 0, 0], atol=1e-8)
        assert np.allclose(r.lam, [0.5], atol=1e-8)

    def test_equality(self):
        qp = QpProblem(sp.eye(2), np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[1.0])
        r = solve(qp)
        assert np.allclose(r.z, [0.5, 0.5], atol=1e-10)
        assert np.allclose(r.y, [-0.5], atol=1e-10)

    def test_inactive_constraint(self):
        qp = QpProblem(2 * sp.eye(3), [-2.0, 0, 0], [[1.0, 0, 0]], [5.0])
        r = solve(qp)
        assert np.allclose(r.z, [1, 0, 0], atol=1e-8)
        assert abs(r.lam[0]) < 1e-7

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            QpProblem(sp.eye(3), np.zeros(2))
        with pytest.raises(DimensionMismatch):
            QpProblem(sp.eye(2), np.zeros(2), np.ones((2, 2)), [1.0])


class TestRandomAgainstOracle:
    def test_five_hundred_qps(self):
        rng = np.random.default_rng(42)
        solver = QpSolver()
        worst = 0.0
        for _ in range(500):
            P, c, G, h, A, b = random_qp(rng)
            qp = QpProblem(P, c, G, h, A, b)
            r = solver.solve(qp)
            assert r.status is SolverStatus.OPTIMAL
            _, f_ref = active_set_solve(P, c, G, h, A, b)
            rel = abs(r.objective - f_ref) / max(1.0, abs(f_ref))
            worst = max(worst, rel)
            assert max(kkt_residuals(qp, r)) <= 1e-7
            assert np.all(r.lam >= 0)
        assert worst <= 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_property_kkt(self, seed):
        rng = np.random.default_rng(seed)
        P, c, G, h, A, b = random_qp(rng, n_max=15, m_max=8)
        qp = QpProblem(P, c, G, h, A, b)
        r = solve(qp)
        assert r.optimal
        assert r.residuals.dual <= 1e-7 and r.residuals.eq <= 1e-7 and r.residuals.ineq <= 1e-7


class TestKkt:
    def test_pattern_reuse(self):
        rng = np.random.default_rng(1)
        P, c, G, h, A, b = random_qp(rng, n_max=10)
        solver = QpSolver()
        f1 = solver.factor_kkt(QpProblem(P, c, G, h, A, b))
        f2 = solver.factor_kkt(QpProblem(2 * P, c, G, h, A, b), w=np.full(h.size, 3.0))
        assert f1.pattern_hash == f2.pattern_hash
        assert solver.symbolic_analyses == 1

    def test_duplicated_equality_row(self):
        P = sp.eye(3)
        A = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
        qp = QpProblem(P, np.zeros(3), A_eq=A, b_eq=[1.0, 1.0])
        r = solve(qp)
        assert r.optimal
        assert np.allclose(r.z, [0.5, 0.5, 0.0], atol=1e-7)

    def test_refined_solve_residual(self):
        rng = np.random.default_rng(2)
        solver = QpSolver()
        for _ in range(20):
            P, c, G, h, A, b = random_qp(rng, n_max=30)
            qp = QpProblem(P, c, G, h, A, b)
            fact = solver.factor_kkt(qp, w=rng.uniform(1e-3, 10, size=h.size))
            rhs = rng.normal(size=qp.n + qp.m_eq + qp.m_ineq)
            x = fact.solve(rhs)
            assert fact.residual(x, rhs) <= 1e-10

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        qp = QpProblem(*random_qp(rng))
        r1, r2 = QpSolver().solve(qp), QpSolver().solve(qp)
        assert np.array_equal(r1.z, r2.z) and r1.iterations == r2.iterations


class TestStatuses:
    def test_infeasible(self):
        G = np.array([[1.0, 0.0], [-1.0, 0.0]])
        qp = QpProblem(sp.eye(2), np.zeros(2), G, [-1.0, -1.0])  # z1 <= -1 and z1 >= 1
        r = solve(qp)
        assert r.status is SolverStatus.INFEASIBLE

    def test_infeasible_equalities_and_bounds(self):
        qp = QpProblem(sp.eye(2), np.zeros(2), [[1.0, 0.0], [0.0, 1.0]], [0.2, 0.2], [[1.0, 1.0]], [1.0])
        assert solve(qp).status is SolverStatus.INFEASIBLE

    def test_max_iters(self):
        rng = np.random.default_rng(4)
        qp = QpProblem(*random_qp(rng, n_max=20))
        r = solve(qp, SolverSettings(max_iters=1))
        assert r.status is SolverStatus.MAX_ITERS

    def test_settings_validation(self):
        with pytest.raises(ValueError):
            SolverSettings(abs_tol=0.0)


def test_dump_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    qp = QpProblem(*random_qp(rng, n_max=8))
    path = tmp_path / "qp.txt"
    dump_problem(qp, path)
    back = load_problem(path)
    assert np.array_equal(back.P.toarray(), qp.P.toarray())
    assert np.array_equal(back.A_ineq.toarray(), qp.A_ineq.toarray())
    assert np.array_equal(back.b_eq, qp.b_eq) and np.array_equal(back.c, qp.c)
    assert np.allclose(solve(back).z, solve(qp).z)
