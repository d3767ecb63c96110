import numpy as np
import pytest

from rfmpc.dynamics import (
    FootForces,
    RobotParams,
    SrbState,
    Wrench,
    batch_exp_so3,
    continuous_dynamics,
    integrate_step,
    integrate_step_batch,
    net_wrench,
    point_force_wrench,
    simulate,
)
from rfmpc.so3 import exp_so3, orthogonality_error


@pytest.fixture
def params():
    return RobotParams()


def feet_under_hips(params, state):
    feet = state.p + params.hip_offsets
    feet[:, 2] = 0.0
    return feet


def no_forces():
    return FootForces(np.zeros((4, 3)), np.zeros((4, 3)))


def test_table_values(params):
    assert params.mass == 5.5
    assert np.allclose(np.diag(params.inertia), [0.026, 0.112, 0.075])
    assert params.weight / 4 == pytest.approx(13.48875)


def test_invalid_params():
    with pytest.raises(ValueError):
        RobotParams(mass=-1)
    with pytest.raises(ValueError):
        RobotParams(inertia=np.diag([1.0, -1.0, 1.0]))


class TestNetWrench:
    def test_zero(self, params):
        s = SrbState.standing(params)
        w = net_wrench(s, FootForces(np.zeros((4, 3)), feet_under_hips(params, s)))
        assert np.array_equal(w.F, np.zeros(3)) and np.array_equal(w.tau, np.zeros(3))

    def test_single_foot(self):
        s = SrbState(np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3))
        feet = np.zeros((4, 3))
        feet[0] = [0.15, 0.1, -0.25]
        u = np.zeros((4, 3))
        u[0] = [0, 0, 13.49]
        w = net_wrench(s, FootForces(u, feet))
        assert np.allclose(w.F, [0, 0, 13.49])
        assert np.allclose(w.tau, [1.349, -2.0235, 0.0])

    def test_symmetric(self, params):
        s = SrbState.standing(params)
        u = np.tile([0.0, 0.0, params.weight / 4], (4, 1))
        w = net_wrench(s, FootForces(u, feet_under_hips(params, s)))
        assert np.allclose(w.tau, 0.0, atol=1e-14)

    def test_point_force(self, params):
        s = SrbState.standing(params, exp_so3([0, 0, np.pi / 2]))
        w = point_force_wrench(s, [0, 27.0, 0], [0.15, -0.1, 0])
        assert np.allclose(w.tau, np.cross(s.R @ [0.15, -0.1, 0], [0, 27.0, 0]))


class TestContinuousDynamics:
    def test_free_fall(self, params):
        s = SrbState.standing(params)
        d = continuous_dynamics(s, no_forces(), params)
        assert np.allclose(d.pddot, [0, 0, -9.81])
        assert np.allclose(d.Rdot, 0) and np.allclose(d.omega_dot, 0)

    def test_hover(self, params):
        s = SrbState.standing(params)
        u = np.tile([0.0, 0.0, params.weight / 4], (4, 1))
        d = continuous_dynamics(s, FootForces(u, feet_under_hips(params, s)), params)
        assert np.allclose(d.pddot, 0, atol=1e-14)
        assert np.allclose(d.omega_dot, 0, atol=1e-14)

    def test_torque_free_tumbling_conserves_momentum(self, params):
        w0 = np.array([0.01, 3.0, 0.01])  # near the intermediate axis: unstable
        s = SrbState(np.zeros(3), np.zeros(3), np.eye(3), w0)
        L0 = s.R @ params.inertia @ s.omega
        E0 = 0.5 * w0 @ params.inertia @ w0
        for _ in range(10_000):
            s = integrate_step(s, no_forces(), params, 1e-4)
        L1 = s.R @ params.inertia @ s.omega
        assert abs(np.linalg.norm(L1) - np.linalg.norm(L0)) < 1e-6
        assert np.linalg.norm(L1 - L0) < 1e-6
        assert abs(0.5 * s.omega @ params.inertia @ s.omega - E0) < 1e-6


class TestIntegrateStep:
    def test_constant_spin(self, params):
        s = SrbState(np.zeros(3), np.zeros(3), exp_so3([0.3, 0.1, 0]), [0, 0, 1.0])
        params = RobotParams(inertia=np.diag([0.05, 0.05, 0.075]))
        s1 = integrate_step(s, no_forces(), params, 0.001)
        assert np.allclose(s1.R, s.R @ exp_so3([0, 0, 0.001]), atol=1e-9)

    def test_free_fall(self, params):
        s = SrbState.standing(params)
        s1 = simulate(s, no_forces(), params, 0.1, 0.001)
        assert s1.p[2] - s.p[2] == pytest.approx(-0.04905, abs=1e-6)

    def test_step_bounds(self, params):
        with pytest.raises(ValueError):
            integrate_step(SrbState.standing(params), no_forces(), params, 0.02)

    def test_fourth_order_convergence(self, params):
        s0 = SrbState([0, 0, 0.25], [0.2, 0, 0.5], exp_so3([0.1, -0.2, 0.3]), [1.0, 4.0, -2.0])
        u = np.array([[1.0, 0.5, 15], [0.0, -1.0, 14], [-2.0, 0.0, 12], [0.5, 0.5, 16]])
        feet = np.array([[0.2, 0.1, 0], [0.15, -0.1, 0], [-0.1, 0.12, 0], [-0.15, -0.1, 0]])
        forces = FootForces(u, feet)

        def endpoint(dt):
            s = simulate(s0, forces, params, 1.0, dt)
            return np.concatenate([s.p, s.pdot, s.R.ravel(), s.omega])

        x1, x2, x3 = endpoint(0.01), endpoint(0.005), endpoint(0.0025)
        ratio = np.linalg.norm(x1 - x2) / np.linalg.norm(x2 - x3)
        assert 13.0 < ratio < 19.0

    def test_external_wrench(self, params):
        s = SrbState.standing(params)
        ext = Wrench(np.array([0.0, 5.5, 0.0]), np.zeros(3))
        s1 = simulate(s, no_forces(), params, 0.1, 0.001, ext)
        assert s1.pdot[1] == pytest.approx(0.1, rel=1e-9)

    def test_linear_momentum_balance(self, params):
        s = SrbState([0, 0, 0.3], [0.1, 0, 0], exp_so3([0, 0.4, 0]), [0.5, 1.0, 0.0])
        u = np.array([[0, 0, 10.0], [1, 0, 12], [0, 0, 0], [0, -2, 20]])
        forces = FootForces(u, np.zeros((4, 3)))
        s1 = simulate(s, forces, params, 0.5, 0.001)
        expected = params.mass * s.pdot + 0.5 * (u.sum(0) + params.mass * params.gravity_vector)
        assert np.allclose(params.mass * s1.pdot, expected, atol=1e-9)

    @pytest.mark.slow
    def test_orthogonality_over_million_steps(self, params):
        s = SrbState(np.zeros(3), np.zeros(3), np.eye(3), [2.0, 5.0, -3.0])
        f = no_forces()
        worst = 0.0
        for i in range(1_000_000):
            s = integrate_step(s, f, params, 0.01)
            if i % 1000 == 0:
                worst = max(worst, orthogonality_error(s.R))
        assert max(worst, orthogonality_error(s.R)) < 1e-6
        assert abs(np.linalg.det(s.R) - 1) < 1e-6


def test_batch_matches_scalar(params):
    rng = np.random.default_rng(0)
    B = 5
    p = rng.normal(size=(B, 3)) * 0.1
    v = rng.normal(size=(B, 3))
    R = batch_exp_so3(rng.normal(size=(B, 3)))
    w = rng.normal(size=(B, 3)) * 2
    u = rng.normal(size=(B, 4, 3)) * 10
    feet = rng.normal(size=(B, 4, 3)) * 0.2
    out = integrate_step_batch(p, v, R, w, u, feet, params, 0.002)
    for b in range(B):
        ref = integrate_step(SrbState(p[b], v[b], R[b], w[b]), FootForces(u[b], feet[b]), params, 0.002)
        assert np.allclose(out[0][b], ref.p, atol=1e-12)
        assert np.allclose(out[1][b], ref.pdot, atol=1e-12)
        assert np.allclose(out[2][b], ref.R, atol=1e-12)
        assert np.allclose(out[3][b], ref.omega, atol=1e-12)


def test_rollout_batch_matches_stepping(params):
    from rfmpc._kernels import rollout_batch

    rng = np.random.default_rng(4)
    B, steps = 3, np.array([4, 0, 6], dtype=np.int64)
    U = rng.normal(size=(B, 3, 4, 3)) * 15
    feet = rng.normal(size=(4, 3)) * 0.2
    s0 = SrbState(np.array([0.0, 0.1, 0.3]), rng.normal(size=3), exp_so3(rng.normal(size=3)), rng.normal(size=3))
    P, V, R, W = rollout_batch(
        s0.p, s0.pdot, s0.R, s0.omega, U, feet, steps,
        params.mass, params.gravity, params.inertia, params.inertia_inv, 0.003,
    )
    assert P.shape == (B, 11, 3)
    for b in range(B):
        s, k = s0, 0
        for j, n in enumerate(steps):
            for _ in range(n):
                s = integrate_step(s, FootForces(U[b, j], feet), params, 0.003)
                k += 1
                assert np.allclose(P[b, k], s.p, atol=1e-13)
                assert np.allclose(V[b, k], s.pdot, atol=1e-13)
                assert np.allclose(R[b, k], s.R, atol=1e-13)
                assert np.allclose(W[b, k], s.omega, atol=1e-13)
