import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfmpc.so3 import (
    VEC_HAT,
    VEC_HAT_PINV,
    DegenerateMatrix,
    InvalidRotation,
    NotSkewSymmetric,
    angular_velocity_error,
    exp_so3,
    hat,
    is_rotation,
    log_so3,
    project_to_so3,
    rotation_error,
    vec,
    vee,
)

vec3 = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3).map(np.array)


def random_rotation(rng):
    v = rng.normal(size=3)
    v *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(v)
    return exp_so3(v)


def quat_from_rotation(R):
    # Shepperd's method; independent of log_so3.
    tr = np.trace(R)
    q = np.empty(4)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q[:] = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return q / np.linalg.norm(q)


def rodrigues_axis_angle(axis, angle):
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    c, s = np.cos(angle), np.sin(angle)
    return c * np.eye(3) + s * hat(a) + (1 - c) * np.outer(a, a)


class TestHatVee:
    def test_zero(self):
        assert np.array_equal(hat([0.0, 0.0, 0.0]), np.zeros((3, 3)))
        assert np.array_equal(vee(np.zeros((3, 3))), np.zeros(3))

    def test_cross_product(self):
        assert np.allclose(hat([1.0, 0.0, 0.0]) @ [0.0, 1.0, 0.0], [0.0, 0.0, 1.0])

    def test_round_trip(self):
        v = np.array([0.3, -1.2, 2.5])
        assert np.array_equal(vee(hat(v)), v)

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            v = rng.normal(size=3)
            assert np.array_equal(vee(hat(v)), v)

    def test_symmetric_rejected(self):
        with pytest.raises(NotSkewSymmetric):
            vee(np.array([[1.0, 2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 3.0]]))

    @given(vec3, vec3)
    def test_hat_is_cross(self, a, b):
        assert np.allclose(hat(a) @ b, np.cross(a, b))
        assert np.array_equal(hat(a), -hat(a).T)


class TestVecHatBasis:
    def test_identities(self):
        assert np.array_equal(VEC_HAT.T @ VEC_HAT, 2 * np.eye(3))
        assert np.array_equal(VEC_HAT_PINV @ VEC_HAT, np.eye(3))
        assert np.array_equal(VEC_HAT_PINV, 0.5 * VEC_HAT.T)

    def test_basis_vectors_exact(self):
        for e in np.eye(3):
            assert np.array_equal(vec(hat(e)), VEC_HAT @ e)

    @given(vec3)
    def test_vec_hat(self, v):
        assert np.allclose(vec(hat(v)), VEC_HAT @ v, atol=1e-14)

    def test_column_major_kronecker(self):
        rng = np.random.default_rng(1)
        A, X, B = rng.normal(size=(3, 3, 3))
        assert np.allclose(vec(A @ X @ B), np.kron(B.T, A) @ vec(X))


class TestExpLog:
    def test_identity(self):
        assert np.array_equal(exp_so3(np.zeros(3)), np.eye(3))
        assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))

    def test_quarter_turn(self):
        R = exp_so3([0.0, 0.0, np.pi / 2])
        assert np.allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)

    def test_small(self):
        assert np.allclose(log_so3(exp_so3([0.1, 0.0, 0.0])), [0.1, 0.0, 0.0], atol=1e-15)

    def test_round_trip_random(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            v = rng.normal(size=3)
            v *= rng.uniform(0, 3.0) / np.linalg.norm(v)
            assert np.linalg.norm(log_so3(exp_so3(v)) - v) <= 1e-7

    def test_round_trip_up_to_pi(self):
        rng = np.random.default_rng(3)
        for _ in range(500):
            v = rng.normal(size=3)
            v *= rng.uniform(np.pi - 0.2, np.pi - 1e-3) / np.linalg.norm(v)
            assert np.linalg.norm(log_so3(exp_so3(v)) - v) <= 1e-7

    def test_tiny_angles(self):
        for mag in [1e-14, 1e-10, 1e-9, 3e-8, 1e-6]:
            v = mag * np.array([0.6, -0.8, 0.0])
            R = exp_so3(v)
            assert is_rotation(R, 1e-12)
            assert np.allclose(log_so3(R), v, rtol=1e-6, atol=1e-20)

    def test_angle_pi_branch(self):
        R = np.diag([1.0, -1.0, -1.0])
        w = log_so3(R)
        assert np.isclose(np.linalg.norm(w), np.pi)
        assert np.allclose(np.abs(w), [np.pi, 0.0, 0.0])
        # oracle: Rodrigues about the extracted axis reproduces R
        assert np.allclose(rodrigues_axis_angle(w, np.linalg.norm(w)), R, atol=1e-12)

    def test_near_pi_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = np.pi - 10 ** rng.uniform(-9, -2)
            R = rodrigues_axis_angle(axis, angle)
            w = log_so3(R)
            assert np.allclose(exp_so3(w), R, atol=1e-7)
            assert np.linalg.norm(w) <= np.pi

    def test_exp_orthogonality(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            R = exp_so3(rng.normal(size=3) * 3)
            assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12
            assert abs(np.linalg.det(R) - 1.0) < 1e-12

    def test_invalid_rotation(self):
        with pytest.raises(InvalidRotation):
            log_so3(2.0 * np.eye(3))
        with pytest.raises(InvalidRotation):
            log_so3(np.diag([1.0, 1.0, -1.0]))


class TestErrors:
    def test_rotation_error_zero(self):
        R = exp_so3([0.2, -0.4, 1.1])
        assert np.allclose(rotation_error(R, R), 0.0, atol=1e-15)

    def test_rotation_error_simple(self):
        assert np.allclose(rotation_error(np.eye(3), exp_so3([0.0, 0.2, 0.0])), [0.0, 0.2, 0.0])

    def test_rotation_error_quaternion_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            Rd, R = random_rotation(rng), random_rotation(rng)
            angle = 2.0 * np.arccos(min(1.0, abs(quat_from_rotation(Rd) @ quat_from_rotation(R))))
            assert np.isclose(np.linalg.norm(rotation_error(Rd, R)), angle, atol=1e-7)

    def test_angular_velocity_error(self):
        assert np.allclose(angular_velocity_error(np.eye(3), [0, 0, 1], np.eye(3), [0, 0, 1]), 0)
        rng = np.random.default_rng(7)
        R, w = random_rotation(rng), rng.normal(size=3)
        assert np.allclose(angular_velocity_error(np.eye(3), np.zeros(3), R, w), w)
        for _ in range(20):
            Rd, R = random_rotation(rng), random_rotation(rng)
            wd, w = rng.normal(size=(2, 3))
            expected = w - np.linalg.solve(R, Rd @ wd)
            assert np.allclose(angular_velocity_error(Rd, wd, R, w), expected)


class TestProjection:
    def test_fixed_point_and_scale(self):
        R = exp_so3([0.3, 0.2, -0.9])
        assert np.allclose(project_to_so3(R), R, atol=1e-14)
        assert np.allclose(project_to_so3(1.5 * R), R, atol=1e-14)

    def test_sampling_optimality(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            M = rng.normal(size=(3, 3))
            if np.linalg.det(M) <= 0:
                M[:, 0] *= -1
            P = project_to_so3(M)
            assert is_rotation(P, 1e-12)
            best = np.linalg.norm(P - M)
            Qs = [random_rotation(rng) for _ in range(1000)]
            assert all(best <= np.linalg.norm(Q - M) + 1e-12 for Q in Qs)

    def test_degenerate(self):
        with pytest.raises(DegenerateMatrix):
            project_to_so3(np.diag([1.0, 1.0, 0.0]))

    @settings(max_examples=50)
    @given(vec3)
    def test_projection_of_first_order_rotation(self, v):
        M = np.eye(3) + hat(0.1 * v)
        assert is_rotation(project_to_so3(M), 1e-12)
