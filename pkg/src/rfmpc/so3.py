"""Rotation group utilities: hat/vee, exponential/logarithm, error functions.

All vectorization in this package is column-major (Fortran order), so that
``vec(A @ X @ B) == kron(B.T, A) @ vec(X)``.
"""

from __future__ import annotations

import numpy as np


class NotSkewSymmetric(ValueError):
    pass


class InvalidRotation(ValueError):
    pass


class DegenerateMatrix(ValueError):
    pass


_SMALL_ANGLE = 1e-8
_ROT_TOL = 1e-9


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if np.max(np.abs(M + M.T)) > tol:
        raise NotSkewSymmetric(f"asymmetry {np.max(np.abs(M + M.T)):.3e} exceeds {tol}")
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def vec(M: np.ndarray) -> np.ndarray:
    return np.asarray(M).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int = 3) -> np.ndarray:
    return np.asarray(v).reshape(rows, -1, order="F")


def _build_vec_hat_basis() -> np.ndarray:
    N = np.zeros((9, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = 1.0
        N[:, j] = vec(hat(e))
    return N


#: Constant 9x3 matrix with ``vec(hat(v)) == VEC_HAT @ v``.
VEC_HAT = _build_vec_hat_basis()
#: Left pseudo-inverse of ``VEC_HAT`` (``VEC_HAT.T @ VEC_HAT == 2 I``).
VEC_HAT_PINV = 0.5 * VEC_HAT.T


def is_rotation(R: np.ndarray, tol: float = _ROT_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (
        np.linalg.norm(R.T @ R - np.eye(3)) <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def orthogonality_error(R: np.ndarray) -> float:
    return float(np.linalg.norm(R.T @ R - np.eye(3)))


def exp_so3(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula; second-order series below 1e-8 rad."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    K = hat(v)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Principal rotation vector of ``R`` (norm in ``[0, pi]``).

    ``tol`` bounds the accepted orthogonality drift; callers that feed in
    first-order (non-orthogonal) predictions should project first.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotation("rotation must be a finite 3x3 matrix")
    if orthogonality_error(R) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise InvalidRotation(
            f"not a rotation: orthogonality error {orthogonality_error(R):.3e}, "
            f"det {np.linalg.det(R):.6f}"
        )
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if cos_theta > 1.0 - 1e-12:
        # theta ~ 0: R ~ I + hat(v)
        return 0.5 * w
    theta = np.arccos(cos_theta)
    if cos_theta > -0.99:
        return (0.5 * theta / np.sin(theta)) * w
    # Near pi: a a^T = (sym(R) - cos I) / (1 - cos); take its largest diagonal.
    B = (0.5 * (R + R.T) - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
    axis /= np.linalg.norm(axis)
    # Recover the angle with full precision from the antisymmetric part.
    s = 0.5 * axis @ w  # = sin(theta)
    theta = np.arctan2(s, cos_theta)
    if theta < 0.0:
        axis, theta = -axis, -theta
    return theta * axis


def rotation_error(R_d: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Geodesic attitude error ``log(R_d^T R)^vee``."""
    return log_so3(R_d.T @ R)


def angular_velocity_error(
    R_d: np.ndarray, omega_d: np.ndarray, R: np.ndarray, omega: np.ndarray
) -> np.ndarray:
    """Body-rate error with the desired rate transported into the body frame."""
    return np.asarray(omega) - R.T @ R_d @ np.asarray(omega_d)


def project_to_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation in Frobenius norm (orthogonal polar factor)."""
    M = np.asarray(M, dtype=float)
    U, S, Vt = np.linalg.svd(M)
    if S[-1] < 1e-10:
        raise DegenerateMatrix(f"smallest singular value {S[-1]:.3e}")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
