"""Variation-based linearization of the rigid-body dynamics on SO(3).

The MPC state is ``x = [p; pdot; xi; omega]`` where ``xi`` is the tangent
variation at an operating attitude, ``R ~ R_op exp(hat(xi))``. The affine
model ``x+ = A x + B du + d`` is built in closed form from the operating
point and discretized with forward Euler.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import N_LEGS, RobotParams, SrbState
from .so3 import VEC_HAT, VEC_HAT_PINV, exp_so3, hat, log_so3

SCHEME_OPERATING_POINT = "op"
SCHEME_REFERENCE = "ref"
SCHEMES = (SCHEME_OPERATING_POINT, SCHEME_REFERENCE)


class MissingReference(ValueError):
    pass


@dataclass
class OperatingPoint:
    state: SrbState
    u_op: np.ndarray
    feet: np.ndarray
    contacts: np.ndarray = field(default_factory=lambda: np.ones(N_LEGS, dtype=bool))

    def __post_init__(self):
        self.u_op = np.asarray(self.u_op, dtype=float).reshape(3 * N_LEGS)
        self.feet = np.asarray(self.feet, dtype=float).reshape(N_LEGS, 3)
        self.contacts = np.asarray(self.contacts, dtype=bool).reshape(N_LEGS)
        swing = ~np.repeat(self.contacts, 3)
        if np.any(self.u_op[swing] != 0.0):
            raise ValueError("swing-leg entries of u_op must be zero")

    @property
    def R(self) -> np.ndarray:
        return self.state.R

    @property
    def omega(self) -> np.ndarray:
        return self.state.omega

    @property
    def p(self) -> np.ndarray:
        return self.state.p

    def lever_arms(self) -> np.ndarray:
        """Foot positions relative to the operating CoM, shape (4, 3)."""
        return self.feet - self.state.p

    def torque(self) -> np.ndarray:
        """Net foot torque about the operating CoM (inertial frame)."""
        u = self.u_op.reshape(N_LEGS, 3)
        return np.cross(self.lever_arms(), u).sum(axis=0)


@dataclass
class MpcState:
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(12)
        if not np.all(np.isfinite(self.x)):
            raise ValueError("MPC state must be finite")

    p = property(lambda self: self.x[0:3])
    pdot = property(lambda self: self.x[3:6])
    xi = property(lambda self: self.x[6:9])
    omega = property(lambda self: self.x[9:12])


@dataclass
class AffineDynamics:
    A: np.ndarray
    B: np.ndarray
    d: np.ndarray
    dt: float

    def step(self, x: np.ndarray, du: np.ndarray) -> np.ndarray:
        return self.A @ x + self.B @ du + self.d


@dataclass
class WdotCoefficients:
    """Coefficients of ``I wdot = c + C_dp p + C_xi xi + C_w omega + C_du du``."""

    c: np.ndarray
    dp: np.ndarray
    xi: np.ndarray
    omega: np.ndarray
    du: np.ndarray
    # vec(Rdot) = xi_c + xi_xi xi + xi_omega omega
    xi_c: np.ndarray
    xi_xi: np.ndarray
    xi_omega: np.ndarray


def _kron_eye(M: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(3), M)


def xi_coefficients(R_op: np.ndarray, omega_op: np.ndarray):
    """Constants of the vectorized ``vec(Rdot)`` expansion about ``R_op``."""
    w_hat = hat(omega_op)
    IR = _kron_eye(R_op)
    c = (R_op @ w_hat).reshape(-1, order="F") - IR @ VEC_HAT @ omega_op
    C_xi = _kron_eye(R_op @ w_hat) @ VEC_HAT - IR @ VEC_HAT @ w_hat
    C_w = IR @ VEC_HAT
    return c, C_xi, C_w


def wdot_coefficients(op: OperatingPoint, params: RobotParams) -> WdotCoefficients:
    R, w, p = op.R, op.omega, op.p
    I = params.inertia
    u = op.u_op.reshape(N_LEGS, 3)
    sum_u_hat = hat(u.sum(axis=0))
    tau_b = R.T @ op.torque()
    gyro = hat(I @ w) - hat(w) @ I  # Jacobian of -w x Iw with respect to w
    c = -hat(w) @ I @ w + tau_b - gyro @ w - R.T @ sum_u_hat @ p
    C_dp = R.T @ sum_u_hat
    # d(R^T tau)/dxi for R = R_op exp(xi): hat(R_op^T tau).
    C_xi = hat(tau_b)
    r = op.lever_arms()
    C_du = R.T @ np.hstack([hat(r[i]) for i in range(N_LEGS)])
    xc, xx, xw = xi_coefficients(R, w)
    return WdotCoefficients(c, C_dp, C_xi, gyro, C_du, xc, xx, xw)


def build_xi_dynamics(op: OperatingPoint, dt: float):
    """Rows of ``A`` (3x12) and ``d`` (3,) for the ``xi`` update."""
    c, C_xi, C_w = xi_coefficients(op.R, op.omega)
    M = dt * VEC_HAT_PINV @ _kron_eye(op.R.T)
    A = np.zeros((3, 12))
    A[:, 6:9] = np.eye(3) + M @ C_xi
    A[:, 9:12] = M @ C_w
    return A, M @ c


def build_omega_dynamics(op: OperatingPoint, params: RobotParams, dt: float):
    """Rows of ``A``, ``B`` (3x12 each) and ``d`` for the ``omega`` update."""
    k = wdot_coefficients(op, params)
    Iinv = params.inertia_inv
    A = np.zeros((3, 12))
    A[:, 0:3] = dt * Iinv @ k.dp
    A[:, 6:9] = dt * Iinv @ k.xi
    A[:, 9:12] = np.eye(3) + dt * Iinv @ k.omega
    B = dt * Iinv @ k.du
    return A, B, dt * Iinv @ k.c


def _single_triple(op: OperatingPoint, params: RobotParams, dt: float) -> AffineDynamics:
    A = np.zeros((12, 12))
    B = np.zeros((12, 12))
    d = np.zeros(12)
    I3 = np.eye(3)
    A[0:3, 0:3] = I3
    A[0:3, 3:6] = dt * I3
    A[3:6, 3:6] = I3
    B[3:6] = np.tile(dt / params.mass * I3, (1, N_LEGS))
    d[3:6] = dt * (op.u_op.reshape(N_LEGS, 3).sum(axis=0) / params.mass + params.gravity_vector)
    A[6:9], d[6:9] = build_xi_dynamics(op, dt)
    A[9:12], B[9:12], d[9:12] = build_omega_dynamics(op, params, dt)
    return AffineDynamics(A, B, d, dt)


def build_affine_dynamics(
    op: OperatingPoint,
    params: RobotParams,
    dt: float,
    scheme: str = SCHEME_OPERATING_POINT,
    ref: Sequence[OperatingPoint] | None = None,
    horizon: int | None = None,
) -> list[AffineDynamics]:
    """Affine prediction model(s) for one MPC tick.

    ``scheme="op"`` linearizes once about the measured state and previous
    control and returns a single time-invariant triple. ``scheme="ref"``
    linearizes about each reference point ``ref[k]`` (time-varying). In the
    latter case ``xi_k`` is measured from ``ref[k].R``; the change of base
    between consecutive reference attitudes enters ``d_k``. Pass ``horizon + 1``
    reference points so the last step also gets its change of base.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if scheme == SCHEME_OPERATING_POINT:
        return [_single_triple(op, params, dt)]
    if scheme != SCHEME_REFERENCE:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not ref:
        raise MissingReference("reference-trajectory linearization needs reference points")
    horizon = len(ref) if horizon is None else horizon
    if len(ref) < horizon:
        raise MissingReference(f"need {horizon} reference points, got {len(ref)}")
    out = []
    for k in range(horizon):
        ref_k = ref[k]
        dyn = _single_triple(ref_k, params, dt)
        if k + 1 < len(ref):
            dyn.d[6:9] -= log_so3(ref_k.R.T @ ref[k + 1].R)
        out.append(dyn)
    return out


def lift_state(state: SrbState, op: OperatingPoint | np.ndarray) -> MpcState:
    """Express ``state`` in MPC coordinates about an operating attitude."""
    R_op = op.R if isinstance(op, OperatingPoint) else np.asarray(op)
    xi = log_so3(R_op.T @ state.R)
    return MpcState(np.concatenate([state.p, state.pdot, xi, state.omega]))


def retract_state(x: MpcState | np.ndarray, op: OperatingPoint | np.ndarray) -> SrbState:
    """Inverse of :func:`lift_state` using the exact exponential."""
    x = x.x if isinstance(x, MpcState) else np.asarray(x, dtype=float)
    R_op = op.R if isinstance(op, OperatingPoint) else np.asarray(op)
    return SrbState(x[0:3], x[3:6], R_op @ exp_so3(x[6:9]), x[9:12])
