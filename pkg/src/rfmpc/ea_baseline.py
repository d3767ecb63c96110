"""Euler-angle convex MPC baseline and the Euler singularity metric.

Angles are ``Theta = [phi, theta, psi]`` (roll, pitch, yaw) with
``R = Rz(psi) Ry(theta) Rx(phi)``. The baseline follows the usual convex-MPC
recipe: state ``[Theta; p; omega; pdot]`` with ``omega`` in the world frame,
attitude kinematics ``Theta_dot = T(Theta)^-1 omega`` linearized to first
order about the current angles and angular velocity, world inertia frozen at the current attitude and gyroscopic terms
dropped. Force constraints, cost layout and the QP backend are shared with the
rotation-matrix controller.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm

from .dynamics import N_LEGS, RobotParams, SrbState
from .linearize import AffineDynamics
from .mpc import (
    NU,
    NX,
    NZ,
    GainSet,
    MpcSolution,
    QpInfeasible,
    QpMaxIterations,
    ReferenceWindow,
    build_equality_constraints,
    build_force_constraints,
    even_support,
    project_forces,
    u_offset,
    x_offset,
)
from .qp import QpProblem, QpSolver, SolverSettings, SolverStatus
from .so3 import hat, rot_x, rot_y, rot_z

log = logging.getLogger(__name__)

SINGULAR_THRESHOLD = 1e-6


class RateMapNearSingular(RuntimeError):
    """The Euler rate map cannot be inverted at the current attitude."""


def euler_to_rotation(Theta) -> np.ndarray:
    phi, theta, psi = np.asarray(Theta, float).reshape(3)
    return rot_z(psi) @ rot_y(theta) @ rot_x(phi)


def rotation_to_euler(R: np.ndarray) -> np.ndarray:
    """Principal angles with pitch in [-pi/2, pi/2]; at gimbal lock roll is set to zero."""
    R = np.asarray(R, float)
    s = float(np.clip(-R[2, 0], -1.0, 1.0))
    theta = float(np.arcsin(s))
    if abs(abs(s) - 1.0) < 1e-12:
        return np.array([0.0, theta, np.arctan2(-R[0, 1], R[1, 1])])
    return np.array([np.arctan2(R[2, 1], R[2, 2]), theta, np.arctan2(R[1, 0], R[0, 0])])


def euler_rate_map(Theta) -> np.ndarray:
    """``T`` with ``omega_world = T(Theta) Theta_dot``."""
    _, th, psi = np.asarray(Theta, float).reshape(3)
    ct, st, cp, sp_ = np.cos(th), np.sin(th), np.cos(psi), np.sin(psi)
    return np.array([[ct * cp, -sp_, 0.0], [ct * sp_, cp, 0.0], [-st, 0.0, 1.0]])


def euler_rate_map_inv(Theta) -> np.ndarray:
    """Closed-form inverse of :func:`euler_rate_map`; undefined at ``cos(theta) = 0``."""
    _, th, psi = np.asarray(Theta, float).reshape(3)
    ct, tt, cp, sp_ = np.cos(th), np.tan(th), np.cos(psi), np.sin(psi)
    return np.array([[cp / ct, sp_ / ct, 0.0], [-sp_, cp, 0.0], [cp * tt, sp_ * tt, 1.0]])


def euler_rate_jacobian(Theta, omega) -> np.ndarray:
    """``d(T(Theta)^-1 omega)/d Theta`` at fixed world ``omega``."""
    _, th, psi = np.asarray(Theta, float).reshape(3)
    w1, w2, _ = np.asarray(omega, float).reshape(3)
    ct, st, cp, sp_ = np.cos(th), np.sin(th), np.cos(psi), np.sin(psi)
    a = cp * w1 + sp_ * w2
    b = -sp_ * w1 + cp * w2
    return np.array([
        [0.0, a * st / ct**2, b / ct],
        [0.0, 0.0, -a],
        [0.0, a / ct**2, b * st / ct],
    ])


def singularity_metric(Theta) -> float:
    """Inverse 2-norm condition number of the rate map (1 far from, 0 at gimbal lock)."""
    sv = np.linalg.svd(euler_rate_map(Theta), compute_uv=False)
    return 0.0 if sv[0] == 0.0 else float(sv[-1] / sv[0])


def singularity_metric_R(R: np.ndarray) -> float:
    return singularity_metric(rotation_to_euler(R))


def _wrap_near(a: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return ref + (a - ref + np.pi) % (2 * np.pi) - np.pi


def euler_reference(ref: ReferenceWindow, Theta0: np.ndarray) -> np.ndarray:
    """Reference angles per horizon sample with roll and yaw unwrapped along the window."""
    out = np.zeros((ref.horizon + 1, 3))
    prev = np.asarray(Theta0, float)
    for k, R in enumerate(ref.R):
        Th = rotation_to_euler(R)
        Th[0] = _wrap_near(Th[0], prev[0])
        Th[2] = _wrap_near(Th[2], prev[2])
        out[k] = Th
        prev = Th
    return out


def ea_state(state: SrbState) -> np.ndarray:
    """``[Theta; p; omega_world; pdot]``."""
    return np.concatenate([rotation_to_euler(state.R), state.p, state.R @ state.omega, state.pdot])


def ea_dynamics(
    Theta0: np.ndarray,
    R0: np.ndarray,
    p_ref: np.ndarray,
    feet: np.ndarray,
    params: RobotParams,
    dt: float,
    omega0: np.ndarray | None = None,
) -> list[AffineDynamics]:
    """Zero-order-hold discretization of the convex-MPC model, one triple per step.

    With ``omega0`` (world frame) the attitude kinematics are linearized to
    first order about ``(Theta0, omega0)``:
    ``Theta_dot = T^-1 omega + J (Theta - Theta0)``. Without it ``T^-1`` is
    simply frozen. Raises :class:`RateMapNearSingular` when the rate map at
    ``Theta0`` is (numerically) singular.
    """
    kinv = singularity_metric(Theta0)
    if kinv < SINGULAR_THRESHOLD:
        raise RateMapNearSingular(f"Euler rate map near singular (kappa^-1 = {kinv:.2e})")
    Tinv = euler_rate_map_inv(Theta0)
    Iw_inv = R0 @ params.inertia_inv @ R0.T
    Ac = np.zeros((NX, NX))
    Ac[0:3, 6:9] = Tinv
    Ac[3:6, 9:12] = np.eye(3)
    dc = np.zeros(NX)
    dc[9:12] = params.gravity_vector
    if omega0 is not None:
        J = euler_rate_jacobian(Theta0, omega0)
        Ac[0:3, 0:3] = J
        dc[0:3] = -J @ np.asarray(Theta0, float)
    out = []
    for pk in p_ref:
        Bc = np.zeros((NX, NU))
        for i in range(N_LEGS):
            Bc[6:9, 3 * i : 3 * i + 3] = Iw_inv @ hat(feet[i] - pk)
            Bc[9:12, 3 * i : 3 * i + 3] = np.eye(3) / params.mass
        M = np.zeros((NX + NU + 1, NX + NU + 1))
        M[:NX, :NX] = Ac
        M[:NX, NX : NX + NU] = Bc
        M[:NX, -1] = dc
        E = expm(M * dt)
        out.append(AffineDynamics(E[:NX, :NX], E[:NX, NX : NX + NU], E[:NX, -1], dt))
    return out


def ea_cost(ref: ReferenceWindow, Theta_ref: np.ndarray, gains: GainSet):
    """Diagonal ``P`` and ``c`` on ``z = [u_0, x_1, ..., u_{N-1}, x_N]``."""
    N = ref.horizon
    n = NZ * N
    Pd = np.zeros(n)
    c = np.zeros(n)
    Ru = np.tile(gains.R_u, N_LEGS)
    for k in range(N):
        w = gains.gamma**k
        o = u_offset(k)
        Pd[o : o + NU] = 2 * w * Ru
        c[o : o + NU] = -2 * w * Ru * ref.u[k]
    for k in range(1, N + 1):
        Q = gains.terminal_weights() if k == N else gains.stage_weights()
        Qp, Qv, QR, Qw = Q[0:3], Q[3:6], Q[6:9], Q[9:12]
        wq = np.concatenate([QR, Qp, Qw, Qv])
        x_d = np.concatenate([Theta_ref[k], ref.p[k], ref.R[k] @ ref.omega[k], ref.pdot[k]])
        w = gains.gamma**k
        o = x_offset(k)
        Pd[o : o + NX] = 2 * w * wq
        c[o : o + NX] = -2 * w * wq * x_d
    return Pd, c


@dataclass
class EaMpcSolution(MpcSolution):
    def predicted_rotations(self) -> np.ndarray:
        return np.array([euler_to_rotation(x[0:3]) for x in self.predicted])


def ea_mpc_solve(
    state: SrbState,
    ref: ReferenceWindow,
    gains: GainSet,
    params: RobotParams,
    solver: QpSolver | None = None,
    inequalities: bool = True,
) -> EaMpcSolution:
    """One EA-MPC tick; raises :class:`RateMapNearSingular`, :class:`QpInfeasible`
    or :class:`QpMaxIterations`."""
    t0 = time.perf_counter()
    N = ref.horizon
    x0 = ea_state(state)
    Theta_ref = euler_reference(ref, x0[0:3])
    dyn = ea_dynamics(x0[0:3], state.R, ref.p[:N], ref.feet, params, gains.dt_pred, omega0=x0[6:9])
    A_dyn, b_dyn = build_equality_constraints(dyn, x0, N, allow_nonzero_xi=True)
    A_in, b_in, A_sw, b_sw = build_force_constraints(ref, np.zeros((N, NU)), params, inequalities)
    Pd, c = ea_cost(ref, Theta_ref, gains)
    qp = QpProblem(
        sp.diags(Pd, format="csr"), c, A_in, b_in, sp.vstack([A_dyn, A_sw], format="csr"),
        np.concatenate([b_dyn, b_sw]),
    )
    res = (solver or QpSolver()).solve(qp)
    if res.status is SolverStatus.INFEASIBLE:
        raise QpInfeasible(f"QP infeasible after {res.iterations} iterations")
    if res.status is SolverStatus.MAX_ITERS:
        raise QpMaxIterations(f"QP not solved in {res.iterations} iterations: {res.residuals}")
    Z = res.z.reshape(N, NZ)
    u, xs = Z[:, :NU], Z[:, NU:]
    R_pred = np.array([euler_to_rotation(x[0:3]) for x in xs])
    r = res.residuals
    return EaMpcSolution(
        u_cmd=u[0].copy(),
        predicted=xs.copy(),
        R_lin=R_pred,
        du=u.copy(),
        status=res.status,
        iterations=res.iterations,
        kkt_residual=max(r.eq, r.ineq, r.dual),
        solve_time=time.perf_counter() - t0,
    )


@dataclass
class EaMpcController:
    """Stateful wrapper with the same interface as the rotation-matrix controller.

    QP failures fall back to the projected previous command. A singular rate
    map is not hidden: :class:`RateMapNearSingular` propagates to the caller.
    """

    params: RobotParams
    gains: GainSet
    inequalities: bool = True
    solver_settings: SolverSettings = field(default_factory=SolverSettings)
    u_prev: np.ndarray | None = None
    fallbacks: int = 0

    def __post_init__(self):
        self._solver = QpSolver(self.solver_settings)

    def reset(self):
        self.u_prev = None
        self.fallbacks = 0

    def step(self, state: SrbState, ref: ReferenceWindow) -> EaMpcSolution:
        try:
            sol = ea_mpc_solve(state, ref, self.gains, self.params, self._solver, self.inequalities)
        except (QpInfeasible, QpMaxIterations) as exc:
            self.fallbacks += 1
            log.warning("EA-MPC fallback (%s); reusing previous command", exc)
            c0 = ref.contacts[0]
            u0 = even_support(c0, self.params) if self.u_prev is None else self.u_prev
            u = project_forces(u0, c0, self.params, ref.contact_frames)
            N = ref.horizon
            sol = EaMpcSolution(
                u, np.zeros((N, NX)), np.tile(state.R, (N, 1, 1)), np.zeros((N, NU)),
                SolverStatus.INFEASIBLE, 0, np.inf, 0.0, fallback=True,
            )
        self.u_prev = sol.u_cmd.copy()
        return sol
