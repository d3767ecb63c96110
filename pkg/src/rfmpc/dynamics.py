"""Single-rigid-body plant: parameters, state, wrench and a Lie-group RK4 step.

Legs are massless force applicators. Forces and foot positions live in the
inertial frame, angular velocity in the body frame. Leg order is
FL, FR, HL, HR throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._kernels import foot_moment, rkmk4_step
from .so3 import hat, project_to_so3

LEGS = ("FL", "FR", "HL", "HR")
N_LEGS = 4
_ZERO3 = np.zeros(3)


def _default_inertia() -> np.ndarray:
    return np.diag([0.026, 0.112, 0.075])


@dataclass
class RobotParams:
    mass: float = 5.5
    inertia: np.ndarray = field(default_factory=_default_inertia)
    body_length: float = 0.3
    body_width: float = 0.2
    link_length: float = 0.14
    gravity: float = 9.81
    mu: float = 0.7
    u_z_min: float = 0.0
    u_z_max: float = 60.0
    stand_height: float = 0.25
    hip_offsets: np.ndarray | None = None

    def __post_init__(self):
        self.inertia = np.array(self.inertia, dtype=float)
        if self.inertia.shape == (3,):
            self.inertia = np.diag(self.inertia)
        if self.hip_offsets is None:
            hx, hy = 0.5 * self.body_length, 0.5 * self.body_width
            self.hip_offsets = np.array(
                [[hx, hy, 0.0], [hx, -hy, 0.0], [-hx, hy, 0.0], [-hx, -hy, 0.0]]
            )
        self.hip_offsets = np.array(self.hip_offsets, dtype=float).reshape(N_LEGS, 3)
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if not np.allclose(self.inertia, self.inertia.T) or np.min(
            np.linalg.eigvalsh(self.inertia)
        ) <= 0:
            raise ValueError("inertia must be symmetric positive definite")
        if self.mu <= 0 or self.u_z_max <= 0:
            raise ValueError("mu and u_z_max must be positive")
        self.inertia_inv = np.linalg.inv(self.inertia)

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])

    @property
    def weight(self) -> float:
        return self.mass * self.gravity

    def with_updates(self, **kwargs) -> RobotParams:
        return replace(self, **kwargs)


@dataclass
class SrbState:
    p: np.ndarray
    pdot: np.ndarray
    R: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.pdot = np.asarray(self.pdot, dtype=float).reshape(3)
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.omega = np.asarray(self.omega, dtype=float).reshape(3)

    def copy(self) -> SrbState:
        return SrbState(self.p.copy(), self.pdot.copy(), self.R.copy(), self.omega.copy())

    @classmethod
    def standing(cls, params: RobotParams, R: np.ndarray | None = None) -> SrbState:
        return cls(
            [0.0, 0.0, params.stand_height],
            np.zeros(3),
            np.eye(3) if R is None else R,
            np.zeros(3),
        )


@dataclass
class FootForces:
    u: np.ndarray
    feet: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(N_LEGS, 3)
        self.feet = np.asarray(self.feet, dtype=float).reshape(N_LEGS, 3)

    def masked(self, contacts) -> FootForces:
        """Zero the forces of legs that are not in contact."""
        c = np.asarray(contacts, dtype=bool).reshape(N_LEGS, 1)
        return FootForces(np.where(c, self.u, 0.0), self.feet)


@dataclass
class Wrench:
    F: np.ndarray
    tau: np.ndarray

    def __add__(self, other: Wrench) -> Wrench:
        return Wrench(self.F + other.F, self.tau + other.tau)


def net_wrench(state: SrbState, forces: FootForces) -> Wrench:
    """Total force and torque about the CoM, both in the inertial frame."""
    r = forces.feet - state.p
    return Wrench(forces.u.sum(axis=0), np.cross(r, forces.u).sum(axis=0))


def point_force_wrench(state: SrbState, force: np.ndarray, body_point: np.ndarray) -> Wrench:
    """Wrench of an inertial-frame force applied at a body-fixed point."""
    force = np.asarray(force, dtype=float)
    return Wrench(force, np.cross(state.R @ np.asarray(body_point, dtype=float), force))


@dataclass
class StateDerivative:
    pdot: np.ndarray
    pddot: np.ndarray
    Rdot: np.ndarray
    omega_dot: np.ndarray


def _accelerations(R, omega, F, tau, params: RobotParams):
    pddot = F / params.mass + params.gravity_vector
    I = params.inertia
    omega_dot = params.inertia_inv @ (R.T @ tau - np.cross(omega, I @ omega))
    return pddot, omega_dot


def continuous_dynamics(
    state: SrbState,
    forces: FootForces,
    params: RobotParams,
    external: Wrench | None = None,
) -> StateDerivative:
    w = net_wrench(state, forces)
    if external is not None:
        w = w + external
    pddot, omega_dot = _accelerations(state.R, state.omega, w.F, w.tau, params)
    return StateDerivative(state.pdot.copy(), pddot, state.R @ hat(state.omega), omega_dot)


def integrate_step(
    state: SrbState,
    forces: FootForces,
    params: RobotParams,
    dt: float,
    external: Wrench | None = None,
) -> SrbState:
    """One fourth-order Runge-Kutta-Munthe-Kaas step.

    Translational and angular-velocity states use classical RK4. The attitude
    is advanced multiplicatively, ``R+ = R exp(hat(omega_avg * dt))``, where
    ``omega_avg`` is the RK4-weighted stage velocity mapped through the
    inverse ``dexp``; the result therefore stays on SO(3) to round-off.
    Forces and foot positions are held constant over the step.
    """
    if not (0.0 < dt <= 0.01):
        raise ValueError(f"plant step must be in (0, 0.01], got {dt}")
    F, C = foot_moment(forces.u, forces.feet)
    ext_F = _ZERO3 if external is None else np.asarray(external.F, dtype=float)
    ext_tau = _ZERO3 if external is None else np.asarray(external.tau, dtype=float)
    p, v, R, w, drift = rkmk4_step(
        state.p, state.pdot, state.R, state.omega, F, C, ext_F, ext_tau,
        params.mass, params.gravity, params.inertia, params.inertia_inv, dt,
    )
    if drift > 1e-9:
        R = project_to_so3(R)
    return SrbState(p, v, R, w)


def simulate(
    state: SrbState,
    forces: FootForces,
    params: RobotParams,
    duration: float,
    dt: float,
    external: Wrench | None = None,
) -> SrbState:
    """Integrate with constant forces; handy for tests and open-loop checks."""
    n = int(round(duration / dt))
    for _ in range(n):
        state = integrate_step(state, forces, params, dt, external)
    return state


# ---------------------------------------------------------------------------
# Vectorized numpy variant; cross-checks the compiled batch rollout.


def _bhat(v: np.ndarray) -> np.ndarray:
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack(
        [np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2
    )


def batch_exp_so3(v: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    K = _bhat(v)
    safe = np.where(theta < 1e-8, 1.0, theta)
    a = np.where(theta < 1e-8, 1.0, np.sin(safe) / safe)
    b = np.where(theta < 1e-8, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def integrate_step_batch(p, v, R, w, u, feet, params: RobotParams, dt: float):
    """Vectorized :func:`integrate_step` over a leading batch axis.

    Shapes: ``p, v, w`` (B, 3); ``R`` (B, 3, 3); ``u, feet`` (B, 4, 3).
    """
    I, Iinv, g = params.inertia, params.inertia_inv, params.gravity_vector
    F = u.sum(axis=1)
    a_lin = F / params.mass + g

    def stage(p_s, theta, w_s):
        R_s = R if theta is None else R @ batch_exp_so3(theta)
        tau = np.cross(feet - p_s[:, None, :], u).sum(axis=1)
        tau_b = np.einsum("bji,bj->bi", R_s, tau)
        wdot = (tau_b - np.cross(w_s, w_s @ I.T)) @ Iinv.T
        if theta is None:
            k_theta = w_s
        else:
            c = np.cross(theta, w_s)
            k_theta = w_s + 0.5 * c + np.cross(theta, c) / 12.0
        return k_theta, wdot

    h = 0.5 * dt
    k1 = stage(p, None, w)
    p2, v2 = p + h * v, v + h * a_lin
    k2 = stage(p2, h * k1[0], w + h * k1[1])
    p3, v3 = p + h * v2, v + h * a_lin
    k3 = stage(p3, h * k2[0], w + h * k2[1])
    p4, v4 = p + dt * v3, v + dt * a_lin
    k4 = stage(p4, dt * k3[0], w + dt * k3[1])

    p_next = p + dt / 6.0 * (v + 2 * v2 + 2 * v3 + v4)
    v_next = v + dt * a_lin
    theta = dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    w_next = w + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return p_next, v_next, R @ batch_exp_so3(theta), w_next
