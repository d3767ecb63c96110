"""Offline single-shooting trajectory optimization of the twist jump off a slope.

The maneuver has three fixed phases: all feet on the slope, hind feet only,
then flight. Decision variables are the 24 force components (4 legs x 3
components x 2 stance phases) expressed in the slope frame, constant within
each phase; front-leg forces in the second phase are pinned to zero by their
bounds. Constraints (friction pyramid, leg reach, landing box) enter through
an augmented Lagrangian whose inner problems are solved by L-BFGS-B with
central finite-difference gradients computed by batched rollouts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from ._kernels import rollout_batch
from .dynamics import N_LEGS, RobotParams
from .gait import ReferenceTrajectory
from .mpc import even_support
from .so3 import rot_y, rot_z

log = logging.getLogger(__name__)


class NoFeasibleSolution(RuntimeError):
    pass


@dataclass
class TwistJumpSetup:
    """Geometry and targets of the jump.

    The slope rises along +x for ``x >= 0`` with flat ground for ``x < 0``.
    The robot starts at rest with its body parallel to the slope, nose up the
    slope, feet on the slope centered ``foot_center`` meters up the incline.
    It lands facing away from the slope (yaw pi, upright) at ``target_p``.

    ``start_height`` is the initial crouch (CoM distance from the slope
    along its normal). ``liftoff_pitch_deg`` requires the nose to point at
    least this far above the horizon when the hind feet leave the slope, which
    selects the backflip-with-twist branch over a flatter spin; ``None`` drops
    the requirement.
    """

    params: RobotParams
    slope_deg: float = 45.0
    durations: tuple = (0.1, 0.1, 0.3)
    foot_center: float = 0.25
    target_p: np.ndarray = field(default_factory=lambda: np.array([-0.35, 0.0, 0.25]))
    target_R: np.ndarray = field(default_factory=lambda: rot_z(math.pi))
    land_R_tol: float = 0.2
    land_p_tol: float = 0.1
    start_height: float | None = 0.2
    liftoff_pitch_deg: float | None = 82.0

    def __post_init__(self):
        if not (30.0 <= self.slope_deg <= 60.0):
            raise ValueError("slope must lie in [30, 60] degrees")
        self.target_p = np.asarray(self.target_p, float).reshape(3)

    @property
    def slope(self) -> float:
        return math.radians(self.slope_deg)

    @property
    def slope_frame(self) -> np.ndarray:
        """Rotation whose third column is the slope normal."""
        return rot_y(-self.slope)

    def initial_pose(self, slope_deg: float | None = None):
        """CoM, attitude and foot positions at rest on a slope of the given angle."""
        a = math.radians(self.slope_deg if slope_deg is None else slope_deg)
        R0 = rot_y(-a)
        c = self.foot_center * np.array([math.cos(a), 0.0, math.sin(a)])
        h = self.params.stand_height if self.start_height is None else self.start_height
        p0 = c + h * R0[:, 2]
        feet = c + (R0 @ self.params.hip_offsets.T).T
        return p0, R0, feet

    def landing_feet(self) -> np.ndarray:
        feet = self.target_p + (self.target_R @ self.params.hip_offsets.T).T
        feet[:, 2] = 0.0
        return feet

    @property
    def phase_contacts(self) -> np.ndarray:
        return np.array([[1, 1, 1, 1], [0, 0, 1, 1], [0, 0, 0, 0]], bool)


@dataclass
class TwistJumpResult:
    setup: TwistJumpSetup
    forces: np.ndarray  # (2, 4, 3) inertial forces of the two stance phases
    variables: np.ndarray  # (24,) slope-frame forces
    cost: float
    max_violation: float
    trajectory: ReferenceTrajectory
    restarts_tried: int


class _Problem:
    """Objective and constraints of one optimization, evaluated on batches."""

    def __init__(self, setup: TwistJumpSetup, dt: float, w_effort: float, w_land: float):
        self.s = setup
        self.params = setup.params
        self.dt = dt
        self.steps = np.array([int(round(d / dt)) for d in setup.durations], dtype=np.int64)
        self.p0, self.R0, self.feet = setup.initial_pose()
        self.Rs = setup.slope_frame
        self.w_effort = w_effort
        self.w_land = w_land
        self.scale = self.params.u_z_max
        contacts = setup.phase_contacts[:2]
        self.active = np.repeat(contacts.ravel(), 3)  # (24,)
        mu = self.params.mu
        lo, hi = np.zeros(24), np.zeros(24)
        for j in range(24):
            if not self.active[j]:
                continue
            if j % 3 == 2:
                lo[j], hi[j] = 0.0, 1.0
            else:
                lo[j], hi[j] = -mu, mu
        self.bounds = list(zip(lo, hi))
        # friction pyramid rows  A y <= 0 on active legs
        rows = []
        for ph in range(2):
            for i in range(N_LEGS):
                if not contacts[ph, i]:
                    continue
                base = 12 * ph + 3 * i
                for comp in (0, 1):
                    for sgn in (1.0, -1.0):
                        r = np.zeros(24)
                        r[base + comp] = sgn
                        r[base + 2] = -mu
                        rows.append(r)
        self.A_fric = np.array(rows)
        self.reach = 2.0 * self.params.link_length

    def forces(self, Y: np.ndarray) -> np.ndarray:
        """(B, 24) scaled slope-frame variables -> (B, 3, 4, 3) inertial forces per phase."""
        B = Y.shape[0]
        loc = Y.reshape(B, 2, N_LEGS, 3) * self.scale
        U = np.zeros((B, 3, N_LEGS, 3))
        U[:, :2] = loc @ self.Rs.T
        return U

    def rollout(self, Y: np.ndarray, dt: float | None = None):
        dt = self.dt if dt is None else dt
        steps = self.steps if dt == self.dt else np.array(
            [int(round(d / dt)) for d in self.s.durations], dtype=np.int64
        )
        prm = self.params
        return rollout_batch(
            self.p0, np.zeros(3), self.R0, np.zeros(3), self.forces(Y), self.feet, steps,
            prm.mass, prm.gravity, prm.inertia, prm.inertia_inv, dt,
        ), steps

    def evaluate(self, Y: np.ndarray):
        """Objective (B,) and constraint values (B, m) with ``g <= 0`` feasible."""
        (P, V, R, W), steps = self.rollout(Y)
        B = Y.shape[0]
        effort = np.sum(Y**2, axis=1) / 24.0
        dp = P[:, -1] - self.s.target_p
        # 3 - tr(R*^T R) = 2 (1 - cos angle), smooth at the target
        att = 3.0 - np.einsum("ij,bij->b", self.s.target_R, R[:, -1])
        land = np.sum(dp**2, axis=1) + att
        f = self.w_effort * effort + self.w_land * land
        g_fric = Y @ self.A_fric.T
        # leg reach during stance: hip = p + R h_i
        n1, n2 = steps[0], steps[1]
        hips = P[:, : n1 + n2 + 1, None, :] + np.einsum(
            "bkij,lj->bkli", R[:, : n1 + n2 + 1], self.params.hip_offsets
        )
        dist = np.linalg.norm(self.feet[None, None] - hips, axis=-1)  # (B, K, 4)
        g_reach_all = dist[:, : n1 + 1, :].reshape(B, -1)
        g_reach_hind = dist[:, n1 : n1 + n2 + 1, 2:].reshape(B, -1)
        g_reach = np.concatenate([g_reach_all, g_reach_hind], axis=1) / self.reach - 1.0
        g_land = np.concatenate(
            [
                (att / (2.0 * (1.0 - math.cos(self.s.land_R_tol))) - 1.0)[:, None],
                (dp**2) / self.s.land_p_tol**2 - 1.0,
            ],
            axis=1,
        )
        parts = [g_fric, g_reach, g_land]
        if self.s.liftoff_pitch_deg is not None:
            # body x axis elevation at hind lift-off
            sin_min = math.sin(math.radians(self.s.liftoff_pitch_deg))
            parts.append((1.0 - R[:, n1 + n2, 2, 0] / sin_min)[:, None])
        return f, np.concatenate(parts, axis=1)


def _al_value(f, g, lam, rho):
    shifted = np.maximum(0.0, g + lam / rho)
    return f + 0.5 * rho * np.sum(shifted**2 - (lam / rho) ** 2, axis=-1)


def _initial_guess() -> np.ndarray:
    """Moderate four-leg push with up-slope shear (front legs pitch the nose up),
    then a hard hind push whose left/right shear imbalance starts the twist."""
    y = np.zeros((2, N_LEGS, 3))
    y[0, :, :] = [0.13, 0.0, 0.2]
    y[0, 1, 2] = 0.28
    y[1, 2] = [0.64, 0.0, 0.9]
    y[1, 3] = [0.1, 0.0, 0.85]
    return y.ravel()


def _augmented_lagrangian(prob: _Problem, y0, idx, fd_step, feas_tol, max_outer=30):
    """Minimize over ``y[idx]`` from ``y0``; returns (y, cost, max violation)."""
    y = y0.copy()
    bounds = [prob.bounds[j] for j in idx]
    _, g0 = prob.evaluate(y[None])
    lam = np.zeros(g0.shape[1])
    rho = 10.0
    prev_viol = np.inf
    for _ in range(max_outer):

        def fun(yf, lam=lam, rho=rho):
            base = y.copy()
            base[idx] = yf
            Y = np.repeat(base[None], 2 * idx.size + 1, axis=0)
            k = np.arange(idx.size)
            Y[1 + 2 * k, idx] += fd_step
            Y[2 + 2 * k, idx] -= fd_step
            f, g = prob.evaluate(Y)
            L = _al_value(f, g, lam, rho)
            return float(L[0]), (L[1::2] - L[2::2]) / (2 * fd_step)

        res = minimize(
            fun, y[idx], jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 300, "ftol": 1e-12, "gtol": 1e-7},
        )
        y[idx] = res.x
        f, g = prob.evaluate(y[None])
        g = g[0]
        viol = float(max(0.0, g.max()))
        lam = np.maximum(0.0, lam + rho * g)
        if viol <= feas_tol and np.max(np.abs(lam * g)) <= feas_tol:
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * 4.0, 1e6)
        prev_viol = viol
    return y, float(f[0]), viol


def solve_twist_jump(
    params: RobotParams | None = None,
    slope_deg: float = 45.0,
    setup: TwistJumpSetup | None = None,
    seed: int = 0,
    restarts: int = 8,
    dt_opt: float = 0.005,
    dt_out: float = 0.001,
    hold_time: float = 0.5,
    w_effort: float = 0.05,
    w_land: float = 10.0,
    fd_step: float = 1e-6,
    feas_tol: float = 1e-4,
    stop_after: int = 1,
) -> TwistJumpResult:
    """Optimize the twist jump.

    Restart 0 starts from a hand-built push-off; later restarts draw uniform
    points in the half-size force box. The search stops once ``stop_after``
    feasible solutions are found and returns the cheapest one. Raises
    :class:`NoFeasibleSolution` if the restart budget is exhausted.
    """
    params = params or RobotParams()
    setup = setup or TwistJumpSetup(params, slope_deg)
    prob = _Problem(setup, dt_opt, w_effort, w_land)
    rng = np.random.default_rng(seed)
    idx = np.flatnonzero([lo != hi for lo, hi in prob.bounds])
    lo = np.array([prob.bounds[j][0] for j in idx])
    hi = np.array([prob.bounds[j][1] for j in idx])

    best = None
    found = 0
    tried = 0
    for r in range(restarts):
        tried += 1
        y0 = _initial_guess()
        if r > 0:
            y0 = np.zeros(24)
            y0[idx] = 0.5 * rng.uniform(lo, hi)
        y, cost, viol = _augmented_lagrangian(prob, y0, idx, fd_step, feas_tol)
        log.info("twist jump restart %d: cost %.4g, violation %.2e", r, cost, viol)
        if viol <= feas_tol:
            found += 1
            if best is None or cost < best[0]:
                best = (cost, viol, y)
            if found >= stop_after:
                break
    if best is None:
        raise NoFeasibleSolution(f"no feasible twist jump after {tried} restarts")
    cost, viol, y = best
    traj = _build_reference(prob, y, dt_out, hold_time)
    forces = prob.forces(y[None])[0, :2]
    return TwistJumpResult(setup, forces, y * prob.scale, cost, viol, traj, tried)


def _build_reference(prob: _Problem, y: np.ndarray, dt: float, hold_time: float) -> ReferenceTrajectory:
    (P, V, R, W), steps = prob.rollout(y[None], dt)
    U_ph = prob.forces(y[None])[0]  # (3, 4, 3)
    contacts_ph = prob.s.phase_contacts
    n = P.shape[1]
    t = np.arange(n) * dt
    phase = np.repeat(np.arange(3), steps)
    phase = np.append(phase, 2)
    u = U_ph[phase].reshape(n, 12)
    contacts = contacts_ph[phase].copy()
    # the final sample is the touchdown instant
    contacts[-1] = True
    params = prob.params
    u[-1] = even_support(np.ones(N_LEGS, bool), params)
    n_hold = int(round(hold_time / dt))
    t_hold = t[-1] + dt * np.arange(1, n_hold + 1)
    tgt_p, tgt_R = prob.s.target_p, prob.s.target_R
    meta = {
        "maneuver": "twist_jump",
        "slope_deg": prob.s.slope_deg,
        "durations": tuple(prob.s.durations),
        "touchdown": float(t[-1]),
        "feet_start": prob.feet.copy(),
        "feet_land": prob.s.landing_feet(),
        "slope_frame": prob.Rs.copy(),
    }
    return ReferenceTrajectory(
        np.concatenate([t, t_hold]),
        np.concatenate([P[0], np.tile(tgt_p, (n_hold, 1))]),
        np.concatenate([V[0], np.zeros((n_hold, 3))]),
        np.concatenate([R[0], np.tile(tgt_R, (n_hold, 1, 1))]),
        np.concatenate([W[0], np.zeros((n_hold, 3))]),
        np.concatenate([u, np.tile(u[-1], (n_hold, 1))]),
        np.concatenate([contacts, np.ones((n_hold, N_LEGS), bool)]),
        meta,
    )


def twist_jump_reference(params: RobotParams | None = None, slope_deg: float = 45.0, **kwargs) -> ReferenceTrajectory:
    """Reference trajectory of the optimized twist jump (see :func:`solve_twist_jump`)."""
    return solve_twist_jump(params, slope_deg, **kwargs).trajectory
