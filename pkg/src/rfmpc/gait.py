"""Gait scheduling, reference generation and trajectory files.

Contents:

* a time-based finite state machine giving each leg a stance/swing mode and
  phase fraction ``s = dwell / T_mode``;
* the trot reference (constant-acceleration ramp, weight shared evenly over
  the stance legs);
* a periodic planar bounding reference built by impulse scaling of Bezier
  force and pitch-torque profiles;
* the capture-point foothold heuristic;
* a CSV format for time-indexed reference trajectories.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.interpolate import BPoly, PPoly

from .dynamics import N_LEGS, RobotParams, SrbState
from .mpc import ReferenceWindow, even_support
from .so3 import exp_so3, is_rotation, log_so3, orthogonality_error, project_to_so3, rot_y

log = logging.getLogger(__name__)

_GUARD_EPS = 1e-12


class InfeasibleTiming(ValueError):
    pass


class ParseError(ValueError):
    pass


class InvalidRotationInFile(ValueError):
    pass


# ---------------------------------------------------------------------------
# Finite state machine


class LegMode(str, Enum):
    STANCE = "Stance"
    SWING = "Swing"


@dataclass(frozen=True)
class LegPhase:
    mode: LegMode
    s: float
    dwell: float

    @property
    def in_contact(self) -> bool:
        return self.mode is LegMode.STANCE


@dataclass
class GaitTiming:
    """Periodic stance/swing schedule.

    Leg ``i`` starts its stance at ``offsets[i] * period`` (mod period).
    """

    T_st: float
    T_sw: float
    offsets: tuple = (0.0, 0.5, 0.5, 0.0)
    name: str = "trot"

    def __post_init__(self):
        if not (self.T_st > 0 and self.T_sw > 0):
            raise ValueError("T_st and T_sw must be positive")
        self.offsets = tuple(float(o) for o in self.offsets)
        if len(self.offsets) != N_LEGS or any(not (0.0 <= o < 1.0) for o in self.offsets):
            raise ValueError("need one offset in [0, 1) per leg")

    @property
    def period(self) -> float:
        return self.T_st + self.T_sw

    @classmethod
    def trot(cls, T_st: float = 0.3, T_sw: float = 0.15) -> GaitTiming:
        return cls(T_st, T_sw, (0.0, 0.5, 0.5, 0.0), "trot")

    @classmethod
    def bound(cls, T_st: float = 0.1, T_sw: float = 0.16) -> GaitTiming:
        """Front pair, aerial, hind pair, aerial (requires ``T_sw >= T_st``)."""
        return cls(T_st, T_sw, (0.0, 0.0, 0.5, 0.5), "bound")

    def leg_time(self, leg: int, t: float) -> float:
        """Time since the start of the leg's current stance, in ``[0, period)``."""
        T = self.period
        tau = math.fmod(t - self.offsets[leg] * T, T)
        if tau < 0.0:
            tau += T
        if abs(tau - T) <= _GUARD_EPS * max(1.0, T) or abs(tau) <= _GUARD_EPS * max(1.0, T):
            tau = 0.0
        return tau


def fsm_step(timing: GaitTiming, t: float) -> tuple[LegPhase, ...]:
    """Mode, phase fraction and dwell time of every leg at time ``t``.

    Guards fire when the dwell reaches the mode duration; the reset zeroes
    the dwell, so at exactly ``t = T_st`` a leg is in swing with ``s = 0``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    out = []
    for leg in range(N_LEGS):
        tau = timing.leg_time(leg, t)
        if tau < timing.T_st - _GUARD_EPS * max(1.0, timing.T_st):
            out.append(LegPhase(LegMode.STANCE, tau / timing.T_st, tau))
        else:
            dwell = max(0.0, tau - timing.T_st)
            out.append(LegPhase(LegMode.SWING, min(1.0, dwell / timing.T_sw), dwell))
    return tuple(out)


def contact_flags(timing: GaitTiming, t: float) -> np.ndarray:
    return np.array([ph.in_contact for ph in fsm_step(timing, t)])


def mode_intervals(timing: GaitTiming, leg: int, t0: float, t1: float) -> list[tuple[LegMode, float, float]]:
    """Exact mode intervals of one leg over ``[t0, t1]`` (used for bookkeeping)."""
    T = timing.period
    start = t0 - timing.leg_time(leg, t0)
    out = []
    while start < t1:
        for mode, a, b in ((LegMode.STANCE, 0.0, timing.T_st), (LegMode.SWING, timing.T_st, T)):
            lo, hi = max(t0, start + a), min(t1, start + b)
            if hi > lo:
                out.append((mode, lo, hi))
        start += T
    return out


@dataclass
class GaitSchedule:
    """Contact flags ``contacts[k, i]`` at times ``t[k]`` plus planned footholds."""

    t: np.ndarray
    contacts: np.ndarray
    footholds: np.ndarray | None = None


def horizon_contacts(timing: GaitTiming, t: float, horizon: int, dt_pred: float) -> GaitSchedule:
    times = t + dt_pred * np.arange(horizon)
    return GaitSchedule(times, np.array([contact_flags(timing, tk) for tk in times]))


# ---------------------------------------------------------------------------
# Footholds


def foothold_plan(p_hip, v_hip, v_hip_des, T_st: float, z0: float, gravity: float = 9.81, ground_z: float = 0.0):
    """Velocity feed-forward plus capture-point feedback, on the ground plane."""
    if z0 <= 0:
        raise ValueError("nominal hip height must be positive")
    p_hip, v_hip, v_des = (np.asarray(a, float).reshape(3) for a in (p_hip, v_hip, v_hip_des))
    step = p_hip + 0.5 * T_st * v_des + math.sqrt(z0 / gravity) * (v_hip - v_des)
    step[2] = ground_z
    return step


# ---------------------------------------------------------------------------
# Trot


def ramp_profile(t, v_max: float, accel: float):
    """Distance and speed of a constant-acceleration ramp to ``v_max``."""
    t = np.asarray(t, float)
    if v_max == 0.0:
        return np.zeros_like(t), np.zeros_like(t)
    if accel <= 0:
        raise ValueError("accel must be positive")
    t_r = v_max / accel
    speed = np.where(t < t_r, accel * t, v_max)
    dist = np.where(t < t_r, 0.5 * accel * t**2, 0.5 * v_max * t_r + v_max * (t - t_r))
    return dist, speed


def trot_reference(
    timing: GaitTiming,
    t: float,
    horizon: int,
    dt_pred: float,
    params: RobotParams,
    feet: np.ndarray,
    v_cmd=(0.5, 0.0, 0.0),
    accel: float = 0.5,
    p0=None,
    contact_frames=None,
) -> ReferenceWindow:
    """Ramp from rest at ``accel`` to ``v_cmd``; flat attitude, constant height."""
    v_cmd = np.asarray(v_cmd, float).reshape(3)
    p0 = np.array([0.0, 0.0, params.stand_height]) if p0 is None else np.asarray(p0, float)
    speed = float(np.linalg.norm(v_cmd))
    direction = v_cmd / speed if speed > 0 else np.zeros(3)
    times = t + dt_pred * np.arange(horizon + 1)
    dist, vel = ramp_profile(times, speed, accel)
    p = p0 + dist[:, None] * direction
    pdot = vel[:, None] * direction
    sched = horizon_contacts(timing, t, horizon, dt_pred)
    u = np.array([even_support(c, params) for c in sched.contacts])
    return ReferenceWindow(
        p, pdot, np.tile(np.eye(3), (horizon + 1, 1, 1)), np.zeros((horizon + 1, 3)),
        u, sched.contacts, feet, contact_frames,
    )


# ---------------------------------------------------------------------------
# Reference trajectories (time series)


@dataclass
class ReferenceTrajectory:
    """Time-indexed desired states, forces and contacts.

    ``period`` (if set) makes sampling wrap in time; positions then advance by
    ``advance`` per period.
    """

    t: np.ndarray
    p: np.ndarray
    pdot: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    contacts: np.ndarray
    meta: dict = field(default_factory=dict)
    period: float | None = None
    advance: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, float).ravel()
        M = self.t.size
        self.p = np.asarray(self.p, float).reshape(M, 3)
        self.pdot = np.asarray(self.pdot, float).reshape(M, 3)
        self.R = np.asarray(self.R, float).reshape(M, 3, 3)
        self.omega = np.asarray(self.omega, float).reshape(M, 3)
        self.u = np.asarray(self.u, float).reshape(M, 12)
        self.contacts = np.asarray(self.contacts, bool).reshape(M, N_LEGS)
        if M < 1 or np.any(np.diff(self.t) <= 0):
            raise ValueError("time stamps must be strictly increasing")
        if self.advance is None:
            self.advance = np.zeros(3)

    def __len__(self) -> int:
        return self.t.size

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def _locate(self, t: float):
        """Index, interpolation weight and positional offset for time ``t``."""
        shift = np.zeros(3)
        if self.period is not None:
            n = math.floor((t - self.t[0]) / self.period)
            t = t - n * self.period
            shift = n * self.advance
        if t <= self.t[0]:
            return 0, 0.0, shift
        if t >= self.t[-1]:
            return self.t.size - 1, 0.0, shift
        i = int(np.searchsorted(self.t, t, side="right") - 1)
        a = (t - self.t[i]) / (self.t[i + 1] - self.t[i])
        return i, a, shift

    def sample(self, t: float):
        """Interpolated ``(SrbState, u, contacts)``; contacts and forces are held piecewise."""
        i, a, shift = self._locate(t)
        j = min(i + 1, self.t.size - 1)
        if self.period is not None and i == self.t.size - 1:
            j = i
        lerp = lambda X: (1 - a) * X[i] + a * X[j]  # noqa: E731
        R = self.R[i] @ exp_so3(a * log_so3(self.R[i].T @ self.R[j])) if a > 0 else self.R[i]
        state = SrbState(lerp(self.p) + shift, lerp(self.pdot), R, lerp(self.omega))
        return state, self.u[i].copy(), self.contacts[i].copy()

    def window(self, t: float, horizon: int, dt_pred: float, feet, contact_frames=None) -> ReferenceWindow:
        states = [self.sample(t + k * dt_pred) for k in range(horizon + 1)]
        return ReferenceWindow(
            [s.p for s, _, _ in states],
            [s.pdot for s, _, _ in states],
            [s.R for s, _, _ in states],
            [s.omega for s, _, _ in states],
            [u * np.repeat(c, 3) for _, u, c in states[:horizon]],
            [c for _, _, c in states[:horizon]],
            feet,
            contact_frames,
        )


_COLUMNS = (
    ["t"]
    + [f"p_{a}" for a in "xyz"]
    + [f"pdot_{a}" for a in "xyz"]
    + [f"R_{r}{c}" for c in range(3) for r in range(3)]
    + [f"omega_{a}" for a in "xyz"]
    + [f"u_{leg}_{a}" for leg in ("FL", "FR", "HL", "HR") for a in "xyz"]
    + [f"contact_{leg}" for leg in ("FL", "FR", "HL", "HR")]
)


def save_trajectory(traj: ReferenceTrajectory, path) -> None:
    """Write one row per sample; attitude stored column-major."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_COLUMNS)
        for k in range(len(traj)):
            row = np.concatenate(
                [[traj.t[k]], traj.p[k], traj.pdot[k], traj.R[k].flatten(order="F"), traj.omega[k], traj.u[k]]
            )
            w.writerow([repr(float(v)) for v in row] + [str(int(c)) for c in traj.contacts[k]])


def load_trajectory(path, repair_tol: float = 1e-3) -> ReferenceTrajectory:
    """Read a trajectory file, re-projecting slightly non-orthogonal attitudes."""
    path = Path(path)
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != _COLUMNS:
        raise ParseError(f"{path}: missing or unexpected header")
    body = [r for r in rows[1:] if r and not r[0].startswith("#")]
    if not body:
        raise ParseError(f"{path}: no samples")
    try:
        data = np.array([[float(v) for v in r] for r in body])
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(_COLUMNS):
        bad = next(i for i, r in enumerate(body) if len(r) != len(_COLUMNS))
        raise ParseError(f"{path}: row {bad + 2} has {len(body[bad])} columns, expected {len(_COLUMNS)}")
    R = data[:, 7:16].reshape(-1, 3, 3).transpose(0, 2, 1)
    repaired = 0
    for k in range(len(R)):
        if is_rotation(R[k], 1e-9):
            continue
        drift = orthogonality_error(R[k])
        if drift >= repair_tol or np.linalg.det(R[k]) <= 0:
            raise InvalidRotationInFile(f"{path}: sample {k} attitude drift {drift:.2e}")
        R[k] = project_to_so3(R[k])
        repaired += 1
    if repaired:
        log.warning("%s: re-projected %d attitudes onto SO(3)", path, repaired)
    return ReferenceTrajectory(
        data[:, 0], data[:, 1:4], data[:, 4:7], R, data[:, 16:19], data[:, 19:31], data[:, 31:35] > 0.5
    )


# ---------------------------------------------------------------------------
# Bounding


DEFAULT_BOUND_SHAPE = (0.0, 1.0, 1.0, 1.0, 0.0)


@dataclass
class BoundingProfile:
    """One period of the planar bounding reference as exact piecewise polynomials.

    Phases: front stance ``[0, T_st)``, aerial, hind stance
    ``[T_st + T_air, 2 T_st + T_air)``, aerial. ``Fz`` is the total vertical
    force and ``tau`` the pitch torque about the CoM (body y axis).
    """

    T_st: float
    T_air: float
    Fz: BPoly
    tau: BPoly
    z: PPoly
    zdot: PPoly
    theta: PPoly
    omega: PPoly
    alpha: float
    beta: float
    height: float

    @property
    def period(self) -> float:
        return 2.0 * (self.T_st + self.T_air)

    def front_stance(self, t) -> np.ndarray:
        tt = np.mod(t, self.period)
        return tt < self.T_st

    def hind_stance(self, t) -> np.ndarray:
        tt = np.mod(t, self.period)
        return (tt >= self.T_st + self.T_air) & (tt < 2 * self.T_st + self.T_air)

    def state(self, t):
        """``(z, zdot, theta, omega_y, Fz, tau)`` at (wrapped) time ``t``."""
        tt = np.mod(t, self.period)
        return tuple(f(tt) for f in (self.z, self.zdot, self.theta, self.omega, self.Fz, self.tau))

    def leg_forces(self, t, speed: float, params: RobotParams) -> np.ndarray:
        """Per-leg forces realizing ``(Fz, tau)`` with feet swept under the hips.

        Stance feet are placed symmetrically about the hip, so the lever arm
        is ``L/2 + speed (T_st/2 - t_stance)``. The horizontal force balances
        the difference between the prescribed torque and the vertical moment,
        using the nominal height as the vertical lever.
        """
        tt = float(np.mod(t, self.period))
        Fz, tau = float(self.Fz(tt)), float(self.tau(tt))
        u = np.zeros((N_LEGS, 3))
        hx = 0.5 * params.body_length
        if self.front_stance(tt):
            legs, ts, rx = (0, 1), tt, hx
        elif self.hind_stance(tt):
            legs, ts, rx = (2, 3), tt - self.T_st - self.T_air, -hx
        else:
            return u.ravel()
        rx = rx + speed * (0.5 * self.T_st - ts)
        rz = -self.height
        # tau_y = rz Fx - rx Fz
        Fx = (tau + rx * Fz) / rz
        for i in legs:
            u[i] = [0.5 * Fx, 0.0, 0.5 * Fz]
        return u.ravel()


def _bezier_integral(c) -> float:
    return float(np.mean(c))


def bounding_profile(
    params: RobotParams,
    timing: GaitTiming,
    shape=DEFAULT_BOUND_SHAPE,
    pitch_scale: float = 1.0,
    height: float | None = None,
) -> BoundingProfile:
    """Impulse-scaled vertical force and pitch torque for one bounding period.

    ``shape`` holds Bezier coefficients (degree ``len(shape) - 1 >= 2``) of
    both profiles over a stance, with zero end points. The vertical scale makes
    the period's vertical impulse equal ``M g T``; the pitch torques of the two
    stances have equal and opposite impulse, the front one equal to
    ``pitch_scale`` times the moment of the vertical force at the hip lever
    arm. Initial vertical and pitch rates are solved so that ``z`` and
    ``theta`` are periodic; initial values center them on ``height`` and 0.
    """
    c = np.asarray(shape, float)
    if c.size < 3 or c[0] != 0 or c[-1] != 0 or np.any(c < 0) or c.sum() <= 0:
        raise ValueError("shape needs >= 3 non-negative coefficients with zero end points")
    if timing.T_sw < timing.T_st:
        raise InfeasibleTiming("bounding needs T_sw >= T_st (non-negative aerial phases)")
    T_st = timing.T_st
    T_air = 0.5 * (timing.T_sw - timing.T_st)
    T = 2 * (T_st + T_air)
    height = params.stand_height if height is None else height
    m, g = params.mass, params.gravity
    mean_b = _bezier_integral(c)
    alpha = m * g * T / (2.0 * T_st * mean_b)
    peak_leg = 0.5 * alpha * _bezier_max(c)
    if peak_leg > params.u_z_max:
        raise InfeasibleTiming(
            f"peak vertical force {peak_leg:.1f} N per leg exceeds u_z_max = {params.u_z_max} N"
        )
    beta = pitch_scale * 0.5 * params.body_length * alpha
    Iyy = params.inertia[1, 1]

    breaks = [0.0, T_st, T_st + T_air, 2 * T_st + T_air, T]
    if T_air == 0.0:
        breaks = [0.0, T_st, 2 * T_st]
    zero = np.zeros(c.size)

    def piecewise(front, hind):
        if T_air == 0.0:
            return BPoly(np.stack([front, hind], axis=1), breaks)
        return BPoly(np.stack([front, zero, hind, zero], axis=1), breaks)

    Fz = piecewise(alpha * c, alpha * c)
    tau = piecewise(-beta * c, beta * c)
    # Bernstein coefficients of a constant are that constant, so gravity shifts every coefficient.
    zdd = PPoly.from_bernstein_basis(piecewise(alpha * c / m, alpha * c / m))
    zdd.c[-1] -= g
    thdd = PPoly.from_bernstein_basis(piecewise(-beta * c / Iyy, beta * c / Iyy))
    z, zdot = _periodic_integrals(zdd, T, height)
    theta, omega = _periodic_integrals(thdd, T, 0.0)
    return BoundingProfile(T_st, T_air, Fz, tau, z, zdot, theta, omega, alpha, beta, height)


def _add_affine(P: PPoly, a: float, b: float) -> PPoly:
    """``P(t) + a + b t`` (local power basis: last row constant, second-to-last linear)."""
    c = P.c.copy()
    if c.shape[0] < 2:
        c = np.vstack([np.zeros((2 - c.shape[0], c.shape[1])), c])
    c[-1] += a + b * P.x[:-1]
    c[-2] += b
    return PPoly(c, P.x)


def _periodic_integrals(acc: PPoly, T: float, mean_value: float):
    """Velocity and position with ``acc`` as second derivative, both ``T``-periodic.

    The initial rate makes the position periodic; the initial value sets its
    mean over the period. ``acc`` must integrate to zero over ``[0, T]``.
    """
    A2 = acc.antiderivative(2)
    A3 = acc.antiderivative(3)
    v0 = -float(A2(T)) / T
    x0 = mean_value - 0.5 * v0 * T - float(A3(T)) / T
    pos = _add_affine(A2, x0, v0)
    return pos, pos.derivative()


def _bezier_max(c) -> float:
    s = np.linspace(0.0, 1.0, 2001)
    return float(BPoly(np.asarray(c, float)[:, None], [0.0, 1.0])(s).max())


def bounding_reference(
    params: RobotParams,
    timing: GaitTiming,
    speed: float,
    dt: float = 1e-3,
    shape=DEFAULT_BOUND_SHAPE,
    pitch_scale: float = 1.0,
    height: float | None = None,
) -> ReferenceTrajectory:
    """One sampled period of the bounding reference, tiled periodically in time."""
    prof = bounding_profile(params, timing, shape, pitch_scale, height)
    T = prof.period
    n = int(round(T / dt))
    t = np.arange(n) * (T / n)
    z, zdot, th, om, _, _ = prof.state(t)
    p = np.stack([speed * t, np.zeros(n), z], axis=1)
    pdot = np.stack([np.full(n, speed), np.zeros(n), zdot], axis=1)
    R = np.array([rot_y(a) for a in th])
    omega = np.stack([np.zeros(n), om, np.zeros(n)], axis=1)
    u = np.array([prof.leg_forces(tk, speed, params) for tk in t])
    contacts = np.stack(
        [prof.front_stance(t), prof.front_stance(t), prof.hind_stance(t), prof.hind_stance(t)], axis=1
    )
    meta = {"gait": "bound", "speed": speed, "alpha": prof.alpha, "beta": prof.beta}
    return ReferenceTrajectory(
        t, p, pdot, R, omega, u, contacts, meta, period=T, advance=np.array([speed * T, 0.0, 0.0])
    )


# ---------------------------------------------------------------------------
# Twist jump (implemented in its own module; imported lazily to avoid a cycle)


def twist_jump_reference(params: RobotParams | None = None, slope_deg: float = 45.0, **kwargs) -> ReferenceTrajectory:
    """Optimized twist-jump reference; see :func:`rfmpc.twist_jump.solve_twist_jump`."""
    from .twist_jump import twist_jump_reference as _impl

    return _impl(params, slope_deg, **kwargs)
