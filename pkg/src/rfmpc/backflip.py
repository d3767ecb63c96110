"""Generator for the bundled planar backflip reference.

The robot stands still, pushes off with constant four-leg forces (front legs
harder than hind legs to build backward pitch momentum), flies through one
full backward revolution and lands at its initial height. A catch phase then
brings height and pitch back to the stand along critically damped arcs. The
two push forces are found by root finding so that the flight lasts
``flight_time`` and the pitch has turned by exactly ``-2 pi`` when the CoM
returns to the initial height. The reference is the plant rollout itself, so
it is dynamically consistent with the simulation model.

Regenerate the bundled file with ``python -m rfmpc.backflip``.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.optimize import fsolve

from .dynamics import FootForces, RobotParams, SrbState, integrate_step
from .gait import ReferenceTrajectory, save_trajectory
from .mpc import even_support
from .so3 import rot_y

DATA_FILE = Path(__file__).with_name("data") / "backflip.csv"


def _push_forces(front: float, hind: float) -> np.ndarray:
    u = np.zeros((4, 3))
    u[:2, 2] = 0.5 * front
    u[2:, 2] = 0.5 * hind
    return u


def _stance_end(params: RobotParams, feet, front, hind, T_push, dt):
    s = SrbState.standing(params)
    f = FootForces(_push_forces(front, hind), feet)
    for _ in range(int(round(T_push / dt))):
        s = integrate_step(s, f, params, dt)
    return s


def _flight(params: RobotParams, s: SrbState, z_land: float):
    """Ballistic landing time and pitch change (the attitude rotates about y only)."""
    g = params.gravity
    dz = s.p[2] - z_land
    t = (s.pdot[2] + math.sqrt(s.pdot[2] ** 2 + 2 * g * dz)) / g
    return t, s.omega[1] * t


def _damped(x0: float, v0: float, wn: float, t: float):
    """Position, velocity and acceleration of a critically damped response from ``(x0, v0)`` to 0."""
    e = math.exp(-wn * t)
    b = v0 + wn * x0
    x = (x0 + b * t) * e
    v = (b - wn * (x0 + b * t)) * e
    a = (-2 * wn * b + wn**2 * (x0 + b * t)) * e
    return x, v, a


def generate_backflip(
    params: RobotParams | None = None,
    T_pre: float = 0.2,
    T_push: float = 0.15,
    flight_time: float = 0.45,
    T_post: float = 0.8,
    dt: float = 1e-3,
    wn_height: float = 6.0,
    wn_pitch: float = 5.0,
) -> ReferenceTrajectory:
    params = params or RobotParams()
    s0 = SrbState.standing(params)
    feet = s0.p + params.hip_offsets
    feet[:, 2] = 0.0
    z0 = s0.p[2]

    def residual(x):
        s = _stance_end(params, feet, x[0], x[1], T_push, dt)
        t_f, _ = _flight(params, s, z0)
        pitch = math.atan2(-s.R[2, 0], s.R[0, 0])  # rotation about y so far
        return [t_f - flight_time, pitch + s.omega[1] * t_f + 2 * math.pi]

    guess = [params.weight * 1.5, params.weight]
    front, hind = fsolve(residual, guess, xtol=1e-12)

    ts, ps, vs, Rs, ws, us, cs = [], [], [], [], [], [], []

    def record(t, s, u, c):
        ts.append(t)
        ps.append(s.p)
        vs.append(s.pdot)
        Rs.append(s.R)
        ws.append(s.omega)
        us.append(np.asarray(u).ravel())
        cs.append(c)

    t, s = 0.0, s0
    stand = even_support(np.ones(4, bool), params)
    n_pre = int(round(T_pre / dt))
    for _ in range(n_pre):
        record(t, s, stand, [True] * 4)
        t += dt
    push = _push_forces(front, hind)
    for _ in range(int(round(T_push / dt))):
        record(t, s, push, [True] * 4)
        s = integrate_step(s, FootForces(push, feet), params, dt)
        t += dt
    zero = np.zeros(12)
    no_feet = FootForces(np.zeros((4, 3)), feet)
    t_f, _ = _flight(params, s, z0)
    n_flight = int(math.floor(t_f / dt))
    for _ in range(n_flight):
        record(t, s, zero, [False] * 4)
        s = integrate_step(s, no_feet, params, dt)
        t += dt
    # catch: height and pitch return to the stand along critically damped arcs
    z_td, vz_td = float(s.p[2]), float(s.pdot[2])
    th_td = math.atan2(-s.R[2, 0], s.R[0, 0])
    w_td = float(s.omega[1])
    I_yy = params.inertia[1, 1]
    half = 0.5 * params.body_length
    for k in range(int(round(T_post / dt))):
        tc = k * dt
        z, vz, az = _damped(z_td - z0, vz_td, wn_height, tc)
        th, w, al = _damped(th_td, w_td, wn_pitch, tc)
        Fz = params.mass * (az + params.gravity)
        # pitch torque about y from the front/hind split: tau_y = half (F_front - F_hind)
        d = I_yy * al / half
        u = np.zeros((4, 3))
        u[:2, 2] = 0.25 * (Fz + d)
        u[2:, 2] = 0.25 * (Fz - d)
        st = SrbState(np.array([s.p[0], s.p[1], z0 + z]), np.array([0.0, 0.0, vz]), rot_y(th), np.array([0.0, w, 0.0]))
        record(t, st, u, [True] * 4)
        t += dt
    traj = ReferenceTrajectory(
        np.array(ts), ps, vs, np.array(Rs), ws, us, np.array(cs),
        {"maneuver": "backflip", "push": (float(front), float(hind)), "touchdown": T_pre + T_push + n_flight * dt},
    )
    return traj


if __name__ == "__main__":  # pragma: no cover
    save_trajectory(generate_backflip(), DATA_FILE)
    print(f"wrote {DATA_FILE}")
