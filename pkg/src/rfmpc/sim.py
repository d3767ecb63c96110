"""Closed-loop experiment harness.

The plant is the nonlinear single-rigid-body model stepped at 1 ms. The
controller runs at the preset's MPC rate and its command is held between
ticks. Contacts follow the reference schedule; a leg's foot is placed when it
touches down and stays put for the rest of its stance. Runs are deterministic.

Experiments are described by :class:`ExperimentConfig`, usually loaded from
the bundled YAML presets (``data/experiments.yaml``). A study
(:func:`run_study`) wraps one or more closed-loop runs (:func:`run_experiment`)
and evaluates the pass/fail checks listed in the configuration.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .dynamics import N_LEGS, LEGS, FootForces, RobotParams, SrbState, Wrench, integrate_step, point_force_wrench
from .ea_baseline import EaMpcController, singularity_metric_R
from .gait import (
    GaitTiming,
    ReferenceTrajectory,
    bounding_profile,
    contact_flags,
    foothold_plan,
    load_trajectory,
    ramp_profile,
)
from .linearize import SCHEMES
from .mpc import GainSet, ReferenceWindow, RfMpcController, even_support, gain_preset
from .so3 import exp_so3, log_so3, project_to_so3, rot_y

log = logging.getLogger(__name__)

EXPERIMENTS = ("pose", "trot_walk", "bound", "twist_jump", "backflip_replay", "lin_compare", "ea_compare")
CONTROLLERS = ("rf", "ea", "open_loop")
PLANT_DT = 1e-3
CSV_VERSION = 1
PRESET_FILE = Path(__file__).with_name("data") / "experiments.yaml"

DEFAULT_GAINS = {
    "pose": "sim_pose",
    "ea_compare": "sim_pose",
    "trot_walk": "sim_trot_walk",
    "bound": "sim_bound",
    "lin_compare": "sim_bound",
    "twist_jump": "acro",
    "backflip_replay": "acro",
}


class ConfigError(ValueError):
    pass


class IoError(OSError):
    pass


class ControllerError(RuntimeError):
    """A controller failure, tagged with the MPC tick and time at which it happened."""

    def __init__(self, tick: int, t: float, cause: BaseException):
        super().__init__(f"controller failed at tick {tick} (t = {t:.3f} s): {cause!r}")
        self.tick = tick
        self.t = t
        self.cause = cause


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class DisturbanceSpec:
    """External force at a body-fixed point; magnitude is ``peak`` times a piecewise-linear profile.

    ``knots`` are ``(time, fraction)`` pairs; the profile is held at its end
    values outside the knot range.
    """

    body_point: tuple = (0.15, -0.1, 0.0)
    direction: tuple = (0.0, 1.0, 0.0)
    peak: float = 27.0
    knots: tuple = ((1.0, 0.0), (1.1, 1.0), (1.3, 1.0), (1.4, 0.0))

    def __post_init__(self):
        self.body_point = np.asarray(self.body_point, float).reshape(3)
        d = np.asarray(self.direction, float).reshape(3)
        if np.linalg.norm(d) == 0:
            raise ConfigError("disturbance direction must be non-zero")
        self.direction = d / np.linalg.norm(d)
        if self.peak < 0:
            raise ConfigError("disturbance peak must be non-negative")
        k = np.asarray(self.knots, float).reshape(-1, 2)
        if len(k) < 1 or np.any(np.diff(k[:, 0]) <= 0):
            raise ConfigError("disturbance knot times must be strictly increasing")
        self.knots = k

    def magnitude(self, t: float) -> float:
        return self.peak * float(np.interp(t, self.knots[:, 0], self.knots[:, 1]))

    def force(self, t: float) -> np.ndarray:
        return self.magnitude(t) * self.direction

    def wrench(self, state: SrbState, t: float) -> Wrench | None:
        f = self.force(t)
        if not f.any():
            return None
        return point_force_wrench(state, f, self.body_point)


@dataclass
class ExperimentConfig:
    experiment: str
    params: RobotParams = field(default_factory=RobotParams)
    gains: GainSet | None = None
    timing: GaitTiming | None = None
    scheme: str = "op"
    controller: str = "rf"
    disturbance: DisturbanceSpec | None = None
    duration: float = 1.0
    seed: int = 0
    out: Path | None = None
    options: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.gains is None:
            self.gains = gain_preset(DEFAULT_GAINS[self.experiment])
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}")
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        ref = self.options.get("reference_file")
        if ref is not None and not Path(ref).is_file():
            raise ConfigError(f"reference file {ref} does not exist")
        self.name = self.name or self.experiment

    @property
    def plant_steps(self) -> int:
        return int(round(self.duration / PLANT_DT))


def _gains_from(spec) -> GainSet:
    if isinstance(spec, GainSet):
        return spec
    if isinstance(spec, str):
        return gain_preset(spec)
    spec = dict(spec)
    base = gain_preset(spec.pop("preset"))
    return base.with_updates(**spec) if spec else base


def _timing_from(spec) -> GaitTiming | None:
    if spec is None or isinstance(spec, GaitTiming):
        return spec
    spec = dict(spec)
    gait = spec.pop("gait", "trot")
    if gait == "trot":
        return GaitTiming.trot(**spec)
    if gait == "bound":
        return GaitTiming.bound(**spec)
    return GaitTiming(name=gait, **spec)


def config_from_dict(d: dict, name: str = "") -> ExperimentConfig:
    d = dict(d)
    try:
        dist = d.pop("disturbance", None)
        return ExperimentConfig(
            experiment=d.pop("experiment"),
            params=RobotParams(**d.pop("params", {})),
            gains=_gains_from(d.pop("gains")) if "gains" in d else None,
            timing=_timing_from(d.pop("timing", None)),
            disturbance=None if dist is None else DisturbanceSpec(**dist),
            out=Path(d.pop("out")) if d.get("out") else d.pop("out", None),
            name=d.pop("name", name),
            **d,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid experiment configuration {name!r}: {exc}") from None


def load_presets(path=None) -> dict:
    path = Path(path) if path is not None else PRESET_FILE
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of preset names")
    return data


def load_config(preset: str, path=None, **overrides) -> ExperimentConfig:
    """Named preset from the bundled (or given) YAML file, with field overrides applied."""
    presets = load_presets(path)
    if preset not in presets:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(presets)}")
    cfg = config_from_dict(presets[preset], preset)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# Scenarios


Desired = Callable[[float], tuple]


@dataclass
class Scenario:
    """Reference, initial condition and foothold policy of one closed-loop run.

    ``desired(t)`` returns ``(SrbState, u (12,), contacts (4,))``.
    ``touchdown(i, t, state)`` places foot ``i`` when it touches down and
    ``predict(i, t, state, t_td)`` estimates where it will land at ``t_td``.
    """

    desired: Desired
    state0: SrbState
    feet0: np.ndarray
    frames0: np.ndarray | None = None
    touchdown: Callable | None = None
    predict: Callable | None = None
    ground_frame: np.ndarray = field(default_factory=lambda: np.eye(3))
    meta: dict = field(default_factory=dict)


def _hip_point(state: SrbState, params: RobotParams, i: int) -> np.ndarray:
    return state.p + state.R @ params.hip_offsets[i]


def _hip_velocity(state: SrbState, params: RobotParams, i: int) -> np.ndarray:
    return state.pdot + state.R @ np.cross(state.omega, params.hip_offsets[i])


def _capture_policy(desired: Desired, params: RobotParams, T_st: float, z0: float):
    def touchdown(i, t, s):
        v_des = desired(t)[0].pdot
        return foothold_plan(_hip_point(s, params, i), _hip_velocity(s, params, i), v_des, T_st, z0, params.gravity)

    def predict(i, t, s, t_td):
        v_des = desired(t_td)[0].pdot
        hip = _hip_point(s, params, i) + (t_td - t) * desired(t)[0].pdot
        return foothold_plan(hip, _hip_velocity(s, params, i), v_des, T_st, z0, params.gravity)

    return touchdown, predict


def _hip_policy(desired: Desired, params: RobotParams):
    """Landing feet straight below the hips (actual at touchdown, reference when predicted)."""

    def touchdown(i, t, s):
        f = _hip_point(s, params, i)
        f[2] = 0.0
        return f

    def predict(i, t, s, t_td):
        f = _hip_point(desired(t_td)[0], params, i)
        f[2] = 0.0
        return f

    return touchdown, predict


def _feet_under_hips(state: SrbState, params: RobotParams) -> np.ndarray:
    feet = state.p + (state.R @ params.hip_offsets.T).T
    feet[:, 2] = 0.0
    return feet


def pose_scenario(cfg: ExperimentConfig) -> Scenario:
    """Fixed feet under the standing hips; hold a commanded attitude.

    ``delta`` is the angle (rad) of the command from the singular pose, taken
    about +y: ``R_d = R_s rot_y(-delta)`` with ``R_s = rot_y(pi/2)``, so
    ``delta = 0`` is gimbal lock. Without ``delta`` the command is ``R_d = I``.
    The robot starts at rest at ``R_d exp(hat(initial_rotvec))``.
    """
    params = cfg.params
    o = cfg.options
    stand = SrbState.standing(params)
    if "delta" in o:
        R_d = rot_y(math.pi / 2 - float(o["delta"]))
    else:
        R_d = np.eye(3)
    base = {"singular": rot_y(math.pi / 2), "upright": np.eye(3)}.get(o.get("start"), R_d)
    R0 = base @ exp_so3(np.asarray(o.get("initial_rotvec", (0.0, 0.0, 0.0)), float))
    p0 = stand.p + np.asarray(o.get("initial_offset", (0.0, 0.0, 0.0)), float)
    target = SrbState(stand.p, np.zeros(3), R_d, np.zeros(3))
    u = even_support(np.ones(N_LEGS, bool), params)
    c = np.ones(N_LEGS, bool)
    return Scenario(
        lambda t: (target, u, c),
        SrbState(p0, np.zeros(3), R0, np.zeros(3)),
        _feet_under_hips(stand, params),
    )


def trot_scenario(cfg: ExperimentConfig) -> Scenario:
    params, o = cfg.params, cfg.options
    timing = cfg.timing or GaitTiming.trot()
    v_cmd = np.asarray(o.get("v_cmd", (0.5, 0.0, 0.0)), float)
    accel = float(o.get("accel", 0.5))
    speed = float(np.linalg.norm(v_cmd))
    direction = v_cmd / speed if speed > 0 else np.zeros(3)
    p0 = np.array([0.0, 0.0, params.stand_height])

    def desired(t):
        dist, vel = ramp_profile(t, speed, accel)
        c = contact_flags(timing, t)
        s = SrbState(p0 + float(dist) * direction, float(vel) * direction, np.eye(3), np.zeros(3))
        return s, even_support(c, params), c

    s0 = desired(0.0)[0]
    td, pr = _capture_policy(desired, params, timing.T_st, params.stand_height)
    return Scenario(desired, s0, _feet_under_hips(s0, params), touchdown=td, predict=pr)


def bound_scenario(cfg: ExperimentConfig) -> Scenario:
    """Impulse-scaled bounding with the forward speed ramped to ``speed``.

    Without ``accel`` the speed is constant from the start. The plant may
    start off the orbit via ``initial_rotvec`` (body frame) and
    ``initial_omega`` (body rate added to the reference).
    """
    params, o = cfg.params, cfg.options
    timing = cfg.timing or GaitTiming.bound()
    prof = bounding_profile(params, timing)
    v_max = float(o.get("speed", 1.0))
    accel = o.get("accel")

    def speed_at(t):
        if accel is None:
            return v_max * t, v_max
        d, v = ramp_profile(t, v_max, float(accel))
        return float(d), float(v)

    def desired(t):
        dist, v = speed_at(t)
        z, zd, th, om, _, _ = prof.state(t)
        s = SrbState(
            np.array([dist, 0.0, float(z)]), np.array([v, 0.0, float(zd)]), rot_y(float(th)),
            np.array([0.0, float(om), 0.0]),
        )
        fs, hs = bool(prof.front_stance(t)), bool(prof.hind_stance(t))
        return s, prof.leg_forces(t, v, params), np.array([fs, fs, hs, hs])

    s_ref = desired(0.0)[0]
    s0 = SrbState(
        s_ref.p, s_ref.pdot,
        s_ref.R @ exp_so3(np.asarray(o.get("initial_rotvec", (0.0, 0.0, 0.0)), float)),
        s_ref.omega + np.asarray(o.get("initial_omega", (0.0, 0.0, 0.0)), float),
    )
    td, pr = _capture_policy(desired, params, timing.T_st, prof.height)
    feet0 = np.array([td(i, 0.0, s_ref) for i in range(N_LEGS)])
    meta = {"profile": prof, "period": prof.period}
    return Scenario(desired, s0, feet0, touchdown=td, predict=pr, meta=meta)


@functools.lru_cache(maxsize=8)
def _twist_jump_cached(params_key: tuple, slope_deg: float, seed: int):
    from .twist_jump import solve_twist_jump

    params = RobotParams(mass=params_key[0], inertia=np.array(params_key[1]).reshape(3, 3))
    return solve_twist_jump(params, slope_deg, seed=seed)


def _params_key(params: RobotParams) -> tuple:
    return (params.mass, tuple(params.inertia.ravel()))


def _trajectory_desired(traj: ReferenceTrajectory) -> Desired:
    return traj.sample


def twist_jump_scenario(cfg: ExperimentConfig) -> Scenario:
    """Optimized jump at ``slope_deg``; the plant may start on a different slope (``start_slope_deg``)."""
    from .twist_jump import TwistJumpSetup

    params, o = cfg.params, cfg.options
    slope = float(o.get("slope_deg", 45.0))
    res = _twist_jump_cached(_params_key(params), slope, cfg.seed)
    traj = res.trajectory
    start = float(o.get("start_slope_deg", slope))
    p0, R0, feet = TwistJumpSetup(params, slope).initial_pose(start)
    desired = _trajectory_desired(traj)
    td, pr = _hip_policy(desired, params)
    frames = np.tile(rot_y(-math.radians(start)), (N_LEGS, 1, 1))
    meta = {"touchdown": traj.meta["touchdown"], "durations": traj.meta["durations"], "reference": traj}
    return Scenario(desired, SrbState(p0, np.zeros(3), R0, np.zeros(3)), feet, frames, td, pr, meta=meta)


def backflip_scenario(cfg: ExperimentConfig) -> Scenario:
    from .backflip import DATA_FILE

    params = cfg.params
    traj = load_trajectory(cfg.options.get("reference_file", DATA_FILE))
    desired = _trajectory_desired(traj)
    s0 = desired(traj.t[0])[0]
    td, pr = _hip_policy(desired, params)
    flight = ~traj.contacts.any(axis=1)
    meta = {"reference": traj, "flight": (float(traj.t[flight][0]), float(traj.t[flight][-1]))}
    return Scenario(desired, s0, _feet_under_hips(s0, params), touchdown=td, predict=pr, meta=meta)


SCENARIOS = {
    "pose": pose_scenario,
    "ea_compare": pose_scenario,
    "trot_walk": trot_scenario,
    "bound": bound_scenario,
    "lin_compare": bound_scenario,
    "twist_jump": twist_jump_scenario,
    "backflip_replay": backflip_scenario,
}


# ---------------------------------------------------------------------------
# Closed loop


@dataclass
class RunLog:
    """Per-tick records of one closed-loop run plus the 1 ms plant trace."""

    label: str
    t: np.ndarray
    p: np.ndarray
    pdot: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    u_cmd: np.ndarray
    p_d: np.ndarray
    pdot_d: np.ndarray
    R_d: np.ndarray
    omega_d: np.ndarray
    contacts: np.ndarray
    iterations: np.ndarray
    kkt_residual: np.ndarray
    fallback: np.ndarray
    solve_time: np.ndarray
    kinv: np.ndarray
    phi: np.ndarray
    plant_t: np.ndarray
    plant_p: np.ndarray
    plant_pdot: np.ndarray
    plant_R: np.ndarray
    plant_omega: np.ndarray
    diverged: bool = False
    fail_time: float | None = None
    fail_reason: str = ""
    error: ControllerError | None = None
    wall_time: float = 0.0

    @property
    def ticks(self) -> int:
        return self.t.size

    @property
    def e_p(self) -> np.ndarray:
        return np.linalg.norm(self.p - self.p_d, axis=1)

    @property
    def e_R_vec(self) -> np.ndarray:
        """``log(R_d' R)`` per tick."""
        return np.array([log_so3(Rd.T @ R) for Rd, R in zip(self.R_d, self.R)]).reshape(-1, 3)

    @property
    def e_R(self) -> np.ndarray:
        return np.linalg.norm(self.e_R_vec, axis=1)

    @property
    def e_v(self) -> np.ndarray:
        return self.pdot - self.pdot_d

    def final_position_error(self) -> float:
        return float(self.e_p[-1]) if self.ticks else math.inf

    def columns(self) -> list[str]:
        cols = ["t"]
        for name, n in (("p", 3), ("pdot", 3), ("R", 9), ("omega", 3), ("u", 12),
                        ("p_d", 3), ("pdot_d", 3), ("R_d", 9), ("omega_d", 3)):
            if name in ("R", "R_d"):
                cols += [f"{name}_{r}{c}" for c in range(3) for r in range(3)]
            elif name == "u":
                cols += [f"u_{leg}_{a}" for leg in LEGS for a in "xyz"]
            else:
                cols += [f"{name}_{a}" for a in "xyz"]
        cols += [f"contact_{leg}" for leg in LEGS]
        cols += ["qp_iterations", "kkt_residual", "fallback", "e_p", "e_R", "kappa_inv", "phi"]
        return cols

    def rows(self):
        e_p, e_R = self.e_p, self.e_R
        for k in range(self.ticks):
            vals = np.concatenate([
                [self.t[k]], self.p[k], self.pdot[k], self.R[k].flatten(order="F"), self.omega[k],
                self.u_cmd[k], self.p_d[k], self.pdot_d[k], self.R_d[k].flatten(order="F"), self.omega_d[k],
            ])
            yield (
                [f"{v:.9g}" for v in vals]
                + [str(int(c)) for c in self.contacts[k]]
                + [str(int(self.iterations[k])), f"{self.kkt_residual[k]:.3g}", str(int(self.fallback[k]))]
                + [f"{e_p[k]:.9g}", f"{e_R[k]:.9g}", f"{self.kinv[k]:.9g}", f"{self.phi[k]:.9g}"]
            )

    def to_csv(self, path) -> None:
        """Fixed column schema; wall-clock solve times are left out so reruns are byte-identical."""
        path = Path(path)
        if not path.parent.is_dir():
            raise IoError(f"output directory {path.parent} does not exist")
        try:
            with open(path, "w", newline="") as f:
                f.write(f"# rfmpc run log v{CSV_VERSION} label={self.label}\n")
                w = csv.writer(f, lineterminator="\n")
                w.writerow(self.columns())
                w.writerows(self.rows())
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc


def prediction_quality(R_bar: np.ndarray, R_actual: np.ndarray) -> np.ndarray:
    """``Phi`` per tick from predicted rotations ``R_bar`` and realized ones, both ``(T, N, 3, 3)``.

    ``Phi = sum_k ||proj(R_bar_k) - R_bar_k||_F + ||log(R_actual_k' proj(R_bar_k))||``.
    Ticks with any non-finite entry give NaN.
    """
    R_bar = np.asarray(R_bar, float)
    R_actual = np.asarray(R_actual, float)
    T, N = R_bar.shape[:2]
    out = np.full(T, np.nan)
    for m in range(T):
        if not (np.isfinite(R_bar[m]).all() and np.isfinite(R_actual[m]).all()):
            continue
        total = 0.0
        for k in range(N):
            Rt = project_to_so3(R_bar[m, k])
            total += np.linalg.norm(Rt - R_bar[m, k]) + np.linalg.norm(log_so3(R_actual[m, k].T @ Rt))
        out[m] = total
    return out


def _aligned_actual(tick_t, horizon, dt_pred, plant_t, plant_R) -> np.ndarray:
    """Realized rotations at ``t_m + k dt_pred``, ``k = 1..N``; NaN beyond the trace."""
    out = np.full((tick_t.size, horizon, 3, 3), np.nan)
    for m, t in enumerate(tick_t):
        for k in range(horizon):
            j = int(round((t + (k + 1) * dt_pred - plant_t[0]) / PLANT_DT))
            if j < plant_t.size:
                out[m, k] = plant_R[j]
    return out


def _window(scn: Scenario, t: float, state: SrbState, feet, frames, in_contact, horizon, dt_pred):
    samples = [scn.desired(t + k * dt_pred) for k in range(horizon + 1)]
    contacts = np.array([c for _, _, c in samples[:horizon]])
    feet_p = feet.copy()
    frames_p = frames.copy()
    if scn.predict is not None:
        for i in range(N_LEGS):
            if in_contact[i]:
                continue
            k = np.flatnonzero(contacts[:, i])
            if k.size:
                feet_p[i] = scn.predict(i, t, state, t + k[0] * dt_pred)
                frames_p[i] = scn.ground_frame
    return ReferenceWindow(
        [s.p for s, _, _ in samples],
        [s.pdot for s, _, _ in samples],
        [s.R for s, _, _ in samples],
        [s.omega for s, _, _ in samples],
        [u * np.repeat(c, 3) for _, u, c in samples[:horizon]],
        contacts,
        feet_p,
        frames_p,
    )


def _make_controller(kind: str, cfg: ExperimentConfig, scheme: str, inequalities: bool):
    if kind == "rf":
        return RfMpcController(cfg.params, cfg.gains, scheme, inequalities)
    if kind == "ea":
        return EaMpcController(cfg.params, cfg.gains, inequalities)
    return None


def run_experiment(
    config: ExperimentConfig,
    controller: str | None = None,
    scheme: str | None = None,
    label: str | None = None,
    raise_errors: bool = True,
    scenario: Scenario | None = None,
) -> RunLog:
    """Simulate one closed-loop run.

    ``scenario`` overrides the one built from the experiment name.

    Controller exceptions are re-raised as :class:`ControllerError` carrying
    the tick index, unless ``raise_errors`` is false, in which case the run
    stops and the log records the error. The run also stops early once the
    state diverges (non-finite, or errors beyond ``options.fail_e_R`` rad /
    ``options.fail_e_p`` m when ``options.stop_on_divergence`` is set).
    """
    cfg = config
    kind = controller or cfg.controller
    scheme = scheme or cfg.scheme
    o = cfg.options
    inequalities = bool(o.get("inequalities", True))
    scn = scenario if scenario is not None else SCENARIOS[cfg.experiment](cfg)
    params, gains = cfg.params, cfg.gains
    N, dtp = gains.horizon, gains.dt_pred
    ctrl = _make_controller(kind, cfg, scheme, inequalities)
    fail_e_R = float(o.get("fail_e_R", 1.0))
    fail_e_p = float(o.get("fail_e_p", 0.5))
    stop_on_div = bool(o.get("stop_on_divergence", False))

    rng = np.random.default_rng(cfg.seed)
    s = scn.state0.copy()
    noise = float(o.get("initial_velocity_noise", 0.0))
    if noise > 0:
        s = SrbState(s.p, s.pdot + noise * rng.standard_normal(3), s.R, s.omega + noise * rng.standard_normal(3))
    feet = np.asarray(scn.feet0, float).copy()
    frames = np.tile(np.eye(3), (N_LEGS, 1, 1)) if scn.frames0 is None else np.asarray(scn.frames0, float).copy()

    rec = {k: [] for k in ("t", "p", "pdot", "R", "omega", "u", "p_d", "pdot_d", "R_d", "omega_d", "c",
                           "it", "kkt", "fb", "st", "kinv", "Rbar")}
    n = cfg.plant_steps
    plant_t = np.zeros(n + 1)
    plant_p = np.zeros((n + 1, 3))
    plant_v = np.zeros((n + 1, 3))
    plant_R = np.zeros((n + 1, 3, 3))
    plant_w = np.zeros((n + 1, 3))
    plant_t[0], plant_p[0], plant_v[0], plant_R[0], plant_w[0] = 0.0, s.p, s.pdot, s.R, s.omega

    c_prev = np.asarray(scn.desired(0.0)[2], bool)
    u = np.zeros(12)
    tick = 0
    diverged, fail_time, fail_reason, error = False, None, "", None
    wall0 = time.perf_counter()
    last = n
    for j in range(n):
        t = j * PLANT_DT
        d_state, d_u, c = scn.desired(t)
        c = np.asarray(c, bool)
        if scn.touchdown is not None:
            for i in np.flatnonzero(c & ~c_prev):
                feet[i] = scn.touchdown(i, t, s)
                frames[i] = scn.ground_frame
        c_prev = c
        if t >= tick / gains.f_mpc - 1e-9:
            if ctrl is not None:
                ref = _window(scn, t, s, feet, frames, c, N, dtp)
                try:
                    sol = ctrl.step(s, ref)
                except Exception as exc:
                    err = ControllerError(tick, t, exc)
                    if raise_errors:
                        raise err from exc
                    error, diverged, fail_time, fail_reason = err, True, t, f"controller error: {exc}"
                    last = j
                    break
                u = sol.u_cmd
                rec["it"].append(sol.iterations)
                rec["kkt"].append(sol.kkt_residual)
                rec["fb"].append(sol.fallback)
                rec["st"].append(sol.solve_time)
                rec["Rbar"].append(sol.predicted_rotations())
            else:
                u = d_u * np.repeat(c, 3)
                rec["it"].append(0)
                rec["kkt"].append(0.0)
                rec["fb"].append(False)
                rec["st"].append(0.0)
                rec["Rbar"].append(np.full((N, 3, 3), np.nan))
            for key, val in (("t", t), ("p", s.p), ("pdot", s.pdot), ("R", s.R), ("omega", s.omega), ("u", u),
                             ("p_d", d_state.p), ("pdot_d", d_state.pdot), ("R_d", d_state.R),
                             ("omega_d", d_state.omega), ("c", c), ("kinv", singularity_metric_R(s.R))):
                rec[key].append(np.array(val, copy=True))
            tick += 1
            e_R = np.linalg.norm(log_so3(d_state.R.T @ s.R))
            e_p = np.linalg.norm(s.p - d_state.p)
            if stop_on_div and (e_R > fail_e_R or e_p > fail_e_p):
                diverged, fail_time = True, t
                fail_reason = f"|e_R| = {e_R:.2f} rad, |e_p| = {e_p:.2f} m"
                last = j
                break
        if ctrl is None:
            u = d_u * np.repeat(c, 3)
        forces = FootForces((u * np.repeat(c, 3)).reshape(N_LEGS, 3), feet)
        ext = cfg.disturbance.wrench(s, t) if cfg.disturbance is not None else None
        s = integrate_step(s, forces, params, PLANT_DT, ext)
        if not (np.isfinite(s.p).all() and np.isfinite(s.omega).all()):
            diverged, fail_time, fail_reason = True, t, "non-finite state"
            last = j
            break
        plant_t[j + 1], plant_p[j + 1], plant_v[j + 1], plant_R[j + 1], plant_w[j + 1] = (
            t + PLANT_DT, s.p, s.pdot, s.R, s.omega,
        )
    wall = time.perf_counter() - wall0
    keep = (last + 1) if last < n else n + 1
    ticks_t = np.array(rec["t"], float)
    R_bar = np.array(rec["Rbar"]).reshape(-1, N, 3, 3)
    R_act = _aligned_actual(ticks_t, N, dtp, plant_t[:keep], plant_R[:keep])
    phi = prediction_quality(R_bar, R_act) if ticks_t.size else np.zeros(0)

    def arr(key, shape):
        return np.array(rec[key], float).reshape((-1,) + shape)

    return RunLog(
        label=label or f"{cfg.name}:{kind}" + (f":{scheme}" if kind == "rf" else ""),
        t=ticks_t, p=arr("p", (3,)), pdot=arr("pdot", (3,)), R=arr("R", (3, 3)), omega=arr("omega", (3,)),
        u_cmd=arr("u", (12,)), p_d=arr("p_d", (3,)), pdot_d=arr("pdot_d", (3,)), R_d=arr("R_d", (3, 3)),
        omega_d=arr("omega_d", (3,)), contacts=np.array(rec["c"], bool).reshape(-1, N_LEGS),
        iterations=np.array(rec["it"], int), kkt_residual=np.array(rec["kkt"], float),
        fallback=np.array(rec["fb"], bool), solve_time=np.array(rec["st"], float), kinv=np.array(rec["kinv"], float),
        phi=phi, plant_t=plant_t[:keep], plant_p=plant_p[:keep], plant_pdot=plant_v[:keep],
        plant_R=plant_R[:keep], plant_omega=plant_w[:keep],
        diverged=diverged, fail_time=fail_time, fail_reason=fail_reason, error=error, wall_time=wall,
    )


# ---------------------------------------------------------------------------
# Metrics


def unwrapped_pitch(R: np.ndarray) -> np.ndarray:
    """Continuous ``log(R)_y`` along a trace of rotations about y."""
    return np.unwrap(np.array([log_so3(Rk)[1] for Rk in R]))


def poincare_section(log_: RunLog, period: float, t_start: float = 0.0, scale=(1.0, 1.0)) -> np.ndarray:
    """``(theta, omega_y)`` at every period boundary after ``t_start``, divided by ``scale``."""
    th = unwrapped_pitch(log_.plant_R)
    w = log_.plant_omega[:, 1]
    times = np.arange(math.ceil(t_start / period - 1e-9), math.floor(log_.plant_t[-1] / period + 1e-9) + 1) * period
    idx = np.round(times / PLANT_DT).astype(int)
    idx = idx[idx < log_.plant_t.size]
    return np.stack([th[idx] / scale[0], w[idx] / scale[1]], axis=1)


def poincare_distances(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(points, axis=0), axis=1)


def _window_mask(t, lo, hi):
    return (t >= lo - 1e-9) & (t < hi - 1e-9)


# ---------------------------------------------------------------------------
# Studies


@dataclass
class Check:
    value: float
    threshold: float
    op: str  # "<", "<=", ">", ">="

    @property
    def passed(self) -> bool:
        v = self.value
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return False
        return {"<": v < self.threshold, "<=": v <= self.threshold,
                ">": v > self.threshold, ">=": v >= self.threshold}[self.op]

    def describe(self) -> str:
        return f"{self.value:.4g} {self.op} {self.threshold:.4g}"


@dataclass
class StudyResult:
    name: str
    experiment: str
    runs: dict
    metrics: dict
    checks: dict
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())


def _check(cfg: ExperimentConfig, key: str, value, default_threshold, op: str, out: dict):
    thr = cfg.checks.get(key, default_threshold)
    if thr is not None:
        out[key] = Check(float(value), float(thr), op)


def _study_single(cfg: ExperimentConfig):
    log_ = run_experiment(cfg)
    return {log_.label: log_}, log_


def _study_pose(cfg):
    runs, lg = _study_single(cfg)
    m = {"final_e_p": lg.final_position_error(), "final_e_R": float(lg.e_R[-1]), "ticks": lg.ticks}
    checks = {}
    _check(cfg, "final_e_p", m["final_e_p"], 0.005, "<", checks)
    return runs, m, checks


def _study_trot(cfg):
    runs, lg = _study_single(cfg)
    settle = float(cfg.options.get("settle", 2.0))
    mask = lg.t >= settle
    e_v = np.abs(lg.e_v[mask]).max(axis=0)
    e_R = np.abs(lg.e_R_vec[mask]).max(axis=0)
    period = (cfg.timing or GaitTiming.trot()).period
    last = lg.t >= lg.t[-1] - period
    m = {
        "max_vel_error_xyz": e_v.tolist(),
        "max_att_error_xyz": e_R.tolist(),
        "final_speed": float(lg.pdot[last, 0].mean()),
        "wall_time": lg.wall_time,
        "median_solve_ms": float(np.median(lg.solve_time) * 1e3),
    }
    checks = {}
    _check(cfg, "max_vel_error", e_v.max(), 0.1, "<=", checks)
    _check(cfg, "max_att_error", e_R.max(), 0.02, "<=", checks)
    v_target = float(np.linalg.norm(cfg.options.get("v_cmd", (0.5, 0, 0))))
    _check(cfg, "final_speed_error", abs(m["final_speed"] - v_target), 0.05, "<=", checks)
    _check(cfg, "wall_time", lg.wall_time, None, "<=", checks)
    return runs, m, checks


def _bound_orbit_scale(cfg) -> tuple:
    prof = bounding_profile(cfg.params, cfg.timing or GaitTiming.bound())
    t = np.linspace(0.0, prof.period, 2001)
    _, _, th, om, _, _ = prof.state(t)
    return prof.period, (float(np.abs(th).max()), float(np.abs(om).max()))


def _study_bound(cfg):
    runs, lg = _study_single(cfg)
    period, scale = _bound_orbit_scale(cfg)
    speed = float(cfg.options.get("speed", 1.0))
    pts = poincare_section(lg, period, float(cfg.options.get("poincare_start", 0.0)), scale)
    d = poincare_distances(pts)
    third = max(1, d.size // 3)
    last_sec = lg.t >= lg.t[-1] - 1.0
    m = {
        "poincare_distances": d.tolist(),
        "poincare_final": float(d[-1]) if d.size else math.nan,
        "poincare_first_third_mean": float(d[:third].mean()) if d.size else math.nan,
        "poincare_last_third_mean": float(d[-third:].mean()) if d.size else math.nan,
        "mean_speed_last_second": float(lg.pdot[last_sec, 0].mean()),
        "max_e_R": float(lg.e_R.max()),
        "orbit_scale": list(scale),
    }
    checks = {}
    _check(cfg, "poincare_final", m["poincare_final"], 0.05, "<", checks)
    _check(cfg, "poincare_trend", m["poincare_last_third_mean"] - m["poincare_first_third_mean"], 0.0, "<=", checks)
    _check(cfg, "speed_error", abs(m["mean_speed_last_second"] - speed), 0.1, "<=", checks)
    return runs, m, checks


def _twist_metrics(cfg, lg: RunLog, durations, touchdown) -> dict:
    d0, d1, _ = durations
    hind = _window_mask(lg.t, d0, d0 + d1)
    flight = _window_mask(lg.t, d0 + d1, touchdown)
    k_land = int(np.searchsorted(lg.t, touchdown - 1e-9))
    plant_land = int(round(touchdown / PLANT_DT))
    if plant_land < lg.plant_t.size:
        ref_state = SCENARIOS["twist_jump"](cfg).desired(touchdown)[0]
        e_land = float(np.linalg.norm(log_so3(ref_state.R.T @ lg.plant_R[plant_land])))
    else:
        e_land = math.nan
    return {
        "kinv_min_hind_stance": float(lg.kinv[hind].min()) if hind.any() else math.nan,
        "max_e_R_flight": float(lg.e_R[flight].max()) if flight.any() else math.nan,
        "e_R_landing": e_land,
        "max_e_R": float(lg.e_R[: k_land + 1].max()),
        "diverged": lg.diverged,
        "fail_time": lg.fail_time,
    }


def _study_twist_jump(cfg):
    o = cfg.options
    runs, m = {}, {}
    controllers = list(o.get("controllers", [cfg.controller]))
    for kind in controllers:
        lg = run_experiment(cfg, controller=kind, raise_errors=False)
        runs[lg.label] = lg
    scn = SCENARIOS["twist_jump"](cfg)
    for label, lg in runs.items():
        m[label] = _twist_metrics(cfg, lg, scn.meta["durations"], scn.meta["touchdown"])
        if lg.error is not None:
            m[label]["error"] = str(lg.error)
    checks = {}
    by_kind = dict(zip(controllers, runs.values()))
    if "rf" in by_kind:
        rf = m[by_kind["rf"].label]
        _check(cfg, "rf_kinv_min_hind_stance", rf["kinv_min_hind_stance"], 0.1, "<", checks)
        _check(cfg, "rf_max_e_R_flight", rf["max_e_R_flight"], 0.5, "<", checks)
        if "open_loop" in by_kind:
            ol = m[by_kind["open_loop"].label]
            ratio = ol["e_R_landing"] / max(rf["e_R_landing"], 1e-12)
            m["landing_e_R_ratio_open_loop_over_rf"] = ratio
            _check(cfg, "landing_e_R_ratio", ratio, 5.0, ">=", checks)
    return runs, m, checks


def _study_backflip(cfg):
    runs, lg = _study_single(cfg)
    scn = SCENARIOS["backflip_replay"](cfg)
    t0, t1 = scn.meta["flight"]
    j0, j1 = int(round(t0 / PLANT_DT)), int(round(t1 / PLANT_DT))
    pitch = unwrapped_pitch(lg.plant_R)
    seg = pitch[j0 : j1 + 1]
    m = {
        "max_e_R": float(lg.e_R.max()),
        "max_pitch_increase_in_flight": float(np.diff(seg).max()) if seg.size > 1 else math.nan,
        "min_unwrapped_pitch": float(pitch.min()),
        "flight_window": [t0, t1],
    }
    checks = {}
    _check(cfg, "max_e_R", m["max_e_R"], 0.5, "<", checks)
    _check(cfg, "max_pitch_increase_in_flight", m["max_pitch_increase_in_flight"], 0.0, "<=", checks)
    _check(cfg, "min_unwrapped_pitch", m["min_unwrapped_pitch"], -math.pi, "<", checks)
    return runs, m, checks


def _study_lin_compare(cfg):
    runs = {}
    o = cfg.options
    schemes = list(o.get("schemes", ["ref", "op"]))
    for sc in schemes:
        lg = run_experiment(cfg, scheme=sc, raise_errors=False)
        runs[sc] = lg
    t_dist = float(cfg.disturbance.knots[0, 0]) if cfg.disturbance is not None else 0.0
    m = {}
    for sc, lg in runs.items():
        tail = lg.t >= lg.t[-1] - 0.5
        m[sc] = {
            "diverged": lg.diverged,
            "fail_time": lg.fail_time,
            "fail_reason": lg.fail_reason,
            "final_e_R": float(lg.e_R[tail].mean()),
            "final_speed_error": float(np.abs(lg.e_v[tail, 0]).mean()),
            "final_lateral_speed": float(np.abs(lg.pdot[tail, 1]).mean()),
            "max_phi": float(np.nanmax(lg.phi)) if np.isfinite(lg.phi).any() else math.nan,
        }
    checks = {}
    if "ref" in runs and "op" in runs:
        ref, op = runs["ref"], runs["op"]
        t_end = ref.fail_time if ref.diverged else ref.t[-1]
        win_r = _window_mask(ref.t, t_dist, t_end)
        win_o = _window_mask(op.t, t_dist, t_end)
        phi_r = float(np.nanmax(ref.phi[win_r])) if win_r.any() else math.nan
        phi_o = float(np.nanmax(op.phi[win_o])) if win_o.any() else math.nan
        m["phi_window"] = [t_dist, t_end]
        m["phi_ratio_ref_over_op"] = phi_r / phi_o
        _check(cfg, "ref_diverges", float(ref.diverged), 1.0, ">=", checks)
        _check(cfg, "op_survives", float(not op.diverged), 1.0, ">=", checks)
        _check(cfg, "op_final_e_R", m["op"]["final_e_R"], 0.15, "<", checks)
        _check(cfg, "op_final_speed_error", m["op"]["final_speed_error"], 0.15, "<", checks)
        _check(cfg, "phi_ratio", m["phi_ratio_ref_over_op"], 5.0, ">=", checks)
    return runs, m, checks


def _study_ea_compare(cfg):
    o = cfg.options
    deltas = [float(d) for d in o.get("deltas", np.linspace(0.0, 1.0, 11))]
    runs, rows = {}, []
    for d in deltas:
        sub = replace(cfg, options={**o, "delta": d})
        row = {"delta": d}
        for kind in ("rf", "ea"):
            lg = run_experiment(sub, controller=kind, raise_errors=False, label=f"{kind}_delta_{d:.2f}")
            runs[lg.label] = lg
            row[kind] = lg.final_position_error() if not lg.diverged else math.inf
            row[f"{kind}_diverged"] = lg.diverged
            if kind == "ea":
                row["kinv_desired"] = singularity_metric_R(rot_y(math.pi / 2 - d))
        row["ratio"] = row["ea"] / max(row["rf"], 1e-15)
        rows.append(row)
    thr = float(o.get("near_singular", 0.3))
    rf = np.array([r["rf"] for r in rows])
    near = [r["ratio"] for r in rows if r["delta"] < thr]
    far = [r["ratio"] for r in rows if r["delta"] >= thr]
    m = {
        "sweep": rows,
        "rf_variation": float(rf.max() / rf.min()) if np.all(np.isfinite(rf)) and rf.min() > 0 else math.inf,
        "min_ratio_near_singular": float(min(near)) if near else math.nan,
        "min_ratio_far": float(min(far)) if far else math.nan,
        "max_ratio_far": float(max(far)) if far else math.nan,
    }
    checks = {}
    _check(cfg, "rf_variation", m["rf_variation"], 10.0, "<", checks)
    _check(cfg, "min_ratio_near_singular", m["min_ratio_near_singular"], 10.0, ">=", checks)
    return runs, m, checks


STUDIES = {
    "pose": _study_pose,
    "trot_walk": _study_trot,
    "bound": _study_bound,
    "twist_jump": _study_twist_jump,
    "backflip_replay": _study_backflip,
    "lin_compare": _study_lin_compare,
    "ea_compare": _study_ea_compare,
}


def run_study(config: ExperimentConfig) -> StudyResult:
    """Run every closed loop an experiment needs and evaluate its checks."""
    t0 = time.perf_counter()
    runs, metrics, checks = STUDIES[config.experiment](config)
    return StudyResult(config.name, config.experiment, runs, metrics, checks, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Reporting


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer, int, np.bool_, bool)):
        return x.item() if hasattr(x, "item") else x
    return x if x is None or isinstance(x, str) else str(x)


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


def emit_report(result: StudyResult, config: ExperimentConfig, out_dir=None) -> dict:
    """Write one CSV per run plus ``<name>_summary.json`` into an existing directory.

    Returns the summary (metrics, checks, overall pass flag). Raises
    :class:`IoError` if the directory is missing or unwritable.
    """
    out = Path(out_dir) if out_dir is not None else config.out
    if out is None or not Path(out).is_dir():
        raise IoError(f"output directory {out} does not exist")
    out = Path(out)
    files = []
    for label, lg in result.runs.items():
        path = out / f"{_safe(config.name)}_{_safe(label)}.csv"
        lg.to_csv(path)
        files.append(path.name)
    summary = {
        "name": result.name,
        "experiment": result.experiment,
        "seed": config.seed,
        "duration": config.duration,
        "passed": result.passed,
        "checks": {k: {"value": c.value, "threshold": c.threshold, "op": c.op, "passed": c.passed}
                   for k, c in result.checks.items()},
        "metrics": result.metrics,
        "runs": {label: {"ticks": lg.ticks, "diverged": lg.diverged, "fail_time": lg.fail_time,
                         "wall_time": lg.wall_time, "fallbacks": int(lg.fallback.sum())}
                 for label, lg in result.runs.items()},
        "files": files,
        "csv_version": CSV_VERSION,
    }
    try:
        with open(out / f"{_safe(config.name)}_summary.json", "w") as f:
            json.dump(_jsonable(summary), f, indent=2)
    except OSError as exc:
        raise IoError(f"cannot write summary: {exc}") from exc
    return summary
