"""Finite-horizon QP assembly for the rotation-matrix MPC and its controller.

Decision vector (stacked, sparse form)::

    z = [du_0, x_1, du_1, x_2, ..., du_{N-1}, x_N]      (24 N entries)

with ``x = [p; pdot; xi; omega]`` and ``du`` the force variation from the
nominal control of each step.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .dynamics import N_LEGS, RobotParams, SrbState
from .linearize import (
    SCHEME_OPERATING_POINT,
    SCHEME_REFERENCE,
    AffineDynamics,
    OperatingPoint,
    build_affine_dynamics,
    lift_state,
)
from .qp import DimensionMismatch, QpProblem, QpSolver, SolverResult, SolverSettings, SolverStatus
from .so3 import hat, is_rotation, log_so3

log = logging.getLogger(__name__)

NX = 12
NU = 12
NZ = NX + NU


class QpInfeasible(RuntimeError):
    pass


class QpMaxIterations(RuntimeError):
    pass


def _vec3(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.full(3, float(v)) if v.ndim == 0 else v.reshape(3)


@dataclass
class GainSet:
    """Diagonal cost weights (3-vectors) and horizon settings.

    Terminal weights default to the stage weights axis by axis.
    """

    Q_p: np.ndarray
    Q_pdot: np.ndarray
    Q_R: np.ndarray
    Q_omega: np.ndarray
    R_u: np.ndarray
    gamma: float = 1.0
    horizon: int = 6
    dt_pred: float = 0.01
    f_mpc: float = 100.0
    QT_p: np.ndarray | None = None
    QT_pdot: np.ndarray | None = None
    QT_R: np.ndarray | None = None
    QT_omega: np.ndarray | None = None

    def __post_init__(self):
        for name in ("Q_p", "Q_pdot", "Q_R", "Q_omega", "R_u"):
            setattr(self, name, _vec3(getattr(self, name)))
        for name in ("p", "pdot", "R", "omega"):
            term = getattr(self, "QT_" + name)
            setattr(self, "QT_" + name, getattr(self, "Q_" + name).copy() if term is None else _vec3(term))
        weights = np.concatenate(
            [self.Q_p, self.Q_pdot, self.Q_R, self.Q_omega, self.QT_p, self.QT_pdot, self.QT_R, self.QT_omega]
        )
        if np.any(weights < 0) or np.any(self.R_u <= 0):
            raise ValueError("state weights must be >= 0 and control weights > 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1 or self.dt_pred <= 0 or self.f_mpc <= 0:
            raise ValueError("horizon >= 1, dt_pred > 0 and f_mpc > 0 required")

    def stage_weights(self) -> np.ndarray:
        return np.concatenate([self.Q_p, self.Q_pdot, self.Q_R, self.Q_omega])

    def terminal_weights(self) -> np.ndarray:
        return np.concatenate([self.QT_p, self.QT_pdot, self.QT_R, self.QT_omega])

    def with_updates(self, **kwargs) -> GainSet:
        return replace(self, **kwargs)


def _g(stage, terminal=None):
    return stage if terminal is None else terminal


# Cost weights per named column of the published gain table. Terminal values
# are given per axis where they differ from the stage value.
GAIN_PRESETS: dict[str, GainSet] = {
    "sim_pose": GainSet(
        Q_p=[3e5, 5e5, 2e5], Q_pdot=[10, 8, 10], Q_R=[5e2, 2e3, 1e3], Q_omega=[2, 4, 3], R_u=0.1,
        gamma=1.0, horizon=7, dt_pred=0.05, f_mpc=100,
        QT_p=[1e5, 1e5, 1e5], QT_pdot=[30, 30, 30], QT_R=[5e2, 3e3, 1e3],
    ),
    "sim_trot_walk": GainSet(
        Q_p=[1e5, 2e5, 3e5], Q_pdot=[5e2, 1e3, 1e3], Q_R=[1e3, 1e4, 8e2], Q_omega=[40, 40, 10],
        R_u=[0.1, 0.2, 0.1], gamma=1.0, horizon=6, dt_pred=0.08, f_mpc=100,
    ),
    "sim_bound": GainSet(
        Q_p=[8e4, 5e4, 3e6], Q_pdot=[4e3, 5e2, 7e2], Q_R=[8e3, 5e5, 8e3], Q_omega=[2e2, 1e2, 2e2],
        R_u=0.2, gamma=0.9, horizon=6, dt_pred=0.01, f_mpc=100,
        QT_pdot=[5e2, 5e2, 5e2], QT_R=[8e3, 5e4, 8e3],
    ),
    "acro": GainSet(
        Q_p=5e6, Q_pdot=5e3, Q_R=1e6, Q_omega=5e3, R_u=0.1,
        gamma=0.9, horizon=7, dt_pred=0.01, f_mpc=100,
    ),
    "exp_pose": GainSet(
        Q_p=[3e5, 5e5, 2e5], Q_pdot=[10, 8, 10], Q_R=[5e2, 2e3, 1e3], Q_omega=[2, 4, 3], R_u=0.1,
        gamma=1.0, horizon=6, dt_pred=0.02, f_mpc=250,
        QT_p=[1e5, 1e5, 1e5], QT_pdot=[30, 30, 30], QT_R=[5e2, 3e3, 1e3],
    ),
    "exp_trot_walk": GainSet(
        Q_p=[1e5, 1e5, 1.5e5], Q_pdot=[1e3, 1e3, 150], Q_R=[2e3, 2e3, 8e2], Q_omega=[60, 40, 10],
        R_u=[0.1, 0.18, 0.08], gamma=1.0, horizon=6, dt_pred=0.08, f_mpc=250,
        QT_p=[1e5, 1.5e5, 2.2e5], QT_pdot=[1.5e3, 1e3, 150], QT_omega=[100, 45, 10],
    ),
    "exp_trot_run": GainSet(
        Q_p=[1e5, 1e5, 2e4], Q_pdot=[1e3, 1e3, 100], Q_R=[1e3, 2e3, 8e2], Q_omega=[60, 40, 10],
        R_u=[0.1, 0.18, 0.08], gamma=1.0, horizon=6, dt_pred=0.05, f_mpc=250,
        QT_p=[1e5, 1.5e5, 2e4], QT_pdot=[1.5e3, 1e3, 100], QT_R=[2e3, 2e3, 8e2], QT_omega=[100, 45, 10],
    ),
    "exp_bound": GainSet(
        Q_p=[2e5, 4e5, 1.5e5], Q_pdot=[50, 200, 30], Q_R=[3e3, 4e3, 1e3], Q_omega=[3, 6, 5],
        R_u=[0.1, 0.18, 0.2], gamma=0.8, horizon=7, dt_pred=0.01, f_mpc=160,
        QT_p=[1.2e5, 4e5, 2e5], QT_pdot=[50, 150, 30], QT_R=[1e3, 8e3, 3e3], QT_omega=[2, 2, 8],
    ),
    "exp_backflip": GainSet(
        Q_p=[1e5, 1e5, 1.5e5], Q_pdot=[1e3, 1e3, 150], Q_R=[4e3, 0, 8e2], Q_omega=[60, 0, 10],
        R_u=[0.1, 0.12, 0.1], gamma=0.8, horizon=6, dt_pred=0.02, f_mpc=200,
        QT_p=[1e5, 2e5, 2.2e5], QT_pdot=[1.5e3, 1e3, 150], QT_R=[6e3, 10, 8e2], QT_omega=[100, 1, 10],
    ),
}


def gain_preset(name: str) -> GainSet:
    try:
        g = GAIN_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown gain preset {name!r}; available: {sorted(GAIN_PRESETS)}") from None
    return replace(g)


@dataclass
class ReferenceWindow:
    """Desired trajectory over one horizon.

    States are indexed ``k = 0..N`` (``k = 0`` is the current instant);
    controls and contacts ``k = 0..N-1``. ``feet`` holds the foothold of each
    leg used for prediction. ``contact_frames[i]`` is a rotation whose third
    column is the ground normal under leg ``i``.
    """

    p: np.ndarray
    pdot: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    contacts: np.ndarray
    feet: np.ndarray
    contact_frames: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, float).reshape(-1, 3)
        self.pdot = np.asarray(self.pdot, float).reshape(-1, 3)
        self.R = np.asarray(self.R, float).reshape(-1, 3, 3)
        self.omega = np.asarray(self.omega, float).reshape(-1, 3)
        self.u = np.asarray(self.u, float).reshape(-1, NU)
        self.contacts = np.asarray(self.contacts, bool).reshape(-1, N_LEGS)
        self.feet = np.asarray(self.feet, float).reshape(N_LEGS, 3)
        if self.contact_frames is None:
            self.contact_frames = np.tile(np.eye(3), (N_LEGS, 1, 1))
        self.contact_frames = np.asarray(self.contact_frames, float).reshape(N_LEGS, 3, 3)
        n = self.horizon
        if not (len(self.p) == len(self.pdot) == len(self.R) == len(self.omega) == n + 1):
            raise DimensionMismatch("reference states must have horizon + 1 samples")
        if len(self.contacts) != n:
            raise DimensionMismatch("contacts must have one row per control step")
        for R in self.R:
            if not is_rotation(R, 1e-6):
                raise ValueError("reference attitudes must be rotations")

    @property
    def horizon(self) -> int:
        return len(self.u)

    @classmethod
    def constant(cls, state: SrbState, u: np.ndarray, feet: np.ndarray, horizon: int, contacts=None):
        """Hold ``state`` and ``u`` over the whole horizon."""
        contacts = np.ones((horizon, N_LEGS), bool) if contacts is None else contacts
        return cls(
            np.tile(state.p, (horizon + 1, 1)),
            np.tile(state.pdot, (horizon + 1, 1)),
            np.tile(state.R, (horizon + 1, 1, 1)),
            np.tile(state.omega, (horizon + 1, 1)),
            np.tile(np.asarray(u, float).ravel(), (horizon, 1)),
            contacts,
            feet,
        )


@dataclass
class MpcSolution:
    u_cmd: np.ndarray
    predicted: np.ndarray  # (N, 12): x_1..x_N
    R_lin: np.ndarray  # (N, 3, 3): attitude each predicted xi_k is measured from
    du: np.ndarray  # (N, 12)
    status: SolverStatus
    iterations: int
    kkt_residual: float
    solve_time: float
    fallback: bool = False

    def predicted_rotations(self) -> np.ndarray:
        """First-order rotations ``R_lin (I + hat(xi_k))`` as used by the model."""
        return np.array([R @ (np.eye(3) + hat(x[6:9])) for R, x in zip(self.R_lin, self.predicted)])


# ---------------------------------------------------------------------------
# Cost


def orientation_cost_terms(R_op: np.ndarray, R_d: np.ndarray, Q_R: np.ndarray):
    """Quadratic, linear and constant terms of ``e' Q_R e`` with ``e = log(R_d' R_op) + xi``."""
    Q = np.diag(_vec3(Q_R))
    e0 = log_so3(R_d.T @ R_op)
    return Q, 2.0 * Q @ e0, float(e0 @ Q @ e0)


def u_offset(k: int) -> int:
    return NZ * k


def x_offset(k: int) -> int:
    """Offset of ``x_k`` (``k >= 1``) in ``z``."""
    return NZ * k - NX


def build_cost(
    ref: ReferenceWindow,
    gains: GainSet,
    R_lin: np.ndarray,
    u_nom: np.ndarray,
):
    """Diagonal ``P`` (as a vector) and ``c`` of ``0.5 z'Pz + c'z``.

    ``R_lin[k]`` is the attitude that ``xi_k`` is measured from (the operating
    attitude for every ``k`` in the operating-point scheme) and ``u_nom[k]``
    the control that ``du_k`` varies from.
    """
    N = ref.horizon
    if len(R_lin) < N + 1 or len(u_nom) < N:
        raise DimensionMismatch("linearization data shorter than the horizon")
    n = NZ * N
    Pd = np.zeros(n)
    c = np.zeros(n)
    Ru = np.tile(gains.R_u, N_LEGS)
    for k in range(N):
        w = gains.gamma**k
        o = u_offset(k)
        Pd[o : o + NU] += 2.0 * w * Ru
        c[o : o + NU] += 2.0 * w * Ru * (u_nom[k] - ref.u[k])
    for k in range(1, N + 1):
        terminal = k == N
        Q = gains.terminal_weights() if terminal else gains.stage_weights()
        w = gains.gamma**k
        o = x_offset(k)
        Qp, Qv, QR, Qw = Q[0:3], Q[3:6], Q[6:9], Q[9:12]
        Pd[o : o + 3] += 2 * w * Qp
        c[o : o + 3] += -2 * w * Qp * ref.p[k]
        Pd[o + 3 : o + 6] += 2 * w * Qv
        c[o + 3 : o + 6] += -2 * w * Qv * ref.pdot[k]
        _, lin, _ = orientation_cost_terms(R_lin[k], ref.R[k], QR)
        Pd[o + 6 : o + 9] += 2 * w * QR
        c[o + 6 : o + 9] += w * lin
        # e_omega = omega - R^T R_d omega_d with R ~ R_lin
        w_d = R_lin[k].T @ ref.R[k] @ ref.omega[k]
        Pd[o + 9 : o + 12] += 2 * w * Qw
        c[o + 9 : o + 12] += -2 * w * Qw * w_d
    return Pd, c


# ---------------------------------------------------------------------------
# Constraints


def _pyramid_rows(frame: np.ndarray, mu: float) -> np.ndarray:
    t1, t2, nrm = frame[:, 0], frame[:, 1], frame[:, 2]
    return np.array([t1 - mu * nrm, -t1 - mu * nrm, t2 - mu * nrm, -t2 - mu * nrm, -nrm, nrm])


def build_force_constraints(
    ref: ReferenceWindow,
    u_nom: np.ndarray,
    params: RobotParams,
    inequalities: bool = True,
):
    """Friction pyramid and normal-force bounds for stance legs; zero force for swing legs.

    Returns ``(A_ineq, b_ineq, A_swing, b_swing)`` over ``z``. Each stance leg
    contributes six inequality rows per step; each swing leg three equality
    rows fixing its total force to zero.
    """
    N = ref.horizon
    n = NZ * N
    rows, cols, vals, rhs = [], [], [], []
    srows, scols, svals, srhs = [], [], [], []
    n_in = n_sw = 0
    for k in range(N):
        o = u_offset(k)
        for i in range(N_LEGS):
            u0 = u_nom[k][3 * i : 3 * i + 3]
            col = o + 3 * i + np.arange(3)
            if ref.contacts[k, i]:
                if not inequalities:
                    continue
                C = _pyramid_rows(ref.contact_frames[i], params.mu)
                b = np.array([0, 0, 0, 0, -params.u_z_min, params.u_z_max], float) - C @ u0
                for r in range(6):
                    rows.extend([n_in] * 3)
                    cols.extend(col)
                    vals.extend(C[r])
                    rhs.append(b[r])
                    n_in += 1
            else:
                for r in range(3):
                    srows.append(n_sw)
                    scols.append(col[r])
                    svals.append(1.0)
                    srhs.append(-u0[r])
                    n_sw += 1
    A_in = sp.csr_matrix((vals, (rows, cols)), shape=(n_in, n))
    A_sw = sp.csr_matrix((svals, (srows, scols)), shape=(n_sw, n))
    return A_in, np.array(rhs), A_sw, np.array(srhs)


def build_equality_constraints(
    dynamics: list[AffineDynamics],
    x0: np.ndarray,
    horizon: int,
    allow_nonzero_xi: bool = False,
):
    """Stacked dynamics rows ``x_{k+1} - A_k x_k - B_k du_k = d_k`` (``12 N`` rows).

    ``x_0`` is substituted, so the first block row reads
    ``x_1 - B_0 du_0 = A_0 x_0 + d_0``.
    """
    x0 = np.asarray(x0, float).reshape(NX)
    if not allow_nonzero_xi and np.any(x0[6:9] != 0.0):
        raise ValueError("x0 must be lifted about its own attitude (xi_0 = 0)")
    if len(dynamics) not in (1, horizon):
        raise DimensionMismatch("need one LTI triple or one triple per step")
    N = horizon
    blocks_r, blocks_c, blocks_v = [], [], []
    b = np.zeros(NX * N)
    eye_r, eye_c = np.nonzero(np.eye(NX))

    def put(M, r0, c0):
        r, c = np.nonzero(M)
        blocks_r.append(r + r0)
        blocks_c.append(c + c0)
        blocks_v.append(M[r, c])

    for k in range(N):
        dyn = dynamics[k] if len(dynamics) > 1 else dynamics[0]
        r0 = NX * k
        blocks_r.append(eye_r + r0)
        blocks_c.append(eye_c + x_offset(k + 1))
        blocks_v.append(np.ones(NX))
        put(-dyn.B, r0, u_offset(k))
        if k == 0:
            b[r0 : r0 + NX] = dyn.A @ x0 + dyn.d
        else:
            put(-dyn.A, r0, x_offset(k))
            b[r0 : r0 + NX] = dyn.d
    A = sp.csr_matrix(
        (np.concatenate(blocks_v), (np.concatenate(blocks_r), np.concatenate(blocks_c))),
        shape=(NX * N, NZ * N),
    )
    return A, b


# ---------------------------------------------------------------------------
# Solve


def _reference_ops(state: SrbState, ref: ReferenceWindow) -> list[OperatingPoint]:
    N = ref.horizon
    ops = []
    for k in range(N + 1):
        kc = min(k, N - 1)
        u = ref.u[kc] * np.repeat(ref.contacts[kc], 3)
        s = SrbState(ref.p[k], ref.pdot[k], ref.R[k], ref.omega[k])
        ops.append(OperatingPoint(s, u, ref.feet, ref.contacts[kc]))
    return ops


@dataclass
class MpcProblem:
    """Assembled QP plus the bookkeeping needed to interpret its solution."""

    qp: QpProblem
    R_lin: np.ndarray
    u_nom: np.ndarray
    n_dynamics_rows: int


def assemble_mpc(
    state: SrbState,
    ref: ReferenceWindow,
    u_op: np.ndarray,
    gains: GainSet,
    params: RobotParams,
    scheme: str = SCHEME_OPERATING_POINT,
    inequalities: bool = True,
) -> MpcProblem:
    N = ref.horizon
    dt = gains.dt_pred
    u_op = np.asarray(u_op, float).reshape(NU)
    if scheme == SCHEME_OPERATING_POINT:
        op = OperatingPoint(state, u_op, ref.feet, ref.contacts[0])
        dyn = build_affine_dynamics(op, params, dt)
        x0 = lift_state(state, op).x
        R_lin = np.tile(state.R, (N + 1, 1, 1))
        u_nom = np.tile(u_op, (N, 1))
    elif scheme == SCHEME_REFERENCE:
        ops = _reference_ops(state, ref)
        dyn = build_affine_dynamics(ops[0], params, dt, SCHEME_REFERENCE, ref=ops, horizon=N)
        x0 = lift_state(state, ops[0]).x
        R_lin = ref.R.copy()
        u_nom = np.array([o.u_op for o in ops[:N]])
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    A_dyn, b_dyn = build_equality_constraints(dyn, x0, N, allow_nonzero_xi=scheme == SCHEME_REFERENCE)
    A_in, b_in, A_sw, b_sw = build_force_constraints(ref, u_nom, params, inequalities)
    Pd, c = build_cost(ref, gains, R_lin, u_nom)
    qp = QpProblem(
        sp.diags(Pd, format="csr"), c, A_in, b_in, sp.vstack([A_dyn, A_sw], format="csr"),
        np.concatenate([b_dyn, b_sw]),
    )
    return MpcProblem(qp, R_lin, u_nom, A_dyn.shape[0])


def _unpack(z: np.ndarray, N: int):
    Z = z.reshape(N, NZ)
    return Z[:, :NU], Z[:, NU:]


def project_forces(u: np.ndarray, contacts, params: RobotParams, frames=None) -> np.ndarray:
    """Closest-in-spirit feasible forces: clip the normal, shrink the tangential part."""
    u = np.asarray(u, float).reshape(N_LEGS, 3).copy()
    frames = np.tile(np.eye(3), (N_LEGS, 1, 1)) if frames is None else frames
    for i in range(N_LEGS):
        if not contacts[i]:
            u[i] = 0.0
            continue
        loc = frames[i].T @ u[i]
        loc[2] = np.clip(loc[2], params.u_z_min, params.u_z_max)
        lim = params.mu * loc[2] / np.sqrt(2.0)  # inscribed in the pyramid
        loc[0:2] = np.clip(loc[0:2], -lim, lim)
        u[i] = frames[i] @ loc
    return u.ravel()


def solve_mpc(
    state: SrbState,
    ref: ReferenceWindow,
    u_op: np.ndarray,
    gains: GainSet,
    params: RobotParams,
    scheme: str = SCHEME_OPERATING_POINT,
    solver: QpSolver | None = None,
    inequalities: bool = True,
) -> MpcSolution:
    """One MPC tick; raises :class:`QpInfeasible` / :class:`QpMaxIterations`."""
    t0 = time.perf_counter()
    prob = assemble_mpc(state, ref, u_op, gains, params, scheme, inequalities)
    res: SolverResult = (solver or QpSolver()).solve(prob.qp)
    if res.status is SolverStatus.INFEASIBLE:
        raise QpInfeasible(f"QP infeasible after {res.iterations} iterations")
    if res.status is SolverStatus.MAX_ITERS:
        raise QpMaxIterations(f"QP not solved in {res.iterations} iterations: {res.residuals}")
    N = ref.horizon
    du, xs = _unpack(res.z, N)
    r = res.residuals
    return MpcSolution(
        u_cmd=prob.u_nom[0] + du[0],
        predicted=xs.copy(),
        R_lin=prob.R_lin[1:],
        du=du.copy(),
        status=res.status,
        iterations=res.iterations,
        kkt_residual=max(r.eq, r.ineq, r.dual),
        solve_time=time.perf_counter() - t0,
    )


def even_support(contacts, params: RobotParams) -> np.ndarray:
    """Weight shared evenly by the stance legs (zero if none)."""
    c = np.asarray(contacts, bool)
    u = np.zeros((N_LEGS, 3))
    if c.any():
        u[c, 2] = params.weight / c.sum()
    return u.ravel()


@dataclass
class RfMpcController:
    """Stateful controller: remembers the previous command as the next operating control."""

    params: RobotParams
    gains: GainSet
    scheme: str = SCHEME_OPERATING_POINT
    inequalities: bool = True
    solver_settings: SolverSettings = field(default_factory=SolverSettings)
    u_prev: np.ndarray | None = None
    fallbacks: int = 0

    def __post_init__(self):
        self._solver = QpSolver(self.solver_settings)

    def reset(self):
        self.u_prev = None
        self.fallbacks = 0

    def operating_control(self, contacts) -> np.ndarray:
        if self.u_prev is None:
            return even_support(contacts, self.params)
        return self.u_prev * np.repeat(np.asarray(contacts, bool), 3)

    def step(self, state: SrbState, ref: ReferenceWindow) -> MpcSolution:
        u_op = self.operating_control(ref.contacts[0])
        try:
            sol = solve_mpc(
                state, ref, u_op, self.gains, self.params, self.scheme, self._solver, self.inequalities
            )
        except (QpInfeasible, QpMaxIterations) as exc:
            self.fallbacks += 1
            log.warning("MPC fallback (%s); reusing previous command", exc)
            u = project_forces(u_op, ref.contacts[0], self.params, ref.contact_frames)
            N = ref.horizon
            sol = MpcSolution(
                u, np.zeros((N, NX)), np.tile(state.R, (N, 1, 1)), np.zeros((N, NU)),
                SolverStatus.INFEASIBLE, 0, np.inf, 0.0, fallback=True,
            )
        self.u_prev = sol.u_cmd.copy()
        return sol
