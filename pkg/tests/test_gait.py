import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from rfmpc.dynamics import RobotParams
from rfmpc.ea_baseline import singularity_metric_R
from rfmpc.gait import (
    GaitTiming,
    InfeasibleTiming,
    InvalidRotationInFile,
    LegMode,
    ParseError,
    ReferenceTrajectory,
    bounding_profile,
    bounding_reference,
    contact_flags,
    foothold_plan,
    fsm_step,
    horizon_contacts,
    load_trajectory,
    mode_intervals,
    ramp_profile,
    save_trajectory,
    trot_reference,
)
from rfmpc.so3 import exp_so3
from rfmpc.twist_jump import NoFeasibleSolution, TwistJumpSetup, _Problem, solve_twist_jump

PARAMS = RobotParams()


def in_stance_oracle(timing, leg, t):
    """Independent phase test: fraction of the period since the leg's touchdown."""
    frac = (t / timing.period - timing.offsets[leg]) % 1.0
    return frac * timing.period < timing.T_st - 1e-12


# ---------------------------------------------------------------------------
# Finite state machine


class TestFsm:
    def test_start_in_stance(self):
        ph = fsm_step(GaitTiming.trot(), 0.0)
        assert ph[0].mode is LegMode.STANCE and ph[0].s == 0.0
        assert ph[3].mode is LegMode.STANCE

    def test_guard_at_stance_end(self):
        tm = GaitTiming.trot(0.3, 0.15)
        ph = fsm_step(tm, 0.3)
        assert ph[0].mode is LegMode.SWING and ph[0].s == pytest.approx(0.0, abs=1e-9)
        ph = fsm_step(tm, 0.3 - 1e-6)
        assert ph[0].mode is LegMode.STANCE

    def test_trot_pairs(self):
        tm = GaitTiming.trot(0.3, 0.3)
        for t in np.linspace(0, 2, 41):
            c = contact_flags(tm, t)
            assert c[0] == c[3] and c[1] == c[2]

    @given(
        T_st=st.floats(0.05, 0.5),
        T_sw=st.floats(0.05, 0.5),
        offset=st.floats(0.0, 0.99),
        t=st.floats(0.0, 10.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_phase_oracle(self, T_st, T_sw, offset, t):
        tm = GaitTiming(T_st, T_sw, (offset, 0, 0, 0))
        ph = fsm_step(tm, t)[0]
        frac = (t / tm.period - offset) % 1.0
        # skip samples within rounding distance of a guard
        edges = np.array([0.0, T_st / tm.period, 1.0])
        if np.min(np.abs(frac - edges)) * tm.period < 1e-9:
            return
        assert ph.in_contact == in_stance_oracle(tm, 0, t)
        assert 0.0 <= ph.s <= 1.0

    @given(T_st=st.floats(0.05, 0.5), T_sw=st.floats(0.05, 0.5), offset=st.floats(0.0, 0.99))
    @settings(max_examples=100, deadline=None)
    def test_stance_time_per_period(self, T_st, T_sw, offset):
        tm = GaitTiming(T_st, T_sw, (offset, 0, 0, 0))
        t0 = 0.37
        ivs = mode_intervals(tm, 0, t0, t0 + tm.period)
        stance = sum(b - a for m, a, b in ivs if m is LegMode.STANCE)
        assert stance == pytest.approx(T_st, abs=1e-12)

    def test_stance_time_sampled(self):
        tm = GaitTiming.trot(0.3, 0.15)
        n = 90000
        t = (np.arange(n) + 0.5) * tm.period / n
        frac = np.mean([contact_flags(tm, tk)[1] for tk in t[::10]])
        assert frac == pytest.approx(tm.T_st / tm.period, abs=1e-3)

    def test_periodic(self):
        tm = GaitTiming.bound()
        for t in np.linspace(0, tm.period, 17):
            assert np.array_equal(contact_flags(tm, t + 0.013), contact_flags(tm, t + 0.013 + 3 * tm.period))

    def test_horizon_contacts_brute_force(self):
        tm = GaitTiming.trot()
        sched = horizon_contacts(tm, 0.21, 10, 0.04)
        for k in range(10):
            t = 0.21 + 0.04 * k
            assert list(sched.contacts[k]) == [in_stance_oracle(tm, i, t) for i in range(4)]

    def test_validation(self):
        with pytest.raises(ValueError):
            GaitTiming(0.0, 0.1)
        with pytest.raises(ValueError):
            GaitTiming(0.1, 0.1, (0, 0, 1.2, 0))
        with pytest.raises(ValueError):
            fsm_step(GaitTiming.trot(), -1.0)


# ---------------------------------------------------------------------------
# Trot reference


class TestTrot:
    def feet(self):
        f = PARAMS.hip_offsets.copy()
        f[:, 2] = 0.0
        return f

    def test_even_forces(self):
        tm = GaitTiming.trot()
        ref = trot_reference(tm, 0.0, 6, 0.05, PARAMS, self.feet())
        w = PARAMS.mass * PARAMS.gravity
        for u, c in zip(ref.u, ref.contacts):
            U = u.reshape(4, 3)
            assert np.allclose(U.sum(axis=0), [0, 0, w])
            assert np.allclose(U[c, 2], w / c.sum())
            assert np.allclose(U[~c], 0.0)
        # the pairs overlap right after t = 0 (T_st > T_sw); at 0.1 s one diagonal carries the weight
        ref = trot_reference(tm, 0.1, 1, 0.05, PARAMS, self.feet())
        assert ref.contacts[0].sum() == 2
        assert ref.u[0].reshape(4, 3)[0, 2] == pytest.approx(26.98, abs=5e-3)

    def test_four_leg_share(self):
        tm = GaitTiming(0.3, 0.15, (0, 0, 0, 0))
        ref = trot_reference(tm, 0.0, 1, 0.05, PARAMS, self.feet())
        assert ref.u[0][2] == pytest.approx(13.49, abs=5e-3)

    def test_ramp(self):
        d, v = ramp_profile(np.array([0.0, 0.5, 1.0, 3.0]), 0.5, 0.5)
        assert np.allclose(v, [0.0, 0.25, 0.5, 0.5])
        assert np.allclose(d, [0.0, 0.0625, 0.25, 1.25])

    def test_reference_reaches_speed(self):
        ref = trot_reference(GaitTiming.trot(), 4.0, 6, 0.05, PARAMS, self.feet())
        assert np.allclose(ref.pdot, [0.5, 0, 0])
        # positions are the integral of the velocity (trapezoid is exact on the ramp)
        d, _ = ramp_profile(4.0 + 0.05 * np.arange(7), 0.5, 0.5)
        assert np.allclose(ref.p[:, 0], d)


# ---------------------------------------------------------------------------
# Footholds


class TestFoothold:
    def test_no_feedback_when_on_target(self):
        v = np.array([0.4, 0.1, 0.0])
        p = foothold_plan([0.1, 0.2, 0.3], v, v, 0.3, 0.25)
        assert np.allclose(p, [0.1 + 0.15 * 0.4, 0.2 + 0.15 * 0.1, 0.0])

    def test_capture_point_example(self):
        p = foothold_plan([0, 0, 0.25], [0.2, 0, 0], [0, 0, 0], 0.3, 0.25)
        assert p[0] == pytest.approx(math.sqrt(0.25 / 9.81) * 0.2, abs=1e-12)
        assert p[0] == pytest.approx(0.0319, abs=5e-5)

    @given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
    def test_mirrored(self, v, vd):
        a = foothold_plan([0, 0, 0.25], v, vd, 0.3, 0.25)
        b = foothold_plan([0, 0, 0.25], -np.array(v), -np.array(vd), 0.3, 0.25)
        assert np.allclose(a[:2], -b[:2], atol=1e-12)

    def test_bad_height(self):
        with pytest.raises(ValueError):
            foothold_plan([0, 0, 0], [0, 0, 0], [0, 0, 0], 0.3, 0.0)


# ---------------------------------------------------------------------------
# Bounding


class TestBounding:
    timing = GaitTiming.bound(0.1, 0.16)

    def test_vertical_impulse(self):
        prof = bounding_profile(PARAMS, self.timing)
        T = prof.period
        imp = sum(quad(lambda t: float(prof.Fz(t)), a, b)[0] for a, b in self._pieces(prof))
        assert imp == pytest.approx(PARAMS.mass * PARAMS.gravity * T, rel=1e-6)
        assert T == pytest.approx(2 * 0.1 + 2 * 0.03)

    def test_pitch_impulse(self):
        prof = bounding_profile(PARAMS, self.timing)
        imp = sum(quad(lambda t: float(prof.tau(t)), a, b)[0] for a, b in self._pieces(prof))
        assert abs(imp) < 1e-8

    def test_periodic_state(self):
        prof = bounding_profile(PARAMS, self.timing)
        T = prof.period
        z0, zd0, th0, om0, _, _ = prof.state(0.0)
        # independent integration of the planar equations from the profile's initial state
        Iyy = PARAMS.inertia[1, 1]

        def f(t, x):
            return [x[1], float(prof.Fz(t)) / PARAMS.mass - PARAMS.gravity, x[3], float(prof.tau(t)) / Iyy]

        sol = solve_ivp(f, (0, T), [z0, zd0, th0, om0], rtol=1e-11, atol=1e-12, max_step=1e-3, dense_output=True)
        assert np.allclose(sol.y[:, -1], [z0, zd0, th0, om0], atol=1e-6)
        ts = np.linspace(0, T, 50)
        assert np.allclose(sol.sol(ts)[2], prof.theta(ts), atol=1e-6)
        assert np.allclose(sol.sol(ts)[0], prof.z(ts), atol=1e-6)
        assert float(prof.theta(T)) == pytest.approx(float(prof.theta(0.0)), abs=1e-6)

    @given(
        shape=st.lists(st.floats(0.1, 2.0), min_size=1, max_size=5),
        T_st=st.floats(0.06, 0.2),
        extra=st.floats(0.0, 0.2),
    )
    @settings(max_examples=40, deadline=None)
    def test_impulse_balance_any_shape(self, shape, T_st, extra):
        c = [0.0] + shape + [0.0]
        tm = GaitTiming.bound(T_st, T_st + extra)
        try:
            prof = bounding_profile(PARAMS.with_updates(u_z_max=1e4), tm, c)
        except InfeasibleTiming:
            return
        T = prof.period
        ts = np.linspace(0, T, 4001)
        assert np.trapezoid(prof.Fz(ts), ts) == pytest.approx(PARAMS.weight * T, rel=1e-5)
        assert float(prof.z(T)) == pytest.approx(float(prof.z(0)), abs=1e-9)
        assert float(prof.theta(T)) == pytest.approx(float(prof.theta(0)), abs=1e-9)
        assert float(prof.omega(T)) == pytest.approx(float(prof.omega(0)), abs=1e-9)

    def test_leg_forces_realize_wrench(self):
        prof = bounding_profile(PARAMS, self.timing)
        speed = 1.0
        for t in np.linspace(0.005, prof.period - 0.005, 37):
            u = prof.leg_forces(t, speed, PARAMS).reshape(4, 3)
            _, _, _, _, Fz, tau = prof.state(t)
            assert u[:, 2].sum() == pytest.approx(float(Fz), abs=1e-9)
            legs = [0, 1] if prof.front_stance(t) else [2, 3] if prof.hind_stance(t) else []
            if not legs:
                assert np.allclose(u, 0)
                continue
            t_st = t if legs[0] == 0 else t - prof.T_st - prof.T_air
            sign = 1.0 if legs[0] == 0 else -1.0
            r = np.array([sign * 0.15 + speed * (0.05 - t_st), 0.0, -prof.height])
            torque = sum(np.cross(r, u[i]) for i in legs)
            assert torque[1] == pytest.approx(float(tau), abs=1e-9)

    def test_reference_sampling(self):
        ref = bounding_reference(PARAMS, self.timing, speed=1.5)
        T = ref.period
        s0, _, c0 = ref.sample(0.02)
        s1, _, c1 = ref.sample(0.02 + 2 * T)
        assert np.allclose(s1.p - s0.p, [3 * T, 0, 0])
        assert np.allclose(s1.R, s0.R) and np.array_equal(c0, c1)

    def test_infeasible_timing(self):
        with pytest.raises(InfeasibleTiming):
            bounding_profile(PARAMS, GaitTiming.bound(0.2, 0.1))
        with pytest.raises(InfeasibleTiming):
            bounding_profile(PARAMS.with_updates(mass=20.0), GaitTiming.bound(0.05, 0.4))

    @staticmethod
    def _pieces(prof):
        b = [0.0, prof.T_st, prof.T_st + prof.T_air, 2 * prof.T_st + prof.T_air, prof.period]
        return list(zip(b[:-1], b[1:]))


# ---------------------------------------------------------------------------
# Trajectory files


def small_trajectory(n=6):
    rng = np.random.default_rng(3)
    t = np.linspace(0, 0.05, n)
    R = np.array([exp_so3(rng.normal(size=3)) for _ in range(n)])
    return ReferenceTrajectory(
        t, rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), R, rng.normal(size=(n, 3)),
        rng.normal(size=(n, 12)), rng.random((n, 4)) > 0.5,
    )


class TestTrajectoryFiles:
    def test_round_trip(self, tmp_path):
        tr = small_trajectory()
        path = tmp_path / "traj.csv"
        save_trajectory(tr, path)
        back = load_trajectory(path)
        for name in ("t", "p", "pdot", "R", "omega", "u"):
            assert np.max(np.abs(getattr(back, name) - getattr(tr, name))) <= 1e-12
        assert np.array_equal(back.contacts, tr.contacts)

    def test_repair_with_warning(self, tmp_path, caplog):
        tr = small_trajectory()
        tr.R[2] = tr.R[2] @ (np.eye(3) + 1e-5 * np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]]))
        path = tmp_path / "drift.csv"
        save_trajectory(tr, path)
        with caplog.at_level(logging.WARNING):
            back = load_trajectory(path)
        assert "re-projected 1" in caplog.text
        assert np.allclose(back.R[2].T @ back.R[2], np.eye(3), atol=1e-12)

    def test_large_drift_rejected(self, tmp_path):
        tr = small_trajectory()
        tr.R[1] = 1.1 * tr.R[1]
        path = tmp_path / "bad.csv"
        save_trajectory(tr, path)
        with pytest.raises(InvalidRotationInFile):
            load_trajectory(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "trunc.csv"
        save_trajectory(small_trajectory(), path)
        text = path.read_text()
        path.write_text(text[: len(text) - 40])
        with pytest.raises(ParseError):
            load_trajectory(path)

    def test_bad_header_and_missing(self, tmp_path):
        path = tmp_path / "hdr.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ParseError):
            load_trajectory(path)
        with pytest.raises(ParseError):
            load_trajectory(tmp_path / "nope.csv")

    def test_bundled_backflip(self):
        from importlib.resources import files

        tr = load_trajectory(files("rfmpc") / "data" / "backflip.csv")
        assert len(tr) > 100
        assert tr.contacts[0].all() and tr.contacts[-1].all()
        flight = ~tr.contacts.any(axis=1)
        assert 0.3 < flight.sum() * (tr.t[1] - tr.t[0]) < 0.6


# ---------------------------------------------------------------------------
# Twist jump


@pytest.fixture(scope="module")
def twist():
    return solve_twist_jump(PARAMS, 45.0, seed=0)


class TestTwistJump:
    def test_feasibility_replay(self, twist):
        prob = _Problem(twist.setup, 0.005, 0.05, 10.0)
        y = twist.variables / PARAMS.u_z_max
        _, g = prob.evaluate(y[None])
        assert g.max() <= 1e-4

    def test_pyramid_in_slope_frame(self, twist):
        Rs = twist.setup.slope_frame
        mu = PARAMS.mu
        for ph, legs in ((0, range(4)), (1, (2, 3))):
            for i in legs:
                loc = Rs.T @ twist.forces[ph, i]
                assert 0.0 <= loc[2] <= PARAMS.u_z_max + 1e-9
                assert abs(loc[0]) <= mu * loc[2] + 1e-3 and abs(loc[1]) <= mu * loc[2] + 1e-3
        assert np.allclose(twist.forces[1, :2], 0.0)

    def test_lands_on_target(self, twist):
        tr = twist.trajectory
        k = int(np.searchsorted(tr.t, tr.meta["touchdown"]))
        assert np.all(np.abs(tr.p[k] - twist.setup.target_p) <= 0.1)
        ang = math.acos(np.clip((np.trace(twist.setup.target_R.T @ tr.R[k]) - 1) / 2, -1, 1))
        assert ang <= 0.2

    def test_passes_singularity_in_hind_stance(self, twist):
        tr = twist.trajectory
        hind = (tr.t > 0.1) & (tr.t <= 0.2)
        k = np.array([singularity_metric_R(R) for R in tr.R[hind]])
        assert k.min() < 0.1

    def test_reference_contacts(self, twist):
        tr = twist.trajectory
        assert tr.contacts[tr.t < 0.1].all()
        hind = (tr.t > 0.1) & (tr.t < 0.2)
        assert not tr.contacts[hind][:, :2].any() and tr.contacts[hind][:, 2:].all()
        assert not tr.contacts[(tr.t > 0.2) & (tr.t < 0.5)].any()
        assert tr.contacts[tr.t > 0.5].all()

    def test_seed_reproducible(self, twist):
        again = solve_twist_jump(PARAMS, 45.0, seed=0)
        assert np.array_equal(again.variables, twist.variables)

    def test_zero_rotation_ballistic(self):
        """Target = start attitude with a plain hop: the optimal push exerts almost no net torque."""
        params = PARAMS
        setup = TwistJumpSetup(params, 45.0, liftoff_pitch_deg=None)
        p0, R0, _ = setup.initial_pose()
        setup.target_R = R0
        setup.target_p = p0 + np.array([-0.2, 0.0, -0.15])
        res = solve_twist_jump(params, setup=setup, seed=0, w_effort=0.01)
        tr = res.trajectory
        flight = (tr.t > 0.21) & (tr.t < 0.5)
        # a twist jump spins at ~10 rad/s; here the flight is nearly rotation-free
        assert np.max(np.linalg.norm(tr.omega[flight], axis=1)) < 0.3

    def test_validation(self):
        with pytest.raises(ValueError):
            TwistJumpSetup(PARAMS, 20.0)

    def test_no_feasible(self):
        setup = TwistJumpSetup(PARAMS, 45.0, target_p=np.array([-3.0, 0.0, 0.25]))
        with pytest.raises(NoFeasibleSolution):
            solve_twist_jump(PARAMS, setup=setup, restarts=1)


def test_bundled_backflip_is_reproducible():
    from rfmpc.backflip import DATA_FILE, generate_backflip

    fresh = generate_backflip()
    stored = load_trajectory(DATA_FILE)
    assert np.max(np.abs(fresh.p - stored.p)) <= 1e-12
    assert np.max(np.abs(fresh.R - stored.R)) <= 1e-12
    # one full backward revolution during flight
    k = int(round(fresh.meta["touchdown"] / 1e-3)) - 1
    theta = np.unwrap([math.atan2(-R[2, 0], R[0, 0]) for R in fresh.R[: k + 1]])
    assert theta[-1] == pytest.approx(-2 * math.pi, abs=0.05)
