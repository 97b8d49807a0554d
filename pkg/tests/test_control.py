import inspect

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regencrm import control
from regencrm.control import (
    ControllerState,
    GainSchedule,
    ImpedanceController,
    ImpedanceGains,
    InvalidGainsError,
    StorageDepleted,
    applied_input,
    audit_schedule,
    auxiliary_error,
    impedance_filter_step,
    passivity_check,
    reference_signals,
    svc_modulate,
    torque_ceiling,
    virtual_torque,
)
from regencrm.dynamics import augmented_matrices
from regencrm.models import ActuatorParams, RobotModel
from regencrm.simulation import ReferenceSource, reference_table

ACT = ActuatorParams()
GAINS = ImpedanceGains.table_i_baseline()
floats = st.floats(-10, 10, allow_nan=False)
vec3 = st.tuples(floats, floats, floats).map(np.array)


class TestImpedanceFilter:
    def test_zero_input_stays_at_rest(self):
        cs = ControllerState.zeros()
        for _ in range(100):
            cs, (w, wd, wdd) = impedance_filter_step(cs, np.zeros((2, 3)), GAINS, 1e-3)
        assert not np.any(w) and not np.any(wd) and not np.any(wdd)

    def test_dc_gain(self):
        c = np.array([[10.0, -5.0, 1.0], [0.0, 2.0, -3.0]])
        cs = ControllerState.zeros()
        for _ in range(6000):
            cs, (w, wd, _) = impedance_filter_step(cs, c, GAINS, 1e-3)
        np.testing.assert_allclose(w, c / GAINS.K, atol=1e-10)
        np.testing.assert_allclose(wd, 0.0, atol=1e-10)

    @pytest.mark.parametrize("omega", [2.0, 6.77, 20.0])
    def test_frequency_response(self, omega):
        dt, n = 5e-4, 16000
        cs = ControllerState.zeros((1, 3))
        ws = np.empty(n)
        for k in range(n):
            cs, (w, _, _) = impedance_filter_step(cs, np.full((1, 3), np.sin(omega * (k + 0.5) * dt)), GAINS, dt)
            ws[k] = w[0, 0]
        period = int(2 * np.pi / omega / dt) + 1
        amp = np.abs(ws[-2 * period :]).max()
        expected = 1.0 / abs(-(omega**2) * 18.0 + 1j * omega * 197.5 + 825.0)
        assert amp == pytest.approx(expected, rel=1e-2)


class TestErrorsAndReferences:
    def test_auxiliary_error_definition(self):
        assert auxiliary_error([1.0], [1.0], [0.0])[0] == 0.0
        np.testing.assert_array_equal(auxiliary_error([0.3, 0.2], [0.3, 0.2], [0.1, -0.2]), [-0.1, 0.2])

    def test_perfect_tracking_zero_wrench(self):
        q = np.array([0.1, 0.2, 0.3])
        S, qd_r, qdd_r = reference_signals(q, q, q, q, q, *(np.zeros(3),) * 3, np.full(3, 20.0))
        np.testing.assert_array_equal(S, 0.0)
        np.testing.assert_array_equal(qd_r, q)

    @given(vec3, vec3, vec3, vec3, vec3, vec3, vec3, vec3, st.floats(0.1, 100))
    def test_sliding_variable_two_ways(self, q_des, qd_des, qdd_des, q, qd, w, wd, wdd, lam):
        Lam = np.full(3, lam)
        S, _, _ = reference_signals(q_des, qd_des, qdd_des, q, qd, w, wd, wdd, Lam)
        zeta = auxiliary_error(q_des, q, w)
        zeta_dot = (qd_des - qd) - wd
        np.testing.assert_allclose(S, -(zeta_dot + Lam * zeta), atol=1e-12 * max(1.0, lam) * 100)

    def test_large_lambda_is_linear_in_zeta(self):
        z = np.zeros(3)
        q_des = np.array([0.01, -0.02, 0.03])
        S1, _, _ = reference_signals(q_des, z, z, z, z, z, z, z, np.full(3, 1e3))
        S2, _, _ = reference_signals(q_des, z, z, z, z, z, z, z, np.full(3, 2e3))
        np.testing.assert_allclose(S2, 2 * S1)
        np.testing.assert_allclose(S1, -1e3 * q_des)

    def test_virtual_torque_at_rest_is_gravity(self):
        q = np.array([0.4, 0.9, -0.2])
        D, C, g = augmented_matrices(RobotModel(), q, np.zeros(3))
        tv = virtual_torque(D, C, g, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), np.full(3, 30.0))
        np.testing.assert_array_equal(tv, g)

    def test_controller_never_takes_joint_acceleration(self):
        ops = [
            control.impedance_filter_step,
            control.auxiliary_error,
            control.reference_signals,
            control.virtual_torque,
            control.svc_modulate,
            control.applied_input,
            ImpedanceController.evaluate,
            ImpedanceController.derivative,
        ]
        for op in ops:
            params = inspect.signature(op).parameters
            assert "qdd" not in params, op.__name__


class TestSvc:
    def test_zero_torque(self):
        assert svc_modulate(0.0, 48.0, ACT) == (0.0, False)

    def test_table_i_ratio(self):
        u, sat = svc_modulate(42.0, 48.0, ACT)
        assert u == pytest.approx(0.1, rel=1e-14) and not sat

    def test_torque_ceiling(self):
        assert applied_input(1.0, 48.0, ACT) == pytest.approx(420.0, rel=1e-14)
        assert torque_ceiling(48.0, ACT) == pytest.approx(420.0, rel=1e-14)
        assert applied_input(0.0, 48.0, ACT) == 0.0

    def test_saturation_clamps(self):
        u, sat = svc_modulate(-500.0, 48.0, ACT)
        assert u == -1.0 and sat
        assert applied_input(u, 48.0, ACT) == pytest.approx(-420.0)

    @given(st.floats(-419.999, 419.999), st.floats(1.0, 100.0))
    def test_inverse_pair(self, tv, V_s):
        ceiling = torque_ceiling(V_s, ACT)
        u, sat = svc_modulate(tv, V_s, ACT)
        assert sat == (abs(tv) > ceiling)
        if not sat:
            assert abs(applied_input(u, V_s, ACT) - tv) < 1e-12

    @pytest.mark.parametrize("V_s", [0.0, -1.0])
    def test_depleted_storage(self, V_s):
        with pytest.raises(StorageDepleted):
            svc_modulate(1.0, V_s, ACT)


positive = st.floats(0.05, 50.0)
diag3 = st.tuples(positive, positive, positive).map(np.array)


class TestPassivity:
    def test_identity_gains(self):
        I = np.ones(3)
        rep = passivity_check(I, I, 0 * I, 0 * I, I)
        assert rep.margin == pytest.approx(2.0) and rep.regime == "ND" and rep.passive

    @given(positive, positive, positive)
    def test_scalar_closed_form(self, beta, kappa, m):
        rep = passivity_check(np.full(3, beta), np.full(3, kappa), np.zeros(3), np.zeros(3), np.full(3, m))
        lam = abs(kappa * (1 - beta))
        assert abs(rep.lambda_bar - lam) <= 1e-12 * max(1.0, lam)
        assert abs(rep.margin - (2 * beta**2 - lam)) <= 1e-12 * max(1.0, 2 * beta**2, lam)

    @given(diag3, diag3)
    def test_diagonal_closed_form(self, b, k):
        rep = passivity_check(b, k, np.zeros(3), np.zeros(3), np.ones(3))
        lam = np.abs(k * (1 - b)).max()
        assert abs(rep.lambda_bar - lam) <= 1e-12 * max(1.0, lam)
        assert rep.lambda_B_min == b.min()

    def test_steep_decrease_is_negative_definite(self):
        rep = passivity_check(np.full(3, 2.0), np.full(3, 10.0), np.full(3, -500.0), np.full(3, -5000.0), np.ones(3))
        assert rep.regime == "ND" and rep.passive

    def test_large_damping_constant_gains(self):
        """Large damping makes the off-diagonal block K(1 - B) dominate the bound."""
        b, k = 176.1, 752.9
        rep = passivity_check(np.full(6, b), np.full(6, k), np.zeros(6), np.zeros(6), np.full(6, 18.0))
        assert rep.margin == pytest.approx(2 * b**2 - k * (b - 1), rel=1e-12)
        assert not rep.passive

    @pytest.mark.parametrize("b,k", [(0.0, 1.0), (1.0, -1.0)])
    def test_invalid_gains(self, b, k):
        with pytest.raises(InvalidGainsError):
            passivity_check(np.full(3, b), np.full(3, k), np.zeros(3), np.zeros(3), np.ones(3))


def unit_gains(B_c, K_c, M=1.0):
    return ImpedanceGains(M=np.full((1, 3), M), B_c=np.full((1, 3), B_c), K_c=np.full((1, 3), K_c))


def decreasing_schedule():
    t = np.linspace(0.0, 1e-3, 11)
    frac = (t / t[-1])[:, None] * np.ones(3)
    return GainSchedule(t, -0.5 * frac, -5.0 * frac)


def violating_schedule():
    t = np.array([0.0, 0.1, 0.2, 0.2001, 0.3])
    K = np.array([0.0, 0.0, 0.0, 1000.0, 1000.0])[:, None] * np.ones(3)
    return GainSchedule(t, np.zeros((5, 3)), K)


class TestSchedules:
    def test_decreasing_ramp_certified(self):
        result = audit_schedule(decreasing_schedule(), unit_gains(2.0, 10.0))
        assert result.certified and result.first_violation is None
        assert all(r.regime == "ND" for r in result.reports)

    def test_violating_ramp_first_time(self):
        gains = unit_gains(10.0, 1.0)
        assert passivity_check(np.full(3, 10.0), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3)).passive
        result = audit_schedule(violating_schedule(), gains)
        assert not result.certified
        assert result.first_violation == pytest.approx(0.2)

    def test_interpolation_and_slopes(self):
        s = violating_schedule()
        b, k = s.offsets(0.20005)
        np.testing.assert_allclose(k, 500.0)
        _, kd = s.slopes(2)
        np.testing.assert_allclose(kd, 1000.0 / 1e-4)
        _, kd_last = s.slopes(4)
        np.testing.assert_allclose(kd_last, 0.0)

    def test_csv_round_trip(self, tmp_path):
        s = decreasing_schedule()
        s.to_csv(tmp_path / "s.csv")
        back = GainSchedule.load_csv(tmp_path / "s.csv")
        # files carry 13 significant digits
        np.testing.assert_allclose(back.times, s.times, rtol=1e-12)
        np.testing.assert_allclose(back.B_bar, s.B_bar, rtol=1e-12)
        np.testing.assert_allclose(back.K_bar, s.K_bar, rtol=1e-12)

    def test_rejects_unsorted_times(self):
        with pytest.raises(ValueError):
            GainSchedule([0.0, 0.0], np.zeros((2, 3)), np.zeros((2, 3)))

    def test_non_positive_row(self):
        s = GainSchedule([0.0, 1.0], [[0, 0, 0], [-3, 0, 0]], np.zeros((2, 3)))
        with pytest.raises(InvalidGainsError):
            audit_schedule(s, unit_gains(2.0, 10.0))

    def test_invalid_gain_set(self):
        with pytest.raises(InvalidGainsError):
            ImpedanceGains(M=18.0, B_c=197.5, K_c=825.0, B_bar=-200.0)


class TestClosedLoop:
    def test_exact_matching_sliding_dynamics(self, table_i, rng):
        """With unsaturated inputs each arm obeys D S' + (C + K_D) S = 0 and V' = -S^T (K_D + damping) S."""
        chain = table_i.chain()
        table = reference_table(table_i)
        ref = ReferenceSource(table_i, table)
        ctrl = ImpedanceController(table_i.gains, ref, [rb.actuators for rb in table_i.robots])
        k = 2 * 4000  # t = 0.4 s on the half-step table
        t = table.times[k]
        x = chain.pack([chain.consistent_state(table.q[k], 0.0, np.zeros(12))])
        x[0, chain.i_qd] = table.qd[k].ravel()
        x[0, chain.i_vo] = _load_velocity(chain, table.q[k], table.qd[k])
        x[0, chain.i_es + 1 :] = rng.normal(0, 1e-5, 12)
        res = chain.evaluate(t, x, ctrl)
        assert not res.saturated.any()
        q_des, qd_des, qdd_des = ref(t)
        q, qd = table.q[k], table.qd[k]
        w, wd = res.aux["w"][0], res.aux["wd"][0]
        g = table_i.gains
        wdd = (res.T_ext[0] - g.B * wd - g.K * w) / g.M
        qdd_r = qdd_des + g.Lambda * (qd_des - qd) - (wdd + g.Lambda * wd)
        S = res.aux["S"][0]
        Sd = res.qdd[0] - qdd_r
        assert np.abs(S).max() > 1e-5
        for i, arm in enumerate(chain.arms):
            D, C = res.D[0, i], res.C[0, i]
            resid = D @ Sd[i] + (C + np.diag(g.K_D[i])) @ S[i]
            assert np.abs(resid).max() < 1e-8 * max(1.0, np.abs(D @ Sd[i]).max())
            Dd = arm.inertia_derivative(q[i]) @ qd[i]
            vdot = S[i] @ D @ Sd[i] + 0.5 * S[i] @ Dd @ S[i]
            target = -S[i] @ ((g.K_D[i] + arm.damp_d) * S[i])
            assert vdot == pytest.approx(target, rel=1e-8)

    def test_lyapunov_nonincreasing(self, perturbed_run):
        assert perturbed_run.outcome.saturation_duty == 0.0
        V = _lyapunov(perturbed_run)
        assert V[0] > 0
        assert np.max(np.diff(V)) <= 1e-12 * V[0]

    def test_sliding_variable_and_auxiliary_error_vanish(self, perturbed_run):
        a = perturbed_run.record.arrays()
        assert np.linalg.norm(a["S"][-1]) < 1e-3 * np.linalg.norm(a["S"][0])
        assert np.abs(a["zeta"][-1]).max() < 1e-3

    def test_impedance_relation_on_tail(self, table_i, baseline_run):
        rel = impedance_residual(table_i, baseline_run, tail_start=0.5)
        assert rel < 1e-2


def _load_velocity(chain, q, qd):
    from regencrm.kinematics import grasp_point_pose

    h = 1e-7
    a = grasp_point_pose(chain.robots[0], q[0] - h * qd[0], chain.offsets[0], chain.delta[0])
    b = grasp_point_pose(chain.robots[0], q[0] + h * qd[0], chain.offsets[0], chain.delta[0])
    return (b - a) / (2 * h)


def _lyapunov(run):
    a = run.record.arrays()
    S = a["S"].reshape(len(a["S"]), -1, 3)
    return 0.5 * np.einsum("kni,knij,knj->k", S, a["D"], S)


def impedance_residual(sc, run, tail_start):
    """max_t |M q~'' + B q~' + K q~ - T_ext| / |T_ext| over t >= tail_start."""
    a = run.record.arrays()
    tab = reference_table(sc)
    idx = np.rint(a["t"] / tab.step).astype(int)
    n = len(idx)
    qt = a["q_des"] - a["q"]
    qdt = tab.qd[idx].reshape(n, -1) - a["qd"]
    qddt = tab.qdd[idx].reshape(n, -1) - a["qdd"]
    g = sc.gains
    res = g.M.ravel() * qddt + g.B.ravel() * qdt + g.K.ravel() * qt - a["T_ext"]
    tail = a["t"] >= tail_start
    return float(np.max(np.linalg.norm(res[tail], axis=1) / np.linalg.norm(a["T_ext"][tail], axis=1)))
