import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regencrm.energy import (
    EnergyLedger,
    EnergySample,
    LedgerBatch,
    UndefinedEffectiveness,
    accumulate,
    effectiveness,
    joint_consumption,
    joule_loss_rate,
    motor_current,
    sankey_balance,
    sankey_export,
    storage_power,
    write_ledger_json,
    write_sankey_json,
)
from regencrm.models import ActuatorParams
from regencrm.simulation import mirrored_scenario, rollout

ACT = ActuatorParams()
R_A = 0.4 / 3.5**2


class TestJouleLoss:
    def test_zero_current(self):
        qd = 1.7
        assert joule_loss_rate(30.625 * qd, qd, ACT) == pytest.approx(0.0, abs=1e-12)

    def test_stall(self):
        assert joule_loss_rate(42.0, 0.0, ACT) == pytest.approx(0.4 * 42.0**2 / 3.5**2, rel=1e-14)

    def test_circuit_oracle(self, rng):
        """R I^2 with I from the armature circuit, on 1e5 random samples."""
        n = 100_000
        tv = rng.uniform(-420, 420, n)
        qd = rng.uniform(-20, 20, n)
        V_s = rng.uniform(5, 100, n)
        a, R = 3.5, 0.4
        u = tv * R / (a * V_s)
        I = (u * V_s - a * qd) / R
        oracle = R * I * I
        loss = joule_loss_rate(tv, qd, ACT)
        assert np.all(loss >= 0)
        scale = np.maximum(1.0, np.abs(tv * qd) + oracle)
        assert np.max(np.abs(loss - oracle) / scale) < 1e-12
        np.testing.assert_allclose(motor_current(tv, qd, V_s, ACT), I, rtol=1e-12, atol=1e-12)

    @given(st.floats(-1e3, 1e3), st.floats(-50, 50))
    def test_nonnegative(self, tv, qd):
        assert joule_loss_rate(tv, qd, ACT) >= -1e-9 * max(1.0, tv * tv, qd * qd)


class TestStoragePower:
    def test_zero_torque(self):
        assert storage_power(np.zeros(6), np.ones(6), np.full(6, R_A)) == 0.0

    def test_assistive_braking_regenerates(self):
        p = storage_power([-1.0], [-1.0], [R_A])
        assert p == pytest.approx(1.0 - 0.4 / 12.25, rel=1e-14)
        assert p > 0

    def test_converter_sum(self, rng):
        """Per-joint storage power adds up to -sum(u V_s I) through lossless converters."""
        for _ in range(100):
            tv = rng.uniform(-400, 400, 6)
            qd = rng.uniform(-10, 10, 6)
            V_s = rng.uniform(10, 60)
            u = tv * 0.4 / (3.5 * V_s)
            I = motor_current(tv, qd, V_s, ACT)
            expected = -np.sum(u * V_s * I)
            assert storage_power(tv, qd, np.full(6, R_A)) == pytest.approx(expected, rel=1e-12, abs=1e-9)

    @given(st.lists(st.floats(-400, 400), min_size=6, max_size=6), st.lists(st.floats(-10, 10), min_size=6, max_size=6))
    def test_decomposes_into_mechanical_power_and_losses(self, tv, qd):
        tv, qd = np.array(tv), np.array(qd)
        joule = joule_loss_rate(tv, qd, ACT)
        # storage gains the mechanical input minus Joule and back-EMF terms
        expected = np.sum(-qd * tv - joule + 30.625 * qd * qd)
        assert storage_power(tv, qd, np.full(6, R_A)) == pytest.approx(expected, rel=1e-10, abs=1e-8)

    def test_consumption_is_negated_storage_power(self, rng):
        tv, qd = rng.normal(0, 100, 6), rng.normal(0, 3, 6)
        assert np.sum(joint_consumption(tv, qd, np.full(6, R_A))) == pytest.approx(
            -storage_power(tv, qd, np.full(6, R_A)), rel=1e-12
        )


def _sample(qd, U, T_ext, links=0.0, rotors=0.0, load=0.0):
    return EnergySample(
        np.asarray(qd, float)[None],
        np.asarray(U, float)[None],
        np.asarray(T_ext, float)[None],
        np.array([links]),
        np.array([rotors]),
        np.array([load]),
    )


class TestAccumulate:
    r_a = np.full((2, 3), R_A)
    friction = np.zeros((2, 3))

    def test_zero_motion(self):
        z = np.zeros((2, 3))
        led = accumulate(EnergyLedger(), _sample(z, z, z), _sample(z, z, z), 1e-3, self.r_a, self.friction)
        assert all(v == 0 for v in led.terms().values()) and led.dE_nr == 0

    def test_trapezoid_of_linear_power(self):
        qd = np.ones((2, 3))
        a = _sample(qd, np.zeros((2, 3)), np.zeros((2, 3)))
        b = _sample(qd, np.zeros((2, 3)), np.full((2, 3), 2.0))
        led = accumulate(EnergyLedger(), a, b, 0.5, self.r_a, self.friction)
        assert led.W_ext == pytest.approx(0.5 * 0.5 * (0 + 12.0))

    @given(st.lists(st.floats(-5, 5), min_size=30, max_size=30), st.lists(st.floats(-300, 300), min_size=30, max_size=30))
    def test_clipping_never_lowers_consumption(self, qds, taus):
        batch = LedgerBatch(1, (1, 3), np.full((1, 3), R_A), np.zeros((1, 3)))
        for k in range(10):
            qd = np.array(qds[3 * k : 3 * k + 3]).reshape(1, 1, 3)
            U = np.array(taus[3 * k : 3 * k + 3]).reshape(1, 1, 3)
            batch.add(EnergySample(qd, U, np.zeros_like(U), np.zeros(1), np.zeros(1), np.zeros(1)), None if k == 0 else 1e-2)
        led = batch.ledgers()[0]
        assert led.dE_nr >= led.dE_r - 1e-12
        assert led.dE_nr >= -1e-12

    def test_merge_adds(self):
        a = EnergyLedger(dE_s=1.0, W_ext=2.0, per_joint_energy=[1.0, 2.0])
        b = EnergyLedger(dE_s=0.5, W_ext=-1.0, per_joint_energy=[0.5, 0.5])
        m = a.merge(b)
        assert (m.dE_s, m.W_ext, m.per_joint_energy) == (1.5, 1.0, [1.5, 2.5])


class TestEffectiveness:
    def test_reference_numbers(self):
        assert effectiveness(9.69, 25.84) == pytest.approx(0.625, abs=1e-12)

    def test_limits(self):
        assert effectiveness(3.0, 3.0) == 0.0
        assert effectiveness(0.0, 3.0) == 1.0

    def test_undefined(self):
        with pytest.raises(UndefinedEffectiveness):
            effectiveness(1.0, 0.0)


class TestSankey:
    def test_flows_sum_to_residual(self):
        led = EnergyLedger(dE_s=-3.0, W_ext=10.0, dE_m_tot=4.0, sigma_m_tot=1.0, sigma_e=7.5, closure_residual=0.5)
        assert sankey_balance(sankey_export(led)) == pytest.approx(led.closure_residual)

    def test_maneuver_flows(self, baseline_run):
        led = baseline_run.ledger
        assert sankey_balance(sankey_export(led)) == pytest.approx(led.closure_residual, abs=1e-12)

    def test_json_exports(self, baseline_run, tmp_path):
        write_ledger_json(tmp_path / "l.json", baseline_run.ledger)
        write_sankey_json(tmp_path / "s.json", baseline_run.ledger)
        assert json.loads((tmp_path / "l.json").read_text())["dE_s"] == baseline_run.ledger.dE_s
        assert len(json.loads((tmp_path / "s.json").read_text())["flows"]) == 5


class TestRolloutBalance:
    def test_closure_on_every_rollout(self, baseline_run, perturbed_run):
        for run in (baseline_run, perturbed_run):
            assert run.ledger.relative_closure() < 1e-3

    def test_descent_supplies_the_external_work(self, table_i, baseline_run):
        """The arms receive what the load loses: W_ext = -(change of load energy)."""
        led = baseline_run.ledger
        assert led.W_ext == pytest.approx(-led.dE_load, rel=1e-3)
        drop = table_i.load.mass * 9.81 * 0.4
        assert led.W_ext == pytest.approx(drop, rel=1e-2)
        # gravity feeds both sources (load descent and the arms' own potential drop); storage is a sink
        assert led.W_ext > 0 and led.dE_m_tot < 0 and led.dE_s > 0
        assert led.W_ext - led.dE_m_tot > led.sigma_e + led.sigma_m_tot

    def test_zero_gravity_has_no_net_external_work(self):
        sc = mirrored_scenario()
        sc.load = dataclasses.replace(sc.load, gravity=(0.0, 0.0))
        led = rollout(sc, record=False).ledger
        assert abs(led.W_ext) < 1e-2
        assert led.relative_closure() < 1e-3

    def test_residual_is_second_order(self):
        """Trapezoid order: halving dt divides the closure residual by about four."""
        res = [rollout(mirrored_scenario(dt=dt, horizon=0.5), record=False).ledger.closure_residual for dt in (5e-4, 2.5e-4)]
        assert 3.5 < res[0] / res[1] < 4.6

    def test_losses_nonnegative(self, baseline_run):
        led = baseline_run.ledger
        assert led.sigma_e >= 0 and led.sigma_m_tot >= 0
