"""Closed-loop rollouts of the cooperative arms carrying the load."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .control import GainSchedule, ImpedanceController, ImpedanceGains
from .dynamics import ClosedChain, ConstantVoltage, DynamicsError, IntegrationDiverged, SystemState, Ultracapacitor
from .energy import EnergyLedger, EnergySample, LedgerBatch, joint_consumption
from .kinematics import (
    JointReferenceTable,
    default_branches,
    fk_array,
    joint_reference,
    load_to_ee_reference,
    quintic_trajectory,
    sample_joint_references,
)
from .models import GraspGeometry, LoadModel, PlanarPose, RobotModel, table_i_load, table_i_robots


@dataclass
class SimSettings:
    dt: float = 1e-4
    horizon: float | None = None  # defaults to the maneuver duration
    storage: str = "constant"  # or "ultracapacitor"
    V_s: float = 48.0
    capacitance: float = 58.0
    eps_f: float = 0.005
    saturation_duty_tol: float = 0.01
    drift_tol: float = 1e-4
    log_every: int = 1
    max_joint_speed: float = 100.0  # rad/s; faster rows are treated as diverged
    closure_tol: float = 1e-3  # relative energy-balance residual beyond which the step is not resolved


@dataclass
class Scenario:
    robots: tuple
    load: LoadModel
    p0: PlanarPose
    pf: PlanarPose
    T: float
    gains: ImpedanceGains
    schedule: GainSchedule | None = None
    sim: SimSettings = field(default_factory=SimSettings)
    branches: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        self.robots = tuple(self.robots)
        if self.branches is None:
            self.branches = tuple(default_branches(len(self.robots)))

    @property
    def horizon(self) -> float:
        return self.T if self.sim.horizon is None else self.sim.horizon

    def storage_model(self):
        if self.sim.storage == "ultracapacitor":
            return Ultracapacitor(self.sim.capacitance, self.sim.V_s)
        return ConstantVoltage(self.sim.V_s)

    def chain(self) -> ClosedChain:
        return ClosedChain(self.robots, self.load, storage=self.storage_model())

    def with_dt(self, dt: float) -> "Scenario":
        sim = SimSettings(**{**self.sim.__dict__, "dt": dt})
        return Scenario(self.robots, self.load, self.p0, self.pf, self.T, self.gains, self.schedule, sim, self.branches, self.seed)


def table_i_scenario(dt: float = 1e-4, **sim_overrides) -> Scenario:
    """Rod carried 0.4 m right and 0.4 m down in 1 s by two identical arms."""
    robots = table_i_robots()
    return Scenario(
        robots=robots,
        load=table_i_load(),
        p0=PlanarPose(0.2, -0.3, 0.0),
        pf=PlanarPose(0.6, -0.7, 0.0),
        T=1.0,
        gains=ImpedanceGains.table_i_baseline(len(robots)),
        sim=SimSettings(dt=dt, **sim_overrides),
    )


def mirrored_scenario(dt: float = 2e-3, rotor_inertia: float = 1e-4, **sim_overrides) -> Scenario:
    """Mirror-symmetric variant: vertical descent midway between the bases.

    The second arm grips the rod rotated by pi, so each arm is the mirror
    image of the other about the vertical line through the load. The added
    rotor inertia raises the smallest reflected inertia and lets coarse
    integration steps stay stable, which suits cheap parameter sweeps.
    """
    robots = table_i_robots(rotor_inertia=rotor_inertia)
    base = table_i_load()
    load = LoadModel(
        mass=base.mass,
        inertia=base.inertia,
        length=base.length,
        grasp=GraspGeometry(base.grasp.offsets, (0.0, np.pi)),
        gravity=base.gravity,
    )
    return Scenario(
        robots=robots,
        load=load,
        p0=PlanarPose(0.4, -0.3, 0.0),
        pf=PlanarPose(0.4, -0.7, 0.0),
        T=1.0,
        gains=ImpedanceGains.table_i_baseline(len(robots)),
        sim=SimSettings(dt=dt, **sim_overrides),
    )


class ReferenceSource:
    """Joint references from a half-step table, computed directly off-grid."""

    def __init__(self, scenario: Scenario, table: JointReferenceTable):
        self.sc = scenario
        self.table = table

    def __call__(self, t: float):
        k = self.table.index(t)
        if k is not None:
            return self.table.q[k], self.table.qd[k], self.table.qdd[k]
        return self.exact(t)

    def exact(self, t: float):
        sc = self.sc
        ref = quintic_trajectory(sc.p0, sc.pf, sc.T, min(max(t, 0.0), sc.T))
        k = min(max(int(round(t / self.table.step)), 0), len(self.table.times) - 1)
        out = []
        for i, rb in enumerate(sc.robots):
            ee = load_to_ee_reference(ref, sc.load.grasp.offsets[i], sc.load.grasp.orientation_offsets[i])
            out.append(joint_reference(rb, ee, sc.branches[i], self.table.q[k, i]))
        return tuple(np.array([o[j] for o in out]) for j in range(3))


_TABLE_CACHE: dict = {}


def reference_table(sc: Scenario) -> JointReferenceTable:
    key = (sc.robots, sc.load.grasp, sc.p0, sc.pf, sc.T, sc.branches, sc.sim.dt, sc.horizon)
    tab = _TABLE_CACHE.get(key)
    if tab is None:
        tab = sample_joint_references(
            sc.robots, sc.load.grasp, sc.p0, sc.pf, sc.T, 0.5 * sc.sim.dt, sc.horizon, sc.branches
        )
        if len(_TABLE_CACHE) > 8:
            _TABLE_CACHE.clear()
        _TABLE_CACHE[key] = tab
    return tab


@dataclass
class RolloutRecord:
    """Sampled time series of one rollout (row 0 of the batch)."""

    t: list = field(default_factory=list)
    q: list = field(default_factory=list)
    qd: list = field(default_factory=list)
    q_des: list = field(default_factory=list)
    u: list = field(default_factory=list)
    tv: list = field(default_factory=list)
    U: list = field(default_factory=list)
    T_ext: list = field(default_factory=list)
    power: list = field(default_factory=list)
    dE_s: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    load: list = field(default_factory=list)
    S: list = field(default_factory=list)
    zeta: list = field(default_factory=list)
    qdd: list = field(default_factory=list)
    D: list = field(default_factory=list)
    w: list = field(default_factory=list)
    wd: list = field(default_factory=list)

    def arrays(self) -> dict:
        return {k: np.array(v) for k, v in self.__dict__.items()}


@dataclass
class RolloutOutcome:
    ledger: EnergyLedger | None
    final_error: float
    max_drift: float
    saturation_duty: float
    max_tracking_error: float
    diverged: bool = False
    diverged_at: float | None = None
    final_state: SystemState | None = None
    reason: str | None = None

    def in_invariant_set(self, eps_f: float) -> bool:
        return not self.diverged and self.final_error <= eps_f


@dataclass
class RolloutResult:
    outcomes: list
    record: RolloutRecord | None
    wall_time: float

    @property
    def outcome(self) -> RolloutOutcome:
        return self.outcomes[0]

    @property
    def ledger(self) -> EnergyLedger:
        return self.outcomes[0].ledger


def initial_state(sc: Scenario, chain: ClosedChain, controller, table: JointReferenceTable, perturb=None):
    q0 = table.q[0].copy()
    st = chain.consistent_state(q0, 0.0, np.zeros(controller.n_states))
    if perturb is not None:
        perturb(st)
    return st


def rollout(
    sc: Scenario,
    gains: Sequence[ImpedanceGains] | None = None,
    record: bool = True,
    perturb=None,
    raise_on_divergence: bool = False,
    chain: ClosedChain | None = None,
) -> RolloutResult:
    """Integrate the closed loop for every gain set in ``gains`` (default: the scenario's).

    Each batch row is an independent rollout; only row 0 is recorded.
    """
    t_start = time.perf_counter()
    glist = [sc.gains] if gains is None else list(gains)
    P = len(glist)
    chain = sc.chain() if chain is None else chain
    table = reference_table(sc)
    ref = ReferenceSource(sc, table)
    controller = ImpedanceController(glist, ref, [rb.actuators for rb in sc.robots], sc.schedule)
    st0 = initial_state(sc, chain, controller, table, perturb)
    x = np.repeat(chain.pack([st0]), P, axis=0)
    dt = sc.sim.dt
    n_steps = int(round(sc.horizon / dt))
    r_a = chain.R / chain.a**2
    friction = np.stack([arm.fric_d for arm in chain.arms])
    ledger = LedgerBatch(P, (chain.N, 3), r_a, friction)
    rec = RolloutRecord() if record else None
    alive = np.ones(P, dtype=bool)
    diverged_at = [None] * P
    sat_count = np.zeros(P)
    max_drift = np.zeros(P)
    max_track = np.zeros(P)
    t = 0.0

    def sample(x, res):
        links, rotors, load = chain.mechanical_energy(x, res.D)
        return EnergySample(x[:, chain.i_qd].reshape(P, chain.N, 3), res.U, res.T_ext, links, rotors, load)

    def observe(k, x, res, t, h):
        nonlocal sat_count
        rates = ledger.add(sample(x, res), h)
        sat_count += np.any(res.saturated, axis=(1, 2))
        drift = np.max(np.linalg.norm(res.phi[..., :2], axis=-1), axis=1)
        np.maximum(max_drift, drift, out=max_drift)
        q = x[:, chain.i_q].reshape(P, chain.N, 3)
        q_des = ref(t)[0]
        np.maximum(max_track, np.max(np.abs(q_des - q), axis=(1, 2)), out=max_track)
        if rec is not None and k % sc.sim.log_every == 0:
            qd = x[:, chain.i_qd].reshape(P, chain.N, 3)
            rec.t.append(t)
            rec.q.append(q[0].ravel().copy())
            rec.qd.append(qd[0].ravel().copy())
            rec.q_des.append(q_des.ravel().copy())
            rec.tv.append(res.tv[0].ravel().copy())
            rec.U.append(res.U[0].ravel().copy())
            rec.u.append((res.U[0] / (res.V_s[0] * chain.a / chain.R)).ravel())
            rec.T_ext.append(res.T_ext[0].ravel().copy())
            rec.power.append(rates["cons"][0].ravel().copy())
            rec.dE_s.append(ledger.dE_s[0])
            rec.residual.append(float(np.linalg.norm(res.phi[0])))
            rec.load.append(x[0, chain.i_xo].copy())
            rec.S.append(res.aux["S"][0].ravel().copy())
            rec.zeta.append(res.aux["zeta"][0].ravel().copy())
            rec.qdd.append(res.qdd[0].ravel().copy())
            rec.D.append(res.D[0].copy())
            rec.w.append(res.aux["w"][0].ravel().copy())
            rec.wd.append(res.aux["wd"][0].ravel().copy())

    safe = x[:1].copy()
    k1, r1 = chain.derivative(t, x, controller)
    observe(0, x, r1, t, None)
    for k in range(1, n_steps + 1):
        t_new = k * dt
        try:
            x_new, _ = chain.rk4(t, x, dt, controller, first=(k1, r1))
            k1, r1 = chain.derivative(t_new, x_new, controller)
            if not np.all(np.isfinite(k1)):
                raise IntegrationDiverged(f"non-finite derivative at t={t_new:.6g}", t_new)
        except (DynamicsError, np.linalg.LinAlgError, FloatingPointError):
            if raise_on_divergence:
                raise
            if P == 1:
                diverged_at[0] = t_new
                break
            x_new = _quarantine(chain, controller, x, dt, t, alive, diverged_at, safe)
            if not alive.any():
                break
            k1, r1 = chain.derivative(t_new, x_new, controller)
        runaway = alive & (np.max(np.abs(x_new[:, chain.i_qd]), axis=1) > sc.sim.max_joint_speed)
        if runaway.any():
            if raise_on_divergence:
                raise IntegrationDiverged(f"joint speed above {sc.sim.max_joint_speed} rad/s at t={t_new:.6g}", t_new)
            for p in np.flatnonzero(runaway):
                alive[p] = False
                diverged_at[p] = t_new
                x_new[p] = safe[0]
            if not alive.any():
                break
            k1, r1 = chain.derivative(t_new, x_new, controller)
        x, t = x_new, t_new
        observe(k, x, r1, t, dt)

    final_pos = x[:, chain.i_xo][:, :2]
    err = np.linalg.norm(final_pos - np.array([sc.pf.x, sc.pf.y]), axis=1)
    ledgers = ledger.ledgers() if ledger.last is not None else [None] * P
    outcomes = []
    for p in range(P):
        dead = diverged_at[p] is not None
        reason = "integration diverged" if dead else None
        ledger_p = None if dead else ledgers[p]
        if ledger_p is not None and ledger_p.relative_closure() > sc.sim.closure_tol:
            # bounded but unresolved: saturation can keep an unstable step finite
            dead = True
            diverged_at[p] = t
            reason = f"energy balance not closed (relative residual {ledger_p.relative_closure():.3g})"
        outcomes.append(
            RolloutOutcome(
                ledger=ledger_p,
                final_error=float("inf") if dead else float(err[p]),
                max_drift=float(max_drift[p]),
                saturation_duty=float(sat_count[p] / (n_steps + 1)),
                max_tracking_error=float(max_track[p]),
                diverged=dead,
                diverged_at=diverged_at[p],
                final_state=None if dead else chain.unpack(x[p : p + 1], t)[0],
                reason=reason,
            )
        )
    return RolloutResult(outcomes, rec, time.perf_counter() - t_start)


def _quarantine(chain, controller, x, dt, t, alive, diverged_at, safe):
    """Re-run a failed batch step row by row; rows that fail are parked at a benign state."""
    x_new = x.copy()
    for p in range(x.shape[0]):
        if alive[p]:
            ctl = controller.row(p)
            try:
                xp, _ = chain.rk4(t, x[p : p + 1], dt, ctl)
                kp, _ = chain.derivative(t + dt, xp, ctl)
                if not np.all(np.isfinite(kp)):
                    raise IntegrationDiverged("non-finite derivative", t + dt)
                x_new[p] = xp[0]
                continue
            except (DynamicsError, np.linalg.LinAlgError, FloatingPointError):
                alive[p] = False
                diverged_at[p] = t + dt
        x_new[p] = safe[0]
    return x_new
