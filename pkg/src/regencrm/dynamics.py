"""Arm and load dynamics, grasp algebra and the closed-chain integrator.

The numerical core is vectorized over a leading batch axis so that a whole
population of gain candidates can be integrated in lock-step; the public
single-configuration functions are thin wrappers around it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kinematics import fk_array, jacobian_array, jacobian_dot_qdot, perp, rot2
from .models import ActuatorParams, GraspGeometry, LoadModel, PlanarPose, RobotModel, wrap_angle

BAUMGARTE_ALPHA = 20.0
BAUMGARTE_BETA = 20.0
PINV_CUTOFF = 1e-10


class DynamicsError(RuntimeError):
    pass


class SingularSystemError(DynamicsError):
    pass


class DegenerateGraspError(DynamicsError):
    pass


class IntegrationDiverged(DynamicsError):
    def __init__(self, message: str, t: float):
        super().__init__(message)
        self.t = t


class StorageDepletedError(DynamicsError):
    pass


# ---------------------------------------------------------------------------
# single-arm rigid-body terms


class ArmTerms:
    """Precomputed coefficient tensors for fast evaluation of D, C, g of one arm.

    With link angles theta_j, every entry of the inertia matrix is a fixed
    combination of cos(theta_a - theta_b), which keeps the evaluation and its
    configuration derivative in closed form.
    """

    def __init__(self, robot: RobotModel, gravity=(0.0, -9.81)):
        self.robot = robot
        l = np.asarray(robot.link_lengths)
        c = np.asarray(robot.link_com_offsets)
        m = np.asarray(robot.link_masses)
        inertia = np.asarray(robot.link_inertias)
        # s_{k,m} = sum_j W[k,m,j] e_j is the vector from joint m to the COM of link k
        W = np.zeros((3, 3, 3))
        for k in range(3):
            for mm in range(k + 1):
                W[k, mm, mm:k] = l[mm:k]
                W[k, mm, k] = c[k]
        self.A = np.einsum("k,kma,knb->mnab", m, W, W)
        idx = np.arange(3)
        self.I_const = np.einsum("k,mk,nk->mn", inertia, idx[:, None] <= idx, idx[:, None] <= idx)
        self.E = (idx[:, None, None] <= idx[None, :, None]).astype(float) - (
            idx[:, None, None] <= idx[None, None, :]
        ).astype(float)
        self.mu = np.einsum("k,kj->j", m, W[:, 0, :])
        self.lower = (idx[:, None] <= idx[None, :]).astype(float)  # [m <= j]
        self.gravity = np.asarray(gravity, dtype=float)
        self.base = np.array([robot.base_pose.x, robot.base_pose.y])
        self.phi0 = robot.base_pose.phi
        self.lengths = l
        self.rot_d = robot.actuator_array("reflected_inertia")
        self.fric_d = robot.actuator_array("reflected_friction")
        self.emf_d = np.array([act.a2_over_r for act in robot.actuators])
        self.a = robot.actuator_array("a")
        self.R = robot.actuator_array("resistance")
        self.damp_d = self.fric_d + self.emf_d

    def angles(self, q):
        return self.phi0 + np.cumsum(q, axis=-1)

    def matrices(self, q, qd, augmented: bool = True):
        """Return D, C, g for batched (..., 3) joint arrays."""
        th = self.angles(q)
        diff = th[..., :, None] - th[..., None, :]
        cosd, sind = np.cos(diff), np.sin(diff)
        D = np.einsum("mnab,...ab->...mn", self.A, cosd) + self.I_const
        dD = -np.einsum("mnab,...ab,lab->...mnl", self.A, sind, self.E)
        C = 0.5 * (
            np.einsum("...kji,...i->...kj", dD, qd)
            + np.einsum("...kij,...i->...kj", dD, qd)
            - np.einsum("...ijk,...i->...kj", dD, qd)
        )
        gperp = self.gravity[0] * -np.sin(th) + self.gravity[1] * np.cos(th)
        g = -np.einsum("j,mj,...j->...m", self.mu, self.lower, gperp)
        if augmented:
            D = D + np.diag(self.rot_d)
            C = C + np.diag(self.damp_d)
        return D, C, g

    def inertia_derivative(self, q):
        th = self.angles(q)
        diff = th[..., :, None] - th[..., None, :]
        return -np.einsum("mnab,...ab,lab->...mnl", self.A, np.sin(diff), self.E)

    def potential(self, q):
        th = self.angles(q)
        e = np.stack([np.cos(th), np.sin(th)], axis=-1)
        base_term = np.sum(self.robot.link_masses) * (self.gravity @ self.base)
        return -(base_term + np.einsum("j,...jd,d->...", self.mu, e, self.gravity))

    def link_kinetic(self, q, qd):
        D, _, _ = self.matrices(q, qd, augmented=False)
        return 0.5 * np.einsum("...i,...ij,...j->...", qd, D, qd)

    def rotor_kinetic(self, qd):
        return 0.5 * np.einsum("j,...j->...", self.rot_d, qd * qd)

    def fk(self, q):
        return fk_array(self.robot, q)

    def jacobian(self, q):
        return jacobian_array(self.robot, q)

    def jdot_qd(self, q, qd):
        return jacobian_dot_qdot(self.robot, q, qd)


class StackedArms:
    """All arms of a chain evaluated together over a (P, N, 3) joint array.

    The coefficient tensors of every :class:`ArmTerms` are stacked and
    flattened so each term reduces to one batched matrix product.
    """

    def __init__(self, arms: Sequence[ArmTerms]):
        self.N = len(arms)
        self.A = np.stack([arm.A.reshape(9, 9) for arm in arms])  # (N, mn, ab)
        christoffel = []
        for arm in arms:
            AE = np.einsum("mnab,lab->mnlab", arm.A, arm.E)  # dD_mn/dq_l = -AE . sin
            gam = -0.5 * (
                AE.transpose(0, 1, 2, 3, 4)  # [k, j, i]
                + AE.transpose(0, 2, 1, 3, 4)  # [k, i, j]
                - AE.transpose(2, 1, 0, 3, 4)  # [i, j, k]
            )
            christoffel.append(gam.reshape(27, 9))
        self.gamma = np.stack(christoffel)  # (N, kji, ab)
        self.I_const = np.stack([arm.I_const for arm in arms])
        self.rot_d = np.stack([arm.rot_d for arm in arms])
        self.damp_d = np.stack([arm.damp_d for arm in arms])
        self.mu = np.stack([arm.mu for arm in arms])
        self.gravity = arms[0].gravity
        self.phi0 = np.array([arm.phi0 for arm in arms])
        self.base = np.stack([arm.base for arm in arms])
        self.lengths = np.stack([arm.lengths for arm in arms])
        self.aug_D = np.stack([np.diag(d) for d in self.rot_d])
        self.aug_C = np.stack([np.diag(d) for d in self.damp_d])

    def evaluate(self, q, qd):
        """D, C (augmented), g and the kinematic terms ee, J, Jdot qd for (P, N, 3) inputs."""
        P, N = q.shape[:2]
        th = self.phi0[:, None] + np.cumsum(q, axis=-1)
        c, s = np.cos(th), np.sin(th)
        # cos/sin of pairwise angle differences via product formulas
        cosd = c[..., :, None] * c[..., None, :] + s[..., :, None] * s[..., None, :]
        sind = s[..., :, None] * c[..., None, :] - c[..., :, None] * s[..., None, :]
        D = (self.A @ cosd.reshape(P, N, 9, 1)).reshape(P, N, 3, 3) + self.I_const + self.aug_D
        X = (self.gamma @ sind.reshape(P, N, 9, 1)).reshape(P, N, 9, 3)
        C = (X @ qd[..., None]).reshape(P, N, 3, 3) + self.aug_C
        gperp = self.mu * (self.gravity[1] * c - self.gravity[0] * s)
        g = -np.cumsum(gperp[..., ::-1], axis=-1)[..., ::-1]
        lc, ls = self.lengths * c, self.lengths * s
        ee = np.empty((P, N, 3))
        ee[..., 0] = self.base[:, 0] + lc.sum(-1)
        ee[..., 1] = self.base[:, 1] + ls.sum(-1)
        ee[..., 2] = th[..., 2]
        J = np.empty((P, N, 3, 3))
        J[..., 0, :] = -np.cumsum(ls[..., ::-1], axis=-1)[..., ::-1]
        J[..., 1, :] = np.cumsum(lc[..., ::-1], axis=-1)[..., ::-1]
        J[..., 2, :] = 1.0
        om = np.cumsum(qd, axis=-1)
        om2 = om * om
        jdq = np.zeros((P, N, 3))
        jdq[..., 0] = -np.sum(om2 * lc, axis=-1)
        jdq[..., 1] = -np.sum(om2 * ls, axis=-1)
        return D, C, g, ee, J, jdq


def rigid_body_matrices(robot: RobotModel, q, qd, gravity=(0.0, -9.81)):
    """Inertia, Coriolis (Christoffel) and gravity terms of the bare arm."""
    return ArmTerms(robot, gravity).matrices(np.asarray(q, float), np.asarray(qd, float), augmented=False)


def augment(robot: RobotModel):
    """Diagonal additions from the joint mechanisms: (reflected inertia, damping)."""
    rot = robot.actuator_array("reflected_inertia")
    damp = robot.actuator_array("reflected_friction") + np.array([a.a2_over_r for a in robot.actuators])
    return rot, damp


def augmented_matrices(robot: RobotModel, q, qd, gravity=(0.0, -9.81)):
    return ArmTerms(robot, gravity).matrices(np.asarray(q, float), np.asarray(qd, float), augmented=True)


# ---------------------------------------------------------------------------
# grasp algebra


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def grasp_matrix(offsets, load_orientation=0.0) -> np.ndarray:
    """Map from stacked end-effector wrenches to the net wrench at the load COM.

    Planar offsets (2-vectors) with an orientation angle give a 3 x 3N matrix
    acting on (fx, fy, mz) blocks. Spatial offsets (3-vectors) with a 3x3
    rotation give the 6 x 6N matrix acting on (f, m) blocks.
    """
    offsets = [np.asarray(r, dtype=float) for r in offsets]
    if not offsets:
        raise ValueError("at least one grasp is required")
    if offsets[0].size == 2:
        R = rot2(float(load_orientation))
        blocks = []
        for r in offsets:
            rw = R @ r
            blocks.append(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [rw[1], -rw[0], 1.0]]))
        return np.hstack(blocks)
    R = np.eye(3) if np.ndim(load_orientation) == 0 else np.asarray(load_orientation, dtype=float)
    blocks = []
    for r in offsets:
        blk = np.eye(6)
        blk[3:, :3] = -skew(R @ r)
        blocks.append(blk)
    return np.hstack(blocks)


def pinv_svd(A: np.ndarray, cutoff: float = PINV_CUTOFF):
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > cutoff * s[0]
    inv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return inv, int(keep.sum())


def decompose_forces(f, grasp_T):
    """Split stacked grasp wrenches into motion-inducing and internal parts."""
    f = np.asarray(f, dtype=float)
    G = np.asarray(grasp_T, dtype=float)
    Gp, rank = pinv_svd(G)
    if rank < G.shape[0]:
        raise DegenerateGraspError(f"grasp matrix rank {rank} < {G.shape[0]}")
    f_m = Gp @ (G @ f)
    return f_m, f - f_m


def load_dynamics(load: LoadModel, load_vel, wrench) -> np.ndarray:
    """Planar load accelerations (xdd, ydd, omegadot) under the net applied wrench."""
    wrench = np.asarray(wrench, dtype=float)
    g = np.asarray(load.gravity)
    return np.array([*(wrench[:2] / load.mass + g), wrench[2] / load.inertia])


def load_dynamics_spatial(mass: float, inertia, omega, wrench, gravity=(0.0, 0.0, -9.81)):
    """Translational and rotational accelerations of a rigid load (world frame)."""
    I = np.asarray(inertia, dtype=float)
    w = np.asarray(omega, dtype=float)
    F = np.asarray(wrench, dtype=float)
    acc = F[:3] / mass + np.asarray(gravity, dtype=float)
    wdot = np.linalg.solve(I, F[3:] - np.cross(w, I @ w))
    return np.concatenate([acc, wdot])


# ---------------------------------------------------------------------------
# closed-chain state and integration


@dataclass
class SystemState:
    """State of the closed chain: arm joints, load, storage energy and controller filters."""

    q: np.ndarray
    qd: np.ndarray
    load_pose: np.ndarray
    load_vel: np.ndarray
    t: float = 0.0
    storage_energy: float = 0.0
    controller: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.qd = np.asarray(self.qd, dtype=float)
        self.load_pose = np.asarray(
            self.load_pose.as_array() if isinstance(self.load_pose, PlanarPose) else self.load_pose, dtype=float
        )
        self.load_vel = np.asarray(self.load_vel, dtype=float)
        self.controller = np.asarray(self.controller, dtype=float)


@dataclass
class WrenchSet:
    """World-frame wrenches (fx, fy, mz) exerted by the load on each end-effector."""

    F: np.ndarray

    def on_load(self, grasp: GraspGeometry, load_orientation: float) -> np.ndarray:
        return grasp_matrix(grasp.offsets, load_orientation) @ (-self.F.reshape(-1))


@dataclass(frozen=True)
class ConstantVoltage:
    voltage: float = 48.0

    def voltage_of(self, energy):
        return np.full_like(np.asarray(energy, dtype=float), self.voltage)

    def initial_energy(self) -> float:
        return 0.0


@dataclass(frozen=True)
class Ultracapacitor:
    """Storage voltage tracking its energy: E = C V^2 / 2 (energy counted from V0)."""

    capacitance: float = 58.0
    initial_voltage: float = 48.0

    def voltage_of(self, energy):
        e0 = 0.5 * self.capacitance * self.initial_voltage**2
        return np.sqrt(np.maximum(2.0 * (e0 + np.asarray(energy, dtype=float)) / self.capacitance, 0.0))

    def initial_energy(self) -> float:
        return 0.0


class TorqueController:
    """Open-loop joint torques ``torque(t) -> (N, 3)`` (or zero) for the integrator."""

    n_states = 0

    def __init__(self, torque=None, limit=None):
        self.torque = torque
        self.limit = limit

    def evaluate(self, t, q, qd, D, C, g, xc, V_s):
        tau = np.zeros_like(q) if self.torque is None else np.broadcast_to(self.torque(t), q.shape).copy()
        umax = None if self.limit is None else np.broadcast_to(self.limit, q.shape)
        return tau, None, umax, None

    def derivative(self, t, xc, T_ext, aux):
        return np.zeros(xc.shape)


@dataclass
class StageResult:
    qdd: np.ndarray
    load_acc: np.ndarray
    F: np.ndarray
    T_ext: np.ndarray
    U: np.ndarray
    tv: np.ndarray
    saturated: np.ndarray
    storage_power: np.ndarray
    V_s: np.ndarray
    aux: object
    D: np.ndarray
    C: np.ndarray
    g: np.ndarray
    phi: np.ndarray
    phid: np.ndarray


class ClosedChain:
    """N planar arms rigidly grasping one load, vectorized over a batch axis.

    Packed state layout per batch row: q (3N), qd (3N), load pose (3),
    load velocity (3), storage energy (1), controller states.
    """

    def __init__(
        self,
        robots: Sequence[RobotModel],
        load: LoadModel,
        storage=None,
        baumgarte=(BAUMGARTE_ALPHA, BAUMGARTE_BETA),
    ):
        self.robots = tuple(robots)
        self.load = load
        self.grasp = load.grasp
        if self.grasp.n != len(self.robots):
            raise ValueError("grasp geometry and robot count disagree")
        self.N = len(self.robots)
        self.arms = [ArmTerms(rb, load.gravity) for rb in self.robots]
        self.stacked = StackedArms(self.arms)
        self.storage = ConstantVoltage() if storage is None else storage
        self.alpha, self.beta = baumgarte
        self.offsets = np.array(self.grasp.offsets)
        self.delta = np.array(self.grasp.orientation_offsets)
        n = 3 * self.N
        self.n_mech = 2 * n + 6
        self.i_q = slice(0, n)
        self.i_qd = slice(n, 2 * n)
        self.i_xo = slice(2 * n, 2 * n + 3)
        self.i_vo = slice(2 * n + 3, 2 * n + 6)
        self.i_es = 2 * n + 6
        self.n_kkt = 6 * self.N + 3
        self.a = np.stack([arm.a for arm in self.arms])
        self.R = np.stack([arm.R for arm in self.arms])
        self.load_mass_matrix = np.diag([load.mass, load.mass, load.inertia])
        self.gravity = np.asarray(load.gravity)

    # packing -------------------------------------------------------------

    def pack(self, states: Sequence[SystemState]) -> np.ndarray:
        rows = []
        for s in states:
            rows.append(
                np.concatenate(
                    [
                        s.q.reshape(-1),
                        s.qd.reshape(-1),
                        s.load_pose,
                        s.load_vel,
                        [s.storage_energy],
                        s.controller.reshape(-1),
                    ]
                )
            )
        return np.array(rows)

    def unpack(self, x: np.ndarray, t: float) -> list[SystemState]:
        out = []
        N = self.N
        for row in np.atleast_2d(x):
            out.append(
                SystemState(
                    q=row[self.i_q].reshape(N, 3).copy(),
                    qd=row[self.i_qd].reshape(N, 3).copy(),
                    load_pose=row[self.i_xo].copy(),
                    load_vel=row[self.i_vo].copy(),
                    t=t,
                    storage_energy=float(row[self.i_es]),
                    controller=row[self.i_es + 1 :].copy(),
                )
            )
        return out

    def split(self, x):
        P = x.shape[0]
        N = self.N
        return (
            x[:, self.i_q].reshape(P, N, 3),
            x[:, self.i_qd].reshape(P, N, 3),
            x[:, self.i_xo],
            x[:, self.i_vo],
            x[:, self.i_es],
            x[:, self.i_es + 1 :],
        )

    # kinematic helpers ---------------------------------------------------

    def constraint(self, q, qd, xo, vo, kin=None):
        """Arm-to-load grasp constraint values, rates and Jacobian blocks.

        Returns phi, phid (P, N, 3), J (P, N, 3, 3), the load block G (P, N, 3, 3)
        and the velocity-product terms gamma (P, N, 3) so that
        phidd = J qdd + G load_acc + gamma.
        """
        P = q.shape[0]
        N = self.N
        Rr = np.einsum("pab,nb->pna", rot2(xo[:, 2]), self.offsets)
        pr = perp(Rr)
        w = vo[:, 2]
        if kin is None:
            kin = self.stacked.evaluate(q, qd)[3:]
        ee, J, jdq = kin
        phi = np.empty((P, N, 3))
        phi[..., :2] = ee[..., :2] - (xo[:, None, :2] - Rr)
        phi[..., 2] = wrap_angle(ee[..., 2] - xo[:, None, 2] - self.delta)
        eev = np.einsum("pnij,pnj->pni", J, qd)
        phid = np.empty((P, N, 3))
        phid[..., :2] = eev[..., :2] - (vo[:, None, :2] - w[:, None, None] * pr)
        phid[..., 2] = eev[..., 2] - w[:, None]
        G = np.zeros((P, N, 3, 3))
        G[..., 0, 0] = -1.0
        G[..., 1, 1] = -1.0
        G[..., 0, 2] = pr[..., 0]
        G[..., 1, 2] = pr[..., 1]
        G[..., 2, 2] = -1.0
        gamma = jdq.copy()
        gamma[..., :2] -= (w * w)[:, None, None] * Rr
        return phi, phid, J, G, gamma

    # core solve ----------------------------------------------------------

    def evaluate(self, t: float, x: np.ndarray, controller, max_active_set: int = 8) -> StageResult:
        """Accelerations, grasp wrenches and applied torques for packed states ``x``."""
        P = x.shape[0]
        N = self.N
        q, qd, xo, vo, es, xc = self.split(x)
        D, C, g, ee, J, jdq = self.stacked.evaluate(q, qd)
        V_s = self.storage.voltage_of(es)
        if np.any(V_s <= 0):
            raise StorageDepletedError(f"storage voltage non-positive at t={t}")
        tau0, H, umax, aux = controller.evaluate(t, q, qd, D, C, g, xc, V_s)
        phi, phid, J, G, gamma = self.constraint(q, qd, xo, vo, (ee, J, jdq))

        n3 = 3 * N
        K = np.zeros((P, self.n_kkt, self.n_kkt))
        rhs = np.zeros((P, self.n_kkt))
        Jt = np.swapaxes(J, -1, -2)
        lam0 = n3 + 3
        bias = -np.einsum("pnij,pnj->pni", C, qd) - g
        for i in range(N):
            r = slice(3 * i, 3 * i + 3)
            K[:, r, r] = D[:, i]
            K[:, n3 + 3 + 3 * i : n3 + 6 + 3 * i, r] = J[:, i]
            K[:, n3 + 3 + 3 * i : n3 + 6 + 3 * i, n3 : n3 + 3] = G[:, i]
            K[:, n3 : n3 + 3, lam0 + 3 * i : lam0 + 3 * i + 3] = -np.swapaxes(G[:, i], -1, -2)
        K[:, n3 : n3 + 3, n3 : n3 + 3] = self.load_mass_matrix
        rhs[:, n3 : n3 + 2] = self.load.mass * self.gravity
        rhs[:, n3 + 3 :] = (-gamma - 2.0 * self.alpha * phid - self.beta**2 * phi).reshape(P, n3)

        sat = np.zeros((P, N, 3), dtype=bool)
        sign = np.zeros((P, N, 3))
        for _ in range(max_active_set):
            if H is None:
                Heff = np.zeros((P, N, 3, 3))
            else:
                Heff = np.where(sat[..., None], 0.0, H)
            u_eff = np.where(sat, sign * (umax if umax is not None else 0.0), tau0)
            coupling = -np.einsum("pnij,pnjk->pnik", np.eye(3) + Heff, Jt)
            for i in range(N):
                r = slice(3 * i, 3 * i + 3)
                K[:, r, lam0 + 3 * i : lam0 + 3 * i + 3] = coupling[:, i]
            rhs[:, :n3] = (u_eff + bias).reshape(P, n3)
            try:
                z = np.linalg.solve(K, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError(f"closed-chain system singular at t={t}") from exc
            lam = z[:, lam0:].reshape(P, N, 3)
            T_ext = np.einsum("pnji,pnj->pni", J, lam)
            tv = tau0 if H is None else tau0 + np.einsum("pnij,pnj->pni", H, T_ext)
            if umax is None:
                break
            new_sat = np.abs(tv) > umax
            if np.array_equal(new_sat, sat):
                break
            sat = new_sat
            sign = np.sign(tv)
        U = tv if umax is None else np.clip(tv, -umax, umax)
        qdd = z[:, :n3].reshape(P, N, 3)
        load_acc = z[:, n3 : n3 + 3]
        ra = self.R / self.a**2
        p_s = np.sum(qd * U - ra * U * U, axis=(1, 2))
        return StageResult(qdd, load_acc, lam, T_ext, U, tv, sat, p_s, V_s, aux, D, C, g, phi, phid)

    def derivative(self, t: float, x: np.ndarray, controller):
        res = self.evaluate(t, x, controller)
        P = x.shape[0]
        _, qd, _, vo, _, xc = self.split(x)
        dx = np.empty_like(x)
        dx[:, self.i_q] = qd.reshape(P, -1)
        dx[:, self.i_qd] = res.qdd.reshape(P, -1)
        dx[:, self.i_xo] = vo
        dx[:, self.i_vo] = res.load_acc
        dx[:, self.i_es] = res.storage_power
        dx[:, self.i_es + 1 :] = controller.derivative(t, xc, res.T_ext, res.aux).reshape(P, -1)
        return dx, res

    def rk4(self, t: float, x: np.ndarray, dt: float, controller, first=None):
        """One classical RK4 step; returns the new state and the stage-1 evaluation."""
        if first is None:
            k1, r1 = self.derivative(t, x, controller)
        else:
            k1, r1 = first
        k2, _ = self.derivative(t + 0.5 * dt, x + 0.5 * dt * k1, controller)
        k3, _ = self.derivative(t + 0.5 * dt, x + 0.5 * dt * k2, controller)
        k4, _ = self.derivative(t + dt, x + dt * k3, controller)
        x_new = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x_new)):
            raise IntegrationDiverged(f"non-finite state after step at t={t + dt:.6g}", t + dt)
        return x_new, r1

    # energy helpers ------------------------------------------------------

    def mechanical_energy(self, x, D=None):
        """Link energy (kinetic + potential), rotor kinetic energy and load energy per row.

        ``D`` may pass the augmented inertia matrices already evaluated at ``x``.
        """
        q, qd, xo, vo, _, _ = self.split(x)
        if D is None:
            D = self.stacked.evaluate(q, qd)[0]
        kin = 0.5 * np.einsum("pni,pnij,pnj->p", qd, D - self.stacked.aug_D, qd)
        links = kin + sum(self.arms[i].potential(q[:, i]) for i in range(self.N))
        rotors = 0.5 * np.einsum("nj,pnj->p", self.stacked.rot_d, qd * qd)
        load = (
            0.5 * self.load.mass * np.sum(vo[:, :2] ** 2, axis=1)
            + 0.5 * self.load.inertia * vo[:, 2] ** 2
            - self.load.mass * (xo[:, :2] @ self.gravity)
        )
        return links, rotors, load

    def consistent_state(self, qs, storage_energy: float = 0.0, controller_state=None) -> SystemState:
        """State at rest with the load pose implied by the first arm's grasp."""
        from .kinematics import grasp_point_pose

        q = np.asarray(qs, dtype=float)
        pose = grasp_point_pose(self.robots[0], q[0], self.offsets[0], self.delta[0])
        return SystemState(
            q=q,
            qd=np.zeros_like(q),
            load_pose=pose,
            load_vel=np.zeros(3),
            storage_energy=storage_energy,
            controller=np.zeros(0) if controller_state is None else controller_state,
        )


def constraint_forces(state: SystemState, controller, chain: ClosedChain) -> WrenchSet:
    """Grasp wrenches that make arm, load and grasp constraints hold simultaneously."""
    x = chain.pack([state])
    res = chain.evaluate(state.t, x, controller)
    return WrenchSet(res.F[0])


def step(state: SystemState, controller, dt: float, chain: ClosedChain) -> SystemState:
    """Advance one closed-chain state by a fixed RK4 step of ``dt`` seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = chain.pack([state])
    x_new, _ = chain.rk4(state.t, x, dt, controller)
    return chain.unpack(x_new, state.t + dt)[0]


__all__ = [
    "ActuatorParams",
    "ArmTerms",
    "ClosedChain",
    "ConstantVoltage",
    "DegenerateGraspError",
    "IntegrationDiverged",
    "LoadModel",
    "RobotModel",
    "SingularSystemError",
    "StorageDepletedError",
    "SystemState",
    "TorqueController",
    "Ultracapacitor",
    "WrenchSet",
    "augment",
    "augmented_matrices",
    "constraint_forces",
    "decompose_forces",
    "grasp_matrix",
    "load_dynamics",
    "load_dynamics_spatial",
    "pinv_svd",
    "rigid_body_matrices",
    "skew",
    "step",
]
