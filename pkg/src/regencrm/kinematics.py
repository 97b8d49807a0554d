"""Planar 3R kinematics, load-to-joint reference generation and grasp residuals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import GraspGeometry, PlanarPose, RobotModel, wrap_angle

ELBOW_UP = "elbow-up"
ELBOW_DOWN = "elbow-down"
SINGULAR_SIGMA = 1e-4


class KinematicsError(ValueError):
    pass


class TrajectoryDomainError(KinematicsError):
    pass


class NoSolutionError(KinematicsError):
    """Target outside the workspace; ``excess`` is how far the wrist point misses (m)."""

    def __init__(self, message: str, excess: float):
        super().__init__(message)
        self.excess = excess


class SingularJacobianError(KinematicsError):
    def __init__(self, message: str, sigma_min: float, condition: float):
        super().__init__(message)
        self.sigma_min = sigma_min
        self.condition = condition


@dataclass(frozen=True)
class TrajectoryPoint:
    """Pose with world-frame velocity (xdot, ydot, omega) and acceleration."""

    pose: PlanarPose
    vel: tuple = (0.0, 0.0, 0.0)
    acc: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vel = tuple(float(v) for v in self.vel)
        acc = tuple(float(v) for v in self.acc)
        if not np.all(np.isfinite(vel + acc + tuple(self.pose.as_array()))):
            raise KinematicsError("trajectory point has non-finite entries")
        object.__setattr__(self, "vel", vel)
        object.__setattr__(self, "acc", acc)


def perp(v: np.ndarray) -> np.ndarray:
    """Planar cross product z x v."""
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def rot2(phi) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def quintic_profile(s):
    """Rest-to-rest quintic blend and its first two derivatives in normalized time."""
    s = np.asarray(s, dtype=float)
    h = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    dh = 30.0 * s * s * (1.0 - s) ** 2
    ddh = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return h, dh, ddh


def quintic_trajectory(p0: PlanarPose, pf: PlanarPose, T: float, t: float) -> TrajectoryPoint:
    """Rest-to-rest quintic interpolation of a planar pose over ``[0, T]``.

    Orientation follows the shortest angular path from ``p0.phi`` to ``pf.phi``.
    """
    if not T > 0:
        raise TrajectoryDomainError(f"duration must be positive, got {T}")
    if not 0.0 <= t <= T:
        raise TrajectoryDomainError(f"t={t} outside [0, {T}]")
    delta = np.array([pf.x - p0.x, pf.y - p0.y, wrap_angle(pf.phi - p0.phi)])
    h, dh, ddh = quintic_profile(t / T)
    pos = p0.as_array() + h * delta
    return TrajectoryPoint(
        PlanarPose.from_array(pos), tuple(dh / T * delta), tuple(ddh / T**2 * delta)
    )


def _geometry(robot: RobotModel):
    return np.asarray(robot.link_lengths), np.array([robot.base_pose.x, robot.base_pose.y]), robot.base_pose.phi


def link_angles(robot: RobotModel, q) -> np.ndarray:
    """Absolute link angles, shape (..., 3)."""
    return robot.base_pose.phi + np.cumsum(np.asarray(q, dtype=float), axis=-1)


def fk_array(robot: RobotModel, q) -> np.ndarray:
    """End-effector (x, y, phi) for joint arrays of shape (..., 3); phi is not wrapped."""
    lengths, base, _ = _geometry(robot)
    th = link_angles(robot, q)
    x = base[0] + np.sum(lengths * np.cos(th), axis=-1)
    y = base[1] + np.sum(lengths * np.sin(th), axis=-1)
    return np.stack([x, y, th[..., 2]], axis=-1)


def forward_kinematics(robot: RobotModel, q) -> PlanarPose:
    return PlanarPose.from_array(fk_array(robot, q))


def jacobian_array(robot: RobotModel, q) -> np.ndarray:
    """Analytic Jacobian mapping qdot to (xdot, ydot, omega), shape (..., 3, 3)."""
    lengths, _, _ = _geometry(robot)
    th = link_angles(robot, q)
    seg = lengths * np.stack([np.cos(th), np.sin(th)], axis=-1).swapaxes(-1, -2)  # (...,2,3)
    # column m uses the vector from joint m to the tip: reverse cumulative sum
    tip = np.flip(np.cumsum(np.flip(seg, -1), -1), -1)
    J = np.empty(th.shape[:-1] + (3, 3))
    J[..., 0, :] = -tip[..., 1, :]
    J[..., 1, :] = tip[..., 0, :]
    J[..., 2, :] = 1.0
    return J


def jacobian(robot: RobotModel, q) -> np.ndarray:
    return jacobian_array(robot, q)


def jacobian_dot_qdot(robot: RobotModel, q, qd) -> np.ndarray:
    """The velocity-product term Jdot(q, qd) @ qd, shape (..., 3)."""
    lengths, _, _ = _geometry(robot)
    th = link_angles(robot, q)
    om = np.cumsum(np.asarray(qd, dtype=float), axis=-1)
    w2l = lengths * om * om
    out = np.zeros(th.shape[:-1] + (3,))
    out[..., 0] = -np.sum(w2l * np.cos(th), axis=-1)
    out[..., 1] = -np.sum(w2l * np.sin(th), axis=-1)
    return out


def check_singularity(J: np.ndarray, threshold: float = SINGULAR_SIGMA) -> None:
    sv = np.linalg.svd(J, compute_uv=False)
    if sv[-1] < threshold:
        cond = np.inf if sv[-1] == 0 else sv[0] / sv[-1]
        raise SingularJacobianError(
            f"Jacobian near singular: sigma_min={sv[-1]:.3e}, cond={cond:.3e}", sv[-1], cond
        )


def _ik_array(robot: RobotModel, x, y, phi, branch: str):
    """Vectorized closed-form 3R solution; returns (q, wrist-point excess)."""
    if branch not in (ELBOW_UP, ELBOW_DOWN):
        raise ValueError(f"unknown branch {branch!r}")
    l1, l2, l3 = robot.link_lengths
    b = robot.base_pose
    wx = x - l3 * np.cos(phi) - b.x
    wy = y - l3 * np.sin(phi) - b.y
    # wrist point in the base frame
    cb, sb = np.cos(b.phi), np.sin(b.phi)
    wx, wy = cb * wx + sb * wy, -sb * wx + cb * wy
    d = np.hypot(wx, wy)
    c2 = (d * d - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    excess = np.maximum(d - (l1 + l2), abs(l1 - l2) - d)
    q2 = np.arccos(np.clip(c2, -1.0, 1.0))
    if branch == ELBOW_UP:
        q2 = -q2
    q1 = np.arctan2(wy, wx) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    q3 = phi - b.phi - q1 - q2
    bad = np.abs(c2) > 1.0 + 1e-12
    return wrap_angle(np.stack([q1, q2, q3], axis=-1)), np.where(bad, excess, 0.0)


def _raise_no_solution(excess: float, where: str = ""):
    side = "beyond reach" if excess >= 0 else "inside inner boundary"
    raise NoSolutionError(f"wrist point {abs(excess):.6g} m {side}{where}", abs(excess))


def inverse_kinematics(robot: RobotModel, target: PlanarPose, branch: str = ELBOW_DOWN) -> np.ndarray:
    """Closed-form 3R solution via the wrist point.

    ``elbow-down`` selects a non-negative elbow angle q2, ``elbow-up`` a
    non-positive one.
    """
    q, excess = _ik_array(robot, target.x, target.y, target.phi, branch)
    if excess != 0.0:
        _raise_no_solution(float(excess))
    return q


def load_to_ee_reference(
    load_ref: TrajectoryPoint, r_i, orientation_offset: float = 0.0
) -> TrajectoryPoint:
    """End-effector reference for a grasp point offset ``r_i`` (load frame) from the load path.

    ``r_i`` points from the end-effector to the load's centre of mass, so the
    grasp point sits at ``P_o - R_o r_i``.
    """
    p = load_ref.pose
    Rr = rot2(p.phi) @ np.asarray(r_i, dtype=float)
    v = np.asarray(load_ref.vel)
    a = np.asarray(load_ref.acc)
    w, wd = v[2], a[2]
    pos = np.array([p.x, p.y]) - Rr
    # S(Rr) w = Rr x w = -w perp(Rr)
    vel = v[:2] - w * perp(Rr)
    acc = a[:2] + w * w * Rr - wd * perp(Rr)
    return TrajectoryPoint(
        PlanarPose(pos[0], pos[1], p.phi + orientation_offset),
        (vel[0], vel[1], w),
        (acc[0], acc[1], wd),
    )


def joint_reference(robot: RobotModel, ee_ref: TrajectoryPoint, branch: str = ELBOW_DOWN, q_hint=None):
    """Joint position, velocity and acceleration reproducing an end-effector reference.

    ``q_hint`` (e.g. the previous sample) unwraps the returned angles so that
    sampled references stay continuous.
    """
    q = inverse_kinematics(robot, ee_ref.pose, branch)
    if q_hint is not None:
        q = q_hint + wrap_angle(q - np.asarray(q_hint))
    J = jacobian_array(robot, q)
    check_singularity(J)
    qd = np.linalg.solve(J, np.asarray(ee_ref.vel))
    qdd = np.linalg.solve(J, np.asarray(ee_ref.acc) - jacobian_dot_qdot(robot, q, qd))
    return q, qd, qdd


def grasp_point_pose(robot: RobotModel, q, r_i, orientation_offset: float = 0.0) -> np.ndarray:
    """Load centre-of-mass position and orientation implied by one arm's grasp."""
    ee = fk_array(robot, q)
    load_phi = ee[..., 2] - orientation_offset
    Rr = (rot2(load_phi) @ np.asarray(r_i, dtype=float)[..., None])[..., 0]
    return np.concatenate([ee[..., :2] + Rr, load_phi[..., None]], axis=-1)


def constraint_residual(robots: Sequence[RobotModel], qs: Sequence, grasp: GraspGeometry) -> np.ndarray:
    """Pairwise closed-chain residuals, one row (dx, dy, dphi) per robot pair i < k.

    Zero iff every arm's grasp is consistent with one rigid load.
    """
    if len(robots) != grasp.n or len(qs) != grasp.n:
        raise ValueError("need one robot and one joint vector per grasp point")
    implied = [
        grasp_point_pose(rb, q, r, d)
        for rb, q, r, d in zip(robots, qs, grasp.offsets, grasp.orientation_offsets)
    ]
    rows = []
    for i in range(grasp.n):
        for k in range(i + 1, grasp.n):
            dpos = implied[i][:2] - implied[k][:2]
            ee_i = fk_array(robots[i], qs[i])[2]
            ee_k = fk_array(robots[k], qs[k])[2]
            drot = wrap_angle(ee_i - ee_k - grasp.relative_orientation(i, k))
            rows.append([dpos[0], dpos[1], drot])
    return np.array(rows)


@dataclass(frozen=True)
class JointReferenceTable:
    """Joint references of every arm sampled on a uniform time grid.

    Arrays have shape (n_samples, N, 3); ``times[k] = k * step``.
    """

    step: float
    times: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray

    def index(self, t: float) -> int | None:
        k = int(round(t / self.step))
        if 0 <= k < len(self.times) and abs(k * self.step - t) <= 1e-9 * max(1.0, abs(t)):
            return k
        return None


def sample_joint_references(
    robots: Sequence[RobotModel],
    grasp: GraspGeometry,
    p0: PlanarPose,
    pf: PlanarPose,
    T: float,
    step: float,
    horizon: float | None = None,
    branches: Sequence[str] | None = None,
) -> JointReferenceTable:
    """Sample the joint references of every arm for a quintic load maneuver.

    Beyond ``T`` (up to ``horizon``) the load reference holds at ``pf``.
    """
    horizon = T if horizon is None else horizon
    if not T > 0:
        raise TrajectoryDomainError(f"duration must be positive, got {T}")
    n = int(round(horizon / step)) + 1
    times = np.arange(n) * step
    branches = default_branches(len(robots)) if branches is None else branches
    delta = np.array([pf.x - p0.x, pf.y - p0.y, wrap_angle(pf.phi - p0.phi)])
    h, dh, ddh = quintic_profile(np.minimum(times, T) / T)
    pose = p0.as_array() + h[:, None] * delta
    vel = (dh / T)[:, None] * delta
    acc = (ddh / T**2)[:, None] * delta
    R = rot2(pose[:, 2])
    w, wd = vel[:, 2:], acc[:, 2:]
    q = np.empty((n, len(robots), 3))
    qd = np.empty_like(q)
    qdd = np.empty_like(q)
    for i, rb in enumerate(robots):
        Rr = R @ np.asarray(grasp.offsets[i], dtype=float)
        pr = perp(Rr)
        ee_pos = pose[:, :2] - Rr
        ee_vel = np.concatenate([vel[:, :2] - w * pr, w], axis=1)
        ee_acc = np.concatenate([acc[:, :2] + w * w * Rr - wd * pr, wd], axis=1)
        qi, excess = _ik_array(rb, ee_pos[:, 0], ee_pos[:, 1], pose[:, 2] + grasp.orientation_offsets[i], branches[i])
        bad = np.flatnonzero(excess)
        if bad.size:
            _raise_no_solution(float(excess[bad[0]]), f" for robot {i + 1} at t={times[bad[0]]:.6g}")
        qi = np.unwrap(qi, axis=0)
        J = jacobian_array(rb, qi)
        sv = np.linalg.svd(J, compute_uv=False)
        k = int(np.argmin(sv[:, -1]))
        check_singularity(J[k])
        qdi = np.linalg.solve(J, ee_vel[..., None])[..., 0]
        qddi = np.linalg.solve(J, (ee_acc - jacobian_dot_qdot(rb, qi, qdi))[..., None])[..., 0]
        q[:, i], qd[:, i], qdd[:, i] = qi, qdi, qddi
    return JointReferenceTable(step, times, q, qd, qdd)


def default_branches(n: int) -> list[str]:
    """Mirrored elbows: the first arm elbow-down, the others elbow-up."""
    return [ELBOW_DOWN] + [ELBOW_UP] * (n - 1)
