"""Parameter containers for the robots, their joint actuators and the load.

All quantities are SI. Vectors that describe a fixed physical parameter are
stored as tuples so that models are hashable and compare by value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)
    if np.ndim(w) == 0:
        return float(w)
    return w


@dataclass(frozen=True)
class PlanarPose:
    x: float
    y: float
    phi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi])

    @classmethod
    def from_array(cls, a) -> "PlanarPose":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class ActuatorParams:
    """Gearmotor of one semi-active joint.

    ``motor_constant`` is the torque constant in N*m/A; the derived
    ``a = motor_constant * gear_ratio`` is the back-EMF / torque gain seen at
    the joint side.
    """

    gear_ratio: float = 50.0
    motor_constant: float = 0.07
    resistance: float = 0.4
    rotor_inertia: float = 0.0
    viscous_friction: float = 0.0

    def __post_init__(self):
        if self.gear_ratio <= 0 or self.motor_constant <= 0 or self.resistance <= 0:
            raise ValueError("gear_ratio, motor_constant and resistance must be positive")
        if self.rotor_inertia < 0 or self.viscous_friction < 0:
            raise ValueError("rotor_inertia and viscous_friction must be non-negative")

    @property
    def a(self) -> float:
        return self.motor_constant * self.gear_ratio

    @property
    def a2_over_r(self) -> float:
        return self.a**2 / self.resistance

    @property
    def r_over_a2(self) -> float:
        return self.resistance / self.a**2

    @property
    def reflected_inertia(self) -> float:
        return self.rotor_inertia * self.gear_ratio**2

    @property
    def reflected_friction(self) -> float:
        return self.viscous_friction * self.gear_ratio**2


@dataclass(frozen=True)
class RobotModel:
    """Planar serial 3R arm.

    ``link_com_offsets`` are measured from the proximal joint along the link and
    ``link_inertias`` are about each link's centre of mass. When omitted they
    default to uniform slender rods.
    """

    link_lengths: tuple = (0.425, 0.39, 0.13)
    link_masses: tuple = (8.05, 2.84, 1.37)
    link_com_offsets: tuple | None = None
    link_inertias: tuple | None = None
    base_pose: PlanarPose = field(default_factory=lambda: PlanarPose(0.0, 0.0, 0.0))
    actuators: tuple = field(default_factory=lambda: (ActuatorParams(),) * 3)

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.link_lengths)
        masses = tuple(float(v) for v in self.link_masses)
        if len(lengths) != 3 or len(masses) != 3:
            raise ValueError("a 3R arm needs three link lengths and masses")
        if min(lengths) <= 0 or min(masses) <= 0:
            raise ValueError("link lengths and masses must be positive")
        com = self.link_com_offsets
        com = tuple(0.5 * l for l in lengths) if com is None else tuple(float(v) for v in com)
        inertia = self.link_inertias
        if inertia is None:
            inertia = tuple(m * l * l / 12.0 for m, l in zip(masses, lengths))
        else:
            inertia = tuple(float(v) for v in inertia)
        if min(inertia) < 0:
            raise ValueError("link inertias must be non-negative")
        acts = tuple(self.actuators)
        if len(acts) != 3:
            raise ValueError("one actuator per joint is required")
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "link_masses", masses)
        object.__setattr__(self, "link_com_offsets", com)
        object.__setattr__(self, "link_inertias", inertia)
        object.__setattr__(self, "actuators", acts)

    @property
    def reach(self) -> float:
        return sum(self.link_lengths)

    def actuator_array(self, name: str) -> np.ndarray:
        return np.array([getattr(act, name) for act in self.actuators], dtype=float)


@dataclass(frozen=True)
class GraspGeometry:
    """Rigid grasp of one load by ``N`` end-effectors.

    ``offsets[i]`` is the vector from end-effector ``i`` to the load's centre of
    mass, in the load frame. ``orientation_offsets[i]`` is the constant angle of
    end-effector ``i`` relative to the load; the pairwise offsets of the
    rotational grasp constraint are differences of these.
    """

    offsets: tuple
    orientation_offsets: tuple | None = None

    def __post_init__(self):
        offs = tuple(tuple(float(c) for c in r) for r in self.offsets)
        if len(offs) < 2:
            raise ValueError("a cooperative grasp needs at least two end-effectors")
        if not all(np.isfinite(c) for r in offs for c in r):
            raise ValueError("grasp offsets must be finite")
        delta = self.orientation_offsets
        delta = (0.0,) * len(offs) if delta is None else tuple(float(d) for d in delta)
        if len(delta) != len(offs):
            raise ValueError("one orientation offset per end-effector is required")
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "orientation_offsets", delta)

    @property
    def n(self) -> int:
        return len(self.offsets)

    def relative_orientation(self, i: int, k: int) -> float:
        return self.orientation_offsets[i] - self.orientation_offsets[k]


@dataclass(frozen=True)
class LoadModel:
    """Rigid payload. ``inertia`` is scalar (planar, about the z axis)."""

    mass: float = 5.0
    inertia: float | None = None
    length: float = 0.5
    grasp: GraspGeometry | None = None
    gravity: tuple = (0.0, -9.81)

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("load mass must be positive")
        inertia = self.inertia
        if inertia is None:
            inertia = self.mass * self.length**2 / 12.0
        if inertia <= 0:
            raise ValueError("load inertia must be positive")
        object.__setattr__(self, "inertia", float(inertia))
        grasp = self.grasp
        if grasp is None:
            half = 0.5 * self.length
            grasp = GraspGeometry(offsets=((half, 0.0), (-half, 0.0)))
        object.__setattr__(self, "grasp", grasp)
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))


def table_i_robots(base_distance: float = 0.8, **actuator_overrides) -> tuple[RobotModel, RobotModel]:
    """The two identical arms of the rod-carrying scenario, bases ``base_distance`` apart."""
    act = ActuatorParams(**actuator_overrides)
    left = RobotModel(base_pose=PlanarPose(0.0, 0.0, 0.0), actuators=(act,) * 3)
    right = RobotModel(base_pose=PlanarPose(base_distance, 0.0, 0.0), actuators=(act,) * 3)
    return left, right


def table_i_load() -> LoadModel:
    return LoadModel(mass=5.0, length=0.5)


__all__ = [
    "ActuatorParams",
    "GraspGeometry",
    "LoadModel",
    "PlanarPose",
    "RobotModel",
    "table_i_load",
    "table_i_robots",
    "wrap_angle",
]
