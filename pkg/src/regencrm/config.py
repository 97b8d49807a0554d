"""JSON scenario configuration: parsing, validation and serialization.

All keys are SI: lengths in m, masses in kg, inertias in kg*m^2, angles in
rad, times in s, voltages in V, resistances in ohm, motor constants in
N*m/A, capacitance in F, gains in N*m per rad (stiffness), N*m*s/rad
(damping) and kg*m^2 (inertia).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import GainSchedule, ImpedanceGains, InvalidGainsError
from .kinematics import ELBOW_DOWN, ELBOW_UP, KinematicsError, sample_joint_references
from .models import ActuatorParams, GraspGeometry, LoadModel, PlanarPose, RobotModel
from .optimize import GaConfig
from .simulation import Scenario, SimSettings

SCHEMA_VERSION = 1
_ACTUATOR_KEYS = ("gear_ratio", "motor_constant", "resistance", "rotor_inertia", "viscous_friction")
_SIM_KEYS = tuple(SimSettings.__dataclass_fields__)


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based line of the offending key when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.detail = message


@dataclass
class ScenarioConfig:
    robots: list
    branches: list
    load: LoadModel
    p0: PlanarPose
    pf: PlanarPose
    T: float
    gains: ImpedanceGains
    sim: SimSettings = field(default_factory=SimSettings)
    profile: str = "quintic"
    schedule: str | None = None
    optimizer: GaConfig | None = None
    seed: int = 0
    base_dir: Path = field(default_factory=Path, compare=False)

    # -- building -----------------------------------------------------------

    def scenario(self) -> Scenario:
        schedule = None
        if self.schedule is not None:
            schedule = GainSchedule.load_csv(self.base_dir / self.schedule)
        return Scenario(
            robots=tuple(self.robots),
            load=self.load,
            p0=self.p0,
            pf=self.pf,
            T=self.T,
            gains=self.gains,
            schedule=schedule,
            sim=self.sim,
            branches=tuple(self.branches),
            seed=self.seed,
        )

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        robots = []
        for rb, br in zip(self.robots, self.branches):
            robots.append(
                {
                    "link_lengths": list(rb.link_lengths),
                    "link_masses": list(rb.link_masses),
                    "link_com_offsets": list(rb.link_com_offsets),
                    "link_inertias": list(rb.link_inertias),
                    "base_pose": [rb.base_pose.x, rb.base_pose.y, rb.base_pose.phi],
                    "branch": br,
                    "actuators": [{k: getattr(a, k) for k in _ACTUATOR_KEYS} for a in rb.actuators],
                }
            )
        g = self.gains
        return {
            "schema_version": SCHEMA_VERSION,
            "robots": robots,
            "load": {
                "mass": self.load.mass,
                "length": self.load.length,
                "inertia": self.load.inertia,
                "grasp_offsets": [list(r) for r in self.load.grasp.offsets],
                "orientation_offsets": list(self.load.grasp.orientation_offsets),
                "gravity": list(self.load.gravity),
            },
            "trajectory": {
                "p0": list(self.p0.as_array()),
                "pf": list(self.pf.as_array()),
                "T": self.T,
                "profile": self.profile,
            },
            "gains": {**g.to_dict(), "schedule": self.schedule},
            "sim": {k: getattr(self.sim, k) for k in _SIM_KEYS},
            "optimizer": None if self.optimizer is None else self.optimizer.to_dict(),
            "seed": self.seed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict, base_dir=".", source: str | None = None, text: str | None = None) -> "ScenarioConfig":
        return _Parser(source, text).parse(d, Path(base_dir))

    @classmethod
    def from_json(cls, text: str, base_dir=".", source: str | None = None) -> "ScenarioConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(exc.msg, source, exc.lineno) from exc
        return cls.from_dict(d, base_dir, source, text)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
        return cls.from_json(text, path.parent, str(path))


class _Parser:
    """Turns a decoded JSON document into a ScenarioConfig, locating errors by line."""

    def __init__(self, source, text):
        self.source = source
        self.lines = text.splitlines() if text else []

    def line_of(self, keys) -> int | None:
        """Best-effort line of the nested key path ``keys`` (strings and list indices).

        An integer index ``n`` makes the search skip ``n`` matches of the key
        that follows it, i.e. it selects the key inside the n-th list element.
        """
        start = 0
        found = None
        skip = 0
        for k in keys:
            if not isinstance(k, str):
                skip = int(k)
                continue
            token = f'"{k}"'
            for i in range(start, len(self.lines)):
                hits = self.lines[i].count(token)
                if hits > skip:
                    found = start = i
                    skip = 0
                    break
                skip -= hits
        return None if found is None else found + 1

    def fail(self, message, *keys):
        raise ConfigError(message, self.source, self.line_of(keys) if keys else None)

    def get(self, d, key, *parents, default=..., kind=None):
        if not isinstance(d, dict):
            self.fail(f"'{'.'.join(map(str, parents))}' must be an object", *parents)
        if key not in d:
            if default is ...:
                self.fail(f"missing key '{'.'.join(map(str, parents + (key,)))}'", *parents)
            return default
        v = d[key]
        if kind == "number":
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
                self.fail(f"'{key}' must be a finite number", *parents, key)
            return float(v)
        if kind == "vector":
            try:
                arr = np.asarray(v, dtype=float)
            except (TypeError, ValueError):
                self.fail(f"'{key}' must be numeric", *parents, key)
            if not np.all(np.isfinite(arr)):
                self.fail(f"'{key}' must be finite", *parents, key)
            return arr
        return v

    def parse(self, d: dict, base_dir: Path) -> ScenarioConfig:
        if not isinstance(d, dict):
            self.fail("top level must be a JSON object")
        version = self.get(d, "schema_version")
        if version != SCHEMA_VERSION:
            self.fail(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})", "schema_version")
        robots, branches = self.robots(d)
        load = self.load(d, len(robots))
        p0, pf, T, profile = self.trajectory(d)
        gains, schedule = self.gains(d, len(robots), base_dir)
        sim = self.sim(d)
        optimizer = self.optimizer(d, gains)
        seed = self.get(d, "seed", default=0)
        if isinstance(seed, bool) or not isinstance(seed, int):
            self.fail("'seed' must be an integer", "seed")
        cfg = ScenarioConfig(robots, branches, load, p0, pf, T, gains, sim, profile, schedule, optimizer, seed, base_dir)
        self.reachability(cfg)
        return cfg

    def robots(self, d):
        items = self.get(d, "robots")
        if not isinstance(items, list) or len(items) < 2:
            self.fail("'robots' must list at least two arms", "robots")
        robots, branches = [], []
        for i, r in enumerate(items):
            keys = ("robots", i)
            acts = self.get(r, "actuators", *keys, default={})
            shared = isinstance(acts, dict)
            if shared:
                acts = [acts] * 3
            if not isinstance(acts, list) or len(acts) != 3:
                self.fail("'actuators' must be one object or a list of three", *keys, "actuators")
            try:
                act_models = []
                for j, a in enumerate(acts):
                    where = keys + ("actuators",) + (() if shared else (j,))
                    if not isinstance(a, dict):
                        self.fail(f"robot {i + 1}: each actuator must be an object", *keys, "actuators")
                    unknown = set(a) - set(_ACTUATOR_KEYS)
                    if unknown:
                        self.fail(f"unknown actuator key(s) {sorted(unknown)}", *where, sorted(unknown)[0])
                    vals = {k: self.get(a, k, *where, kind="number") for k in a}
                    for k, v in vals.items():
                        strict = k in ("gear_ratio", "motor_constant", "resistance")
                        if (strict and v <= 0) or v < 0:
                            bound = "positive" if strict else "non-negative"
                            self.fail(f"robot {i + 1}: actuator '{k}' must be {bound}", *where, k)
                    act_models.append(ActuatorParams(**vals))
                base = self.get(r, "base_pose", *keys, kind="vector")
                if base.shape != (3,):
                    self.fail("'base_pose' must be [x, y, phi]", *keys, "base_pose")
                opt = {}
                for k in ("link_lengths", "link_masses", "link_com_offsets", "link_inertias"):
                    v = r.get(k)
                    if v is not None:
                        arr = self.get(r, k, *keys, kind="vector")
                        if arr.shape != (3,) or (k in ("link_lengths", "link_masses") and np.any(arr <= 0)):
                            self.fail(f"robot {i + 1}: '{k}' must hold three positive values", *keys, k)
                        opt[k] = tuple(arr)
                robots.append(RobotModel(base_pose=PlanarPose(*base), actuators=tuple(act_models), **opt))
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                self.fail(f"robot {i + 1}: {exc}", *keys)
            branch = self.get(r, "branch", *keys, default=ELBOW_DOWN if i % 2 == 0 else ELBOW_UP)
            if branch not in (ELBOW_UP, ELBOW_DOWN):
                self.fail(f"robot {i + 1}: branch must be '{ELBOW_UP}' or '{ELBOW_DOWN}'", *keys, "branch")
            branches.append(branch)
        return robots, branches

    def load(self, d, n):
        ld = self.get(d, "load")
        mass = self.get(ld, "mass", "load", kind="number")
        length = self.get(ld, "length", "load", kind="number")
        for k, v in (("mass", mass), ("length", length)):
            if v <= 0:
                self.fail(f"'{k}' must be positive", "load", k)
        inertia = ld.get("inertia")
        if inertia is not None:
            inertia = self.get(ld, "inertia", "load", kind="number")
        offsets = self.get(ld, "grasp_offsets", "load", default=None)
        if offsets is None:
            offsets = [[0.5 * length, 0.0], [-0.5 * length, 0.0]]
        offsets = np.asarray(offsets, dtype=float)
        if offsets.shape != (n, 2):
            self.fail(f"'grasp_offsets' must hold {n} planar vectors", "load", "grasp_offsets")
        delta = self.get(ld, "orientation_offsets", "load", default=[0.0] * n)
        if len(delta) != n:
            self.fail(f"'orientation_offsets' needs {n} entries", "load", "orientation_offsets")
        gravity = self.get(ld, "gravity", "load", default=[0.0, -9.81])
        try:
            return LoadModel(
                mass=mass,
                inertia=inertia,
                length=length,
                grasp=GraspGeometry(tuple(map(tuple, offsets)), tuple(float(v) for v in delta)),
                gravity=tuple(gravity),
            )
        except ValueError as exc:
            self.fail(f"load: {exc}", "load")

    def trajectory(self, d):
        tr = self.get(d, "trajectory")
        poses = []
        for k in ("p0", "pf"):
            v = self.get(tr, k, "trajectory", kind="vector")
            if v.shape not in ((2,), (3,)):
                self.fail(f"'{k}' must be [x, y] or [x, y, phi]", "trajectory", k)
            poses.append(PlanarPose(*v))
        T = self.get(tr, "T", "trajectory", kind="number")
        if T <= 0:
            self.fail("'T' must be positive", "trajectory", "T")
        profile = self.get(tr, "profile", "trajectory", default="quintic")
        if profile != "quintic":
            self.fail(f"unsupported profile {profile!r}", "trajectory", "profile")
        return poses[0], poses[1], T, profile

    def gains(self, d, n, base_dir):
        gd = dict(self.get(d, "gains"))
        schedule = gd.pop("schedule", None)
        unknown = set(gd) - {"M", "B_c", "K_c", "B_bar", "K_bar", "Lambda", "K_D"}
        if unknown:
            self.fail(f"unknown gain key(s) {sorted(unknown)}", "gains", sorted(unknown)[0])
        arrays = {}
        for k, v in gd.items():
            if v is None:
                continue
            arr = self.get(gd, k, "gains", kind="vector")
            try:
                arrays[k] = np.broadcast_to(arr, (n, 3)).copy()
            except ValueError:
                self.fail(f"'{k}' must be a scalar, 3 joint values or {n}x3 values", "gains", k)
        for k in ("M", "B_c", "K_c"):
            if k not in arrays:
                self.fail(f"missing key 'gains.{k}'", "gains")
        try:
            gains = ImpedanceGains(**arrays)
        except InvalidGainsError as exc:
            self.fail(str(exc), "gains")
        if schedule is not None:
            if not isinstance(schedule, str):
                self.fail("'schedule' must be a file path", "gains", "schedule")
            try:
                GainSchedule.load_csv(base_dir / schedule)
            except (OSError, ValueError) as exc:
                self.fail(f"schedule {schedule!r}: {exc}", "gains", "schedule")
        return gains, schedule

    def sim(self, d):
        sd = self.get(d, "sim", default={})
        unknown = set(sd) - set(_SIM_KEYS)
        if unknown:
            self.fail(f"unknown sim key(s) {sorted(unknown)}", "sim", sorted(unknown)[0])
        sim = SimSettings(**sd)
        for k in ("dt", "V_s", "capacitance", "eps_f", "max_joint_speed"):
            v = getattr(sim, k)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                self.fail(f"'{k}' must be positive", "sim", k)
        if sim.horizon is not None and not sim.horizon > 0:
            self.fail("'horizon' must be positive", "sim", "horizon")
        if sim.storage not in ("constant", "ultracapacitor"):
            self.fail("'storage' must be 'constant' or 'ultracapacitor'", "sim", "storage")
        if not isinstance(sim.log_every, int) or sim.log_every < 1:
            self.fail("'log_every' must be a positive integer", "sim", "log_every")
        return sim

    def optimizer(self, d, gains):
        od = self.get(d, "optimizer", default=None)
        if od is None:
            return None
        try:
            cfg = GaConfig.from_dict(od)
        except (TypeError, ValueError) as exc:
            self.fail(f"optimizer: {exc}", "optimizer")
        lower, _ = cfg.box(gains.M.size)
        n = gains.M.size
        if np.any(gains.B_c.ravel() + lower[:n] <= 0) or np.any(gains.K_c.ravel() + lower[n:] <= 0):
            self.fail("optimizer bounds allow non-positive damping or stiffness", "optimizer")
        return cfg

    def reachability(self, cfg: ScenarioConfig):
        """Both arms must reach the whole load path with a nonsingular Jacobian."""
        step = cfg.T / 200.0
        try:
            sample_joint_references(cfg.robots, cfg.load.grasp, cfg.p0, cfg.pf, cfg.T, step, cfg.T, cfg.branches)
        except KinematicsError as exc:
            self.fail(f"trajectory not feasible: {exc}", "trajectory")


def load_config(path) -> ScenarioConfig:
    return ScenarioConfig.from_file(path)


def bundled_config_path(name: str = "paper_tableI.json") -> Path:
    return Path(__file__).with_name("data") / name
