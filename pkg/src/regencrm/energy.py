"""Energy-flow accounting for semi-active joints sharing one storage element.

Sign conventions: storage power is positive when charging (regeneration);
per-joint "consumption" is its negative. Reported regenerative and
non-regenerative energies are consumption magnitudes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import ActuatorParams


class UndefinedEffectiveness(ValueError):
    pass


def joule_loss_rate(tv, qd, act: ActuatorParams):
    """Resistive loss R I^2 expressed through the virtual torque and joint speed."""
    tv = np.asarray(tv, dtype=float)
    qd = np.asarray(qd, dtype=float)
    return act.r_over_a2 * tv * tv + act.a2_over_r * qd * qd - 2.0 * tv * qd


def motor_current(tv, qd, V_s, act: ActuatorParams):
    """Armature current from the converter voltage and back-EMF."""
    u = np.asarray(tv) * act.resistance / (act.a * V_s)
    V = u * V_s
    return (V - act.a * np.asarray(qd)) / act.resistance


def storage_power(tv, qd, r_a):
    """Rate of change of stored energy, qd . tv - tv . R_a tv (R_a diagonal entries)."""
    tv = np.asarray(tv, dtype=float)
    qd = np.asarray(qd, dtype=float)
    return float(np.sum(qd * tv - np.asarray(r_a) * tv * tv))


def joint_consumption(tv, qd, r_a):
    """Electrical power drawn by each joint from storage (negative when regenerating)."""
    return np.asarray(r_a) * tv * tv - qd * tv


@dataclass
class EnergySample:
    """Quantities needed by the ledger at one accepted time instant (batched, leading axis P)."""

    qd: np.ndarray  # (P, N, 3)
    U: np.ndarray  # (P, N, 3) applied torque
    T_ext: np.ndarray  # (P, N, 3)
    links: np.ndarray  # (P,) link kinetic + potential energy
    rotors: np.ndarray  # (P,)
    load: np.ndarray  # (P,)


@dataclass
class EnergyLedger:
    """Running energy integrals of one rollout (joules)."""

    dE_s: float = 0.0
    W_ext: float = 0.0
    dE_m_tot: float = 0.0
    sigma_m_tot: float = 0.0
    sigma_e: float = 0.0
    dE_nr: float = 0.0
    dE_load: float = 0.0
    closure_residual: float = 0.0
    dE_links: float = 0.0
    dE_rotors: float = 0.0
    duration: float = 0.0
    per_joint_energy: list = field(default_factory=list)

    @property
    def dE_r(self) -> float:
        """Net consumption with regeneration."""
        return -self.dE_s

    @property
    def effectiveness(self) -> float:
        return effectiveness(self.dE_r, self.dE_nr)

    def terms(self) -> dict:
        return {
            "W_ext": self.W_ext,
            "dE_c": self.dE_s,
            "dE_m_tot": self.dE_m_tot,
            "sigma_m_tot": self.sigma_m_tot,
            "sigma_e": self.sigma_e,
        }

    def relative_closure(self) -> float:
        scale = max(abs(v) for v in self.terms().values())
        return abs(self.closure_residual) / scale if scale > 0 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dE_r"] = self.dE_r
        try:
            d["effectiveness"] = self.effectiveness
        except UndefinedEffectiveness:
            d["effectiveness"] = None
        return d

    def merge(self, other: "EnergyLedger") -> "EnergyLedger":
        """Sum of two ledgers (e.g. consecutive segments or a scenario sweep)."""
        pj = list(np.add(self.per_joint_energy, other.per_joint_energy)) if self.per_joint_energy else list(other.per_joint_energy)
        vals = {k: getattr(self, k) + getattr(other, k) for k in (
            "dE_s", "W_ext", "dE_m_tot", "sigma_m_tot", "sigma_e", "dE_nr", "dE_load",
            "closure_residual", "dE_links", "dE_rotors", "duration")}
        return EnergyLedger(**vals, per_joint_energy=[float(v) for v in pj])


class LedgerBatch:
    """Trapezoidal accumulation of every ledger integral for a batch of rollouts."""

    def __init__(self, batch: int, n_joints_shape, r_a, friction):
        self.r_a = np.asarray(r_a)  # (N, 3)
        self.friction = np.asarray(friction)  # (N, 3) reflected viscous friction
        self.a2r = 1.0 / self.r_a
        z = np.zeros(batch)
        self.dE_s = z.copy()
        self.W_ext = z.copy()
        self.sigma_m = z.copy()
        self.sigma_e = z.copy()
        self.dE_nr = z.copy()
        self.per_joint = np.zeros((batch,) + tuple(n_joints_shape))
        self.start = None
        self.last = None
        self.duration = 0.0

    def rates(self, s: EnergySample):
        cons = joint_consumption(s.U, s.qd, self.r_a)
        joule = self.r_a * s.U * s.U + self.a2r * s.qd * s.qd - 2.0 * s.U * s.qd
        return {
            "storage": -np.sum(cons, axis=(1, 2)),
            "w_ext": np.sum(s.qd * s.T_ext, axis=(1, 2)),
            "friction": np.sum(self.friction * s.qd * s.qd, axis=(1, 2)),
            "joule": np.sum(joule, axis=(1, 2)),
            "nr": np.sum(np.maximum(cons, 0.0), axis=(1, 2)),
            "cons": cons,
        }

    def add(self, sample: EnergySample, dt: float | None):
        r = self.rates(sample)
        if self.last is None:
            self.start = sample
        else:
            prev_rates, _ = self.last
            h = 0.5 * dt
            self.dE_s += h * (prev_rates["storage"] + r["storage"])
            self.W_ext += h * (prev_rates["w_ext"] + r["w_ext"])
            self.sigma_m += h * (prev_rates["friction"] + r["friction"])
            self.sigma_e += h * (prev_rates["joule"] + r["joule"])
            self.dE_nr += h * (prev_rates["nr"] + r["nr"])
            self.per_joint += h * (prev_rates["cons"] + r["cons"])
            self.duration += dt
        self.last = (r, sample)
        return r

    def ledgers(self) -> list[EnergyLedger]:
        out = []
        end = self.last[1]
        for p in range(len(self.dE_s)):
            d_links = float(end.links[p] - self.start.links[p])
            d_rot = float(end.rotors[p] - self.start.rotors[p])
            d_m = d_links + d_rot
            closure = self.W_ext[p] - (self.dE_s[p] + d_m + self.sigma_m[p] + self.sigma_e[p])
            out.append(
                EnergyLedger(
                    dE_s=float(self.dE_s[p]),
                    W_ext=float(self.W_ext[p]),
                    dE_m_tot=d_m,
                    sigma_m_tot=float(self.sigma_m[p]),
                    sigma_e=float(self.sigma_e[p]),
                    dE_nr=float(self.dE_nr[p]),
                    dE_load=float(end.load[p] - self.start.load[p]),
                    closure_residual=float(closure),
                    dE_links=d_links,
                    dE_rotors=d_rot,
                    duration=self.duration,
                    per_joint_energy=[float(v) for v in self.per_joint[p].ravel()],
                )
            )
        return out


def accumulate(ledger: EnergyLedger, prev: EnergySample, new: EnergySample, dt: float, r_a, friction) -> EnergyLedger:
    """Add one accepted step (trapezoidal rule between two samples) to a ledger."""
    batch = LedgerBatch(1, np.shape(r_a), r_a, friction)
    batch.add(prev, None)
    batch.add(new, dt)
    return ledger.merge(batch.ledgers()[0])


def effectiveness(dE_R: float, dE_NR: float) -> float:
    """Fraction of consumption avoided by regeneration: 1 - dE_R / dE_NR."""
    if dE_NR == 0:
        raise UndefinedEffectiveness("non-regenerative consumption is zero")
    return 1.0 - dE_R / dE_NR


def sankey_export(ledger: EnergyLedger) -> list[dict]:
    """Flows of the external balance; inflows minus outflows equal the closure residual.

    The external work and a net storage discharge are sources; a net charge,
    the change of mechanical energy and the two losses are sinks. Negative
    values on a sink denote energy released by it.
    """
    flows = [{"source": "external work", "sink": "system", "joules": ledger.W_ext}]
    if ledger.dE_s >= 0:
        flows.append({"source": "system", "sink": "storage", "joules": ledger.dE_s})
    else:
        flows.append({"source": "storage", "sink": "system", "joules": -ledger.dE_s})
    flows.append({"source": "system", "sink": "mechanical energy change", "joules": ledger.dE_m_tot})
    flows.append({"source": "system", "sink": "mechanical losses", "joules": ledger.sigma_m_tot})
    flows.append({"source": "system", "sink": "Joule losses", "joules": ledger.sigma_e})
    return flows


def sankey_balance(flows) -> float:
    total = 0.0
    for f in flows:
        if f["sink"] == "system":
            total += f["joules"]
        else:
            total -= f["joules"]
    return total


def write_ledger_json(path, ledger: EnergyLedger) -> None:
    with open(path, "w") as fh:
        json.dump(ledger.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_sankey_json(path, ledger: EnergyLedger) -> None:
    flows = sankey_export(ledger)
    with open(path, "w") as fh:
        json.dump({"flows": flows, "closure_residual": ledger.closure_residual}, fh, indent=2)
        fh.write("\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.12e}" for v in row])
