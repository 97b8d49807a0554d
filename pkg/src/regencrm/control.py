"""Impedance controller with semi-active virtual control and passivity audits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ActuatorParams


class InvalidGainsError(ValueError):
    pass


class StorageDepleted(ValueError):
    pass


def _diag_array(value, shape):
    arr = np.asarray(value, dtype=float)
    return np.broadcast_to(arr, shape).copy()


@dataclass
class ImpedanceGains:
    """Diagonal impedance gains for every joint, arrays of shape (N, 3).

    Damping and stiffness are split into a fixed part and a bounded offset:
    ``B = B_c + B_bar`` and ``K = K_c + K_bar``.
    """

    M: np.ndarray
    B_c: np.ndarray
    K_c: np.ndarray
    B_bar: np.ndarray | None = None
    K_bar: np.ndarray | None = None
    Lambda: np.ndarray | None = None
    K_D: np.ndarray | None = None

    def __post_init__(self):
        shape = np.shape(self.M) if np.ndim(self.M) == 2 else None
        for name in ("B_c", "K_c", "B_bar", "K_bar", "Lambda", "K_D"):
            v = getattr(self, name)
            if shape is None and v is not None and np.ndim(v) == 2:
                shape = np.shape(v)
        if shape is None:
            shape = (2, 3)
        self.M = _diag_array(self.M, shape)
        self.B_c = _diag_array(self.B_c, shape)
        self.K_c = _diag_array(self.K_c, shape)
        self.B_bar = _diag_array(0.0 if self.B_bar is None else self.B_bar, shape)
        self.K_bar = _diag_array(0.0 if self.K_bar is None else self.K_bar, shape)
        self.Lambda = _diag_array(20.0 if self.Lambda is None else self.Lambda, shape)
        self.K_D = _diag_array(30.0 if self.K_D is None else self.K_D, shape)
        for name in ("M", "Lambda", "K_D"):
            if np.any(getattr(self, name) <= 0):
                raise InvalidGainsError(f"{name} must be positive definite")
        if np.any(self.B <= 0) or np.any(self.K <= 0):
            raise InvalidGainsError("damping and stiffness must stay positive definite")

    @property
    def B(self) -> np.ndarray:
        return self.B_c + self.B_bar

    @property
    def K(self) -> np.ndarray:
        return self.K_c + self.K_bar

    @classmethod
    def table_i_baseline(cls, n_robots: int = 2) -> "ImpedanceGains":
        shape = (n_robots, 3)
        return cls(M=np.full(shape, 18.0), B_c=np.full(shape, 197.5), K_c=np.full(shape, 825.0))

    def with_offsets(self, B_bar, K_bar) -> "ImpedanceGains":
        return ImpedanceGains(self.M, self.B_c, self.K_c, B_bar, K_bar, self.Lambda, self.K_D)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("M", "B_c", "K_c", "B_bar", "K_bar", "Lambda", "K_D")}

    @classmethod
    def from_dict(cls, d: dict) -> "ImpedanceGains":
        return cls(**{k: np.asarray(v, dtype=float) if v is not None else None for k, v in d.items()})


@dataclass
class GainSchedule:
    """Piecewise-linear offsets B_bar(t), K_bar(t); rows hold the N*3 joint entries."""

    times: np.ndarray
    B_bar: np.ndarray
    K_bar: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.B_bar = np.atleast_2d(np.asarray(self.B_bar, dtype=float))
        self.K_bar = np.atleast_2d(np.asarray(self.K_bar, dtype=float))
        if self.times.ndim != 1 or len(self.times) < 1:
            raise ValueError("schedule needs at least one row")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("schedule times must be strictly increasing")
        if self.B_bar.shape != self.K_bar.shape or self.B_bar.shape[0] != len(self.times):
            raise ValueError("schedule columns inconsistent")

    def _interp(self, table, t):
        return np.array([np.interp(t, self.times, col) for col in table.T])

    def offsets(self, t: float):
        return self._interp(self.B_bar, t), self._interp(self.K_bar, t)

    def slopes(self, k: int):
        """Rates of change used at row ``k``: the following segment, or the last one."""
        if len(self.times) == 1:
            z = np.zeros(self.B_bar.shape[1])
            return z, z
        j = min(k, len(self.times) - 2)
        dt = self.times[j + 1] - self.times[j]
        return (self.B_bar[j + 1] - self.B_bar[j]) / dt, (self.K_bar[j + 1] - self.K_bar[j]) / dt

    @classmethod
    def load_csv(cls, path) -> "GainSchedule":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
        if not header or header[0].strip() != "t":
            raise ValueError(f"{path}: first column must be 't'")
        b_cols = [i for i, h in enumerate(header) if h.strip().startswith("B_bar")]
        k_cols = [i for i, h in enumerate(header) if h.strip().startswith("K_bar")]
        if not b_cols or len(b_cols) != len(k_cols):
            raise ValueError(f"{path}: need matching B_bar_* and K_bar_* columns")
        data = np.array(rows)
        return cls(data[:, 0], data[:, b_cols], data[:, k_cols])

    def to_csv(self, path) -> None:
        n = self.B_bar.shape[1]
        header = ["t"] + [f"B_bar_{j}" for j in range(n)] + [f"K_bar_{j}" for j in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for t, b, k in zip(self.times, self.B_bar, self.K_bar):
                w.writerow([f"{v:.12e}" for v in (t, *b, *k)])


# ---------------------------------------------------------------------------
# single-step building blocks


@dataclass
class ControllerState:
    """Impedance-filter states: w and its rate for every joint, shape (N, 3)."""

    w: np.ndarray
    wd: np.ndarray
    zeta: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape=(2, 3)) -> "ControllerState":
        return cls(np.zeros(shape), np.zeros(shape))


def filter_acceleration(w, wd, T_ext, M, B, K):
    return (np.asarray(T_ext) - B * wd - K * w) / M


def impedance_filter_step(cs: ControllerState, T_ext, gains: ImpedanceGains, dt: float):
    """Advance w = [p^2 M + p B + K]^-1 T_ext by one RK4 step with ``T_ext`` held.

    Returns the new state and (w, wdot, wddot) at the end of the step; the
    second derivative comes from the state equation, never from differencing.
    """
    M, B, K = gains.M, gains.B, gains.K

    def f(w, wd):
        return wd, filter_acceleration(w, wd, T_ext, M, B, K)

    k1 = f(cs.w, cs.wd)
    k2 = f(cs.w + 0.5 * dt * k1[0], cs.wd + 0.5 * dt * k1[1])
    k3 = f(cs.w + 0.5 * dt * k2[0], cs.wd + 0.5 * dt * k2[1])
    k4 = f(cs.w + dt * k3[0], cs.wd + dt * k3[1])
    w = cs.w + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    wd = cs.wd + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    wdd = filter_acceleration(w, wd, T_ext, M, B, K)
    return ControllerState(w, wd, cs.zeta), (w, wd, wdd)


def auxiliary_error(q_des, q, w):
    """Tracking error minus the impedance-filtered interaction torque."""
    return (np.asarray(q_des) - np.asarray(q)) - np.asarray(w)


def reference_signals(q_des, qd_des, qdd_des, q, qd, w, wd, wdd, Lambda):
    """Sliding variable S and the reference velocity/acceleration.

    S = qd - qd_r, which equals -(zeta_dot + Lambda zeta).
    """
    qt = np.asarray(q_des) - q
    qdt = np.asarray(qd_des) - qd
    qd_r = qd_des + Lambda * qt - (wd + Lambda * w)
    qdd_r = qdd_des + Lambda * qdt - (wdd + Lambda * wd)
    return qd - qd_r, qd_r, qdd_r


def virtual_torque(D, C, g, qd_r, qdd_r, S, T_ext, K_D):
    """Joint torque law for one arm given its augmented model terms."""
    return D @ qdd_r + C @ qd_r + g - K_D * S - T_ext


def svc_modulate(tv, V_s: float, act: ActuatorParams):
    """Converter voltage ratio realizing a virtual torque; returns (u, saturated)."""
    if not V_s > 0:
        raise StorageDepleted(f"storage voltage must be positive, got {V_s}")
    u = np.asarray(tv, dtype=float) * act.resistance / (act.a * V_s)
    sat = np.abs(u) > 1.0
    u = np.clip(u, -1.0, 1.0)
    if np.ndim(u) == 0:
        return float(u), bool(sat)
    return u, sat


def applied_input(u, V_s: float, act: ActuatorParams):
    """Joint torque produced by voltage ratio ``u`` (excluding back-EMF damping)."""
    return act.a * np.asarray(u, dtype=float) * V_s / act.resistance


def torque_ceiling(V_s, act: ActuatorParams):
    return V_s * act.a / act.resistance


# ---------------------------------------------------------------------------
# passivity certificate for time-varying gains


@dataclass(frozen=True)
class PassivityReport:
    lambda_bar: float
    lambda_B_min: float
    margin: float
    regime: str

    @property
    def passive(self) -> bool:
        return self.margin > 0


def dissipation_matrix(B, K, Bdot, Kdot, M) -> np.ndarray:
    """Block matrix Pdot + P A + A^T P for P = diag(K, M B) and the filter's A(t)."""
    B, K, Bdot, Kdot, M = (np.diag(np.ravel(v)) for v in (B, K, Bdot, Kdot, M))
    return np.block([[Kdot, K - K.T @ B.T], [K.T - B @ K, M @ Bdot]])


def passivity_check(B, K, Bdot, Kdot, M) -> PassivityReport:
    """Evaluate the eigenvalue condition lambda_max < 2 lambda_min(B)^2.

    ``regime`` classifies the block matrix: ND when no eigenvalue is positive
    (the semidefinite boundary included), PD when all are positive, ID
    otherwise.
    """
    b = np.ravel(B)
    k = np.ravel(K)
    if np.any(b <= 0) or np.any(k <= 0):
        raise InvalidGainsError("B and K must be positive definite")
    Pbar = dissipation_matrix(B, K, Bdot, Kdot, M)
    sym = 0.5 * (Pbar + Pbar.T)
    eig = np.linalg.eigvalsh(sym)
    lam_bar = float(eig[-1])
    lam_b = float(b.min())
    tol = 1e-12 * max(1.0, float(np.abs(eig).max()))
    if eig[-1] <= tol:
        regime = "ND"
    elif eig[0] > tol:
        regime = "PD"
    else:
        regime = "ID"
    return PassivityReport(lam_bar, lam_b, 2.0 * lam_b**2 - lam_bar, regime)


@dataclass
class AuditResult:
    times: np.ndarray
    reports: list = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return all(r.passive for r in self.reports)

    @property
    def first_violation(self) -> float | None:
        for t, r in zip(self.times, self.reports):
            if not r.passive:
                return float(t)
        return None

    def to_csv(self, path) -> None:
        """Write the per-row report to a file path or an open text stream."""
        if hasattr(path, "write"):
            self._write(path)
            return
        with open(path, "w", newline="") as fh:
            self._write(fh)

    def _write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lambda_bar", "lambda_B", "margin", "regime"])
        for t, r in zip(self.times, self.reports):
            w.writerow([f"{t:.12e}", f"{r.lambda_bar:.12e}", f"{r.lambda_B_min:.12e}", f"{r.margin:.12e}", r.regime])


def audit_schedule(schedule: GainSchedule, gains: ImpedanceGains) -> AuditResult:
    """Passivity report at every schedule row, with rates from the adjacent segment."""
    B_c, K_c, M = gains.B_c.ravel(), gains.K_c.ravel(), gains.M.ravel()
    if schedule.B_bar.shape[1] != B_c.size:
        raise ValueError(f"schedule has {schedule.B_bar.shape[1]} joints, gains have {B_c.size}")
    out = AuditResult(schedule.times.copy())
    for k, t in enumerate(schedule.times):
        B = B_c + schedule.B_bar[k]
        K = K_c + schedule.K_bar[k]
        if np.any(B <= 0) or np.any(K <= 0):
            raise InvalidGainsError(f"non positive-definite gains at t={t:g}")
        Bd, Kd = schedule.slopes(k)
        out.reports.append(passivity_check(B, K, Bd, Kd, M))
    return out


# ---------------------------------------------------------------------------
# batched closed-loop controller used by the integrator


class ImpedanceController:
    """Impedance law with exact virtual matching, vectorized over gain candidates.

    ``gains`` is one ImpedanceGains or a list of them (one per batch row).
    ``reference(t)`` returns (q_des, qd_des, qdd_des) of shape (N, 3). When a
    ``schedule`` is given its offsets replace the constant B_bar, K_bar.
    """

    def __init__(self, gains, reference, actuators, schedule: GainSchedule | None = None):
        glist = [gains] if isinstance(gains, ImpedanceGains) else list(gains)
        self.gains = glist
        self.M = np.stack([g.M for g in glist])
        self.B_c = np.stack([g.B_c for g in glist])
        self.K_c = np.stack([g.K_c for g in glist])
        self.B_const = np.stack([g.B for g in glist])
        self.K_const = np.stack([g.K for g in glist])
        self.Lambda = np.stack([g.Lambda for g in glist])
        self.K_D = np.stack([g.K_D for g in glist])
        self.reference = reference
        self.schedule = schedule
        self.shape = self.M.shape[1:]
        self.n_states = 2 * int(np.prod(self.shape))
        acts = [list(a) for a in actuators]
        self.actuators = acts
        self.a_over_r = np.array([[act.a / act.resistance for act in row] for row in acts])
        self.eye = np.eye(3)

    def row(self, p: int) -> "ImpedanceController":
        return ImpedanceController([self.gains[p]], self.reference, self.actuators, self.schedule)

    def gains_at(self, t):
        if self.schedule is None:
            return self.B_const, self.K_const
        b, k = self.schedule.offsets(t)
        return self.B_c + b.reshape(self.shape), self.K_c + k.reshape(self.shape)

    def initial_state(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.n_states))

    def _split(self, xc):
        P = xc.shape[0]
        x = xc.reshape(P, 2, *self.shape)
        return x[:, 0], x[:, 1]

    def evaluate(self, t, q, qd, D, C, g, xc, V_s):
        q_des, qd_des, qdd_des = self.reference(t)
        w, wd = self._split(xc)
        B, K = self.gains_at(t)
        M, Lam = self.M, self.Lambda
        qt = q_des - q
        qd_r = qd_des + Lam * qt - (wd + Lam * w)
        S = qd - qd_r
        # wdd = (T_ext - B wd - K w)/M enters qdd_r linearly in T_ext
        qdd_r0 = qdd_des + Lam * (qd_des - qd) + (B * wd + K * w) / M - Lam * wd
        tau0 = (
            np.einsum("pnij,pnj->pni", D, qdd_r0)
            + np.einsum("pnij,pnj->pni", C, qd_r)
            + g
            - self.K_D * S
        )
        H = -(D / M[..., None, :] + self.eye)
        umax = V_s[:, None, None] * self.a_over_r
        aux = {"S": S, "zeta": qt - w, "w": w, "wd": wd, "B": B, "K": K}
        return tau0, H, umax, aux

    def derivative(self, t, xc, T_ext, aux):
        w, wd = aux["w"], aux["wd"]
        wdd = (T_ext - aux["B"] * wd - aux["K"] * w) / self.M
        return np.stack([wd, wdd], axis=1)
