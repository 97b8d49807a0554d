"""Command-line front end.

    regencrm sim <cfg> -o <dir> [--seed N] [--dt S]
    regencrm opt <cfg> -o <dir> [--seed N]
    regencrm audit <schedule.csv> --gains <cfg> [-o report.csv]

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 no feasible optimization result, 5 passivity not certified.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ScenarioConfig
from .control import GainSchedule, InvalidGainsError, audit_schedule
from .energy import UndefinedEffectiveness, write_csv, write_ledger_json, write_sankey_json
from .optimize import GaConfig, evaluate_population, ga_run, write_report
from .simulation import RolloutResult, Scenario, SimSettings, rollout

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_INFEASIBLE = 4
EXIT_NOT_PASSIVE = 5

log = logging.getLogger("regencrm")


def _load(path) -> ScenarioConfig:
    return ScenarioConfig.from_file(path)


def _joint_names(n_robots: int, prefix: str) -> list[str]:
    return [f"{prefix}_r{i + 1}_{j + 1}" for i in range(n_robots) for j in range(3)]


def write_artifacts(out: Path, sc: Scenario, result: RolloutResult) -> None:
    """Time series for every figure of interest plus the energy ledger and Sankey flows."""
    out.mkdir(parents=True, exist_ok=True)
    rec = result.record.arrays()
    n = len(sc.robots)
    t = rec["t"]
    if t.size == 0:
        return
    cols = {
        "q": _joint_names(n, "q"),
        "q_des": _joint_names(n, "q_des"),
        "qd": _joint_names(n, "qd"),
        "tv": _joint_names(n, "tv"),
        "U": _joint_names(n, "U"),
        "u": _joint_names(n, "u"),
        "T_ext": _joint_names(n, "T_ext"),
        "power": _joint_names(n, "P"),
    }
    header = ["t", "load_x", "load_y", "load_phi"]
    blocks = [t[:, None], rec["load"]]
    for key, names in cols.items():
        header += names
        blocks.append(rec[key])
    header += ["dE_s", "constraint_residual"]
    blocks += [rec["dE_s"][:, None], rec["residual"][:, None]]
    write_csv(out / "timeseries.csv", header, np.hstack(blocks))
    for i in range(n):
        s = slice(3 * i, 3 * i + 3)
        write_csv(
            out / f"joints_r{i + 1}.csv",
            ["t"] + [f"q_des_{j + 1}" for j in range(3)] + [f"q_{j + 1}" for j in range(3)],
            np.hstack([t[:, None], rec["q_des"][:, s], rec["q"][:, s]]),
        )
    write_csv(out / "torques.csv", ["t"] + cols["tv"], np.hstack([t[:, None], rec["tv"]]))
    write_csv(out / "powers.csv", ["t"] + cols["power"], np.hstack([t[:, None], rec["power"]]))
    ledger = result.outcome.ledger
    if ledger is not None:
        write_ledger_json(out / "ledger.json", ledger)
        write_sankey_json(out / "sankey.json", ledger)


def summary_table(result: RolloutResult) -> str:
    o = result.outcome
    rows = [
        ("final load position error [m]", o.final_error),
        ("max joint tracking error [rad]", o.max_tracking_error),
    ]
    if o.ledger is not None:
        try:
            eps = o.ledger.effectiveness
        except UndefinedEffectiveness:
            eps = float("nan")
        rows += [
            ("dE_s (stored energy change) [J]", o.ledger.dE_s),
            ("dE_NR (consumption w/o regeneration) [J]", o.ledger.dE_nr),
            ("effectiveness", eps),
            ("energy balance residual [J]", o.ledger.closure_residual),
        ]
    rows += [
        ("max constraint drift [m]", o.max_drift),
        ("saturation duty", o.saturation_duty),
        ("wall time [s]", result.wall_time),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v: .6g}" for k, v in rows)


def _apply_overrides(cfg: ScenarioConfig, seed, dt) -> Scenario:
    if seed is not None:
        cfg.seed = seed
        if cfg.optimizer is not None:
            cfg.optimizer = GaConfig(**{**cfg.optimizer.__dict__, "seed": seed})
    if dt is not None:
        if not dt > 0:
            raise ConfigError("--dt must be positive")
        cfg.sim = SimSettings(**{**cfg.sim.__dict__, "dt": dt})
    return cfg.scenario()


def cmd_simulate(args) -> int:
    cfg = _load(args.config)
    sc = _apply_overrides(cfg, args.seed, args.dt)
    result = rollout(sc, record=True)
    out = Path(args.output)
    write_artifacts(out, sc, result)
    print(summary_table(result))
    o = result.outcome
    if o.diverged:
        print(f"error: simulation diverged at t={o.diverged_at:.6g} s ({o.reason or 'non-finite state'})", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _load(args.config)
    if cfg.optimizer is None:
        raise ConfigError("config has no 'optimizer' section", args.config)
    sc = _apply_overrides(cfg, args.seed, None)
    ga = cfg.optimizer
    ga_sc = sc if ga.dt is None else sc.with_dt(ga.dt)
    n_genes = 2 * sc.gains.M.size
    baseline = evaluate_population(np.zeros((1, n_genes)), ga_sc)[0]
    log.info("baseline dE_s = %.6g J (feasible=%s)", baseline.fitness, baseline.feasible)

    def progress(stats):
        log.info(
            "generation %d: best %.6g J, best so far %.6g J, %d feasible",
            stats.generation, stats.best_fitness, stats.best_so_far, stats.n_feasible,
        )

    result = ga_run(ga, sc, log=progress)
    best = result.best
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rerun = rollout(sc, gains=[best.gains(sc.gains)], record=True)
    write_artifacts(out, sc, rerun)
    write_report(out / "optimization_report.json", ga, result, sc.gains, baseline, rerun.outcome.ledger)
    print(summary_table(rerun))
    if np.isfinite(best.fitness) and np.isfinite(baseline.fitness):
        print(f"best dE_s {best.fitness:.6g} J vs baseline {baseline.fitness:.6g} J (delta {best.fitness - baseline.fitness:+.6g} J)")
    if not result.feasible_found:
        print("error: no feasible candidate found; best infeasible result reported", file=sys.stderr)
        return EXIT_INFEASIBLE
    if rerun.outcome.diverged:
        print(f"error: best candidate diverged on rerun ({rerun.outcome.reason})", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _load(args.gains)
    try:
        schedule = GainSchedule.load_csv(args.schedule)
    except (OSError, ValueError) as exc:
        raise ConfigError(str(exc), args.schedule) from exc
    try:
        result = audit_schedule(schedule, cfg.gains)
    except InvalidGainsError as exc:
        raise ConfigError(str(exc), args.schedule) from exc
    except ValueError as exc:
        raise ConfigError(str(exc), args.schedule) from exc
    if args.output:
        result.to_csv(args.output)
        stream = sys.stdout
    else:
        result.to_csv(sys.stdout)
        stream = sys.stderr
    if result.certified:
        print("CERTIFIED", file=stream)
        return EXIT_OK
    print(f"NOT CERTIFIED: first violation at t={result.first_violation:.6g} s", file=stream)
    return EXIT_NOT_PASSIVE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regencrm", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sim", help="run one closed-loop rollout")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--dt", type=float, default=None, help="integration step [s]")
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("opt", help="genetic search over gain offsets")
    o.add_argument("config")
    o.add_argument("-o", "--output", required=True, help="output directory")
    o.add_argument("--seed", type=int, default=None)
    o.set_defaults(func=cmd_optimize)

    a = sub.add_parser("audit", help="passivity audit of a gain schedule")
    a.add_argument("schedule", help="CSV with columns t, B_bar_*, K_bar_*")
    a.add_argument("--gains", required=True, help="scenario config providing M, B_c, K_c")
    a.add_argument("-o", "--output", default=None, help="report CSV (default: stdout)")
    a.add_argument("--seed", type=int, default=None, help="accepted for uniformity; the audit is deterministic")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
