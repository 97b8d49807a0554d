"""Real-coded genetic search over impedance gain offsets for maximum regeneration.

Genes are the diagonal offsets ``[B_bar (N*3), K_bar (N*3)]``. Every
candidate is scored by one closed-loop rollout; a whole population is
integrated as one batch, so results never depend on evaluation order.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .control import ImpedanceGains, InvalidGainsError
from .simulation import RolloutOutcome, Scenario, rollout

MAX_VIOLATION = 1e12


@dataclass
class GaConfig:
    """Genetic-algorithm settings; defaults: population 50, 30 generations, crossover 0.75, mutation 0.02.

    ``B_bounds``/``K_bounds`` are (lower, upper) offsets, scalars or per-joint
    arrays. ``free`` lists the gene indices being searched (``None``: all);
    the remaining genes stay at ``pinned``.
    """

    population: int = 50
    max_generations: int = 30
    crossover_prob: float = 0.75
    mutation_rate: float = 0.02
    seed: int = 0
    elitism: int = 1
    B_bounds: tuple = (-22.0, 22.0)
    K_bounds: tuple = (-75.0, 75.0)
    tournament_size: int = 2
    blend_alpha: float = 0.5
    sigma_fraction: float = 0.1
    dt: float | None = None  # rollout step; None keeps the scenario's
    batch_size: int | None = None
    free: tuple | None = None
    pinned: tuple | None = None

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.max_generations < 1:
            raise ValueError("max_generations must be at least 1")
        for name in ("crossover_prob", "mutation_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0 <= self.elitism < self.population:
            raise ValueError("elitism must be smaller than the population")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be positive")
        for name in ("B_bounds", "K_bounds"):
            lo, hi = (np.asarray(v, dtype=float) for v in getattr(self, name))
            if np.any(lo > hi):
                raise ValueError(f"{name}: lower bound exceeds upper bound")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")

    def box(self, n_joints: int):
        """Lower and upper gene bounds for ``n_joints`` diagonal entries."""
        bl, bu = (np.broadcast_to(np.asarray(v, float).ravel(), (n_joints,)) for v in self.B_bounds)
        kl, ku = (np.broadcast_to(np.asarray(v, float).ravel(), (n_joints,)) for v in self.K_bounds)
        return np.concatenate([bl, kl]), np.concatenate([bu, ku])

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("B_bounds", "K_bounds", "free", "pinned"):
            if d[k] is not None:
                d[k] = np.asarray(d[k], dtype=float).tolist() if k != "free" else list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaConfig":
        d = dict(d)
        for k in ("B_bounds", "K_bounds", "free", "pinned"):
            if d.get(k) is not None:
                d[k] = tuple(tuple(v) if isinstance(v, list) else v for v in d[k])
        return cls(**d)


@dataclass
class Candidate:
    B_bar: np.ndarray
    K_bar: np.ndarray
    fitness: float = float("nan")
    feasible: bool = False
    violation: float = float("nan")
    outcome: RolloutOutcome | None = field(default=None, repr=False, compare=False)

    @property
    def genes(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.B_bar), np.ravel(self.K_bar)])

    @classmethod
    def from_genes(cls, genes, shape) -> "Candidate":
        genes = np.asarray(genes, dtype=float)
        n = genes.size // 2
        return cls(genes[:n].reshape(shape).copy(), genes[n:].reshape(shape).copy())

    def gains(self, base: ImpedanceGains) -> ImpedanceGains:
        return base.with_offsets(self.B_bar, self.K_bar)

    def to_dict(self) -> dict:
        return {
            "B_bar": np.asarray(self.B_bar).tolist(),
            "K_bar": np.asarray(self.K_bar).tolist(),
            "fitness": _finite_or_none(self.fitness),
            "feasible": bool(self.feasible),
            "violation": _finite_or_none(self.violation),
        }


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None


def clamp(genes, lower, upper) -> np.ndarray:
    return np.clip(genes, lower, upper)


def _score(outcome: RolloutOutcome, scenario: Scenario):
    """Objective and feasibility of one rollout: (dE_s, feasible, violation)."""
    if outcome.diverged or outcome.ledger is None:
        return -np.inf, False, MAX_VIOLATION
    sim = scenario.sim
    violation = max(outcome.saturation_duty - sim.saturation_duty_tol, 0.0)
    violation += max(outcome.final_error - sim.eps_f, 0.0)
    violation += max(outcome.max_drift - sim.drift_tol, 0.0)
    fitness = outcome.ledger.dE_s
    if not np.isfinite(fitness):
        return -np.inf, False, MAX_VIOLATION
    return float(fitness), violation == 0.0, float(violation)


def evaluate_population(genes, scenario: Scenario, batch_size: int | None = None) -> list[Candidate]:
    """Score each row of ``genes`` (offsets already inside the box) with one rollout."""
    genes = np.atleast_2d(np.asarray(genes, dtype=float))
    base = scenario.gains
    shape = base.M.shape
    cands = [Candidate.from_genes(g, shape) for g in genes]
    valid, glist = [], []
    for i, c in enumerate(cands):
        try:
            glist.append(c.gains(base))
            valid.append(i)
        except InvalidGainsError:
            c.fitness, c.feasible, c.violation = -np.inf, False, MAX_VIOLATION
    step = batch_size or max(len(glist), 1)
    for start in range(0, len(glist), step):
        chunk = glist[start : start + step]
        res = rollout(scenario, gains=chunk, record=False)
        for j, outcome in enumerate(res.outcomes):
            c = cands[valid[start + j]]
            c.fitness, c.feasible, c.violation = _score(outcome, scenario)
            c.outcome = outcome
    return cands


def evaluate(candidate: Candidate, scenario: Scenario, config: GaConfig | None = None):
    """Clamp ``candidate`` to the box, run one rollout and return (dE_s, feasible, violation)."""
    config = GaConfig() if config is None else config
    n = np.size(candidate.B_bar)
    lower, upper = config.box(n)
    genes = clamp(candidate.genes, lower, upper)
    scored = evaluate_population(genes[None], scenario)[0]
    candidate.B_bar, candidate.K_bar = scored.B_bar, scored.K_bar
    candidate.fitness, candidate.feasible, candidate.violation = scored.fitness, scored.feasible, scored.violation
    candidate.outcome = scored.outcome
    return candidate.fitness, candidate.feasible, candidate.violation


def rank_key(c: Candidate):
    """Sort key: feasible candidates by descending fitness, then infeasible by violation."""
    if c.feasible:
        return (0, -c.fitness, 0.0)
    return (1, c.violation, -c.fitness if np.isfinite(c.fitness) else np.inf)


def order(cands: Sequence[Candidate]) -> list[int]:
    return sorted(range(len(cands)), key=lambda i: rank_key(cands[i]))


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    n_feasible: int
    best_so_far: float

    def to_dict(self) -> dict:
        return {k: _finite_or_none(v) if isinstance(v, float) else v for k, v in asdict(self).items()}


@dataclass
class GaResult:
    best: Candidate
    history: list
    feasible_found: bool
    evaluations: int
    wall_time: float

    def __iter__(self):
        return iter((self.best, self.history))


def _scenario_for(config: GaConfig, scenario: Scenario) -> Scenario:
    if config.dt is None or scenario.sim.dt == config.dt:
        return scenario
    return scenario.with_dt(config.dt)


def _expand(free_genes, config: GaConfig, n_genes: int) -> np.ndarray:
    free_genes = np.atleast_2d(free_genes)
    if config.free is None:
        return free_genes
    full = np.zeros((free_genes.shape[0], n_genes))
    if config.pinned is not None:
        full[:] = np.asarray(config.pinned, dtype=float)
    full[:, list(config.free)] = free_genes
    return full


def ga_run(config: GaConfig, scenario: Scenario, log=None) -> GaResult:
    """Maximize the stored energy over the gain-offset box.

    Tournament selection, blend crossover, per-gene Gaussian mutation and
    elitism; infeasible candidates rank below every feasible one. Each
    generation draws from its own child of the seed sequence.
    """
    t0 = time.perf_counter()
    sc = _scenario_for(config, scenario)
    n_joints = sc.gains.M.size
    lower_all, upper_all = config.box(n_joints)
    idx = np.arange(2 * n_joints) if config.free is None else np.asarray(config.free)
    lower, upper = lower_all[idx], upper_all[idx]
    width = upper - lower
    n_genes = idx.size
    seeds = np.random.SeedSequence(config.seed).spawn(config.max_generations)

    rng = np.random.default_rng(seeds[0])
    pop = lower + rng.random((config.population, n_genes)) * width
    cands = evaluate_population(_expand(pop, config, 2 * n_joints), sc, config.batch_size)
    evaluations = len(cands)
    history: list[GenerationStats] = []
    best = None

    for gen in range(config.max_generations):
        if gen > 0:
            rng = np.random.default_rng(seeds[gen])
            ranks = np.empty(len(cands), dtype=int)
            ranks[order(cands)] = np.arange(len(cands))
            elite_idx = order(cands)[: config.elitism]
            n_children = config.population - config.elitism
            children = np.empty((n_children, n_genes))
            k = 0
            while k < n_children:
                parents = []
                for _ in range(2):
                    picks = rng.integers(0, len(cands), config.tournament_size)
                    parents.append(pop[picks[np.argmin(ranks[picks])]])
                a, b = parents
                if rng.random() < config.crossover_prob:
                    lo, hi = np.minimum(a, b), np.maximum(a, b)
                    span = hi - lo
                    c1 = rng.uniform(lo - config.blend_alpha * span, hi + config.blend_alpha * span)
                    c2 = rng.uniform(lo - config.blend_alpha * span, hi + config.blend_alpha * span)
                else:
                    c1, c2 = a.copy(), b.copy()
                for child in (c1, c2):
                    if k >= n_children:
                        break
                    mask = rng.random(n_genes) < config.mutation_rate
                    child = child + mask * rng.normal(0.0, config.sigma_fraction * width)
                    children[k] = clamp(child, lower, upper)
                    k += 1
            new_cands = evaluate_population(_expand(children, config, 2 * n_joints), sc, config.batch_size)
            evaluations += len(new_cands)
            pop = np.vstack([pop[elite_idx], children])
            cands = [cands[i] for i in elite_idx] + new_cands

        ordered = order(cands)
        gen_best = cands[ordered[0]]
        if best is None or rank_key(gen_best) <= rank_key(best):
            best = gen_best
        feas = [c.fitness for c in cands if c.feasible]
        stats = GenerationStats(
            generation=gen,
            best_fitness=float(gen_best.fitness),
            mean_fitness=float(np.mean(feas)) if feas else float("nan"),
            n_feasible=len(feas),
            best_so_far=float(best.fitness),
        )
        history.append(stats)
        if log is not None:
            log(stats)

    return GaResult(best, history, bool(best.feasible), evaluations, time.perf_counter() - t0)


def grid_oracle(
    scenario: Scenario,
    resolution: int,
    config: GaConfig | None = None,
    free: Sequence[int] | None = None,
    batch_size: int | None = None,
):
    """Exhaustive search over at most two free genes on a regular grid spanning the box.

    Returns the best grid candidate and the grid of fitness values (rows:
    first free gene, columns: second). A resolution of 1 evaluates the box
    centre.
    """
    config = GaConfig() if config is None else config
    free = tuple(config.free if free is None else free)
    if len(free) == 0 or len(free) > 2:
        raise ValueError(f"grid search supports one or two free variables, got {len(free)}")
    if resolution < 1:
        raise ValueError("resolution must be positive")
    sc = _scenario_for(config, scenario)
    n_joints = sc.gains.M.size
    lower, upper = config.box(n_joints)
    axes = []
    for j in free:
        if resolution == 1:
            axes.append(np.array([0.5 * (lower[j] + upper[j])]))
        else:
            axes.append(np.linspace(lower[j], upper[j], resolution))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(free))
    cfg = GaConfig(**{**config.__dict__, "free": free})
    cands = evaluate_population(_expand(mesh, cfg, 2 * n_joints), sc, batch_size or config.batch_size)
    best = cands[order(cands)[0]]
    values = np.array([c.fitness if c.feasible else -np.inf for c in cands]).reshape([len(a) for a in axes])
    return best, values, axes


def write_report(
    path, config: GaConfig, result: GaResult, base: ImpedanceGains, baseline: Candidate | None = None, ledger=None
) -> dict:
    """Optimization report: config echo, per-generation stats, best gains and energies."""
    best = result.best
    gains = best.gains(base)
    report = {
        "config": config.to_dict(),
        "history": [h.to_dict() for h in result.history],
        "best": best.to_dict(),
        "best_gains": {
            "B": [np.diag(row).tolist() for row in gains.B],
            "K": [np.diag(row).tolist() for row in gains.K],
        },
        "feasible_found": result.feasible_found,
        "evaluations": result.evaluations,
        "wall_time_s": result.wall_time,
    }
    if baseline is not None:
        report["baseline"] = baseline.to_dict()
        if np.isfinite(best.fitness) and np.isfinite(baseline.fitness):
            report["improvement_J"] = float(best.fitness - baseline.fitness)
    if ledger is not None:
        report["dE_s"] = ledger.dE_s
        report["dE_NR"] = ledger.dE_nr
        try:
            report["effectiveness"] = ledger.effectiveness
        except ValueError:
            report["effectiveness"] = None
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return report
