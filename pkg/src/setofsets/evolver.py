"""Multi-objective multifactorial evolution of pruning masks.

One population per task, all living in the same mask space.  Each
generation pairs parents drawn from the pooled mating pools: same-task
pairs recombine normally, cross-task pairs recombine with probability
``p_kl`` and otherwise fall back to two intra-task matings.  Every pairing
yields exactly two evaluated offspring, so the evaluation budget depends
only on ``(K, population_size, generations)``.

With ``mode="singletask"`` all cross-task recombination is disabled and each
population evolves as an independent NSGA-II.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import genome
from .genome import GroupedMask, GroupingMap
from .network import ReferenceNet
from .pareto import (
    DEFAULT_REFERENCE,
    HypervolumeTrend,
    NormalizationBounds,
    crowding_distance,
    environmental_select,
    hypervolume_2d,
    nondominated_sort,
    normalize_for_hv,
)
from .taskbed import Task, evaluate

log = logging.getLogger(__name__)

MODES = ("multitask", "singletask")


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    n_tasks: int = 2
    population_size: int = 60
    generations: int = 120
    transfer: float | tuple[tuple[float, ...], ...] = 0.3
    mutation_rate: float | None = None
    min_active_fraction: float = genome.DEFAULT_MIN_ACTIVE
    init_density: tuple[float, float] = (0.3, 1.0)
    seed: int = 0
    mode: str = "multitask"

    def __post_init__(self):
        if self.n_tasks < 1:
            raise EngineError("engine.n_tasks: must be >= 1")
        if self.population_size < 4 or self.population_size % 2:
            raise EngineError("engine.population_size: must be even and >= 4")
        if self.generations < 1:
            raise EngineError("engine.generations: must be >= 1")
        if self.mode not in MODES:
            raise EngineError(f"engine.mode: unknown mode {self.mode!r}")
        if self.mutation_rate is not None and not 0.0 <= self.mutation_rate <= 1.0:
            raise EngineError("engine.mutation_rate: must lie in [0, 1]")
        if not 0.0 < self.min_active_fraction <= 1.0:
            raise EngineError("engine.min_active_fraction: must lie in (0, 1]")
        lo, hi = self.init_density
        if not 0.0 <= lo <= hi <= 1.0:
            raise EngineError("engine.init_density: need 0 <= low <= high <= 1")
        p = self.transfer_matrix()
        if p.shape != (self.n_tasks, self.n_tasks):
            raise EngineError(f"engine.transfer: expected a {self.n_tasks}x{self.n_tasks} matrix")
        if ((p < 0) | (p > 1)).any():
            raise EngineError("engine.transfer: probabilities must lie in [0, 1]")
        if not np.allclose(p, p.T):
            raise EngineError("engine.transfer: matrix must be symmetric")

    def transfer_matrix(self) -> np.ndarray:
        if np.isscalar(self.transfer):
            p = np.full((self.n_tasks, self.n_tasks), float(self.transfer))
        else:
            p = np.array(self.transfer, dtype=np.float64)
        if p.ndim == 2 and p.shape[0] == p.shape[1]:
            p = p.copy()
            np.fill_diagonal(p, 0.0)
        return p

    def effective_transfer(self) -> np.ndarray:
        if self.mode == "singletask":
            return np.zeros((self.n_tasks, self.n_tasks))
        return self.transfer_matrix()

    def replace(self, **changes) -> "EngineConfig":
        d = self.to_dict()
        d.update(changes)
        return EngineConfig.from_dict(d)

    def to_dict(self) -> dict:
        transfer = self.transfer if np.isscalar(self.transfer) else [list(r) for r in self.transfer]
        return {
            "n_tasks": self.n_tasks,
            "population_size": self.population_size,
            "generations": self.generations,
            "transfer": transfer,
            "mutation_rate": self.mutation_rate,
            "min_active_fraction": self.min_active_fraction,
            "init_density": list(self.init_density),
            "seed": self.seed,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        d = dict(d)
        if isinstance(d.get("transfer"), list):
            d["transfer"] = tuple(tuple(r) for r in d["transfer"])
        if "init_density" in d:
            d["init_density"] = tuple(d["init_density"])
        return cls(**d)


@dataclass
class Individual:
    id: int
    task_id: int
    mask: GroupedMask
    phi1: float
    phi2: float
    generation: int = 0
    parents: tuple[int, ...] = ()
    transfer: bool = False
    rank: int = -1
    crowding: float = 0.0

    @property
    def objectives(self) -> tuple[float, float]:
        return self.phi1, self.phi2

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task_id": self.task_id,
            "mask_hex": self.mask.to_hex(),
            "phi1": self.phi1,
            "phi2": self.phi2,
            "retained_params": self.mask.retained_parameter_count,
            "generation": self.generation,
            "parents": list(self.parents),
            "transfer": self.transfer,
        }

    @classmethod
    def from_dict(cls, d: dict, grouping: GroupingMap) -> "Individual":
        return cls(
            id=d["id"], task_id=d["task_id"], mask=GroupedMask.from_hex(d["mask_hex"], grouping),
            phi1=d["phi1"], phi2=d["phi2"], generation=d.get("generation", 0),
            parents=tuple(d.get("parents", ())), transfer=d.get("transfer", False),
        )


@dataclass
class EngineState:
    grouping: GroupingMap
    populations: dict[int, list[Individual]]
    rng: np.random.Generator
    bounds: dict[int, NormalizationBounds]
    trend: HypervolumeTrend
    offspring: dict[int, list[Individual]] = field(default_factory=dict)
    generation: int = 0
    next_id: int = 0
    evaluations: int = 0
    transfer_events: int = 0
    audit: list[dict] = field(default_factory=list)


@dataclass
class RunResult:
    populations: dict[int, list[Individual]]
    trend: HypervolumeTrend
    audit: list[dict]
    bounds: dict[int, NormalizationBounds]
    grouping: GroupingMap

    @property
    def total_evaluations(self) -> int:
        return sum(r["evals"] for r in self.audit)

    @property
    def total_transfer_events(self) -> int:
        return sum(r["transfer_events"] for r in self.audit)


def _task_map(tasks: Sequence[Task], config: EngineConfig) -> dict[int, Task]:
    if len(tasks) != config.n_tasks:
        raise EngineError(f"config expects {config.n_tasks} tasks, got {len(tasks)}")
    return {t.id: t for t in tasks}


def _mutation_rate(config: EngineConfig, grouping: GroupingMap) -> float:
    return 1.0 / grouping.n_bits if config.mutation_rate is None else config.mutation_rate


def _new_individual(state: EngineState, mask: GroupedMask, task: Task, jat: ReferenceNet,
                    parents=(), transfer=False) -> Individual:
    ind = Individual(
        id=state.next_id, task_id=task.id, mask=mask,
        phi1=genome.size_objective(mask), phi2=evaluate(mask, jat, task),
        generation=state.generation, parents=tuple(parents), transfer=transfer,
    )
    state.next_id += 1
    state.evaluations += 1
    return ind


def assign_rank_and_crowding(population: list[Individual]) -> None:
    objs = np.array([ind.objectives for ind in population])
    for rank, front in enumerate(nondominated_sort(objs)):
        crowd = crowding_distance(objs[front])
        for k, pos in enumerate(front):
            population[pos].rank = rank
            population[pos].crowding = float(crowd[k])


def population_hypervolume(population: Sequence[Individual], bounds: NormalizationBounds,
                           reference=DEFAULT_REFERENCE) -> float:
    objs = np.array([ind.objectives for ind in population])
    return hypervolume_2d(normalize_for_hv(objs, bounds), reference)


def _record(state: EngineState, evals: int, transfers: int, started: float,
            sink: Callable[[dict], None] | None) -> None:
    per_task = {}
    for task_id, pop in state.populations.items():
        hv = population_hypervolume(pop, state.bounds[task_id], state.trend.reference)
        state.trend.append(task_id, state.generation, hv)
        per_task[str(task_id)] = hv
    record = {
        "gen": state.generation,
        "per_task_hv": per_task,
        "evals": evals,
        "transfer_events": transfers,
        "elapsed_ms": round((time.perf_counter() - started) * 1000.0, 3),
    }
    state.audit.append(record)
    if sink is not None:
        sink(record)


def init(config: EngineConfig, jat: ReferenceNet, tasks: Sequence[Task], grouping: GroupingMap,
         sink: Callable[[dict], None] | None = None) -> EngineState:
    if grouping.arch != jat.arch:
        raise EngineError("grouping was built for a different architecture than the JAT")
    started = time.perf_counter()
    task_map = _task_map(tasks, config)
    rng = np.random.default_rng(config.seed)
    state = EngineState(grouping=grouping, populations={}, rng=rng, bounds={}, trend=HypervolumeTrend())
    lo, hi = config.init_density
    for task_id, task in task_map.items():
        pop = []
        for _ in range(config.population_size):
            density = rng.uniform(lo, hi)
            mask = genome.repair(genome.random_mask(grouping, density, rng), config.min_active_fraction)
            pop.append(_new_individual(state, mask, task, jat))
        assign_rank_and_crowding(pop)
        state.populations[task_id] = pop
        worst = max(ind.phi2 for ind in pop)
        state.bounds[task_id] = NormalizationBounds((0.0, 1.0), (0.0, max(worst, 1e-12)))
    _record(state, state.evaluations, 0, started, sink)
    return state


def _tournament_winner(a: Individual, b: Individual) -> Individual:
    # exact ties go to the first contestant drawn, which keeps selection
    # uniform over equally ranked and equally crowded individuals
    if (b.rank, -b.crowding) < (a.rank, -a.crowding):
        return b
    return a


def select_parents(population: list[Individual], rng: np.random.Generator) -> list[Individual]:
    """``len(population)`` binary tournaments drawn with replacement."""
    n = len(population)
    picks = rng.integers(0, n, size=(n, 2))
    return [_tournament_winner(population[i], population[j]) for i, j in picks]


def generation_step(state: EngineState, config: EngineConfig, jat: ReferenceNet, tasks: Sequence[Task],
                    sink: Callable[[dict], None] | None = None) -> EngineState:
    started = time.perf_counter()
    task_map = _task_map(tasks, config)
    rng = state.rng
    rate = _mutation_rate(config, state.grouping)
    frac = config.min_active_fraction
    p = config.effective_transfer()
    task_ids = sorted(task_map)
    task_pos = {t: k for k, t in enumerate(task_ids)}
    gen = state.generation + 1
    evals_before = state.evaluations
    transfers = 0

    pools = {t: select_parents(state.populations[t], rng) for t in task_ids}
    pooled = [ind for t in task_ids for ind in pools[t]]
    offspring: dict[int, list[Individual]] = {t: [] for t in task_ids}

    def breed(x: Individual, y: Individual) -> tuple[GroupedMask, GroupedMask]:
        c1, c2 = genome.crossover(x.mask, y.mask, rng)
        return genome.mutate(c1, rate, rng, frac), genome.mutate(c2, rate, rng, frac)

    state.generation = gen
    for _ in range(config.population_size * config.n_tasks // 2):
        i, j = rng.choice(len(pooled), size=2, replace=False)
        a, b = pooled[i], pooled[j]
        k, l = a.task_id, b.task_id
        draw = rng.random()
        if k == l:
            m1, m2 = breed(a, b)
            for m in (m1, m2):
                offspring[k].append(_new_individual(state, m, task_map[k], jat, (a.id, b.id)))
        elif draw < p[task_pos[k], task_pos[l]]:
            m1, m2 = breed(a, b)
            if rng.random() < 0.5:
                m1, m2 = m2, m1
            offspring[k].append(_new_individual(state, m1, task_map[k], jat, (a.id, b.id), transfer=True))
            offspring[l].append(_new_individual(state, m2, task_map[l], jat, (a.id, b.id), transfer=True))
            transfers += 1
        else:
            a2 = pools[k][rng.integers(len(pools[k]))]
            b2 = pools[l][rng.integers(len(pools[l]))]
            ma = breed(a, a2)[0]
            mb = breed(b, b2)[0]
            offspring[k].append(_new_individual(state, ma, task_map[k], jat, (a.id, a2.id)))
            offspring[l].append(_new_individual(state, mb, task_map[l], jat, (b.id, b2.id)))

    for t in task_ids:
        union = state.populations[t] + offspring[t]
        objs = np.array([ind.objectives for ind in union])
        keep = environmental_select(objs, config.population_size, ids=[ind.id for ind in union])
        survivors = [union[q] for q in keep]
        assign_rank_and_crowding(survivors)
        state.populations[t] = survivors
    state.offspring = offspring
    state.transfer_events += transfers
    _record(state, state.evaluations - evals_before, transfers, started, sink)
    return state


def run(config: EngineConfig, jat: ReferenceNet, tasks: Sequence[Task], grouping: GroupingMap | None = None,
        sink: Callable[[dict], None] | None = None) -> RunResult:
    """Initialise and evolve for ``config.generations`` generations.

    ``sink`` receives each audit record as soon as its generation finishes,
    so a crash still leaves the completed generations on disk.
    """
    if grouping is None:
        grouping = genome.build_grouping(jat.arch)
    state = init(config, jat, tasks, grouping, sink)
    for _ in range(config.generations):
        generation_step(state, config, jat, tasks, sink)
        log.debug("gen %d: %s", state.generation, state.audit[-1]["per_task_hv"])
    return RunResult(state.populations, state.trend, state.audit, state.bounds, grouping)


def dump_populations(populations: dict[int, list[Individual]], path) -> None:
    payload = {str(t): [ind.to_dict() for ind in pop] for t, pop in sorted(populations.items())}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_populations(path, grouping: GroupingMap) -> dict[int, list[Individual]]:
    with open(path) as fh:
        payload = json.load(fh)
    return {int(t): [Individual.from_dict(d, grouping) for d in pop] for t, pop in payload.items()}


class JsonlSink:
    """Append-and-flush JSON-lines writer for audit records."""

    def __init__(self, path):
        self._fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
