import json

import numpy as np
import pytest
from scipy.stats import chisquare

from setofsets import evolver, genome
from setofsets.evolver import EngineConfig, EngineError, Individual
from setofsets.network import Architecture


@pytest.fixture(scope="module")
def coarse(small_jat):
    # few enough size levels that crowding truncation can never drop a
    # front-0 point carrying unique hypervolume
    return genome.build_grouping(small_jat.arch, "chunks", 4)


def small_config(**kw):
    base = dict(population_size=20, generations=10, seed=1)
    base.update(kw)
    return EngineConfig(**base)


def test_config_validation():
    for bad in (dict(population_size=7), dict(population_size=2), dict(generations=0),
                dict(transfer=((0.0, 0.2), (0.4, 0.0))), dict(transfer=1.5), dict(mode="islands")):
        with pytest.raises(EngineError):
            EngineConfig(**bad)
    p = EngineConfig(transfer=0.3).transfer_matrix()
    assert p.tolist() == [[0.0, 0.3], [0.3, 0.0]]
    assert not EngineConfig(mode="singletask").effective_transfer().any()
    cfg = small_config(transfer=((0.0, 0.5), (0.5, 0.0)))
    assert EngineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_init_population_contract(small_suite, small_jat, small_grouping):
    tasks, _ = small_suite
    state = evolver.init(small_config(), small_jat, tasks, small_grouping)
    assert state.evaluations == 40
    assert [len(state.trend.values(t)) for t in (1, 2)] == [1, 1]
    dens = []
    for t, pop in state.populations.items():
        assert len(pop) == 20 and all(ind.task_id == t for ind in pop)
        for ind in pop:
            assert genome.is_feasible(ind.mask, 0.125)
            assert ind.phi1 == genome.size_objective(ind.mask)
            dens.append(ind.phi1)
    assert min(dens) > 0.05 and max(dens) <= 1.0
    again = evolver.init(small_config(), small_jat, tasks, small_grouping)
    for t in state.populations:
        assert [i.objectives for i in state.populations[t]] == [i.objectives for i in again.populations[t]]


def test_init_rejects_foreign_grouping(small_suite, small_jat):
    tasks, _ = small_suite
    other = genome.build_grouping(Architecture((16, 5, 10)))
    with pytest.raises(EngineError):
        evolver.init(small_config(), small_jat, tasks, other)
    with pytest.raises(EngineError):
        evolver.init(small_config(n_tasks=3), small_jat, tasks, genome.build_grouping(small_jat.arch))


def fake_population(n, ranks, crowding):
    g = genome.build_grouping(Architecture((2, 2, 2)))
    ones = genome.GroupedMask.ones(g)
    return [Individual(id=i, task_id=1, mask=ones, phi1=1.0, phi2=1.0, rank=ranks[i], crowding=crowding[i])
            for i in range(n)]


def test_dominator_wins_its_tournaments():
    pop = fake_population(20, [0] + [1] * 19, [np.inf] + [0.5] * 19)
    rng = np.random.default_rng(0)
    counts = np.zeros(20)
    wins = played = 0
    for _ in range(500):
        chosen = evolver.select_parents(pop, rng)
        assert len(chosen) == 20
        for ind in chosen:
            counts[ind.id] += 1
    for _ in range(10_000):
        i, j = rng.integers(0, 20, 2)
        if 0 in (i, j):
            played += 1
            wins += evolver._tournament_winner(pop[i], pop[j]).id == 0
    assert wins / played > 0.5
    assert counts[0] > counts[1:].max()


def test_selection_uniform_when_tied():
    pop = fake_population(20, [0] * 20, [1.0] * 20)
    rng = np.random.default_rng(1)
    counts = np.zeros(20)
    for _ in range(500):
        for ind in evolver.select_parents(pop, rng):
            counts[ind.id] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 1 / 20) < 0.03)
    assert chisquare(counts).pvalue > 1e-3


def test_step_keeps_sizes_and_hypervolume(small_suite, small_jat, coarse):
    tasks, _ = small_suite
    cfg = small_config(seed=4)
    state = evolver.init(cfg, small_jat, tasks, coarse)
    for gen in range(1, 8):
        before = {t: state.trend.values(t)[-1] for t in (1, 2)}
        evolver.generation_step(state, cfg, small_jat, tasks)
        assert state.generation == gen
        for t in (1, 2):
            assert len(state.populations[t]) == 20
            assert state.trend.values(t)[-1] >= before[t]
            assert len(state.trend.values(t)) == gen + 1
        for kids in state.offspring.values():
            for ind in kids:
                assert genome.is_feasible(ind.mask, cfg.min_active_fraction)
                assert ind.generation == gen


def test_single_generation_trend_length(small_suite, small_jat, small_grouping):
    tasks, _ = small_suite
    res = evolver.run(small_config(generations=1), small_jat, tasks, small_grouping)
    assert [len(res.trend.values(t)) for t in (1, 2)] == [2, 2]


@pytest.mark.parametrize("mode", ["multitask", "singletask"])
def test_evaluation_budget(small_suite, small_jat, small_grouping, mode):
    tasks, _ = small_suite
    res = evolver.run(small_config(mode=mode), small_jat, tasks, small_grouping)
    assert res.total_evaluations == 440
    assert [r["evals"] for r in res.audit] == [40] * 11
    assert [r["gen"] for r in res.audit] == list(range(11))


def test_singletask_never_transfers(small_suite, small_jat, small_grouping):
    tasks, _ = small_suite
    cfg = small_config(mode="singletask", transfer=1.0)
    state = evolver.init(cfg, small_jat, tasks, small_grouping)
    for _ in range(5):
        evolver.generation_step(state, cfg, small_jat, tasks)
        for t, kids in state.offspring.items():
            assert not any(k.transfer for k in kids)
            assert all(k.task_id == t for k in kids)
    assert state.transfer_events == 0


def test_transfer_rate_follows_matrix(small_suite, small_jat, small_grouping):
    tasks, _ = small_suite
    cfg = small_config(transfer=1.0, generations=5)
    res = evolver.run(cfg, small_jat, tasks, small_grouping)
    # a mixed pair comes up with probability 20*20*2 / (40*39) per iteration
    expected = 5 * 20 * (800 / 1560)
    assert abs(res.total_transfer_events - expected) < 4 * np.sqrt(expected)
    state = evolver.init(cfg, small_jat, tasks, small_grouping)
    evolver.generation_step(state, cfg, small_jat, tasks)
    flagged = [k for kids in state.offspring.values() for k in kids if k.transfer]
    assert len(flagged) == 2 * state.transfer_events
    parents = evolver.init(cfg, small_jat, tasks, small_grouping).populations
    ids = {i.id: i.task_id for pop in parents.values() for i in pop}
    for k in flagged:
        assert {ids[p] for p in k.parents} == {1, 2}


def test_run_is_deterministic(small_suite, small_jat, small_grouping, tmp_path):
    tasks, _ = small_suite
    a = evolver.run(small_config(seed=9), small_jat, tasks, small_grouping)
    b = evolver.run(small_config(seed=9), small_jat, tasks, small_grouping)
    assert a.trend.series == b.trend.series
    for t in (1, 2):
        assert [i.mask.to_hex() for i in a.populations[t]] == [i.mask.to_hex() for i in b.populations[t]]
    a.trend.write_csv(tmp_path / "a.csv")
    b.trend.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c = evolver.run(small_config(seed=10), small_jat, tasks, small_grouping)
    assert c.trend.series != a.trend.series


def test_population_dump_round_trip(small_suite, small_jat, small_grouping, tmp_path):
    tasks, _ = small_suite
    res = evolver.run(small_config(generations=2), small_jat, tasks, small_grouping)
    evolver.dump_populations(res.populations, tmp_path / "pop.json")
    back = evolver.load_populations(tmp_path / "pop.json", small_grouping)
    for t in (1, 2):
        for x, y in zip(res.populations[t], back[t]):
            assert x.to_dict() == y.to_dict() and x.mask == y.mask


def test_audit_sink_streams_every_generation(small_suite, small_jat, small_grouping, tmp_path):
    tasks, _ = small_suite
    with evolver.JsonlSink(tmp_path / "audit.jsonl") as sink:
        evolver.run(small_config(generations=3), small_jat, tasks, small_grouping, sink)
    rows = [json.loads(line) for line in (tmp_path / "audit.jsonl").read_text().splitlines()]
    assert [r["gen"] for r in rows] == [0, 1, 2, 3]
    assert set(rows[0]) == {"gen", "per_task_hv", "evals", "transfer_events", "elapsed_ms"}
    assert set(rows[1]["per_task_hv"]) == {"1", "2"}
