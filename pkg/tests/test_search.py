"""Evolutionary search: operators, archive, logging, determinism."""

import json

import numpy as np
import pytest

from supernas.cost import ConstraintSpec, count_macs
from supernas.errors import (ArchiveDegenerateError, ConfigError,
                             ConstraintInfeasibleError)
from supernas.search import (Candidate, SearchConfig, crossover,
                             init_population, mutate, run_search,
                             update_topk, write_curve, write_search_log)
from supernas.space.spec import validate_architecture

from conftest import toy_space


def _gene_sum(arch):
    return float(sum(sum(g) for g in arch))


def test_init_population_distinct_and_feasible():
    spec = toy_space(3)
    rng = np.random.default_rng(0)
    bound = ConstraintSpec("macs", 1.05e6)
    pop = init_population(spec, (bound,), 12, rng)
    assert len(pop) == len(set(pop)) == 12
    for arch in pop:
        validate_architecture(spec, arch)
        assert count_macs(arch, spec) <= 1.05e6
    with pytest.raises(ConstraintInfeasibleError):
        init_population(spec, (ConstraintSpec("macs", 1.0),), 4, rng)


def test_crossover_mixes_parent_genes():
    spec = toy_space(4)
    rng = np.random.default_rng(1)
    pa = ((0, 0, 0),) * 4
    pb = ((3, 0, 0),) * 4
    kids = crossover([pa, pb], 10, spec, (), rng)
    assert len(kids) == len(set(kids)) == 10
    for kid in kids:
        assert all(g in ((0, 0, 0), (3, 0, 0)) for g in kid)


def test_crossover_degenerate_archive():
    spec = toy_space(3)
    rng = np.random.default_rng(2)
    with pytest.raises(ArchiveDegenerateError):
        crossover([], 2, spec, (), rng)
    parent = ((1, 0, 0),) * 3
    # a single parent can only reproduce itself, and itself is taboo
    with pytest.raises(ArchiveDegenerateError):
        crossover([parent], 1, spec, (), rng, taboo={parent}, retry_cap=20)


def test_mutate_respects_probability_and_constraints():
    spec = toy_space(3)
    rng = np.random.default_rng(3)
    parent = ((2, 0, 0),) * 3
    with pytest.raises(ArchiveDegenerateError):
        mutate([parent], 1, 0.0, spec, (), rng, taboo={parent}, retry_cap=20)
    bound = ConstraintSpec("macs", 1.05e6)
    kids = mutate([parent], 8, 1.0, spec, (bound,), rng)
    for kid in kids:
        validate_architecture(spec, kid)
        assert count_macs(kid, spec) <= 1.05e6


def _cand(arch, fitness, order):
    return Candidate(arch=arch, fitness=fitness, metrics={},
                     provenance="t", iteration=0, order=order)


def test_update_topk_dedupe_and_ties():
    a = ((0, 0, 0),)
    b = ((1, 0, 0),)
    c = ((2, 0, 0),)
    # same arch seen twice: the first evaluation is the one that counts
    batch = [_cand(a, 0.5, 0), _cand(b, 0.9, 1), _cand(a, 0.8, 2),
             _cand(c, 0.9, 3)]
    top = update_topk([], batch, 3)
    assert [x.arch for x in top] == [b, c, a]
    assert top[2].fitness == 0.5
    top2 = update_topk(top, [_cand(((3, 0, 0),), 0.7, 4)], 2)
    assert [x.fitness for x in top2] == [0.9, 0.9]


def test_run_search_budget_log_and_cache():
    spec = toy_space(3)
    calls = []

    def fitness(arch):
        calls.append(arch)
        return _gene_sum(arch)

    cfg = SearchConfig(population=8, iterations=5, archive_size=4, seed=4)
    res = run_search(spec, cfg, fitness)
    assert res.budget == len(res.log) == 40
    assert len(res.curve) == 5
    assert res.best.fitness == max(c.fitness for c in res.log)
    assert res.best is res.archive[0]
    fits = [c.fitness for c in res.archive]
    assert fits == sorted(fits, reverse=True)
    # repeated architectures are re-logged from the cache, not re-evaluated
    assert len(calls) == len({c.arch for c in res.log})
    curve_best = [b for _, b, _ in res.curve]
    assert curve_best == sorted(curve_best)
    assert all(c.provenance == "init" for c in res.log[:8])
    assert all(c.provenance in ("crossover", "mutation")
               for c in res.log[8:])


def test_run_search_random_strategy():
    spec = toy_space(3)
    bound = ConstraintSpec("macs", 1.05e6)
    cfg = SearchConfig(population=6, iterations=4, archive_size=3, seed=5,
                       strategy="random", constraints=(bound,))
    res = run_search(spec, cfg, _gene_sum)
    assert res.budget == 24
    assert all(c.provenance == "random" for c in res.log)
    assert all(c.metrics["macs"] <= 1.05e6 for c in res.log)


def test_run_search_evolution_respects_constraints():
    spec = toy_space(3)
    bound = ConstraintSpec("macs", 1.02e6)
    cfg = SearchConfig(population=10, iterations=6, archive_size=4, seed=6,
                       constraints=(bound,))
    res = run_search(spec, cfg, _gene_sum)
    assert res.budget == 60
    assert all(count_macs(c.arch, spec) <= 1.02e6 for c in res.log)


def test_run_search_seed_determinism():
    spec = toy_space(3)
    cfg = SearchConfig(population=8, iterations=4, seed=7, archive_size=4)
    r1 = run_search(spec, cfg, _gene_sum)
    r2 = run_search(spec, cfg, _gene_sum)
    assert [(c.arch, c.fitness) for c in r1.log] \
        == [(c.arch, c.fitness) for c in r2.log]
    r3 = run_search(spec, SearchConfig(population=8, iterations=4, seed=8,
                                       archive_size=4), _gene_sum)
    assert [c.arch for c in r3.log] != [c.arch for c in r1.log]


def test_log_and_curve_files(tmp_path):
    spec = toy_space(3)
    cfg = SearchConfig(population=5, iterations=3, archive_size=2, seed=9)
    res = run_search(spec, cfg, _gene_sum)
    log_path = tmp_path / "log.jsonl"
    write_search_log(log_path, res.log)
    lines = log_path.read_text().splitlines()
    assert len(lines) == 15
    rec = json.loads(lines[0])
    assert set(rec) == {"iteration", "arch", "fitness", "metrics",
                        "provenance"}
    assert rec["arch"].count("-") == 2
    curve_path = tmp_path / "curve.csv"
    write_curve(curve_path, res.curve)
    rows = curve_path.read_text().splitlines()
    assert rows[0] == "iteration,best,mean"
    assert len(rows) == 4
    assert rows[1].split(",")[0] == "0"


def test_search_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(population=0)
    with pytest.raises(ConfigError):
        SearchConfig(iterations=0)
    with pytest.raises(ConfigError):
        SearchConfig(population=4, archive_size=5)
    with pytest.raises(ConfigError):
        SearchConfig(population=4, crossover_count=3, mutation_count=3)
    with pytest.raises(ConfigError):
        SearchConfig(mutation_prob=1.5)
    with pytest.raises(ConfigError):
        SearchConfig(strategy="annealing")
    with pytest.raises(ConfigError):
        SearchConfig(recalibration_samples=0)
