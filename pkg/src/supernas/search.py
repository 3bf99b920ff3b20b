"""Constrained evolutionary architecture search plus a random baseline.

The searcher never touches supernet weights: candidate fitness comes from
inference with inherited weights after a per-candidate batch-norm
recalibration, or from an injected oracle function in tests.  Every
architecture that enters the log satisfied every hard constraint before
being evaluated; constraint handling is generate-and-filter with explicit
retry caps, never penalty terms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cost import ConstraintSpec, LatencyTable, metric_value, satisfies_constraint
from .data import Dataset
from .engine.tensor import Tensor
from .errors import ArchiveDegenerateError, ConfigError, ConstraintInfeasibleError
from .sampler import sample_uniform
from .space.blocks import ForwardContext
from .space.spec import Architecture, SupernetSpec, encode_architecture
from .space.supernet import Supernet
from .training import evaluate_accuracy

STRATEGIES = ("evolution", "random")

FitnessFn = Callable[[Architecture], float]


@dataclass(frozen=True)
class SearchConfig:
    """Evolution hyperparameters; defaults follow the standard recipe
    (population 50, 20 iterations, top-10 archive, half crossover half
    mutation, per-gene mutation probability 0.1)."""

    population: int = 50
    iterations: int = 20
    archive_size: int = 10
    crossover_count: Optional[int] = None
    mutation_count: Optional[int] = None
    mutation_prob: float = 0.1
    constraints: tuple[ConstraintSpec, ...] = ()
    recalibration_samples: int = 20000
    seed: int = 0
    strategy: str = "evolution"
    child_retry_cap: int = 100
    init_retry_factor: int = 10

    def __post_init__(self):
        if self.population < 1:
            raise ConfigError(f"population must be >= 1, got {self.population}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.crossover_count is None:
            object.__setattr__(self, "crossover_count", self.population // 2)
        if self.mutation_count is None:
            object.__setattr__(self, "mutation_count",
                               self.population - self.crossover_count)
        if self.crossover_count < 0 or self.mutation_count < 0:
            raise ConfigError("crossover/mutation counts must be >= 0")
        if self.crossover_count + self.mutation_count != self.population:
            raise ConfigError(
                f"crossover {self.crossover_count} + mutation "
                f"{self.mutation_count} must equal population {self.population}")
        if not 1 <= self.archive_size <= self.population:
            raise ConfigError(
                f"archive size must be in [1, {self.population}], "
                f"got {self.archive_size}")
        if not 0 <= self.mutation_prob <= 1:
            raise ConfigError(
                f"mutation prob must be in [0, 1], got {self.mutation_prob}")
        if self.recalibration_samples < 1:
            raise ConfigError("recalibration sample count must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown search strategy {self.strategy!r}; "
                              f"choose from {STRATEGIES}")
        if self.child_retry_cap < 1 or self.init_retry_factor < 1:
            raise ConfigError("retry caps must be >= 1")
        object.__setattr__(self, "constraints", tuple(self.constraints))


@dataclass
class Candidate:
    """One evaluated architecture: fitness, costs, and how it was made."""

    arch: Architecture
    fitness: float
    metrics: dict[str, float]
    provenance: str
    iteration: int
    order: int  # position in the evaluation log; breaks fitness ties


@dataclass
class SearchResult:
    best: Candidate
    archive: list[Candidate]
    log: list[Candidate]
    curve: list[tuple[int, float, float]]  # (iteration, best so far, mean)
    budget: int


# ---------------------------------------------------------------------------
# population operators


def init_population(spec: SupernetSpec, constraints: tuple[ConstraintSpec, ...],
                    count: int, rng: np.random.Generator,
                    table: Optional[LatencyTable] = None,
                    retry_factor: int = 10) -> list[Architecture]:
    """Uniform rejection sampling of ``count`` distinct feasible archs."""
    found: list[Architecture] = []
    seen: set[Architecture] = set()
    budget = retry_factor * max(count, 1)
    for _ in range(budget):
        arch = sample_uniform(spec, rng)
        if arch in seen:
            continue
        if satisfies_constraint(arch, spec, list(constraints), table):
            seen.add(arch)
            found.append(arch)
            if len(found) == count:
                return found
    raise ConstraintInfeasibleError(
        f"only {len(found)} of {count} feasible distinct architectures "
        f"found in {budget} draws")


def _filtered_children(make: Callable[[], Architecture], count: int,
                       spec: SupernetSpec,
                       constraints: tuple[ConstraintSpec, ...],
                       table: Optional[LatencyTable],
                       taboo: set[Architecture],
                       retry_cap: int, what: str) -> list[Architecture]:
    children: list[Architecture] = []
    for _ in range(count):
        for _try in range(retry_cap):
            child = make()
            if child in taboo:
                continue
            if satisfies_constraint(child, spec, list(constraints), table):
                children.append(child)
                taboo.add(child)
                break
        else:
            raise ArchiveDegenerateError(
                f"{what} produced no feasible new child in {retry_cap} tries")
    return children


def crossover(archive: list[Architecture], count: int,
              spec: SupernetSpec, constraints: tuple[ConstraintSpec, ...],
              rng: np.random.Generator,
              table: Optional[LatencyTable] = None,
              taboo: Optional[set[Architecture]] = None,
              retry_cap: int = 100) -> list[Architecture]:
    """Per-gene uniform crossover of two archive parents per child."""
    if not archive:
        raise ArchiveDegenerateError("crossover needs a nonempty archive")

    def make() -> Architecture:
        pa = archive[int(rng.integers(len(archive)))]
        pb = archive[int(rng.integers(len(archive)))]
        coins = rng.integers(0, 2, size=len(pa))
        return tuple(pa[i] if coins[i] else pb[i] for i in range(len(pa)))

    return _filtered_children(make, count, spec, constraints, table,
                              taboo if taboo is not None else set(),
                              retry_cap, "crossover")


def mutate(archive: list[Architecture], count: int, prob: float,
           spec: SupernetSpec, constraints: tuple[ConstraintSpec, ...],
           rng: np.random.Generator,
           table: Optional[LatencyTable] = None,
           taboo: Optional[set[Architecture]] = None,
           retry_cap: int = 100) -> list[Architecture]:
    """Copy an archive member, resampling each gene with probability
    ``prob`` uniformly over its candidates (the current value included)."""
    if not archive:
        raise ArchiveDegenerateError("mutation needs a nonempty archive")

    def make() -> Architecture:
        parent = archive[int(rng.integers(len(archive)))]
        genes = []
        for gene, blk in zip(parent, spec.blocks):
            sizes = blk.gene_sizes
            if rng.random() < prob:
                genes.append(tuple(int(rng.integers(s)) for s in sizes))
            else:
                genes.append(gene)
        return tuple(genes)

    return _filtered_children(make, count, spec, constraints, table,
                              taboo if taboo is not None else set(),
                              retry_cap, "mutation")


def update_topk(archive: list[Candidate], batch: list[Candidate],
                k: int) -> list[Candidate]:
    """k highest-fitness distinct architectures; earlier discovery wins ties
    and deduplication keeps the first evaluation of an architecture."""
    best: dict[Architecture, Candidate] = {}
    for cand in sorted(archive + batch, key=lambda c: c.order):
        if cand.arch not in best:
            best[cand.arch] = cand
    ranked = sorted(best.values(), key=lambda c: (-c.fitness, c.order))
    return ranked[:k]


# ---------------------------------------------------------------------------
# fitness sources


def recalibrate_bn(net: Supernet, arch: Architecture,
                   images: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Exact per-channel statistics of every active BN site over a
    calibration set, returned as a private copy; the supernet's own running
    statistics are not touched.

    The whole set goes through one calibration-mode forward, so each site's
    statistics are consistent with the normalized activations every later
    site saw; re-running the set in eval mode with these statistics gives
    normalized mean 0 and variance 1 at every site.
    """
    if images.shape[0] < 2:
        raise ConfigError("calibration set needs at least 2 images")
    ctx = ForwardContext(mode="calibrate")
    net.forward(Tensor(images), arch, ctx=ctx)
    return dict(ctx.collected)


def make_supernet_fitness(net: Supernet, val_ds: Dataset,
                          calib_images: np.ndarray) -> FitnessFn:
    """Inherited-weights fitness: recalibrate BN for the path, then top-1
    accuracy on the validation split."""

    def fitness(arch: Architecture) -> float:
        stats = recalibrate_bn(net, arch, calib_images)
        return evaluate_accuracy(net, arch, val_ds, bn_stats=stats)

    return fitness


# ---------------------------------------------------------------------------
# search strategies


def _candidate_metrics(arch: Architecture, spec: SupernetSpec,
                       cfg: SearchConfig,
                       table: Optional[LatencyTable]) -> dict[str, float]:
    names = {"macs", "params"} | {c.metric for c in cfg.constraints}
    if all(blk.quantized for blk in spec.blocks):
        names.add("bitops")
    if table is not None:
        names.add("latency_ms")
    return {m: metric_value(arch, spec, m, table) for m in sorted(names)}


def run_search(spec: SupernetSpec, cfg: SearchConfig, fitness: FitnessFn,
               table: Optional[LatencyTable] = None,
               progress: Optional[Callable[[int, float], None]] = None
               ) -> SearchResult:
    """Run the configured strategy at a total budget of population x
    iterations evaluations and return the archive's best entry.

    Previously seen architectures are re-logged from a cache instead of
    re-running the fitness function; the log still carries one record per
    budgeted evaluation.
    """
    rng = np.random.default_rng(cfg.seed)
    log: list[Candidate] = []
    archive: list[Candidate] = []
    curve: list[tuple[int, float, float]] = []
    cache: dict[Architecture, float] = {}
    best_so_far = float("-inf")

    def evaluate(arch: Architecture, provenance: str,
                 iteration: int) -> Candidate:
        if arch in cache:
            fit = cache[arch]
        else:
            fit = float(fitness(arch))
            cache[arch] = fit
        cand = Candidate(arch=arch, fitness=fit,
                         metrics=_candidate_metrics(arch, spec, cfg, table),
                         provenance=provenance, iteration=iteration,
                         order=len(log))
        log.append(cand)
        return cand

    if cfg.strategy == "evolution":
        pop = init_population(spec, cfg.constraints, cfg.population, rng,
                              table=table, retry_factor=cfg.init_retry_factor)
        provs = ["init"] * len(pop)
        for it in range(cfg.iterations):
            batch = [evaluate(a, p, it) for a, p in zip(pop, provs)]
            archive = update_topk(archive, batch, cfg.archive_size)
            best_so_far = max(best_so_far, max(c.fitness for c in batch))
            curve.append((it, best_so_far,
                          float(np.mean([c.fitness for c in batch]))))
            if progress is not None:
                progress(it, best_so_far)
            if it + 1 < cfg.iterations:
                parents = [c.arch for c in archive]
                taboo: set[Architecture] = set()
                try:
                    crossed = crossover(parents, cfg.crossover_count, spec,
                                        cfg.constraints, rng, table=table,
                                        taboo=taboo,
                                        retry_cap=cfg.child_retry_cap)
                except ArchiveDegenerateError:
                    # a converged archive cannot fill the crossover half
                    # with distinct children; mutation takes over
                    crossed = []
                mutated = mutate(parents, cfg.population - len(crossed),
                                 cfg.mutation_prob, spec, cfg.constraints,
                                 rng, table=table, taboo=taboo,
                                 retry_cap=cfg.child_retry_cap)
                pop = crossed + mutated
                provs = ["crossover"] * len(crossed) \
                    + ["mutation"] * len(mutated)
    else:
        # random baseline at the same total budget, constraint-filtered
        for it in range(cfg.iterations):
            batch = []
            for _ in range(cfg.population):
                for _try in range(cfg.child_retry_cap):
                    arch = sample_uniform(spec, rng)
                    if satisfies_constraint(arch, spec,
                                            list(cfg.constraints), table):
                        break
                else:
                    raise ConstraintInfeasibleError(
                        f"no feasible uniform sample in "
                        f"{cfg.child_retry_cap} draws")
                batch.append(evaluate(arch, "random", it))
            archive = update_topk(archive, batch, cfg.archive_size)
            best_so_far = max(best_so_far, max(c.fitness for c in batch))
            curve.append((it, best_so_far,
                          float(np.mean([c.fitness for c in batch]))))
            if progress is not None:
                progress(it, best_so_far)

    return SearchResult(best=archive[0], archive=archive, log=log,
                        curve=curve, budget=len(log))


# ---------------------------------------------------------------------------
# log emission


def write_search_log(path, log: list[Candidate]) -> None:
    """JSON lines, one record per evaluation."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in log:
            fh.write(json.dumps({
                "iteration": c.iteration,
                "arch": encode_architecture(c.arch),
                "fitness": c.fitness,
                "metrics": c.metrics,
                "provenance": c.provenance,
            }, sort_keys=True))
            fh.write("\n")


def write_curve(path, curve: list[tuple[int, float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "best", "mean"])
        for it, best, mean in curve:
            w.writerow([it, f"{best:.6f}", f"{mean:.6f}"])
