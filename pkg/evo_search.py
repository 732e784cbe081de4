"""Multi-objective search over cascade genomes.

Provides:
- SearchConfig and SearchResult
- ElitistArchive: the persistent nondominated store every evaluation is offered to
- FitnessFunction: genome vector -> FrontEntry, counting evaluations against the budget
- Backends: MO-GOMEA (linkage-tree gene-pool optimal mixing), uniform random search, exhaustive enumeration
"""

import bisect
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform

from cascade_eval import (
    CONFIDENCE_MODES, GENOME_MODES, CascadeEvaluator, CascadeGenome, DecodedCascade, GenomeSpace,
    Stage, ThresholdGrid, decode,
)
from config import Config
from pareto_tools import (
    FrontEntry, HypervolumeConfig, dominates, hypervolume, hypervolume_contributions, nondominated_front,
)
from pool_io import ModelPool

logger = logging.getLogger(__name__)

BACKENDS = ('mogomea', 'random', 'exhaustive')


class SearchConfigError(ValueError):
    """Invalid search configuration."""


@dataclass
class SearchConfig:
    backend: str = 'mogomea'
    budget: int = 600000
    k: int = 5
    grid: ThresholdGrid = field(default_factory=ThresholdGrid.default)
    confidence_mode: str = 'max-prob'
    seed: int = 0
    population_size: int = 100
    cluster_count: int = 5
    seed_singletons: bool = True
    mode: str = 'cascade'
    workers: int = 1
    exhaustive_limit: int = 10_000_000
    cache_mb: float = 256.0
    archive_capacity: Optional[int] = None
    hv_config: HypervolumeConfig = field(default_factory=HypervolumeConfig)

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise SearchConfigError(f"Unknown backend '{self.backend}', expected one of {', '.join(BACKENDS)}")
        if self.mode not in GENOME_MODES:
            raise SearchConfigError(f"Unknown mode '{self.mode}', expected one of {', '.join(GENOME_MODES)}")
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise SearchConfigError(f"Unknown confidence mode '{self.confidence_mode}'")
        if self.budget < 1:
            raise SearchConfigError(f"budget must be >= 1, got {self.budget}")
        if self.k < 1:
            raise SearchConfigError(f"k must be >= 1, got {self.k}")
        if not 0 <= self.seed < 2 ** 64:
            raise SearchConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.population_size < 1 or (self.backend == 'mogomea' and self.population_size < 2):
            raise SearchConfigError(f"population_size must be >= 2 for mogomea, got {self.population_size}")
        if self.cluster_count < 1:
            raise SearchConfigError(f"cluster_count must be >= 1, got {self.cluster_count}")
        if self.workers < 1:
            raise SearchConfigError(f"workers must be >= 1, got {self.workers}")
        if self.archive_capacity is not None and self.archive_capacity < 2:
            raise SearchConfigError(f"archive_capacity must be >= 2 when set, got {self.archive_capacity}")

    @classmethod
    def from_config(cls, config: Optional[Config] = None, **overrides) -> 'SearchConfig':
        """Defaults from the environment-backed Config, then explicit overrides."""
        config = config or Config()
        values = dict(
            budget=config.BUDGET,
            k=config.MAX_CASCADE_SIZE,
            confidence_mode=config.CONFIDENCE_MODE,
            population_size=config.POPULATION_SIZE,
            cluster_count=config.CLUSTER_COUNT,
            workers=config.WORKERS,
            exhaustive_limit=config.EXHAUSTIVE_LIMIT,
            cache_mb=config.PREFIX_CACHE_MB,
            hv_config=HypervolumeConfig(ref_mflops=config.HV_REF_MFLOPS, ref_accuracy=config.HV_REF_ACCURACY),
        )
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base: Optional['SearchConfig'] = None) -> 'SearchConfig':
        """Overlay a JSON-style dict (as written by to_dict) on ``base``."""
        values = asdict(base) if base is not None else {}
        values['grid'] = base.grid if base is not None else ThresholdGrid.default()
        values['hv_config'] = base.hv_config if base is not None else HypervolumeConfig()
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise SearchConfigError(f"Unknown search config keys: {', '.join(sorted(unknown))}")
        for key, value in data.items():
            if key == 'grid':
                values['grid'] = ThresholdGrid(tuple(value))
            elif key == 'hv_config':
                values['hv_config'] = HypervolumeConfig(**value)
            else:
                values[key] = value
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['grid'] = list(self.grid.values)
        data['hv_config'] = asdict(self.hv_config)
        return data


@dataclass
class SearchResult:
    front: List[FrontEntry]
    evaluations_used: int
    hypervolume_trace: List[float] = field(default_factory=list)
    backend: str = ''

    def run_log(self, cfg: SearchConfig) -> Dict[str, Any]:
        return {
            'seed': cfg.seed,
            'backend': self.backend or cfg.backend,
            'config': cfg.to_dict(),
            'evaluations_used': self.evaluations_used,
            'front_size': len(self.front),
            'hypervolume_trace': list(self.hypervolume_trace),
        }


# -----------------------------------------------------------------------------
# Elitist archive
# -----------------------------------------------------------------------------
class ElitistArchive:
    """Nondominated entries kept sorted by MFLOPs (so accuracy is strictly increasing).

    With ``capacity`` set, overflow drops the interior entry with the smallest exclusive hypervolume.
    """

    def __init__(self, capacity: Optional[int] = None, hv_config: Optional[HypervolumeConfig] = None,
                 debug_checks: bool = False):
        self.capacity = capacity
        self.hv_config = hv_config or HypervolumeConfig()
        self.debug_checks = debug_checks
        self._mflops: List[float] = []
        self._accuracy: List[float] = []
        self._entries: List[FrontEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[FrontEntry]:
        return iter(list(self._entries))

    @property
    def entries(self) -> List[FrontEntry]:
        return list(self._entries)

    def hypervolume(self) -> float:
        return hypervolume(self._entries, self.hv_config)

    def insert(self, entry: FrontEntry) -> bool:
        """Insert unless dominated by or objective-identical to an archived entry."""
        if entry.is_rejected or not entry.point.is_finite:
            return False
        mflops, accuracy = entry.point.mflops, entry.point.accuracy_pct
        cheaper = bisect.bisect_right(self._mflops, mflops)
        if cheaper > 0 and self._accuracy[cheaper - 1] >= accuracy:
            return False

        start = cheaper - 1 if cheaper > 0 and self._mflops[cheaper - 1] == mflops else cheaper
        end = cheaper
        while end < len(self._entries) and self._accuracy[end] <= accuracy:
            end += 1
        self._mflops[start:end] = [mflops]
        self._accuracy[start:end] = [accuracy]
        self._entries[start:end] = [entry]

        inserted = True
        if self.capacity is not None and len(self._entries) > self.capacity:
            inserted = self._prune() is not entry
        if self.debug_checks:
            self.check_invariants()
        return inserted

    def _prune(self) -> FrontEntry:
        contributions = hypervolume_contributions(self._entries, self.hv_config)
        index = 1 + int(np.argmin(contributions[1:-1]))
        del self._mflops[index]
        del self._accuracy[index]
        return self._entries.pop(index)

    def check_invariants(self) -> None:
        for a, b in zip(self._entries, self._entries[1:]):
            if not (a.point.mflops < b.point.mflops and a.point.accuracy_pct < b.point.accuracy_pct):
                raise AssertionError(f"Archive order/dominance violated between {a.point} and {b.point}")


def archive_insert(archive: ElitistArchive, entry: FrontEntry) -> bool:
    return archive.insert(entry)


# -----------------------------------------------------------------------------
# Fitness
# -----------------------------------------------------------------------------
class FitnessFunction:
    """Genome vector -> FrontEntry. Each call consumes one unit of budget, rejected genomes included."""

    def __init__(self, pool: ModelPool, space: GenomeSpace, budget: int,
                 confidence_mode: str = 'max-prob', cache_mb: float = 0.0):
        self.pool = pool
        self.space = space
        self.budget = budget
        self.evaluator = CascadeEvaluator(pool, confidence_mode, cache_mb)
        self.evaluations_used = 0

    @property
    def remaining(self) -> int:
        return self.budget - self.evaluations_used

    @property
    def exhausted(self) -> bool:
        return self.evaluations_used >= self.budget

    def evaluate_vector(self, vector: Sequence[int]) -> FrontEntry:
        """Evaluate without touching the budget."""
        genome = self.space.to_genome(vector)
        cascade = decode(genome, self.space.grid)
        if cascade.is_empty:
            return FrontEntry.rejected(genome)
        if self.space.mode == 'ensemble':
            metrics = self.evaluator.evaluate_ensemble(cascade.models)
        else:
            metrics = self.evaluator.evaluate(cascade)
        return FrontEntry.from_metrics(genome, metrics)

    def __call__(self, vector: Sequence[int]) -> Optional[FrontEntry]:
        if self.exhausted:
            return None
        self.evaluations_used += 1
        return self.evaluate_vector(vector)

    def evaluate_batch(self, vectors: Sequence[Sequence[int]],
                       executor: Optional[ThreadPoolExecutor] = None) -> List[FrontEntry]:
        """Evaluate as many vectors as the budget allows; results in submission order."""
        vectors = list(vectors)[:max(0, self.remaining)]
        self.evaluations_used += len(vectors)
        if executor is None:
            return [self.evaluate_vector(v) for v in vectors]
        return list(executor.map(self.evaluate_vector, vectors))


def evaluation_rng(seed: int, index: int) -> np.random.Generator:
    """Independent random stream for evaluation ``index`` of a run."""
    return np.random.default_rng([seed, index])


@contextmanager
def _worker_pool(workers: int) -> Iterator[Optional[ThreadPoolExecutor]]:
    if workers <= 1:
        yield None
        return
    with ThreadPoolExecutor(max_workers=workers) as executor:
        yield executor


def _space_for(pool: ModelPool, cfg: SearchConfig) -> GenomeSpace:
    return GenomeSpace(pool.num_models, cfg.k, cfg.grid, cfg.mode)


def _setup(pool: ModelPool, cfg: SearchConfig) -> Tuple[GenomeSpace, FitnessFunction, ElitistArchive]:
    space = _space_for(pool, cfg)
    fitness = FitnessFunction(pool, space, cfg.budget, cfg.confidence_mode, cfg.cache_mb)
    archive = ElitistArchive(cfg.archive_capacity, cfg.hv_config)
    return space, fitness, archive


def single_model_front(pool: ModelPool, confidence_mode: str = 'max-prob', k: int = 1,
                       grid: Optional[ThresholdGrid] = None) -> List[FrontEntry]:
    """Nondominated front of the pool's models used on their own."""
    space = GenomeSpace(pool.num_models, k, grid or ThresholdGrid.default())
    evaluator = CascadeEvaluator(pool, confidence_mode)
    entries = []
    for model in range(1, pool.num_models + 1):
        genome = space.to_genome(space.singleton_vector(model))
        entries.append(FrontEntry.from_metrics(genome, evaluator.evaluate(DecodedCascade((Stage(model),)))))
    return nondominated_front(entries)


# -----------------------------------------------------------------------------
# Random search and exhaustive enumeration
# -----------------------------------------------------------------------------
def random_search_run(pool: ModelPool, cfg: SearchConfig) -> SearchResult:
    """Uniform sampling of ``budget`` genomes, each slot uniform over its categorical range."""
    space, fitness, archive = _setup(pool, cfg)
    trace: List[float] = []
    index = 0
    with _worker_pool(cfg.workers) as executor:
        while not fitness.exhausted:
            count = min(cfg.population_size, fitness.remaining)
            vectors = [space.random_vector(evaluation_rng(cfg.seed, index + i)) for i in range(count)]
            index += count
            for entry in fitness.evaluate_batch(vectors, executor):
                archive.insert(entry)
            trace.append(archive.hypervolume())
    logger.info(f"Random search finished: {fitness.evaluations_used} evaluations, archive of {len(archive)}")
    return SearchResult(nondominated_front(archive.entries), fitness.evaluations_used, trace, 'random')


def exhaustive_run(pool: ModelPool, cfg: SearchConfig) -> SearchResult:
    """Evaluate every genome once; the archive is then the exact front of the search space."""
    space = _space_for(pool, cfg)
    try:
        size = space.size()
    except OverflowError as e:
        raise SearchConfigError(f"Genome space too large for exhaustive search: {e}") from e
    if size > cfg.exhaustive_limit:
        raise SearchConfigError(
            f"Genome space has {size} genomes, over the exhaustive limit of {cfg.exhaustive_limit}"
        )
    if size > cfg.budget:
        raise SearchConfigError(f"Exhaustive search needs a budget of {size}, got {cfg.budget}")

    _, fitness, archive = _setup(pool, cfg)
    trace: List[float] = []
    genomes = space.enumerate()
    with _worker_pool(cfg.workers) as executor:
        while True:
            chunk = list(itertools.islice(genomes, cfg.population_size))
            if not chunk:
                break
            for entry in fitness.evaluate_batch(chunk, executor):
                archive.insert(entry)
            trace.append(archive.hypervolume())
    logger.info(f"Exhaustive search evaluated {fitness.evaluations_used} genomes, front of {len(archive)}")
    return SearchResult(nondominated_front(archive.entries), fitness.evaluations_used, trace, 'exhaustive')


# -----------------------------------------------------------------------------
# MO-GOMEA
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class LinkageModel:
    """Family of subsets of genome positions exchanged as units."""

    subsets: Tuple[Tuple[int, ...], ...]

    def validate(self, num_positions: int) -> None:
        singletons = {s[0] for s in self.subsets if len(s) == 1}
        if singletons != set(range(num_positions)):
            raise ValueError(f"Linkage model must contain every singleton of {num_positions} positions")
        for subset in self.subsets:
            if not subset or any(not 0 <= p < num_positions for p in subset):
                raise ValueError(f"Invalid linkage subset {subset}")


def _as_matrix(population: Sequence[Any]) -> np.ndarray:
    rows = []
    for item in population:
        if isinstance(item, CascadeGenome):
            rows.append(item.model_slots + item.threshold_slots)
        else:
            rows.append(tuple(item))
    return np.array(rows, dtype=np.int64)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def mutual_information_matrix(matrix: np.ndarray) -> np.ndarray:
    """Pairwise normalized mutual information 2 I(X;Y) / (H(X) + H(Y)) between columns."""
    num_positions = matrix.shape[1]
    entropies = [_entropy(np.unique(matrix[:, p], return_counts=True)[1]) for p in range(num_positions)]
    nmi = np.eye(num_positions)
    for i in range(num_positions):
        for j in range(i + 1, num_positions):
            pairs = np.unique(matrix[:, [i, j]], axis=0, return_counts=True)[1]
            total = entropies[i] + entropies[j]
            if total <= 0.0:
                value = 0.0
            else:
                value = 2.0 * (total - _entropy(pairs)) / total
            nmi[i, j] = nmi[j, i] = min(1.0, max(0.0, value))
    return nmi


def learn_linkage_tree(population: Sequence[Any]) -> LinkageModel:
    """UPGMA over genome positions with distance 1 - NMI; FOS = singletons + internal nodes, root excluded."""
    matrix = _as_matrix(population)
    if matrix.shape[0] < 2:
        raise ValueError(f"Linkage learning needs at least 2 genomes, got {matrix.shape[0]}")
    num_positions = matrix.shape[1]
    subsets: List[Tuple[int, ...]] = [(p,) for p in range(num_positions)]
    if num_positions < 3:
        return LinkageModel(tuple(subsets))

    distance = 1.0 - mutual_information_matrix(matrix)
    np.fill_diagonal(distance, 0.0)
    tree = linkage(squareform(distance, checks=False), method='average')
    members: List[Tuple[int, ...]] = list(subsets)
    for left, right, _, _ in tree:
        members.append(tuple(sorted(members[int(left)] + members[int(right)])))
    subsets.extend(members[num_positions:-1])
    return LinkageModel(tuple(subsets))


def gom_step(solution: FrontEntry, donors: Sequence[FrontEntry], fos: LinkageModel,
             archive: ElitistArchive, fitness: FitnessFunction, rng: np.random.Generator) -> FrontEntry:
    """Gene-pool optimal mixing of one solution.

    For each FOS subset (random order) copy the subset from a random donor; evaluate when something
    changed; keep the change if the result is not dominated by the solution before the change or if
    it enters the archive. A change dominated by the original ``solution`` is never kept, so a chain
    of accepted changes cannot drift below the starting point. ``fitness`` is the budget gate.
    """
    space = fitness.space
    current = solution
    current_vector = list(space.to_vector(solution.genome))
    for subset_index in rng.permutation(len(fos.subsets)):
        subset = fos.subsets[subset_index]
        donor = donors[int(rng.integers(len(donors)))]
        donor_vector = space.to_vector(donor.genome)
        if all(current_vector[p] == donor_vector[p] for p in subset):
            continue
        if fitness.exhausted:
            break
        trial_vector = list(current_vector)
        for p in subset:
            trial_vector[p] = donor_vector[p]
        trial = fitness(trial_vector)
        entered = archive.insert(trial)
        if (entered or not dominates(current, trial)) and not dominates(solution, trial):
            current, current_vector = trial, trial_vector
    return current


def cluster_population(population: Sequence[FrontEntry], cluster_count: int,
                       rng: np.random.Generator) -> Tuple[List[List[int]], List[int]]:
    """Leader-based clustering in normalized objective space.

    Leaders are picked farthest-first starting from the best solution on a random objective; each
    cluster holds the 2P/K solutions nearest its leader (clusters may overlap). Every solution is
    assigned to its nearest leader.
    """
    size = len(population)
    coords = np.array([(e.point.mflops, -e.point.accuracy_pct) for e in population], dtype=np.float64)
    finite = np.isfinite(coords).all(axis=1)
    if finite.any():
        worst = coords[finite].max(axis=0) + 1.0
        coords[~finite] = worst
    else:
        coords[:] = 0.0
    span = coords.max(axis=0) - coords.min(axis=0)
    span[span == 0.0] = 1.0
    coords = (coords - coords.min(axis=0)) / span

    count = min(cluster_count, size)
    objective = int(rng.integers(2))
    leaders = [int(np.argmin(coords[:, objective]))]
    nearest = np.linalg.norm(coords - coords[leaders[0]], axis=1)
    while len(leaders) < count:
        candidate = int(np.argmax(nearest))
        leaders.append(candidate)
        nearest = np.minimum(nearest, np.linalg.norm(coords - coords[candidate], axis=1))

    cluster_size = min(size, max(2, math.ceil(2 * size / count)))
    distances = np.stack([np.linalg.norm(coords - coords[leader], axis=1) for leader in leaders])
    clusters = [[int(m) for m in np.argsort(row, kind='stable')[:cluster_size]] for row in distances]
    assignment = [int(a) for a in np.argmin(distances, axis=0)]
    return clusters, assignment


def _initial_population(pool: ModelPool, cfg: SearchConfig, space: GenomeSpace, fitness: FitnessFunction,
                        archive: ElitistArchive, rng: np.random.Generator,
                        executor: Optional[ThreadPoolExecutor]) -> List[FrontEntry]:
    population: List[FrontEntry] = []
    if cfg.seed_singletons:
        singles = fitness.evaluate_batch([space.singleton_vector(m) for m in range(1, pool.num_models + 1)], executor)
        for entry in singles:
            archive.insert(entry)
        on_front = {id(e) for e in nondominated_front(singles)}
        ordered = [e for e in singles if id(e) in on_front] + [e for e in singles if id(e) not in on_front]
        population = ordered[:cfg.population_size]
    missing = cfg.population_size - len(population)
    randoms = fitness.evaluate_batch([space.random_vector(rng) for _ in range(missing)], executor)
    for entry in randoms:
        archive.insert(entry)
    return population + randoms


def mogomea_run(pool: ModelPool, cfg: SearchConfig) -> SearchResult:
    """Generational MO-GOMEA: cluster, learn one linkage tree per cluster, mix every solution."""
    if cfg.budget < cfg.population_size:
        raise SearchConfigError(
            f"Budget {cfg.budget} is smaller than the initial population of {cfg.population_size}"
        )
    # seeding evaluates every single model, then fills the population at random
    initial_cost = max(pool.num_models, cfg.population_size) if cfg.seed_singletons else cfg.population_size
    if cfg.budget < initial_cost:
        raise SearchConfigError(
            f"Budget {cfg.budget} cannot cover the {initial_cost} evaluations of the seeded initial population "
            f"({pool.num_models} single models); raise the budget or pass seed_singletons=False"
        )
    space, fitness, archive = _setup(pool, cfg)
    rng = np.random.default_rng(cfg.seed)
    trace: List[float] = []
    generation = 0

    with _worker_pool(cfg.workers) as executor:
        population = _initial_population(pool, cfg, space, fitness, archive, rng, executor)
        trace.append(archive.hypervolume())

        while not fitness.exhausted:
            used_before = fitness.evaluations_used
            clusters, assignment = cluster_population(population, cfg.cluster_count, rng)
            models = [learn_linkage_tree([space.to_vector(population[i].genome) for i in members])
                      if len(members) >= 2 else LinkageModel(tuple((p,) for p in range(space.num_positions)))
                      for members in clusters]

            offspring: List[FrontEntry] = []
            for index, solution in enumerate(population):
                if fitness.exhausted:
                    offspring.extend(population[index:])
                    break
                cluster = assignment[index]
                donors = [population[j] for j in clusters[cluster] if j != index] or [solution]
                offspring.append(gom_step(solution, donors, models[cluster], archive, fitness, rng))
            population = offspring

            if fitness.evaluations_used == used_before:
                # converged: nothing left to mix, start over from random genomes
                fresh = fitness.evaluate_batch([space.random_vector(rng) for _ in range(len(population))], executor)
                for entry in fresh:
                    archive.insert(entry)
                population = fresh + population[len(fresh):]
                logger.debug(f"Generation {generation}: population converged, reinitialized {len(fresh)} solutions")

            generation += 1
            trace.append(archive.hypervolume())
            logger.debug(
                f"Generation {generation}: {fitness.evaluations_used}/{cfg.budget} evaluations, "
                f"archive {len(archive)}, hypervolume {trace[-1]:.6f}"
            )

    logger.info(f"MO-GOMEA finished after {generation} generations: archive of {len(archive)}")
    return SearchResult(nondominated_front(archive.entries), fitness.evaluations_used, trace, 'mogomea')


_BACKENDS = {
    'mogomea': mogomea_run,
    'random': random_search_run,
    'exhaustive': exhaustive_run,
}


def search(pool: ModelPool, cfg: SearchConfig) -> SearchResult:
    """Run the configured backend; deterministic for fixed (pool, cfg) whatever the worker count."""
    cfg.validate()
    logger.info(
        f"Searching {cfg.mode}s with {cfg.backend}: N={pool.num_models}, k={cfg.k}, "
        f"grid={len(cfg.grid)}, budget={cfg.budget}, seed={cfg.seed}"
    )
    return _BACKENDS[cfg.backend](pool, cfg)
