"""Cascade genomes and their evaluation against a model pool.

A cascade runs its stages in order on every sample. After each stage the sample's prediction is the
mean of the probability vectors of all stages used so far; if the confidence of that mean is strictly
above the stage's threshold the sample exits, otherwise it continues. Expected cost is the FLOPs of
each stage weighted by the fraction of samples that reached it.

Provides:
- ThresholdGrid, CascadeGenome, DecodedCascade, CascadeMetrics and GenomeSpace
- decode / encode_cascade between genomes and stage lists
- confidence functions (max-prob, top-gap)
- CascadeEvaluator with prefix memoization, and the evaluate_cascade / evaluate_ensemble functions
"""

import itertools
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from pool_io import ModelPool

logger = logging.getLogger(__name__)

CONFIDENCE_MODES = ('max-prob', 'top-gap')
GENOME_MODES = ('cascade', 'ensemble')
INT64_MAX = 2 ** 63 - 1


class CascadeError(ValueError):
    """Invalid genome, cascade or evaluation request."""


@dataclass(frozen=True)
class ThresholdGrid:
    """Ordered set of allowed confidence thresholds."""

    values: Tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not values:
            raise CascadeError("Threshold grid is empty")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise CascadeError(f"Threshold grid must be strictly increasing: {values}")
        if values[0] < 0.0 or values[-1] != 1.0:
            raise CascadeError(f"Threshold grid must lie in [0, 1] and end at 1.0: {values}")
        object.__setattr__(self, 'values', values)

    @classmethod
    def default(cls, steps: int = 50) -> 'ThresholdGrid':
        """Evenly spaced grid 0, 1/steps, ..., 1 (51 values by default)."""
        if steps < 1:
            raise CascadeError(f"Threshold grid needs at least 1 step, got {steps}")
        return cls(tuple(float(i) / steps for i in range(steps + 1)))

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, index: int) -> float:
        return self.values[index]

    def index_of(self, value: float, tolerance: float = 1e-9) -> int:
        for index, candidate in enumerate(self.values):
            if abs(candidate - value) <= tolerance:
                return index
        raise CascadeError(f"Threshold {value} is not a member of the grid {list(self.values)}")


@dataclass(frozen=True)
class CascadeGenome:
    """k model slots (0 = no-op, else 1-based pool index) and k-1 threshold grid indices."""

    model_slots: Tuple[int, ...]
    threshold_slots: Tuple[int, ...]

    def __post_init__(self):
        models = tuple(int(v) for v in self.model_slots)
        thresholds = tuple(int(v) for v in self.threshold_slots)
        if not models:
            raise CascadeError("Genome needs at least one model slot")
        if len(thresholds) != len(models) - 1:
            raise CascadeError(
                f"Genome with {len(models)} model slots needs {len(models) - 1} threshold slots, got {len(thresholds)}"
            )
        object.__setattr__(self, 'model_slots', models)
        object.__setattr__(self, 'threshold_slots', thresholds)

    @property
    def k(self) -> int:
        return len(self.model_slots)

    def validate(self, num_models: int, grid_len: int) -> None:
        for position, slot in enumerate(self.model_slots):
            if not 0 <= slot <= num_models:
                raise CascadeError(f"Model slot {position} = {slot} outside [0, {num_models}]")
        for position, slot in enumerate(self.threshold_slots):
            if not 0 <= slot < grid_len:
                raise CascadeError(f"Threshold slot {position} = {slot} outside [0, {grid_len})")


@dataclass(frozen=True)
class Stage:
    model: int
    threshold: Optional[float] = None


@dataclass(frozen=True)
class DecodedCascade:
    stages: Tuple[Stage, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        for stage in stages[:-1]:
            if stage.threshold is None:
                raise CascadeError("Only the final stage may lack a threshold")
        if stages and stages[-1].threshold is not None:
            stages = stages[:-1] + (Stage(stages[-1].model),)
        object.__setattr__(self, 'stages', stages)

    @classmethod
    def of(cls, *stages: Tuple[int, Optional[float]]) -> 'DecodedCascade':
        return cls(tuple(Stage(model, threshold) for model, threshold in stages))

    @property
    def models(self) -> Tuple[int, ...]:
        return tuple(stage.model for stage in self.stages)

    @property
    def is_empty(self) -> bool:
        return not self.stages

    def __len__(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class CascadeMetrics:
    accuracy_pct: float
    expected_mflops: float
    stage_fractions: Tuple[float, ...]
    correct_count: Optional[int] = None
    num_samples: Optional[int] = None
    exit_stage: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'accuracy_pct': self.accuracy_pct,
            'expected_mflops': self.expected_mflops,
            'stage_fractions': list(self.stage_fractions),
            'correct_count': self.correct_count,
            'num_samples': self.num_samples,
        }
        if self.exit_stage is not None:
            data['exit_stage'] = self.exit_stage.tolist()
        return data


def decode(genome: CascadeGenome, grid: Optional[ThresholdGrid] = None) -> DecodedCascade:
    """Drop no-op slots; surviving non-final stages keep the threshold of their position."""
    grid = grid or ThresholdGrid.default()
    active = [position for position, slot in enumerate(genome.model_slots) if slot != 0]
    stages = []
    for order, position in enumerate(active):
        if order == len(active) - 1:
            stages.append(Stage(genome.model_slots[position]))
        else:
            stages.append(Stage(genome.model_slots[position], grid[genome.threshold_slots[position]]))
    return DecodedCascade(tuple(stages))


def encode_cascade(cascade: DecodedCascade, k: int, grid: Optional[ThresholdGrid] = None) -> CascadeGenome:
    """Genome of size k that decodes to ``cascade``; unused slots are no-ops at threshold 1.0."""
    grid = grid or ThresholdGrid.default()
    if len(cascade) > k:
        raise CascadeError(f"Cascade of {len(cascade)} stages does not fit in k={k}")
    models = list(cascade.models) + [0] * (k - len(cascade))
    thresholds = []
    for position in range(k - 1):
        if position < len(cascade) - 1:
            thresholds.append(grid.index_of(cascade.stages[position].threshold))
        else:
            thresholds.append(len(grid) - 1)
    return CascadeGenome(tuple(models), tuple(thresholds))


def genome_from_json(data: Dict[str, Any], grid: Optional[ThresholdGrid] = None) -> CascadeGenome:
    """Parse {"models": [...], "thresholds": [grid values...]}."""
    grid = grid or ThresholdGrid.default()
    try:
        models = [int(v) for v in data['models']]
        thresholds = [grid.index_of(float(v)) for v in data['thresholds']]
    except (KeyError, TypeError) as e:
        raise CascadeError(f"Genome JSON needs 'models' and 'thresholds' lists, got {data!r}") from e
    return CascadeGenome(tuple(models), tuple(thresholds))


def genome_to_json(genome: CascadeGenome, grid: Optional[ThresholdGrid] = None) -> Dict[str, List]:
    grid = grid or ThresholdGrid.default()
    return {
        'models': list(genome.model_slots),
        'thresholds': [grid[index] for index in genome.threshold_slots],
    }


def genome_space_size(num_models: int, k: int, grid_len: int) -> int:
    """(N+1)^k * grid_len^(k-1); raises OverflowError beyond a signed 64-bit count."""
    if num_models < 1 or k < 1 or grid_len < 1:
        raise CascadeError(f"genome_space_size needs N, k, grid_len >= 1, got {num_models}, {k}, {grid_len}")
    size = (num_models + 1) ** k * grid_len ** (k - 1)
    if size > INT64_MAX:
        raise OverflowError(f"Genome space of N={num_models}, k={k}, grid={grid_len} exceeds 2^63 - 1 ({size})")
    return size


# -----------------------------------------------------------------------------
# Confidence
# -----------------------------------------------------------------------------
def _check_mode(mode: str) -> str:
    if mode not in CONFIDENCE_MODES:
        raise CascadeError(f"Unknown confidence mode '{mode}', expected one of {', '.join(CONFIDENCE_MODES)}")
    return mode


def confidence_rows(probs: np.ndarray, mode: str) -> np.ndarray:
    """Row-wise confidence of an (n, C) matrix."""
    if mode == 'max-prob':
        return probs.max(axis=1)
    if mode == 'top-gap':
        top_two = np.partition(probs, -2, axis=1)[:, -2:]
        return top_two[:, 1] - top_two[:, 0]
    raise CascadeError(f"Unknown confidence mode '{mode}'")


def confidence(probs: Sequence[float], mode: str = 'max-prob') -> float:
    """Certainty of one probability vector: its maximum, or the gap between its top two entries."""
    vector = np.asarray(probs, dtype=np.float64)
    if vector.ndim != 1 or vector.size < 2:
        raise CascadeError(f"Confidence needs a vector of length >= 2, got shape {vector.shape}")
    return float(confidence_rows(vector[None, :], _check_mode(mode))[0])


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class _PrefixState:
    """Samples still running after a cascade prefix, with their summed probabilities."""

    active: np.ndarray
    running: np.ndarray
    correct: int
    reached: Tuple[int, ...]

    @property
    def nbytes(self) -> int:
        return self.active.nbytes + self.running.nbytes


def _expected_mflops(flops: Sequence[float], fractions: Sequence[float]) -> float:
    total = 0.0
    for cost, fraction in zip(flops, fractions):
        total += cost * fraction
    return total


class CascadeEvaluator:
    """Evaluates cascades and ensembles against one immutable pool.

    Non-final cascade prefixes are memoized (LRU, bounded by ``cache_mb``); cached and uncached
    evaluation perform the same per-sample float64 operations, so results are bit-identical.
    Safe to share between threads.
    """

    def __init__(self, pool: ModelPool, confidence_mode: str = 'max-prob', cache_mb: float = 0.0):
        self.pool = pool
        self.confidence_mode = _check_mode(confidence_mode)
        self._probs = [model.probabilities for model in pool.models]
        self._flops = [model.flops_m for model in pool.models]
        self._labels = pool.labels
        self._all = np.arange(pool.num_samples)
        self._cache: 'OrderedDict[tuple, _PrefixState]' = OrderedDict()
        self._cache_bytes = 0
        self._cache_limit = int(cache_mb * 2 ** 20)
        self._lock = threading.Lock()
        self.cache_hits = 0
        self.cache_misses = 0

    def _check_models(self, models: Sequence[int]) -> None:
        for model in models:
            if not 1 <= model <= self.pool.num_models:
                raise CascadeError(f"Stage model index {model} outside [1, {self.pool.num_models}]")

    # -- cache ------------------------------------------------------------------
    def _cache_get(self, key: tuple) -> Optional[_PrefixState]:
        with self._lock:
            state = self._cache.get(key)
            if state is not None:
                self._cache.move_to_end(key)
                self.cache_hits += 1
            else:
                self.cache_misses += 1
            return state

    def _cache_put(self, key: tuple, state: _PrefixState) -> None:
        size = state.nbytes
        if size > self._cache_limit:
            return
        with self._lock:
            if key in self._cache:
                return
            self._cache[key] = state
            self._cache_bytes += size
            while self._cache_bytes > self._cache_limit:
                _, evicted = self._cache.popitem(last=False)
                self._cache_bytes -= evicted.nbytes

    # -- core -------------------------------------------------------------------
    def _advance(self, state: Optional[_PrefixState], stage: Stage, depth: int,
                 exits: Optional[np.ndarray]) -> _PrefixState:
        probs = self._probs[stage.model - 1]
        if state is None:
            active, running, correct, reached = self._all, probs, 0, ()
        else:
            active = state.active
            running = state.running + probs[active]
            correct, reached = state.correct, state.reached
        reached = reached + (active.size,)
        mean = running / depth

        if stage.threshold is None:
            predicted = mean.argmax(axis=1)
            correct += int(np.count_nonzero(predicted == self._labels[active]))
            if exits is not None:
                exits[active] = depth - 1
            empty = active[:0]
            return _PrefixState(empty, running[:0], correct, reached)

        stop = confidence_rows(mean, self.confidence_mode) > stage.threshold
        predicted = mean[stop].argmax(axis=1)
        correct += int(np.count_nonzero(predicted == self._labels[active[stop]]))
        if exits is not None:
            exits[active[stop]] = depth - 1
        keep = ~stop
        next_active = active[keep]
        next_running = running[keep]
        next_active.setflags(write=False)
        next_running.setflags(write=False)
        return _PrefixState(next_active, next_running, correct, reached)

    def _metrics(self, state: _PrefixState, models: Sequence[int],
                 exits: Optional[np.ndarray]) -> CascadeMetrics:
        num_samples = self.pool.num_samples
        fractions = tuple(count / num_samples for count in state.reached)
        flops = [self._flops[model - 1] for model in models]
        return CascadeMetrics(
            accuracy_pct=100.0 * state.correct / num_samples,
            expected_mflops=_expected_mflops(flops, fractions),
            stage_fractions=fractions,
            correct_count=state.correct,
            num_samples=num_samples,
            exit_stage=exits,
        )

    def evaluate(self, cascade: DecodedCascade, track_exits: bool = False) -> CascadeMetrics:
        """Metrics of a nonempty cascade; ``track_exits`` records each sample's exit stage (uncached)."""
        if cascade.is_empty:
            raise CascadeError("Cannot evaluate an empty cascade")
        self._check_models(cascade.models)
        stages = cascade.stages
        use_cache = self._cache_limit > 0 and not track_exits
        exits = np.full(self.pool.num_samples, -1, dtype=np.int64) if track_exits else None

        state, start = None, 0
        if use_cache:
            for length in range(len(stages) - 1, 0, -1):
                cached = self._cache_get(tuple((s.model, s.threshold) for s in stages[:length]))
                if cached is not None:
                    state, start = cached, length
                    break

        for position in range(start, len(stages)):
            state = self._advance(state, stages[position], position + 1, exits)
            if use_cache and position < len(stages) - 1:
                self._cache_put(tuple((s.model, s.threshold) for s in stages[:position + 1]), state)
        return self._metrics(state, cascade.models, exits)

    def evaluate_ensemble(self, model_indices: Sequence[int]) -> CascadeMetrics:
        """Every member processes every sample; prediction is the argmax of the mean output."""
        models = list(model_indices)
        if not models:
            raise CascadeError("Cannot evaluate an empty ensemble")
        self._check_models(models)
        running = self._probs[models[0] - 1]
        for model in models[1:]:
            running = running + self._probs[model - 1][self._all]
        predicted = (running / len(models)).argmax(axis=1)
        correct = int(np.count_nonzero(predicted == self._labels))
        state = _PrefixState(self._all[:0], running[:0], correct, (self.pool.num_samples,) * len(models))
        return self._metrics(state, models, None)


def evaluate_cascade(cascade: DecodedCascade, pool: ModelPool, confidence_mode: str = 'max-prob') -> CascadeMetrics:
    return CascadeEvaluator(pool, confidence_mode).evaluate(cascade)


def evaluate_ensemble(model_indices: Sequence[int], pool: ModelPool) -> CascadeMetrics:
    return CascadeEvaluator(pool).evaluate_ensemble(model_indices)


# -----------------------------------------------------------------------------
# Genome space
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class GenomeSpace:
    """Flat categorical encoding of genomes for the search engines.

    Cascade mode: k model positions followed by k-1 threshold positions. Ensemble mode: k model
    positions only, thresholds pinned to the last grid value (1.0).
    """

    num_models: int
    k: int
    grid: ThresholdGrid
    mode: str = 'cascade'

    def __post_init__(self):
        if self.mode not in GENOME_MODES:
            raise CascadeError(f"Unknown genome mode '{self.mode}', expected one of {', '.join(GENOME_MODES)}")
        if self.k < 1 or self.num_models < 1:
            raise CascadeError(f"Genome space needs k >= 1 and N >= 1, got k={self.k}, N={self.num_models}")

    @property
    def num_positions(self) -> int:
        return self.k if self.mode == 'ensemble' else 2 * self.k - 1

    @cached_property
    def cardinalities(self) -> np.ndarray:
        cards = [self.num_models + 1] * self.k
        if self.mode == 'cascade':
            cards += [len(self.grid)] * (self.k - 1)
        return np.array(cards, dtype=np.int64)

    def size(self) -> int:
        if self.mode == 'ensemble':
            size = (self.num_models + 1) ** self.k
            if size > INT64_MAX:
                raise OverflowError(f"Ensemble genome space of N={self.num_models}, k={self.k} exceeds 2^63 - 1")
            return size
        return genome_space_size(self.num_models, self.k, len(self.grid))

    def to_genome(self, vector: Sequence[int]) -> CascadeGenome:
        vector = tuple(int(v) for v in vector)
        if self.mode == 'ensemble':
            return CascadeGenome(vector, (len(self.grid) - 1,) * (self.k - 1))
        return CascadeGenome(vector[:self.k], vector[self.k:])

    def to_vector(self, genome: CascadeGenome) -> Tuple[int, ...]:
        if self.mode == 'ensemble':
            return genome.model_slots
        return genome.model_slots + genome.threshold_slots

    def random_vector(self, rng: np.random.Generator) -> Tuple[int, ...]:
        return tuple(int(v) for v in rng.integers(0, self.cardinalities))

    def singleton_vector(self, model: int) -> Tuple[int, ...]:
        """Genome encoding model ``model`` alone."""
        vector = [0] * self.num_positions
        vector[0] = model
        for position in range(self.k, self.num_positions):
            vector[position] = len(self.grid) - 1
        return tuple(vector)

    def enumerate(self) -> Iterator[Tuple[int, ...]]:
        return itertools.product(*(range(int(c)) for c in self.cardinalities))
