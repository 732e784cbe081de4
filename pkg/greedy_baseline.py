"""GreedyCascade-style baseline.

Every anchor model starts as a one-stage cascade. Each step tries prepending every (model, threshold)
pair and keeps the prepend with the lowest expected MFLOPs among those that do not lose validation
accuracy; it stops when no prepend is cheaper or the cascade reaches ``max_stages``.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from cascade_eval import (
    CONFIDENCE_MODES, CascadeEvaluator, CascadeMetrics, DecodedCascade, Stage, ThresholdGrid, encode_cascade,
)
from pareto_tools import FrontEntry, nondominated_front
from pool_io import ModelPool

logger = logging.getLogger(__name__)

LABEL = 'GreedyCascade-style'
ANCHOR_MODES = ('all-models', 'top-fraction')


@dataclass
class GreedyConfig:
    grid: ThresholdGrid = field(default_factory=ThresholdGrid.default)
    max_stages: int = 3
    anchors: str = 'all-models'
    top_fraction: float = 0.25
    confidence_mode: str = 'max-prob'
    workers: int = 1

    def validate(self) -> None:
        if self.max_stages < 1:
            raise ValueError(f"max_stages must be >= 1, got {self.max_stages}")
        if self.anchors not in ANCHOR_MODES:
            raise ValueError(f"Unknown anchor mode '{self.anchors}', expected one of {', '.join(ANCHOR_MODES)}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError(f"top_fraction must be in (0, 1], got {self.top_fraction}")
        if self.confidence_mode not in CONFIDENCE_MODES:
            raise ValueError(f"Unknown confidence mode '{self.confidence_mode}'")


class GreedyCascadeSearch:
    """Greedy prepend construction from anchor models, with evaluation accounting."""

    def __init__(self, pool: ModelPool, cfg: Optional[GreedyConfig] = None):
        self.pool = pool
        self.cfg = cfg or GreedyConfig()
        self.cfg.validate()
        self.evaluator = CascadeEvaluator(pool, self.cfg.confidence_mode)
        self.evaluations_used = 0
        self._executor: Optional[ThreadPoolExecutor] = None

    def anchor_models(self) -> List[int]:
        """Anchor indices sorted by standalone accuracy (ascending, ties by index)."""
        by_accuracy = sorted(range(1, self.pool.num_models + 1),
                             key=lambda m: (self.pool.model_accuracy(m), m))
        if self.cfg.anchors == 'all-models':
            return by_accuracy
        count = max(1, math.ceil(self.cfg.top_fraction * self.pool.num_models))
        return sorted(by_accuracy[-count:], key=lambda m: (self.pool.model_accuracy(m), m))

    def _evaluate_all(self, cascades: List[DecodedCascade]) -> List[CascadeMetrics]:
        self.evaluations_used += len(cascades)
        if self._executor is None:
            return [self.evaluator.evaluate(c) for c in cascades]
        return list(self._executor.map(self.evaluator.evaluate, cascades))

    def grow(self, anchor: int) -> Tuple[DecodedCascade, CascadeMetrics]:
        """Greedy prepends starting from ``anchor`` alone."""
        cascade = DecodedCascade((Stage(anchor),))
        metrics = self._evaluate_all([cascade])[0]
        while len(cascade) < self.cfg.max_stages:
            candidates = [
                DecodedCascade((Stage(model, threshold),) + cascade.stages)
                for model in range(1, self.pool.num_models + 1)
                for threshold in self.cfg.grid.values
            ]
            best: Optional[Tuple[DecodedCascade, CascadeMetrics]] = None
            # candidates are in (model, threshold) order, so strict < keeps the lowest of tied ones
            for candidate, result in zip(candidates, self._evaluate_all(candidates)):
                if result.correct_count < metrics.correct_count:
                    continue
                if result.expected_mflops >= metrics.expected_mflops:
                    continue
                if best is None or result.expected_mflops < best[1].expected_mflops:
                    best = (candidate, result)
            if best is None:
                break
            cascade, metrics = best
        return cascade, metrics

    def run(self) -> List[FrontEntry]:
        k = self.cfg.max_stages
        entries: List[FrontEntry] = []
        if self.cfg.workers > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.cfg.workers)
        try:
            for model in range(1, self.pool.num_models + 1):
                single = DecodedCascade((Stage(model),))
                metrics = self._evaluate_all([single])[0]
                entries.append(FrontEntry.from_metrics(encode_cascade(single, k, self.cfg.grid), metrics))
            for anchor in self.anchor_models():
                cascade, metrics = self.grow(anchor)
                logger.debug(f"Anchor {anchor}: {len(cascade)} stages, {metrics.expected_mflops:.2f} MFLOPs, "
                             f"{metrics.accuracy_pct:.2f}%")
                entries.append(FrontEntry.from_metrics(encode_cascade(cascade, k, self.cfg.grid), metrics))
        finally:
            if self._executor is not None:
                self._executor.shutdown()
                self._executor = None

        front = nondominated_front(entries)
        logger.info(f"{LABEL} baseline: {self.evaluations_used} evaluations, front of {len(front)}")
        return front


def greedy_fronts(pool: ModelPool, cfg: Optional[GreedyConfig] = None) -> List[FrontEntry]:
    return GreedyCascadeSearch(pool, cfg).run()
