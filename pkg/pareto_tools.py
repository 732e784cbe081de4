"""Pareto analysis of accuracy / MFLOPs trade-off fronts.

Provides:
- Dominance test and nondominated-front extraction (FLOPs minimized, accuracy maximized)
- The front filter that keeps a cascade only when its rounded accuracy improves
- Normalized 2-D hypervolume and per-point exclusive contributions
- Representative named subset (one entry per multiple of 100 MFLOPs), max-accuracy point and median run
- Front file (JSON) and CSV persistence
"""

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from cascade_eval import CascadeGenome, CascadeMetrics, ThresholdGrid, genome_from_json, genome_to_json
from run_manifest import atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ObjectivePoint:
    mflops: float
    accuracy_pct: float

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.mflops) and math.isfinite(self.accuracy_pct)


# Fitness of genomes that decode to an empty cascade.
WORST_POINT = ObjectivePoint(math.inf, 0.0)


@dataclass(frozen=True)
class FrontEntry:
    genome: CascadeGenome
    point: ObjectivePoint
    metrics: Optional[CascadeMetrics] = None
    name: Optional[str] = None

    @classmethod
    def from_metrics(cls, genome: CascadeGenome, metrics: CascadeMetrics, name: Optional[str] = None) -> 'FrontEntry':
        return cls(genome, ObjectivePoint(metrics.expected_mflops, metrics.accuracy_pct), metrics, name)

    @classmethod
    def rejected(cls, genome: CascadeGenome) -> 'FrontEntry':
        return cls(genome, WORST_POINT, None)

    @property
    def is_rejected(self) -> bool:
        return self.metrics is None and not self.point.is_finite

    def with_name(self, name: Optional[str]) -> 'FrontEntry':
        return replace(self, name=name)


@dataclass(frozen=True)
class HypervolumeConfig:
    ref_mflops: float = 4000.0
    ref_accuracy: float = 60.0
    ideal_mflops: float = 0.0
    ideal_accuracy: float = 100.0

    def __post_init__(self):
        if not self.ref_mflops > self.ideal_mflops:
            raise ValueError(f"ref_mflops ({self.ref_mflops}) must exceed ideal_mflops ({self.ideal_mflops})")
        if not self.ref_accuracy < self.ideal_accuracy:
            raise ValueError(f"ref_accuracy ({self.ref_accuracy}) must be below ideal_accuracy ({self.ideal_accuracy})")

    @property
    def max_volume(self) -> float:
        return (self.ref_mflops - self.ideal_mflops) * (self.ideal_accuracy - self.ref_accuracy)


PointLike = Union[ObjectivePoint, FrontEntry, Tuple[float, float]]


def _point(item: PointLike) -> ObjectivePoint:
    if isinstance(item, FrontEntry):
        return item.point
    if isinstance(item, ObjectivePoint):
        return item
    mflops, accuracy = item
    return ObjectivePoint(float(mflops), float(accuracy))


def dominates(a: PointLike, b: PointLike) -> bool:
    """True iff a is no worse than b in both objectives and strictly better in one."""
    a, b = _point(a), _point(b)
    no_worse = a.mflops <= b.mflops and a.accuracy_pct >= b.accuracy_pct
    return no_worse and (a.mflops < b.mflops or a.accuracy_pct > b.accuracy_pct)


def nondominated_front(entries: Sequence[FrontEntry]) -> List[FrontEntry]:
    """Maximal nondominated subset sorted by MFLOPs; the first of duplicate points wins.

    Entries with non-finite objectives (rejected genomes) never make the front.
    """
    finite = [(position, entry) for position, entry in enumerate(entries) if _point(entry).is_finite]
    finite.sort(key=lambda item: (_point(item[1]).mflops, -_point(item[1]).accuracy_pct, item[0]))
    front = []
    best = -math.inf
    for _, entry in finite:
        accuracy = _point(entry).accuracy_pct
        if accuracy > best:
            front.append(entry)
            best = accuracy
    return front


def round_half_up(value: float, digits: int = 1) -> float:
    """Round half away from zero, independent of binary representation quirks."""
    quantum = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def filter_front(front: Sequence[FrontEntry], digits: int = 1) -> List[FrontEntry]:
    """Walk from least to most accurate; keep an entry when its rounded accuracy beats the last kept one."""
    kept: List[FrontEntry] = []
    last = None
    for entry in front:
        rounded = round_half_up(_point(entry).accuracy_pct, digits)
        if last is None or rounded > last:
            kept.append(entry)
            last = rounded
    return kept


def _sweep(points: Iterable[PointLike], cfg: HypervolumeConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Clipped nondominated coordinates sorted by MFLOPs (accuracy then strictly increasing)."""
    coords = np.array([(p.mflops, p.accuracy_pct) for p in map(_point, points)], dtype=np.float64).reshape(-1, 2)
    coords = coords[np.isfinite(coords).all(axis=1)]
    if coords.size == 0:
        return np.empty(0), np.empty(0)
    mflops = np.minimum(coords[:, 0], cfg.ref_mflops)
    accuracy = np.maximum(coords[:, 1], cfg.ref_accuracy)
    order = np.lexsort((-accuracy, mflops))
    mflops, accuracy = mflops[order], accuracy[order]
    previous_best = np.concatenate(([-np.inf], np.maximum.accumulate(accuracy)[:-1]))
    keep = accuracy > previous_best
    return mflops[keep], accuracy[keep]


def hypervolume(front: Iterable[PointLike], cfg: Optional[HypervolumeConfig] = None) -> float:
    """Area dominated by the front inside the reference box, normalized to [0, 1].

    Points beyond the reference point are clipped onto it and contribute nothing.
    """
    cfg = cfg or HypervolumeConfig()
    mflops, accuracy = _sweep(front, cfg)
    if mflops.size == 0:
        return 0.0
    steps = np.diff(np.concatenate(([cfg.ref_accuracy], accuracy)))
    volume = float(np.sum((cfg.ref_mflops - mflops) * steps))
    return volume / cfg.max_volume


def hypervolume_contributions(front: Sequence[PointLike], cfg: Optional[HypervolumeConfig] = None) -> np.ndarray:
    """Exclusive hypervolume of each point of a sorted nondominated front (unnormalized)."""
    cfg = cfg or HypervolumeConfig()
    coords = np.array([(p.mflops, p.accuracy_pct) for p in map(_point, front)], dtype=np.float64).reshape(-1, 2)
    mflops = np.minimum(coords[:, 0], cfg.ref_mflops)
    accuracy = np.maximum(coords[:, 1], cfg.ref_accuracy)
    next_mflops = np.concatenate((mflops[1:], [cfg.ref_mflops]))
    previous_accuracy = np.concatenate(([cfg.ref_accuracy], accuracy[:-1]))
    return (next_mflops - mflops) * (accuracy - previous_accuracy)


def max_accuracy_point(front: Iterable[PointLike]) -> Optional[ObjectivePoint]:
    """Most accurate finite point, the cheaper one on ties; None for an empty front."""
    points = [p for p in map(_point, front) if p.is_finite]
    if not points:
        return None
    return min(points, key=lambda p: (-p.accuracy_pct, p.mflops))


def median_run(values: Sequence[float]) -> int:
    """Index of the median run; with an even count the lower of the two middle runs."""
    if not values:
        raise ValueError("median_run needs at least one value")
    order = sorted(range(len(values)), key=lambda i: (values[i], i))
    return order[(len(values) - 1) // 2]


def representative_subset(front: Sequence[FrontEntry], prefix: str = 'ENCAS') -> List[Tuple[str, FrontEntry]]:
    """One entry per multiple of 100 MFLOPs: the entry closest to it (ties to the cheaper one).

    Multiples run from floor(min / 100) * 100 to ceil(max / 100) * 100, so both ends of the front are
    always represented.
    """
    entries = sorted((e for e in front if _point(e).is_finite), key=lambda e: _point(e).mflops)
    if not entries:
        raise ValueError("representative_subset needs a nonempty front")
    costs = np.array([_point(e).mflops for e in entries])
    first = math.floor(costs[0] / 100.0)
    last = math.ceil(costs[-1] / 100.0)

    chosen: List[int] = []
    for multiple in range(first, last + 1):
        distance = np.abs(costs - 100.0 * multiple)
        index = int(np.argmin(distance))  # first minimum is the cheaper one
        if index not in chosen:
            chosen.append(index)

    named = []
    for index in sorted(chosen):
        entry = entries[index]
        name = f"{prefix}@{int(round_half_up(_point(entry).mflops, 0))}"
        named.append((name, entry.with_name(name)))
    return named


# -----------------------------------------------------------------------------
# Persistence
# -----------------------------------------------------------------------------
def entry_to_json(entry: FrontEntry, grid: Optional[ThresholdGrid] = None) -> Dict[str, Any]:
    data = {'name': entry.name}
    data.update(genome_to_json(entry.genome, grid))
    data['accuracy_pct'] = entry.point.accuracy_pct
    data['mflops'] = entry.point.mflops
    data['stage_fractions'] = list(entry.metrics.stage_fractions) if entry.metrics else []
    return data


def entry_from_json(data: Dict[str, Any], grid: Optional[ThresholdGrid] = None) -> FrontEntry:
    genome = genome_from_json(data, grid)
    metrics = CascadeMetrics(
        accuracy_pct=float(data['accuracy_pct']),
        expected_mflops=float(data['mflops']),
        stage_fractions=tuple(float(v) for v in data.get('stage_fractions', [])),
    )
    return FrontEntry.from_metrics(genome, metrics, data.get('name'))


def write_front(path: PathLike, entries: Sequence[FrontEntry], grid: Optional[ThresholdGrid] = None) -> Path:
    return atomic_write_json(path, [entry_to_json(entry, grid) for entry in entries])


def read_front(path: PathLike, grid: Optional[ThresholdGrid] = None) -> List[FrontEntry]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ValueError(f"Front file {path} is not valid JSON: {e}") from e
    if not isinstance(data, list):
        raise ValueError(f"Front file {path} must hold a JSON array")
    try:
        return [entry_from_json(item, grid) for item in data]
    except (KeyError, TypeError) as e:
        raise ValueError(f"Front file {path} has a malformed entry: {e}") from e


def front_to_csv(entries: Sequence[FrontEntry]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(['name', 'mflops', 'accuracy_pct'])
    for entry in entries:
        writer.writerow([entry.name or '', repr(entry.point.mflops), repr(entry.point.accuracy_pct)])
    return buffer.getvalue()


def write_front_csv(path: PathLike, entries: Sequence[FrontEntry]) -> Path:
    return atomic_write_text(path, front_to_csv(entries))
