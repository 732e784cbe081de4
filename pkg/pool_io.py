"""Model pool ingestion, validation and persistence.

A model pool is the whole search substrate: N pre-evaluated classifiers, each with an S x C matrix of
predicted class probabilities and a FLOPs cost, plus the S ground-truth labels they were evaluated on.

Provides:
- Loading and validating pools from a JSON manifest plus binary (or CSV) prediction/label files
- Writing pools back in the bit-exact binary format
- Merging pools evaluated on the same samples, and sample-wise splitting into two pools
- A seeded synthetic pool generator with calibrated per-model accuracy
"""

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from run_manifest import atomic_write_json

logger = logging.getLogger(__name__)

PRED_MAGIC = b'ENCP'
LABELS_MAGIC = b'ENCL'
FORMAT_VERSION = 1
ROW_SUM_TOLERANCE = 1e-4

MANIFEST_NAME = 'pool.json'
LABELS_NAME = 'labels.encl'

_PRED_HEADER = struct.Struct('<4sIII')
_LABELS_HEADER = struct.Struct('<4sII')

PathLike = Union[str, Path]


class PoolError(ValueError):
    """Base class for model pool problems."""


class PoolFormatError(PoolError):
    """A manifest or data file cannot be parsed."""


class PoolValidationError(PoolError):
    """Pool contents violate an invariant (dimensions, labels, probabilities)."""


def validate_predictions(model_id: str, values: np.ndarray) -> None:
    """Check that a prediction matrix holds row-stochastic probabilities.

    Raises:
        PoolValidationError: naming the model and the first offending row.
    """
    if values.ndim != 2:
        raise PoolValidationError(f"Model '{model_id}': predictions must be a 2-D matrix, got shape {values.shape}")
    wide = values.astype(np.float64)
    bad_range = ~np.isfinite(wide) | (wide < 0.0) | (wide > 1.0)
    if bad_range.any():
        row = int(np.argmax(bad_range.any(axis=1)))
        raise PoolValidationError(
            f"Model '{model_id}': row {row} has entries outside [0, 1]: {values[row].tolist()}"
        )
    sums = wide.sum(axis=1)
    bad_sum = np.abs(sums - 1.0) > ROW_SUM_TOLERANCE
    if bad_sum.any():
        row = int(np.argmax(bad_sum))
        raise PoolValidationError(
            f"Model '{model_id}': row {row} sums to {sums[row]:.6f}, "
            f"expected 1 within {ROW_SUM_TOLERANCE}"
        )


@dataclass(frozen=True, eq=False)
class ModelEntry:
    """One selectable cascade member: predictions on every sample plus its cost."""

    id: str
    flops_m: float
    predictions: np.ndarray

    def __post_init__(self):
        if not (math.isfinite(self.flops_m) and self.flops_m > 0):
            raise PoolValidationError(f"Model '{self.id}': flops_m must be a positive number, got {self.flops_m}")
        values = np.array(self.predictions, dtype=np.float32, order='C')
        validate_predictions(self.id, values)
        values.setflags(write=False)
        object.__setattr__(self, 'flops_m', float(self.flops_m))
        object.__setattr__(self, 'predictions', values)

    @property
    def num_samples(self) -> int:
        return self.predictions.shape[0]

    @property
    def num_classes(self) -> int:
        return self.predictions.shape[1]

    @cached_property
    def probabilities(self) -> np.ndarray:
        """Float64 copy of the predictions with every row renormalized to sum to exactly 1."""
        wide = self.predictions.astype(np.float64)
        sums = wide.sum(axis=1, keepdims=True)
        logger.debug(f"Model '{self.id}': max row-sum slack {float(np.abs(sums - 1.0).max()):.3g} before renormalizing")
        wide /= sums
        wide.setflags(write=False)
        return wide


@dataclass(frozen=True, eq=False)
class ModelPool:
    """N models evaluated on the same S samples with C classes."""

    name: str
    models: Tuple[ModelEntry, ...]
    labels: np.ndarray

    def __post_init__(self):
        models = tuple(self.models)
        if not models:
            raise PoolValidationError(f"Pool '{self.name}' has no models")
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size < 1:
            raise PoolValidationError(f"Pool '{self.name}': labels must be a non-empty 1-D sequence")
        num_samples = labels.size
        num_classes = models[0].num_classes
        if num_classes < 2:
            raise PoolValidationError(f"Pool '{self.name}': need at least 2 classes, got {num_classes}")
        seen = set()
        for model in models:
            if model.id in seen:
                raise PoolValidationError(f"Pool '{self.name}': duplicate model id '{model.id}'")
            seen.add(model.id)
            if model.predictions.shape != (num_samples, num_classes):
                raise PoolValidationError(
                    f"Pool '{self.name}': dimension mismatch for model '{model.id}': "
                    f"predictions are {model.predictions.shape}, labels imply ({num_samples}, {num_classes})"
                )
        out_of_range = (labels < 0) | (labels >= num_classes)
        if out_of_range.any():
            index = int(np.argmax(out_of_range))
            raise PoolValidationError(
                f"Pool '{self.name}': label {int(labels[index])} at sample {index} is outside [0, {num_classes})"
            )
        labels.setflags(write=False)
        object.__setattr__(self, 'models', models)
        object.__setattr__(self, 'labels', labels)

    @property
    def num_models(self) -> int:
        return len(self.models)

    @property
    def num_samples(self) -> int:
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return self.models[0].num_classes

    def model(self, index: int) -> ModelEntry:
        """Model by 1-based genome index."""
        if not 1 <= index <= self.num_models:
            raise IndexError(f"Model index {index} outside [1, {self.num_models}]")
        return self.models[index - 1]

    def model_index(self, model_id: str) -> int:
        """1-based genome index of a model id."""
        for position, model in enumerate(self.models, start=1):
            if model.id == model_id:
                return position
        raise KeyError(f"Pool '{self.name}' has no model '{model_id}'")

    def model_accuracy(self, index: int) -> float:
        """Standalone top-1 accuracy (%) of a model, ties broken to the lowest class."""
        predicted = self.model(index).probabilities.argmax(axis=1)
        return 100.0 * np.count_nonzero(predicted == self.labels) / self.num_samples

    def subset(self, sample_indices: np.ndarray, name: Optional[str] = None) -> 'ModelPool':
        """Pool restricted to the given samples (in the given order)."""
        indices = np.asarray(sample_indices, dtype=np.int64)
        models = tuple(ModelEntry(m.id, m.flops_m, m.predictions[indices]) for m in self.models)
        return ModelPool(name or self.name, models, self.labels[indices])

    def __eq__(self, other):
        if not isinstance(other, ModelPool):
            return NotImplemented
        if self.name != other.name or self.num_models != other.num_models:
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        for mine, theirs in zip(self.models, other.models):
            if mine.id != theirs.id or mine.flops_m != theirs.flops_m:
                return False
            if mine.predictions.tobytes() != theirs.predictions.tobytes():
                return False
        return True

    def __hash__(self):
        return hash((self.name, self.num_models, self.num_samples))


# -----------------------------------------------------------------------------
# Binary and CSV file readers
# -----------------------------------------------------------------------------
def _read_predictions(path: Path) -> np.ndarray:
    if path.suffix.lower() == '.csv':
        try:
            values = np.loadtxt(path, delimiter=',', dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise PoolFormatError(f"Cannot parse prediction CSV {path}: {e}") from e
        return values.astype(np.float32)

    data = path.read_bytes()
    if len(data) < _PRED_HEADER.size:
        raise PoolFormatError(f"Prediction file {path} is truncated ({len(data)} bytes)")
    magic, version, num_samples, num_classes = _PRED_HEADER.unpack_from(data)
    if magic != PRED_MAGIC:
        raise PoolFormatError(f"Prediction file {path} has bad magic {magic!r}, expected {PRED_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise PoolFormatError(f"Prediction file {path} has unsupported version {version}")
    expected = _PRED_HEADER.size + 4 * num_samples * num_classes
    if len(data) != expected:
        raise PoolFormatError(
            f"Prediction file {path} is {len(data)} bytes, header ({num_samples} x {num_classes}) implies {expected}"
        )
    values = np.frombuffer(data, dtype='<f4', count=num_samples * num_classes, offset=_PRED_HEADER.size)
    return values.reshape(num_samples, num_classes).astype(np.float32)


def _read_labels(path: Path) -> np.ndarray:
    if path.suffix.lower() == '.csv':
        try:
            values = np.loadtxt(path, delimiter=',', dtype=np.int64, ndmin=1)
        except ValueError as e:
            raise PoolFormatError(f"Cannot parse labels CSV {path}: {e}") from e
        return values.reshape(-1)

    data = path.read_bytes()
    if len(data) < _LABELS_HEADER.size:
        raise PoolFormatError(f"Labels file {path} is truncated ({len(data)} bytes)")
    magic, version, num_samples = _LABELS_HEADER.unpack_from(data)
    if magic != LABELS_MAGIC:
        raise PoolFormatError(f"Labels file {path} has bad magic {magic!r}, expected {LABELS_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise PoolFormatError(f"Labels file {path} has unsupported version {version}")
    expected = _LABELS_HEADER.size + 4 * num_samples
    if len(data) != expected:
        raise PoolFormatError(f"Labels file {path} is {len(data)} bytes, header ({num_samples} labels) implies {expected}")
    values = np.frombuffer(data, dtype='<u4', count=num_samples, offset=_LABELS_HEADER.size)
    return values.astype(np.int64)


def _write_predictions(path: Path, values: np.ndarray) -> None:
    num_samples, num_classes = values.shape
    with open(path, 'wb') as f:
        f.write(_PRED_HEADER.pack(PRED_MAGIC, FORMAT_VERSION, num_samples, num_classes))
        f.write(np.ascontiguousarray(values, dtype='<f4').tobytes())


def _write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, 'wb') as f:
        f.write(_LABELS_HEADER.pack(LABELS_MAGIC, FORMAT_VERSION, labels.size))
        f.write(np.ascontiguousarray(labels, dtype='<u4').tobytes())


# -----------------------------------------------------------------------------
# Pool operations
# -----------------------------------------------------------------------------
def load_pool(manifest_path: PathLike) -> ModelPool:
    """Load and validate a pool from its JSON manifest.

    Args:
        manifest_path: Path to the manifest; data file paths inside it are relative to its directory.

    Returns:
        A validated ModelPool.

    Raises:
        FileNotFoundError: manifest or a referenced file is missing.
        PoolFormatError: manifest or data file cannot be parsed.
        PoolValidationError: dimensions, labels or probabilities are invalid.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"Pool manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise PoolFormatError(f"Malformed pool manifest {manifest_path}: {e}") from e

    required = ('name', 'num_samples', 'num_classes', 'labels_file', 'models')
    if not isinstance(manifest, dict) or any(key not in manifest for key in required):
        raise PoolFormatError(f"Pool manifest {manifest_path} must be an object with keys {', '.join(required)}")
    if not isinstance(manifest['models'], list):
        raise PoolFormatError(f"Pool manifest {manifest_path}: 'models' must be a list")

    base = manifest_path.parent
    try:
        num_samples = int(manifest['num_samples'])
        num_classes = int(manifest['num_classes'])
        labels_path = base / manifest['labels_file']
    except (KeyError, TypeError, ValueError) as e:
        raise PoolFormatError(
            f"Pool manifest {manifest_path}: num_samples and num_classes must be integers and "
            f"labels_file a path: {e}"
        ) from e
    if not labels_path.is_file():
        raise FileNotFoundError(f"Labels file not found: {labels_path}")
    labels = _read_labels(labels_path)
    if labels.size != num_samples:
        raise PoolValidationError(
            f"Dimension mismatch: labels file {labels_path} has {labels.size} entries, manifest says {num_samples}"
        )

    models: List[ModelEntry] = []
    for spec in manifest['models']:
        try:
            model_id = str(spec['id'])
            flops_m = float(spec['flops_m'])
            pred_path = base / spec['pred_file']
        except (KeyError, TypeError, ValueError) as e:
            raise PoolFormatError(f"Malformed model entry in {manifest_path}: {spec!r}") from e
        if not pred_path.is_file():
            raise FileNotFoundError(f"Prediction file for model '{model_id}' not found: {pred_path}")
        values = _read_predictions(pred_path)
        if values.shape != (num_samples, num_classes):
            raise PoolValidationError(
                f"Dimension mismatch for model '{model_id}': {pred_path} holds {values.shape}, "
                f"manifest says ({num_samples}, {num_classes})"
            )
        models.append(ModelEntry(model_id, flops_m, values))

    pool = ModelPool(str(manifest['name']), tuple(models), labels)
    logger.info(f"Loaded pool '{pool.name}': N={pool.num_models} S={pool.num_samples} C={pool.num_classes}")
    return pool


def write_pool(pool: ModelPool, directory: PathLike) -> Path:
    """Write a pool as manifest + binary files; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    _write_labels(directory / LABELS_NAME, pool.labels)
    entries = []
    for position, model in enumerate(pool.models):
        pred_name = f"model_{position:04d}.encp"
        _write_predictions(directory / pred_name, model.predictions)
        entries.append({'id': model.id, 'flops_m': model.flops_m, 'pred_file': pred_name})

    manifest = {
        'name': pool.name,
        'num_samples': pool.num_samples,
        'num_classes': pool.num_classes,
        'labels_file': LABELS_NAME,
        'models': entries,
    }
    manifest_path = directory / MANIFEST_NAME
    atomic_write_json(manifest_path, manifest)
    logger.info(f"Wrote pool '{pool.name}' ({pool.num_models} models) to {directory}")
    return manifest_path


def merge_pools(pools: Sequence[ModelPool]) -> ModelPool:
    """Union of pools evaluated on the same samples.

    Model order is pool order, then within-pool order. Ids that occur in more than one pool are
    prefixed with their pool's name.
    """
    pools = list(pools)
    if not pools:
        raise PoolError("merge_pools needs at least one pool")
    if len(pools) == 1:
        return pools[0]

    first = pools[0]
    for other in pools[1:]:
        if other.num_samples != first.num_samples or other.num_classes != first.num_classes:
            raise PoolValidationError(
                f"Cannot merge '{other.name}' ({other.num_samples} x {other.num_classes}) into "
                f"'{first.name}' ({first.num_samples} x {first.num_classes}): S/C mismatch"
            )
        if not np.array_equal(other.labels, first.labels):
            index = int(np.argmax(other.labels != first.labels))
            raise PoolValidationError(
                f"Label mismatch between '{first.name}' and '{other.name}' at sample {index}: "
                f"{int(first.labels[index])} vs {int(other.labels[index])}"
            )

    counts: Dict[str, int] = {}
    for pool in pools:
        for model in pool.models:
            counts[model.id] = counts.get(model.id, 0) + 1

    used = set()
    models = []
    for pool in pools:
        for model in pool.models:
            new_id = model.id if counts[model.id] == 1 else f"{pool.name}/{model.id}"
            candidate, suffix = new_id, 2
            while candidate in used:
                candidate = f"{new_id}#{suffix}"
                suffix += 1
            used.add(candidate)
            models.append(ModelEntry(candidate, model.flops_m, model.predictions))

    name = '+'.join(dict.fromkeys(pool.name for pool in pools))
    return ModelPool(name, tuple(models), first.labels)


def split_indices(num_samples: int, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded sample-wise partition; first part has floor(fraction * S) samples, at least 1."""
    if not 0.0 < fraction < 1.0:
        raise PoolError(f"Split fraction must be in (0, 1), got {fraction}")
    first_size = max(1, math.floor(fraction * num_samples))
    if num_samples - first_size < 1:
        raise PoolError(
            f"Split fraction {fraction} on {num_samples} samples leaves the second split empty"
        )
    order = np.random.default_rng(seed).permutation(num_samples)
    return np.sort(order[:first_size]), np.sort(order[first_size:])


def split_pool(pool: ModelPool, fraction: float, seed: int) -> Tuple[ModelPool, ModelPool]:
    """Split a pool sample-wise into (first, second), e.g. validation and test."""
    first, second = split_indices(pool.num_samples, fraction, seed)
    return pool.subset(first, f"{pool.name}:val"), pool.subset(second, f"{pool.name}:test")


def pool_digest(pool: ModelPool) -> str:
    """SHA-256 over everything that influences search results."""
    digest = hashlib.sha256()
    digest.update(pool.name.encode('utf-8'))
    digest.update(np.ascontiguousarray(pool.labels, dtype='<u4').tobytes())
    for model in pool.models:
        digest.update(model.id.encode('utf-8'))
        digest.update(struct.pack('<d', model.flops_m))
        digest.update(np.ascontiguousarray(model.predictions, dtype='<f4').tobytes())
    return digest.hexdigest()


# -----------------------------------------------------------------------------
# Synthetic pools
# -----------------------------------------------------------------------------
@dataclass(frozen=True)
class SynthPoolSpec:
    """Parameters of a synthetic pool standing in for a supernetwork trade-off front."""

    num_models: int
    num_samples: int
    num_classes: int
    accuracy_range: Tuple[float, float] = (60.0, 90.0)
    flops_range: Tuple[float, float] = (100.0, 1000.0)
    diversity: float = 0.5
    seed: int = 0
    name: str = 'synth'

    def validate(self) -> None:
        if self.num_models < 1:
            raise PoolError(f"Synthetic pool needs num_models >= 1, got {self.num_models}")
        if self.num_samples < 1:
            raise PoolError(f"Synthetic pool needs num_samples >= 1, got {self.num_samples}")
        if self.num_classes < 2:
            raise PoolError(f"Synthetic pool needs num_classes >= 2, got {self.num_classes}")
        low, high = self.accuracy_range
        if not 0.0 <= low <= high <= 100.0:
            raise PoolError(f"accuracy_range must satisfy 0 <= low <= high <= 100, got {self.accuracy_range}")
        low, high = self.flops_range
        if not 0.0 < low <= high:
            raise PoolError(f"flops_range must satisfy 0 < low <= high, got {self.flops_range}")
        if not 0.0 <= self.diversity <= 1.0:
            raise PoolError(f"diversity must be in [0, 1], got {self.diversity}")
        if not 0 <= self.seed < 2 ** 64:
            raise PoolError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SynthPoolSpec':
        try:
            return cls(
                num_models=int(data['num_models']),
                num_samples=int(data['num_samples']),
                num_classes=int(data['num_classes']),
                accuracy_range=tuple(float(v) for v in data.get('accuracy_range', (60.0, 90.0))),
                flops_range=tuple(float(v) for v in data.get('flops_range', (100.0, 1000.0))),
                diversity=float(data.get('diversity', 0.5)),
                seed=int(data['seed']),
                name=str(data.get('name', 'synth')),
            )
        except KeyError as e:
            raise PoolError(f"Synthetic pool spec is missing {e}") from e


def synth_pool(spec: SynthPoolSpec) -> ModelPool:
    """Generate a pool whose models hit their target accuracies.

    Each model gets a target accuracy and a FLOPs cost; both are sorted before pairing, so more accurate
    models are more expensive. A model errs on exactly round((1 - a) * S) samples, chosen as the lowest
    scores of a mix between a shared per-sample difficulty and a private one; ``diversity`` is the weight
    of the private part (0: nested error sets, 1: independent error sets).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    num_samples, num_classes = spec.num_samples, spec.num_classes

    labels = rng.integers(0, num_classes, size=num_samples)
    targets = np.sort(rng.uniform(*spec.accuracy_range, size=spec.num_models))
    costs = np.sort(rng.uniform(*spec.flops_range, size=spec.num_models))
    difficulty = rng.random(num_samples)
    rows = np.arange(num_samples)

    models = []
    for position in range(spec.num_models):
        accuracy = targets[position]
        score = (1.0 - spec.diversity) * difficulty + spec.diversity * rng.random(num_samples)
        num_errors = int(round((1.0 - accuracy / 100.0) * num_samples))
        wrong = np.zeros(num_samples, dtype=bool)
        wrong[np.argsort(score, kind='stable')[:num_errors]] = True

        logits = rng.normal(0.0, 1.0, size=(num_samples, num_classes))
        sharpness = 1.0 + 3.0 * accuracy / 100.0
        margin = np.where(wrong, 0.5 + rng.exponential(0.5, size=num_samples),
                          0.5 + rng.exponential(sharpness, size=num_samples))
        decoy = (labels + rng.integers(1, num_classes, size=num_samples)) % num_classes
        winner = np.where(wrong, decoy, labels)
        logits[rows, winner] = logits.max(axis=1) + margin

        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        models.append(ModelEntry(f"synth_{position:03d}", float(costs[position]), probs.astype(np.float32)))

    logger.debug(f"Synthesized {spec.num_models} models, targets {np.round(targets, 2).tolist()}")
    return ModelPool(spec.name, tuple(models), labels)
