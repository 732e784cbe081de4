"""Small hand-built and synthetic pools shared by the tests."""

import numpy as np

from cascade_eval import ThresholdGrid
from pool_io import ModelEntry, ModelPool, SynthPoolSpec, synth_pool

TINY_GRID = ThresholdGrid((0.5, 1.0))


def two_model_pool() -> ModelPool:
    """Model A (100 MFLOPs) is cheap and confident on sample 1; model B (300 MFLOPs) gets both right.

    Cascade [(A, 0.7), B] stops sample 1 after A and averages A and B on sample 2:
    accuracy 100%, stage fractions [1.0, 0.5], expected cost 250 MFLOPs.
    """
    model_a = ModelEntry('A', 100.0, np.array([[0.9, 0.1], [0.6, 0.4]], dtype=np.float32))
    model_b = ModelEntry('B', 300.0, np.array([[0.5, 0.5], [0.2, 0.8]], dtype=np.float32))
    return ModelPool('worked', (model_a, model_b), np.array([0, 1]))


def three_model_pool() -> ModelPool:
    """two_model_pool plus model C: A's predictions at 400 MFLOPs (dominated by A)."""
    pool = two_model_pool()
    model_c = ModelEntry('C', 400.0, pool.models[0].predictions)
    return ModelPool('worked3', pool.models + (model_c,), pool.labels)


def small_synth_pool(num_models: int = 4, num_samples: int = 200, num_classes: int = 5,
                     seed: int = 0, diversity: float = 0.5) -> ModelPool:
    spec = SynthPoolSpec(num_models=num_models, num_samples=num_samples, num_classes=num_classes,
                         accuracy_range=(55.0, 90.0), flops_range=(50.0, 900.0),
                         diversity=diversity, seed=seed)
    return synth_pool(spec)
