"""Long-running search comparisons on larger synthetic pools.

Enabled by setting ENCAS_RUN_SLOW=1.
"""

import time
import unittest

import numpy as np

from config import Config
from evo_search import SearchConfig, search
from pool_io import SynthPoolSpec, synth_pool


class TestSearchIntegration(unittest.TestCase):
    def setUp(self):
        if not Config().RUN_SLOW:
            self.skipTest("ENCAS_RUN_SLOW environment variable not set")

    def test_mogomea_beats_random_search(self):
        pool = synth_pool(SynthPoolSpec(num_models=50, num_samples=2000, num_classes=10, diversity=0.7, seed=2023))
        finals = {'mogomea': [], 'random': []}
        for backend in finals:
            for seed in range(10):
                result = search(pool, SearchConfig(backend=backend, budget=20_000, seed=seed, workers=4))
                self.assertEqual(result.evaluations_used, 20_000)
                finals[backend].append(result.hypervolume_trace[-1])
        print(f"\nmedian hypervolume: mogomea={np.median(finals['mogomea']):.6f} "
              f"random={np.median(finals['random']):.6f}")
        self.assertGreaterEqual(np.median(finals['mogomea']), np.median(finals['random']))

    def test_large_run_is_worker_independent(self):
        pool = synth_pool(SynthPoolSpec(num_models=50, num_samples=10_000, num_classes=100, seed=9))
        results = []
        for workers in (1, 8):
            started = time.monotonic()
            results.append(search(pool, SearchConfig(backend='mogomea', budget=100_000, k=5, seed=3,
                                                     workers=workers)))
            elapsed = time.monotonic() - started
            print(f"\nworkers={workers}: {elapsed:.1f}s")
            self.assertLess(elapsed, 600.0)

        serial, parallel = results
        self.assertEqual(serial.evaluations_used, parallel.evaluations_used)
        self.assertEqual(serial.hypervolume_trace, parallel.hypervolume_trace)
        self.assertEqual([e.genome for e in serial.front], [e.genome for e in parallel.front])
        self.assertEqual([e.point for e in serial.front], [e.point for e in parallel.front])


if __name__ == '__main__':
    unittest.main()
