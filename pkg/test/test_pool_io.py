import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

import pool_io
from pool_io import (
    ModelEntry, ModelPool, PoolError, PoolFormatError, PoolValidationError, SynthPoolSpec, load_pool,
    merge_pools, pool_digest, split_indices, split_pool, synth_pool, write_pool,
)
from pool_fixtures import small_synth_pool, two_model_pool


class TempDirTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


class TestModelPoolInvariants(unittest.TestCase):
    def test_row_sum_violation_names_row(self):
        """A row summing to 0.90 is rejected and the message names the model and row."""
        with self.assertRaises(PoolValidationError) as ctx:
            ModelEntry('m1', 10.0, np.array([[0.5, 0.5], [0.45, 0.45]], dtype=np.float32))
        self.assertIn('m1', str(ctx.exception))
        self.assertIn('row 1', str(ctx.exception))

    def test_entry_outside_unit_interval(self):
        with self.assertRaises(PoolValidationError):
            ModelEntry('m', 10.0, np.array([[1.5, -0.5]], dtype=np.float32))

    def test_nonpositive_flops(self):
        with self.assertRaises(PoolValidationError):
            ModelEntry('m', 0.0, np.array([[0.5, 0.5]], dtype=np.float32))

    def test_label_out_of_range(self):
        entry = ModelEntry('m', 1.0, np.array([[0.5, 0.5]], dtype=np.float32))
        with self.assertRaises(PoolValidationError):
            ModelPool('p', (entry,), np.array([2]))

    def test_duplicate_ids(self):
        entry = ModelEntry('m', 1.0, np.array([[0.5, 0.5]], dtype=np.float32))
        with self.assertRaises(PoolValidationError):
            ModelPool('p', (entry, entry), np.array([0]))

    def test_single_class_rejected(self):
        entry = ModelEntry('m', 1.0, np.array([[1.0]], dtype=np.float32))
        with self.assertRaises(PoolValidationError):
            ModelPool('p', (entry,), np.array([0]))

    def test_probabilities_are_renormalized(self):
        entry = ModelEntry('m', 1.0, np.array([[0.50002, 0.5]], dtype=np.float32))
        self.assertEqual(entry.probabilities.dtype, np.float64)
        self.assertAlmostEqual(float(entry.probabilities.sum()), 1.0, places=15)

    def test_model_lookup(self):
        pool = two_model_pool()
        self.assertEqual(pool.model_index('B'), 2)
        self.assertEqual(pool.model(1).id, 'A')
        self.assertEqual(pool.model_accuracy(1), 50.0)
        self.assertEqual(pool.model_accuracy(2), 100.0)
        with self.assertRaises(KeyError):
            pool.model_index('Z')


class TestPoolPersistence(TempDirTestCase):
    def test_round_trip_is_bit_exact(self):
        pool = small_synth_pool(num_models=3, num_samples=100, num_classes=10)
        manifest = write_pool(pool, self.tmp / 'pool')
        loaded = load_pool(manifest)
        self.assertEqual(loaded, pool)
        self.assertEqual((loaded.num_models, loaded.num_samples, loaded.num_classes), (3, 100, 10))
        for mine, theirs in zip(pool.models, loaded.models):
            self.assertEqual(mine.predictions.tobytes(), theirs.predictions.tobytes())

    def test_minimal_pool(self):
        entry = ModelEntry('only', 5.0, np.array([[0.25, 0.75]], dtype=np.float32))
        pool = ModelPool('tiny', (entry,), np.array([1]))
        loaded = load_pool(write_pool(pool, self.tmp))
        self.assertEqual(loaded, pool)

    def test_manifest_layout(self):
        manifest = write_pool(two_model_pool(), self.tmp)
        data = json.loads(manifest.read_text())
        self.assertEqual(data['num_samples'], 2)
        self.assertEqual(data['num_classes'], 2)
        self.assertEqual([m['id'] for m in data['models']], ['A', 'B'])
        raw = (self.tmp / data['models'][0]['pred_file']).read_bytes()
        self.assertEqual(raw[:4], b'ENCP')
        self.assertEqual(len(raw), 16 + 4 * 2 * 2)

    def test_missing_manifest(self):
        with self.assertRaises(FileNotFoundError):
            load_pool(self.tmp / 'absent.json')

    def test_malformed_manifest(self):
        path = self.tmp / 'pool.json'
        path.write_text('{not json')
        with self.assertRaises(PoolFormatError):
            load_pool(path)

    def test_null_manifest_fields(self):
        for key in ('num_samples', 'num_classes', 'labels_file'):
            with self.subTest(key=key):
                manifest = write_pool(two_model_pool(), self.tmp / key)
                data = json.loads(manifest.read_text())
                data[key] = None
                manifest.write_text(json.dumps(data))
                with self.assertRaises(PoolFormatError):
                    load_pool(manifest)

    def test_missing_prediction_file(self):
        manifest = write_pool(two_model_pool(), self.tmp)
        (self.tmp / 'model_0001.encp').unlink()
        with self.assertRaises(FileNotFoundError):
            load_pool(manifest)

    def test_label_count_mismatch(self):
        """A labels file with 99 entries for S=100 is a dimension mismatch."""
        pool = small_synth_pool(num_models=1, num_samples=100)
        manifest = write_pool(pool, self.tmp)
        pool_io._write_labels(self.tmp / pool_io.LABELS_NAME, pool.labels[:99])
        with self.assertRaises(PoolValidationError):
            load_pool(manifest)

    def test_row_sum_violation_on_load(self):
        manifest = write_pool(two_model_pool(), self.tmp)
        bad = np.array([[0.9, 0.1], [0.5, 0.4]], dtype=np.float32)
        pool_io._write_predictions(self.tmp / 'model_0000.encp', bad)
        with self.assertRaises(PoolValidationError) as ctx:
            load_pool(manifest)
        self.assertIn("'A'", str(ctx.exception))
        self.assertIn('row 1', str(ctx.exception))

    def test_bad_magic(self):
        manifest = write_pool(two_model_pool(), self.tmp)
        path = self.tmp / 'model_0000.encp'
        path.write_bytes(b'XXXX' + path.read_bytes()[4:])
        with self.assertRaises(PoolFormatError):
            load_pool(manifest)

    def test_csv_ingestion_converts_to_binary(self):
        np.savetxt(self.tmp / 'a.csv', [[0.9, 0.1], [0.6, 0.4]], delimiter=',')
        np.savetxt(self.tmp / 'labels.csv', [0, 1], fmt='%d')
        manifest = {
            'name': 'csvpool', 'num_samples': 2, 'num_classes': 2, 'labels_file': 'labels.csv',
            'models': [{'id': 'A', 'flops_m': 100.0, 'pred_file': 'a.csv'}],
        }
        (self.tmp / 'csv.json').write_text(json.dumps(manifest))
        pool = load_pool(self.tmp / 'csv.json')
        self.assertEqual(pool.labels.tolist(), [0, 1])
        converted = load_pool(write_pool(pool, self.tmp / 'bin'))
        self.assertEqual(converted, pool)


class TestMergePools(unittest.TestCase):
    def setUp(self):
        self.left = small_synth_pool(num_models=3, seed=4)
        self.right = ModelPool('other', small_synth_pool(num_models=2, seed=5).models, self.left.labels)

    def test_counts_add_and_order_is_preserved(self):
        merged = merge_pools([self.left, self.right])
        self.assertEqual(merged.num_models, 5)
        expected = [m.flops_m for m in self.left.models] + [m.flops_m for m in self.right.models]
        self.assertEqual([m.flops_m for m in merged.models], expected)

    def test_colliding_ids_are_prefixed(self):
        merged = merge_pools([self.left, self.right])
        ids = [m.id for m in merged.models]
        self.assertEqual(len(set(ids)), 5)
        self.assertIn('other/synth_000', ids)
        self.assertIn('synth/synth_000', ids)
        self.assertIn('synth_002', ids)

    def test_single_pool_is_identity(self):
        self.assertIs(merge_pools([self.left]), self.left)

    def test_label_mismatch(self):
        labels = self.left.labels.copy()
        labels[7] = (labels[7] + 1) % self.left.num_classes
        shifted = ModelPool('shifted', self.right.models, labels)
        with self.assertRaises(PoolValidationError) as ctx:
            merge_pools([self.left, shifted])
        self.assertIn('sample 7', str(ctx.exception))

    def test_shape_mismatch(self):
        with self.assertRaises(PoolValidationError):
            merge_pools([self.left, small_synth_pool(num_samples=50)])

    def test_associative_model_sequence(self):
        third = ModelPool('third', small_synth_pool(num_models=1, seed=6).models, self.left.labels)
        left_first = merge_pools([merge_pools([self.left, self.right]), third])
        right_first = merge_pools([self.left, merge_pools([self.right, third])])
        self.assertEqual(
            [m.predictions.tobytes() for m in left_first.models],
            [m.predictions.tobytes() for m in right_first.models],
        )

    def test_empty_list(self):
        with self.assertRaises(PoolError):
            merge_pools([])


class TestSplitPool(unittest.TestCase):
    def test_half_split(self):
        val, test = split_pool(small_synth_pool(num_samples=100), 0.5, seed=3)
        self.assertEqual((val.num_samples, test.num_samples), (50, 50))
        self.assertEqual(val.name, 'synth:val')

    def test_partition_and_determinism(self):
        first, second = split_indices(100, 0.3, seed=11)
        again = split_indices(100, 0.3, seed=11)
        self.assertTrue(np.array_equal(first, again[0]))
        self.assertEqual(len(first), 30)
        self.assertEqual(sorted(np.concatenate([first, second]).tolist()), list(range(100)))

    def test_samples_follow_their_labels(self):
        pool = small_synth_pool(num_samples=40)
        val, _ = split_pool(pool, 0.5, seed=2)
        first, _ = split_indices(40, 0.5, seed=2)
        self.assertTrue(np.array_equal(val.labels, pool.labels[first]))
        self.assertTrue(np.array_equal(val.models[0].predictions, pool.models[0].predictions[first]))

    def test_two_samples_high_fraction(self):
        first, second = split_indices(2, 0.999, seed=0)
        self.assertEqual((len(first), len(second)), (1, 1))

    def test_empty_split_is_error(self):
        with self.assertRaises(PoolError):
            split_indices(1, 0.5, seed=0)
        with self.assertRaises(PoolError):
            split_indices(10, 1.0, seed=0)


class TestSynthPool(unittest.TestCase):
    def test_accuracy_calibration(self):
        """Each model's measured accuracy is within 2 points of its target."""
        spec = SynthPoolSpec(num_models=10, num_samples=2000, num_classes=10, accuracy_range=(60.0, 90.0), seed=1)
        pool = synth_pool(spec)
        rng = np.random.default_rng(spec.seed)
        rng.integers(0, spec.num_classes, size=spec.num_samples)
        targets = np.sort(rng.uniform(*spec.accuracy_range, size=spec.num_models))
        for index, target in enumerate(targets, start=1):
            self.assertLessEqual(abs(pool.model_accuracy(index) - target), 2.0)

    @settings(max_examples=100, deadline=None)
    @given(num_models=st.integers(1, 4), num_samples=st.integers(2000, 3000), num_classes=st.integers(2, 20),
           bounds=st.tuples(st.floats(0.0, 100.0), st.floats(0.0, 100.0)), diversity=st.floats(0.0, 1.0),
           seed=st.integers(0, 2 ** 64 - 1))
    def test_calibration_over_random_specs(self, num_models, num_samples, num_classes, bounds, diversity, seed):
        spec = SynthPoolSpec(num_models=num_models, num_samples=num_samples, num_classes=num_classes,
                             accuracy_range=tuple(sorted(bounds)), diversity=diversity, seed=seed)
        pool = synth_pool(spec)
        rng = np.random.default_rng(seed)
        rng.integers(0, num_classes, size=num_samples)
        targets = np.sort(rng.uniform(*spec.accuracy_range, size=num_models))
        for index, target in enumerate(targets, start=1):
            self.assertLessEqual(abs(pool.model_accuracy(index) - target), 2.0)

    def test_full_diversity_gives_independent_error_sets(self):
        overlaps = {}
        for diversity in (0.0, 1.0):
            spec = SynthPoolSpec(num_models=2, num_samples=5000, num_classes=10, accuracy_range=(70.0, 70.0),
                                 diversity=diversity, seed=17)
            pool = synth_pool(spec)
            wrong = [m.probabilities.argmax(axis=1) != pool.labels for m in pool.models]
            self.assertEqual([int(w.sum()) for w in wrong], [1500, 1500])
            overlaps[diversity] = int(np.count_nonzero(wrong[0] & wrong[1]))
        self.assertEqual(overlaps[0.0], 1500)
        # independent sets share about 0.3 * 0.3 * 5000 = 450 samples
        self.assertLess(abs(overlaps[1.0] - 450), 100)

    def test_deterministic(self):
        spec = SynthPoolSpec(num_models=3, num_samples=50, num_classes=4, seed=123)
        self.assertEqual(synth_pool(spec), synth_pool(spec))
        self.assertEqual(pool_digest(synth_pool(spec)), pool_digest(synth_pool(spec)))

    def test_accuracy_grows_with_cost(self):
        pool = small_synth_pool(num_models=6, num_samples=1000)
        flops = [m.flops_m for m in pool.models]
        accuracies = [pool.model_accuracy(i) for i in range(1, 7)]
        self.assertEqual(flops, sorted(flops))
        self.assertEqual(accuracies, sorted(accuracies))

    def test_zero_diversity_nests_error_sets(self):
        pool = small_synth_pool(num_models=4, num_samples=500, diversity=0.0)
        wrong = [pool.models[i].probabilities.argmax(axis=1) != pool.labels for i in range(4)]
        for weaker, stronger in zip(wrong, wrong[1:]):
            self.assertFalse(np.any(stronger & ~weaker))

    def test_invalid_specs(self):
        with self.assertRaises(PoolError):
            synth_pool(SynthPoolSpec(num_models=2, num_samples=10, num_classes=1))
        with self.assertRaises(PoolError):
            synth_pool(SynthPoolSpec(num_models=0, num_samples=10, num_classes=3))
        with self.assertRaises(PoolError):
            synth_pool(SynthPoolSpec(num_models=1, num_samples=10, num_classes=3, accuracy_range=(90.0, 60.0)))

    def test_from_dict_requires_seed(self):
        with self.assertRaises(PoolError):
            SynthPoolSpec.from_dict({'num_models': 2, 'num_samples': 10, 'num_classes': 3})

    def test_digest_changes_with_predictions(self):
        pool = two_model_pool()
        altered = ModelPool(pool.name, (ModelEntry('A', 100.0, np.array([[0.8, 0.2], [0.6, 0.4]], dtype=np.float32)),
                                        pool.models[1]), pool.labels)
        self.assertNotEqual(pool_digest(pool), pool_digest(altered))


if __name__ == '__main__':
    unittest.main()
