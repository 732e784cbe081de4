import json
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_eval import CascadeGenome, CascadeMetrics, ThresholdGrid
from pareto_tools import (
    FrontEntry, HypervolumeConfig, ObjectivePoint, dominates, filter_front, front_to_csv, hypervolume,
    hypervolume_contributions, max_accuracy_point, median_run, nondominated_front, read_front,
    representative_subset, round_half_up, write_front, write_front_csv,
)

try:
    from pymoo.indicators.hv import HV
except ImportError:
    HV = None

GENOME = CascadeGenome((1,), ())


def entry(mflops, accuracy, name=None):
    metrics = CascadeMetrics(accuracy_pct=float(accuracy), expected_mflops=float(mflops), stage_fractions=(1.0,))
    return FrontEntry.from_metrics(GENOME, metrics, name)


def points(entries):
    return [(e.point.mflops, e.point.accuracy_pct) for e in entries]


class TestDominance(unittest.TestCase):
    def test_examples(self):
        self.assertTrue(dominates((100, 90), (200, 80)))
        self.assertFalse(dominates((100, 90), (100, 90)))
        self.assertFalse(dominates((100, 80), (200, 90)))
        self.assertTrue(dominates(ObjectivePoint(100, 90), ObjectivePoint(100, 80)))

    def test_nondominated_front(self):
        front = nondominated_front([entry(100, 90), entry(200, 80), entry(150, 95)])
        self.assertEqual(points(front), [(100, 90), (150, 95)])

    def test_singleton_and_duplicates(self):
        self.assertEqual(points(nondominated_front([entry(5, 50)])), [(5, 50)])
        first = entry(10, 70, 'first')
        front = nondominated_front([first, entry(10, 70, 'second'), entry(10, 70, 'third')])
        self.assertEqual(len(front), 1)
        self.assertIs(front[0], first)

    def test_rejected_entries_excluded(self):
        front = nondominated_front([FrontEntry.rejected(CascadeGenome((0,), ())), entry(10, 50)])
        self.assertEqual(points(front), [(10, 50)])


class TestFilterFront(unittest.TestCase):
    def test_filter_trace(self):
        """96.21 rounds to 96.2, which does not beat the kept 96.19 -> 96.2."""
        front = [entry(100 + i, a) for i, a in enumerate([96.19, 96.21, 96.34, 98.23])]
        self.assertEqual([e.point.accuracy_pct for e in filter_front(front)], [96.19, 96.34, 98.23])

    def test_single_and_all_equal(self):
        self.assertEqual(len(filter_front([entry(1, 50)])), 1)
        kept = filter_front([entry(1, 50.01), entry(2, 50.02), entry(3, 50.04)])
        self.assertEqual(points(kept), [(1, 50.01)])

    def test_round_half_up(self):
        self.assertEqual(round_half_up(96.25), 96.3)
        self.assertEqual(round_half_up(96.35), 96.4)
        self.assertEqual(round_half_up(185.5, 0), 186.0)


class TestHypervolume(unittest.TestCase):
    def test_unit_values(self):
        self.assertAlmostEqual(hypervolume([(2000, 80)]), 0.25, delta=1e-12)
        self.assertEqual(hypervolume([(4000, 60)]), 0.0)
        self.assertAlmostEqual(hypervolume([(1000, 70), (3000, 90)]), 0.3125, delta=1e-12)

    def test_clipping_and_empty(self):
        self.assertEqual(hypervolume([]), 0.0)
        self.assertEqual(hypervolume([(5000, 95)]), 0.0)
        self.assertEqual(hypervolume([(3000, 50)]), 0.0)
        self.assertEqual(hypervolume([(0, 100)]), 1.0)

    def test_custom_reference(self):
        cfg = HypervolumeConfig(ref_mflops=1000, ref_accuracy=0)
        self.assertAlmostEqual(hypervolume([(500, 50)], cfg), 0.25, delta=1e-12)
        with self.assertRaises(ValueError):
            HypervolumeConfig(ref_mflops=0)

    def test_contributions(self):
        contributions = hypervolume_contributions([entry(1000, 70), entry(3000, 90)])
        self.assertEqual(contributions.tolist(), [2000.0 * 10, 1000.0 * 20])

    def test_order_and_duplicate_invariance(self):
        rng = np.random.default_rng(3)
        front = [(float(m), float(a)) for m, a in zip(rng.uniform(0, 5000, 50), rng.uniform(50, 100, 50))]
        reference = hypervolume(front)
        for _ in range(10):
            shuffled = [front[i] for i in rng.permutation(len(front))]
            self.assertEqual(hypervolume(shuffled + shuffled[:5]), reference)

    def test_monotone_under_insertions(self):
        """10,000 random insertions: never decreases, dominated points change nothing."""
        rng = np.random.default_rng(11)
        front = []
        previous = 0.0
        for m, a in zip(rng.uniform(0, 4500, 10_000), rng.uniform(55, 100, 10_000)):
            candidate = entry(m, a)
            dominated = any(dominates(e, candidate) or points([e]) == points([candidate]) for e in front)
            front = nondominated_front(front + [candidate])
            value = hypervolume(front)
            if dominated:
                self.assertEqual(value, previous)
            self.assertGreaterEqual(value, previous - 1e-12)
            previous = value

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 4000), st.floats(60, 100)), min_size=1, max_size=30))
    def test_bounded(self, front):
        self.assertGreaterEqual(hypervolume(front), 0.0)
        self.assertLessEqual(hypervolume(front), 1.0)

    @unittest.skipIf(HV is None, "pymoo not installed")
    def test_matches_pymoo(self):
        rng = np.random.default_rng(5)
        cfg = HypervolumeConfig()
        for _ in range(20):
            count = int(rng.integers(1, 25))
            front = np.column_stack([rng.uniform(1, 3999, count), rng.uniform(61, 99, count)])
            expected = HV(ref_point=np.array([cfg.ref_mflops, -cfg.ref_accuracy]))(
                np.column_stack([front[:, 0], -front[:, 1]]))
            self.assertAlmostEqual(hypervolume([tuple(p) for p in front], cfg) * cfg.max_volume, expected,
                                   delta=1e-6 * cfg.max_volume)


class TestRepresentativeSubset(unittest.TestCase):
    def test_each_entry_nearest_its_multiple(self):
        front = [entry(100, 90), entry(186, 93), entry(276, 95), entry(439, 96)]
        names = [name for name, _ in representative_subset(front)]
        self.assertEqual(names, ['ENCAS@100', 'ENCAS@186', 'ENCAS@276', 'ENCAS@439'])

    def test_single_entry(self):
        named = representative_subset([entry(1234.4, 80)])
        self.assertEqual([name for name, _ in named], ['ENCAS@1234'])
        self.assertEqual(named[0][1].name, 'ENCAS@1234')

    def test_tie_goes_to_cheaper(self):
        named = representative_subset([entry(50, 80), entry(150, 85)])
        self.assertEqual([name for name, _ in named], ['ENCAS@50', 'ENCAS@150'])
        named = representative_subset([entry(50, 80), entry(150, 85), entry(400, 90)])
        self.assertEqual(named[0][1].point.mflops, 50)

    def test_empty_front(self):
        with self.assertRaises(ValueError):
            representative_subset([])


class TestRunSummaries(unittest.TestCase):
    def test_max_accuracy_point(self):
        front = [entry(300, 90), entry(100, 85), entry(200, 90), FrontEntry.rejected(GENOME)]
        self.assertEqual(max_accuracy_point(front), ObjectivePoint(200.0, 90.0))
        self.assertIsNone(max_accuracy_point([]))
        self.assertIsNone(max_accuracy_point([FrontEntry.rejected(GENOME)]))

    def test_median_run(self):
        self.assertEqual(median_run([0.3, 0.1, 0.2]), 2)
        self.assertEqual(median_run([0.4, 0.1, 0.3, 0.2]), 3)
        self.assertEqual(median_run([0.5, 0.5, 0.5]), 1)
        self.assertEqual(median_run([0.7]), 0)
        with self.assertRaises(ValueError):
            median_run([])


class TestFrontFiles(unittest.TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.grid = ThresholdGrid.default()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_write_and_read(self):
        metrics = CascadeMetrics(accuracy_pct=91.5, expected_mflops=250.0, stage_fractions=(1.0, 0.5))
        original = FrontEntry.from_metrics(CascadeGenome((1, 2), (35,)), metrics, 'ENCAS@250')
        path = write_front(self.tmp / 'front.json', [original], self.grid)
        data = json.loads(path.read_text())
        self.assertEqual(data[0]['thresholds'], [0.7])
        self.assertEqual(data[0]['stage_fractions'], [1.0, 0.5])
        loaded = read_front(path, self.grid)[0]
        self.assertEqual(loaded.genome, original.genome)
        self.assertEqual(loaded.point, original.point)
        self.assertEqual(loaded.name, 'ENCAS@250')

    def test_malformed_front_file(self):
        path = self.tmp / 'bad.json'
        path.write_text('{"not": "a list"}')
        with self.assertRaises(ValueError):
            read_front(path)
        path.write_text('[{"models": [1]}]')
        with self.assertRaises(ValueError):
            read_front(path)

    def test_csv_export(self):
        text = front_to_csv([entry(100, 90.5, 'ENCAS@100'), entry(200, 92)])
        self.assertEqual(text.splitlines(), ['name,mflops,accuracy_pct', 'ENCAS@100,100.0,90.5', ',200.0,92.0'])
        path = write_front_csv(self.tmp / 'front.csv', [entry(100, 90.5)])
        self.assertTrue(path.read_text().startswith('name,mflops,accuracy_pct'))


if __name__ == '__main__':
    unittest.main()
