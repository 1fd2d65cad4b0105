"""Tests for Kruskal-Wallis, Bonferroni post hoc pairs and mislabel screening."""
import os
import shutil
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.stats import chi2, kruskal

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qpi_explain.errors import DataError
from qpi_explain.inference import PredictionRecord
from qpi_explain.stats import (
    POSTHOC_COLUMNS, SUMMARY_COLUMNS, bonferroni_posthoc, chi2_sf, confidence_summary, find_mislabeled,
    kruskal_wallis, write_posthoc, write_summary,
)
from qpi_explain.tensor_io import read_csv


def rec(sample_id, label, predicted, confidence):
    probs = np.full(4, (1.0 - confidence) / 3)
    probs[predicted] = confidence
    return PredictionRecord(sample_id, probs, predicted, confidence, label=label)


class TestKruskalWallis(unittest.TestCase):
    """Test the omnibus rank test."""

    def test_ladder(self):
        result = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        self.assertAlmostEqual(result.H, 7.2, places=12)
        self.assertEqual(result.df, 2)
        self.assertAlmostEqual(result.p, np.exp(-3.6), places=12)

    def test_all_identical(self):
        result = kruskal_wallis({"a": [0.5, 0.5], "b": [0.5, 0.5, 0.5]})
        self.assertEqual((result.H, result.p), (0.0, 1.0))

    def test_equal_groups_not_rejected(self):
        result = kruskal_wallis([[1, 2, 3, 4], [1, 2, 3, 4], [1, 2, 3, 4]])
        self.assertAlmostEqual(result.H, 0.0, places=12)
        self.assertGreater(result.p, 0.05)

    def test_matches_reference_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            groups = [np.round(rng.random(int(rng.integers(2, 15))), 1) for _ in range(int(rng.integers(2, 5)))]
            if np.ptp(np.concatenate(groups)) == 0:
                continue
            ours = kruskal_wallis(groups)
            ref = kruskal(*groups)
            self.assertAlmostEqual(ours.H, ref.statistic, delta=1e-9)
            self.assertAlmostEqual(ours.p, ref.pvalue, delta=1e-9)
            self.assertTrue(0.0 <= ours.p <= 1.0)

    def test_two_groups_rank_sum(self):
        a, b = [0.3, 1.5, 2.2, 4.0], [0.1, 0.9, 3.3, 5.1, 6.0]
        ranks = {v: i + 1 for i, v in enumerate(sorted(a + b))}
        n = len(a) + len(b)
        ra, rb = sum(ranks[v] for v in a), sum(ranks[v] for v in b)
        expected = 12.0 / (n * (n + 1)) * (ra ** 2 / len(a) + rb ** 2 / len(b)) - 3 * (n + 1)
        self.assertAlmostEqual(kruskal_wallis([a, b]).H, expected, places=12)

    def test_monotone_invariance(self):
        rng = np.random.default_rng(1)
        groups = [rng.random(8), rng.random(6) + 0.2, rng.random(7)]
        self.assertEqual(kruskal_wallis(groups).H, kruskal_wallis([np.exp(3 * g) for g in groups]).H)

    def test_chi_square_tail(self):
        for df in (1, 2, 3, 5, 9):
            for x in (0.1, 0.5, 1.0, 3.0, 7.2, 15.0, 40.0):
                self.assertAlmostEqual(chi2_sf(x, df), chi2.sf(x, df), delta=1e-10)
                tail, _ = integrate.quad(lambda t: chi2.pdf(t, df), x, np.inf, epsabs=1e-12)
                self.assertAlmostEqual(chi2_sf(x, df), tail, delta=1e-8)
        self.assertEqual(chi2_sf(0.0, 3), 1.0)

    def test_group_errors(self):
        with self.assertRaises(DataError):
            kruskal_wallis([[1, 2, 3]])
        with self.assertRaises(DataError):
            kruskal_wallis({"a": [1, 2], "b": []})


class TestPosthoc(unittest.TestCase):
    """Test Bonferroni-corrected pairwise comparisons."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        rng = np.random.default_rng(2)
        self.separated = {
            "leukocytes": 0.9 + 0.01 * rng.standard_normal(50),
            "noise": 0.1 + 0.01 * rng.standard_normal(50),
            "defocused": 0.5 + 0.01 * rng.standard_normal(50),
        }

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_pairs_and_threshold(self):
        result = bonferroni_posthoc(self.separated, alpha=0.05)
        self.assertEqual(len(result.rows), 3)
        self.assertEqual([(r.group_a, r.group_b) for r in result.rows],
                         [("leukocytes", "noise"), ("leukocytes", "defocused"), ("noise", "defocused")])
        self.assertTrue(all(r.adjusted_alpha == 0.05 / 3 for r in result.rows))
        self.assertTrue(all(r.significant for r in result.rows))
        self.assertFalse(result.gated)

    def test_identical_groups_not_significant(self):
        same = {"a": [0.2, 0.4, 0.6], "b": [0.2, 0.4, 0.6], "c": [0.6, 0.4, 0.2]}
        result = bonferroni_posthoc(same)
        self.assertTrue(result.gated)
        self.assertFalse(any(r.significant for r in result.rows))

    def test_gate_can_be_disabled(self):
        groups = {"a": np.arange(5.0), "b": np.arange(5.0) + 0.5, "c": np.arange(50.0, 55.0)}
        ungated = bonferroni_posthoc(groups, gate=False)
        self.assertFalse(ungated.gated)
        self.assertEqual(len(ungated.rows), 3)

    def test_write_tables(self):
        path = Path(self.temp_dir) / "posthoc.csv"
        write_posthoc(path, bonferroni_posthoc(self.separated))
        rows = read_csv(path)
        self.assertEqual(list(rows[0].keys()), POSTHOC_COLUMNS)
        self.assertEqual(rows[0]["significant"], "1")

        summary_path = Path(self.temp_dir) / "confidence.csv"
        write_summary(summary_path, confidence_summary(self.separated))
        self.assertEqual(list(read_csv(summary_path)[0].keys()), SUMMARY_COLUMNS)

    def test_confidence_summary(self):
        name, n, mean, std, se = confidence_summary({"g": [1.0, 2.0, 3.0]})[0]
        self.assertEqual((name, n), ("g", 3))
        self.assertAlmostEqual(mean, 2.0)
        self.assertAlmostEqual(std, 1.0)
        self.assertAlmostEqual(se, 1.0 / np.sqrt(3))
        self.assertEqual(confidence_summary({"one": [0.7]})[0][3], 0.0)


class TestMislabels(unittest.TestCase):
    """Test find_mislabeled()."""

    def test_all_correct(self):
        self.assertEqual(find_mislabeled([rec(0, 1, 1, 0.99), rec(1, 2, 2, 0.97)]), [])

    def test_single_confident_error(self):
        suspects = find_mislabeled([rec(0, 1, 1, 0.99), rec(1, 2, 3, 0.97), rec(2, 0, 1, 0.6)])
        self.assertEqual([r.sample_id for r in suspects], [1])

    def test_threshold_is_inclusive(self):
        self.assertEqual(len(find_mislabeled([rec(0, 0, 1, 0.95)], threshold=0.95)), 1)

    def test_order_is_stable(self):
        records = [rec(4, 0, 1, 0.97), rec(2, 0, 2, 0.99), rec(1, 1, 0, 0.97), rec(3, 3, 3, 0.99)]
        expected = [2, 1, 4]
        self.assertEqual([r.sample_id for r in find_mislabeled(records)], expected)
        self.assertEqual([r.sample_id for r in find_mislabeled(records[::-1])], expected)

    def test_requires_labels(self):
        r = rec(0, 0, 1, 0.99)
        r.label = None
        with self.assertRaises(DataError):
            find_mislabeled([r])


if __name__ == '__main__':
    unittest.main()
