"""Tests for classification metrics and summary tables."""
import os
import sys
import unittest

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qpi_explain.calibration import CalibrationReport, bin_arrays
from qpi_explain.errors import DataError
from qpi_explain.inference import records_from_probs
from qpi_explain.reports import (
    TABLE1_COLUMNS, TABLE2_COLUMNS, CalibrationSummary, MetricsEntry, MetricsReport, harmonic, metrics,
    metrics_from_labels,
)


class TestMetrics(unittest.TestCase):
    """Test precision, recall, F1 and accuracy."""

    def test_binary_counts(self):
        # TP=3, FP=1, FN=1, TN=1
        entry = metrics_from_labels([1, 1, 1, 0, 1, 0], [1, 1, 1, 1, 0, 0], average="binary")
        self.assertAlmostEqual(entry.precision, 0.75)
        self.assertAlmostEqual(entry.recall, 0.75)
        self.assertAlmostEqual(entry.f1, 0.75)

    def test_perfect(self):
        entry = metrics_from_labels([0, 1, 2, 3, 3], [0, 1, 2, 3, 3])
        self.assertEqual((entry.precision, entry.recall, entry.f1, entry.accuracy), (1.0, 1.0, 1.0, 1.0))

    def test_harmonic_zero(self):
        self.assertEqual(harmonic(1.0, 0.0), 0.0)
        self.assertEqual(harmonic(0.0, 0.0), 0.0)

    def test_f1_consistent_with_macro_averages(self):
        rng = np.random.default_rng(0)
        y_true = rng.integers(0, 4, size=200)
        y_pred = np.where(rng.random(200) < 0.7, y_true, rng.integers(0, 4, size=200))
        entry = metrics_from_labels(y_true, y_pred, n_classes=4)
        self.assertAlmostEqual(entry.f1, 2 * entry.precision * entry.recall / (entry.precision + entry.recall),
                               delta=1e-9)
        self.assertAlmostEqual(entry.accuracy, float(np.mean(y_true == y_pred)))
        for value in (entry.precision, entry.recall, entry.f1, entry.accuracy):
            self.assertTrue(0.0 <= value <= 1.0)

    def test_absent_class_excluded(self):
        with self.assertLogs("qpi-explain", level="WARNING"):
            entry = metrics_from_labels([0, 1, 1, 0], [0, 1, 0, 0], n_classes=4)
        self.assertEqual(entry.excluded, [2, 3])
        self.assertAlmostEqual(entry.recall, (1.0 + 0.5) / 2)
        self.assertAlmostEqual(entry.precision, (2 / 3 + 1.0) / 2)

    def test_from_records(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        entry = metrics(records_from_probs(probs, labels=[0, 1, 1]), n_classes=2)
        self.assertAlmostEqual(entry.accuracy, 2 / 3)
        unlabeled = records_from_probs(probs)
        with self.assertRaises(DataError):
            metrics(unlabeled)

    def test_bad_inputs(self):
        with self.assertRaises(DataError):
            metrics_from_labels([0, 1], [0])
        with self.assertRaises(DataError):
            metrics_from_labels([], [])


class TestTables(unittest.TestCase):
    """Test the per-run aggregation behind the summary tables."""

    def test_metrics_report(self):
        report = MetricsReport("lenet5", "variational", dropout=0.25)
        report.add(MetricsEntry(0.8, 0.6, harmonic(0.8, 0.6), 0.7))
        report.add(MetricsEntry(1.0, 0.8, harmonic(1.0, 0.8), 0.9))
        summary = report.summary()
        self.assertAlmostEqual(summary["precision"], 0.9)
        self.assertAlmostEqual(summary["precision_std"], 0.1)
        self.assertAlmostEqual(summary["accuracy"], 0.8)
        row = report.row()
        self.assertEqual(len(row), len(TABLE1_COLUMNS))
        self.assertEqual(row[:3], ["lenet5", 0.25, "variational"])
        self.assertEqual(row[-1], 2)
        self.assertEqual(len(report.to_dict()["runs"]), 2)

    def test_calibration_summary(self):
        bins = bin_arrays([0.9], [True])
        summary = CalibrationSummary("alexnet_mini", "softmax_max")
        for before, after in ((0.2, 0.05), (0.1, 0.03)):
            summary.add(CalibrationReport(bins=bins, ece=after, mce=after * 2, temperature=1.5,
                                          source="softmax_max", ece_before=before, mce_before=before * 2))
        row = summary.row()
        self.assertEqual(len(row), len(TABLE2_COLUMNS))
        self.assertEqual(row[:2], ["alexnet_mini", "softmax_max"])
        self.assertAlmostEqual(row[2], 0.15)
        self.assertAlmostEqual(row[4], 0.04)
        self.assertEqual(row[-1], 2)


if __name__ == '__main__':
    unittest.main()
