"""Tests for the dashboard's report rendering and the runs watcher."""
import os
import shutil
import sys
import tempfile
import time
import unittest
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qpi_explain.dashboard.app import calibration_lines, format_csv, mislabel_lines, ood_lines, run_summary
from qpi_explain.dashboard.watcher import RunsWatcher
from qpi_explain.tensor_io import write_csv, write_json


class TestReportRendering(unittest.TestCase):
    """Test the plain-text panels."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.run = Path(self.temp_dir) / "qpi-s0-abc"

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_format_csv(self):
        path = self.run / "reports" / "table1.csv"
        write_csv(path, ["model", "f1", "runs"], [["lenet5", 0.91234, 15], ["alexnet_mini", 0.95, 15]])
        lines = format_csv(path).splitlines()
        self.assertEqual(lines[0].split(), ["model", "f1", "runs"])
        self.assertEqual(lines[1].split(), ["lenet5", "0.912", "15"])
        self.assertEqual(len(lines), 3)
        self.assertIn("1 more rows", format_csv(path, max_rows=1))
        self.assertEqual(format_csv(path, columns=["runs"]).splitlines()[1].strip(), "15")

    def test_missing_files(self):
        self.assertEqual(format_csv(self.run / "nope.csv"), "(no nope.csv yet)")
        self.assertEqual(calibration_lines(self.run), ["No calibration reports"])
        self.assertEqual(ood_lines(self.run), ["No OOD statistics"])
        self.assertEqual(mislabel_lines(self.run), ["No mislabel screening"])

    def test_run_summary(self):
        write_json(self.run / "calibration" / "lenet5-r0-softmax_max.json",
                   {"ece_before": 0.12, "ece": 0.03, "mce_before": 0.3, "mce": 0.1, "temperature": 1.8})
        write_json(self.run / "ood" / "kruskal.json", {"H": 42.0, "p": 1e-6, "df": 5})
        write_json(self.run / "mislabels" / "summary.json",
                   {"suspects": [3, 9], "threshold": 0.95, "recall": 0.75})
        summary = run_summary(self.run)
        self.assertEqual(set(summary), {"table1", "table2", "calibration", "ood", "mislabels", "lock"})
        self.assertIn("ECE 0.120 -> 0.030", summary["calibration"])
        self.assertIn("T=1.80", summary["calibration"])
        self.assertIn("H=42.00", summary["ood"])
        self.assertIn("2 suspects at >= 0.95", summary["mislabels"])
        self.assertIn("75%", summary["mislabels"])
        self.assertEqual(summary["lock"], "")


class TestRunsWatcher(unittest.TestCase):
    """Test change detection."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_detect_changes(self):
        watcher = RunsWatcher(self.temp_dir, on_change=None)
        self.assertEqual(watcher.detect_changes(), set())
        report = Path(self.temp_dir) / "run" / "reports" / "table1.csv"
        report.parent.mkdir(parents=True)
        report.write_text("a\n")
        (Path(self.temp_dir) / "run" / "model.qpic").write_bytes(b"x")
        self.assertEqual(watcher.detect_changes(), {str(report)})
        self.assertEqual(watcher.detect_changes(), set())
        os.utime(report, (time.time() + 5, time.time() + 5))
        self.assertEqual(watcher.detect_changes(), {str(report)})
        report.unlink()
        self.assertEqual(watcher.detect_changes(), {str(report)})

    def test_missing_directory(self):
        watcher = RunsWatcher(str(Path(self.temp_dir) / "absent"), on_change=None)
        self.assertEqual(watcher.detect_changes(), set())


if __name__ == '__main__':
    unittest.main()
