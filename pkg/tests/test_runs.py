"""Tests for run ids, run directories, the run lock and the run registry."""
import json
import os
import shutil
import sys
import tempfile
import unittest
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timedelta
from pathlib import Path
from unittest.mock import patch

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from qpi_explain.config import RunConfig
from qpi_explain.errors import DataError
from qpi_explain.runs import (
    LOCK_NAME, RunDir, RunInfo, RunLock, RunRegistry, get_run_registry, repeat_seed, run_id,
)
from qpi_explain.tensor_io import read_json


class TestRunDir(unittest.TestCase):
    """Test run ids and the run directory layout."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_run_id_deterministic(self):
        a = run_id(RunConfig(name="exp", seed=4))
        self.assertEqual(a, run_id(RunConfig(name="exp", seed=4)))
        self.assertTrue(a.startswith("exp-s4-"))
        self.assertNotEqual(a, run_id(RunConfig(name="exp", seed=5)))
        self.assertNotEqual(a, run_id(RunConfig(name="exp", seed=4, passes=50)))

    def test_run_id_ignores_runs_dir(self):
        self.assertEqual(run_id(RunConfig(runs_dir="/a")), run_id(RunConfig(runs_dir="/b")))

    def test_layout(self):
        config = RunConfig(seed=2, repeat=3, runs_dir=self.temp_dir)
        run = RunDir.for_config(config)
        self.assertEqual(run.path, Path(self.temp_dir) / run_id(config))
        self.assertEqual(run.model_path("lenet5", 2), run.path / "models" / "lenet5-r2.qpic")
        sub = run.sub("reports", "table1.csv")
        self.assertTrue(sub.parent.is_dir())
        explicit = RunDir.for_config(config, str(Path(self.temp_dir) / "mine"))
        self.assertEqual(explicit.run_id, "mine")

    def test_snapshot(self):
        config = RunConfig(seed=2, repeat=3, runs_dir=self.temp_dir)
        run = RunDir.for_config(config)
        run.write_snapshot()
        self.assertEqual(RunConfig.model_validate(read_json(run.path / "config.json")), config)
        self.assertEqual(read_json(run.path / "seeds.json")["repeat_seeds"], [2000, 2001, 2002])
        self.assertEqual(repeat_seed(7, 14), 7014)


class TestRunLock(unittest.TestCase):
    """Test the per-run lock."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def write_lock(self, pid, expires):
        with open(Path(self.temp_dir) / LOCK_NAME, "w") as f:
            json.dump({"pid": pid, "command": "train", "expires": expires.isoformat()}, f)

    def test_context_manager(self):
        lock_file = Path(self.temp_dir) / LOCK_NAME
        with RunLock(Path(self.temp_dir), "synth"):
            with open(lock_file) as f:
                data = json.load(f)
            self.assertEqual((data["pid"], data["command"]), (os.getpid(), "synth"))
        self.assertFalse(lock_file.exists())

    def test_held_by_other_process(self):
        self.write_lock(os.getpid() + 1, datetime.now() + timedelta(hours=1))
        with self.assertRaises(DataError) as ctx:
            RunLock(Path(self.temp_dir), "evaluate").acquire()
        self.assertIn("train", ctx.exception.message)
        self.assertIn(LOCK_NAME, ctx.exception.hint)

    def test_expired_lock_taken_over(self):
        self.write_lock(os.getpid() + 1, datetime.now() - timedelta(seconds=1))
        lock = RunLock(Path(self.temp_dir), "evaluate")
        lock.acquire()
        self.assertEqual(read_json(lock.path)["command"], "evaluate")
        lock.release()

    def test_own_lock_reentered(self):
        self.write_lock(os.getpid(), datetime.now() + timedelta(hours=1))
        with RunLock(Path(self.temp_dir), "calibrate") as lock:
            self.assertEqual(read_json(lock.path)["command"], "calibrate")

    def test_corrupt_lock_ignored(self):
        (Path(self.temp_dir) / LOCK_NAME).write_text("{not json")
        with RunLock(Path(self.temp_dir), "ood"):
            pass

    def test_second_acquirer_is_refused(self):
        first = RunLock(Path(self.temp_dir), "train")
        first.acquire()
        with patch("qpi_explain.runs.os.getpid", return_value=os.getpid() + 1):
            with self.assertRaises(DataError):
                RunLock(Path(self.temp_dir), "evaluate").acquire()
        self.assertEqual(read_json(first.path)["token"], first.token)
        first.release()
        self.assertFalse(first.path.exists())

    def test_only_one_concurrent_create_wins(self):
        locks = [RunLock(Path(self.temp_dir), f"cmd{i}") for i in range(8)]
        with ThreadPoolExecutor(max_workers=8) as pool:
            won = list(pool.map(lambda lock: lock._create(), locks))
        self.assertEqual(sum(won), 1)
        winner = locks[won.index(True)]
        self.assertEqual(read_json(winner.path)["command"], winner.command)

    def test_release_keeps_a_lock_taken_over_by_another_process(self):
        lock = RunLock(Path(self.temp_dir), "train")
        lock.acquire()
        other = {"pid": os.getpid() + 1, "token": "other", "command": "ood",
                 "expires": (datetime.now() + timedelta(hours=1)).isoformat()}
        lock.path.write_text(json.dumps(other))
        lock.release()
        self.assertEqual(read_json(lock.path)["token"], "other")

    def test_release_without_acquire_is_a_no_op(self):
        self.write_lock(os.getpid() + 1, datetime.now() + timedelta(hours=1))
        RunLock(Path(self.temp_dir), "ood").release()
        self.assertTrue((Path(self.temp_dir) / LOCK_NAME).exists())

    def test_stale_takeover_leaves_no_side_files(self):
        self.write_lock(os.getpid() + 1, datetime.now() - timedelta(seconds=1))
        with RunLock(Path(self.temp_dir), "evaluate"):
            pass
        self.assertEqual(os.listdir(self.temp_dir), [])


class TestRunRegistry(unittest.TestCase):
    """Test the runs/index.json registry."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.registry = RunRegistry(self.temp_dir)

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def info(self, rid="qpi-s0-abc"):
        return RunInfo(rid, str(Path(self.temp_dir) / rid), "qpi", 0)

    def test_record_and_get(self):
        self.registry.record(self.info(), "synth", "done", ["corpus/patches.qpit"])
        got = self.registry.get("qpi-s0-abc")
        self.assertEqual((got.status, got.last_command), ("done", "synth"))
        self.assertEqual(got.artifacts, ["corpus/patches.qpit"])
        self.assertIsNone(self.registry.get("missing"))

    def test_artifacts_accumulate(self):
        self.registry.record(self.info(), "synth", "done", ["b.csv"])
        self.registry.record(self.info(), "train", "running")
        self.registry.record(self.info(), "train", "done", ["a.qpic"])
        got = self.registry.get("qpi-s0-abc")
        self.assertEqual(got.artifacts, ["a.qpic", "b.csv"])
        self.assertEqual((got.status, got.last_command), ("done", "train"))

    def test_all_newest_first(self):
        with patch("qpi_explain.runs.time") as clock:
            clock.time.side_effect = [1.0, 2.0]
            self.registry.record(self.info("old"), "synth", "done")
            self.registry.record(self.info("new"), "synth", "failed")
        self.assertEqual([r.run_id for r in self.registry.all()], ["new", "old"])

    def test_remove(self):
        self.registry.record(self.info(), "synth", "done")
        self.assertTrue(self.registry.remove("qpi-s0-abc"))
        self.assertFalse(self.registry.remove("qpi-s0-abc"))
        self.assertEqual(self.registry.all(), [])

    def test_corrupt_index(self):
        (Path(self.temp_dir) / "index.json").write_text("[[[")
        self.assertEqual(self.registry.all(), [])

    def test_one_registry_per_directory(self):
        self.assertIs(get_run_registry(self.temp_dir), get_run_registry(self.temp_dir + "/"))
        other = tempfile.mkdtemp()
        try:
            self.assertIsNot(get_run_registry(self.temp_dir), get_run_registry(other))
        finally:
            shutil.rmtree(other, ignore_errors=True)


if __name__ == '__main__':
    unittest.main()
