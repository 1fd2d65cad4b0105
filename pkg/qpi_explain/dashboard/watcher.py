"""
Polling watcher for live dashboard updates
"""
import asyncio
from pathlib import Path
from typing import Callable, Dict, Set

# Only files the dashboard renders
WATCHED_SUFFIXES = {'.json', '.csv'}


class RunsWatcher:
    """
    Watch a runs directory for new or changed reports.
    Uses polling for cross-platform compatibility.
    """

    def __init__(self, runs_dir: str, on_change: Callable, poll_interval: float = 2.0):
        self.runs_dir = Path(runs_dir)
        self.on_change = on_change
        self.poll_interval = poll_interval
        self._running = False
        self._last_mtimes: Dict[str, float] = {}

    def _get_file_mtimes(self) -> Dict[str, float]:
        mtimes = {}
        if not self.runs_dir.exists():
            return mtimes
        for file_path in self.runs_dir.glob('**/*'):
            if file_path.suffix in WATCHED_SUFFIXES and file_path.is_file():
                try:
                    mtimes[str(file_path)] = file_path.stat().st_mtime
                except OSError:
                    pass
        return mtimes

    def detect_changes(self) -> Set[str]:
        """Paths added, modified or removed since the last poll"""
        current = self._get_file_mtimes()
        changed = {p for p, m in current.items() if self._last_mtimes.get(p) != m}
        changed |= set(self._last_mtimes) - set(current)
        self._last_mtimes = current
        return changed

    async def start(self):
        self._running = True
        self._last_mtimes = self._get_file_mtimes()
        while self._running:
            await asyncio.sleep(self.poll_interval)
            changed = self.detect_changes()
            if changed:
                await self.on_change(changed)

    def stop(self):
        self._running = False
