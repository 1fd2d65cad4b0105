"""
Run directories, the per-run lock and the run registry (runs/index.json).
"""
import hashlib
import json
import logging
import os
import time
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import RunConfig
from .errors import DataError
from .tensor_io import write_json

logger = logging.getLogger("qpi-explain")

LOCK_NAME = ".lock"
LOCK_TTL = 6 * 3600  # seconds
LOCK_ATTEMPTS = 5
INDEX_NAME = "index.json"


def run_id(config: RunConfig) -> str:
    """Deterministic id: name, seed and a digest of the config (minus where runs live)."""
    snap = config.snapshot()
    snap.pop("runs_dir", None)
    digest = hashlib.sha256(json.dumps(snap, sort_keys=True).encode("utf-8")).hexdigest()[:10]
    return f"{config.name}-s{config.seed}-{digest}"


class RunDir:
    """Layout of ``runs/<id>/``."""

    def __init__(self, path: Path, config: RunConfig):
        self.path = Path(path)
        self.config = config
        self.run_id = self.path.name

    @classmethod
    def for_config(cls, config: RunConfig, out: Optional[str] = None) -> "RunDir":
        path = Path(out) if out else Path(config.runs_dir) / run_id(config)
        return cls(path, config)

    def sub(self, *parts: str) -> Path:
        p = self.path.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def corpus(self) -> Path:
        return self.path / "corpus"

    def model_path(self, arch: str, repeat: int = 0) -> Path:
        return self.path / "models" / f"{arch}-r{repeat}.qpic"

    def write_snapshot(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        write_json(self.path / "config.json", self.config.snapshot())
        write_json(self.path / "seeds.json", {
            "seed": self.config.seed,
            "repeat_seeds": [repeat_seed(self.config.seed, r) for r in range(self.config.repeat)],
        })


def repeat_seed(seed: int, repeat: int) -> int:
    """Seed of one independent (init, split) repetition."""
    return int(seed) * 1000 + int(repeat)


# ============================================================================
# LOCK
# ============================================================================

class RunLock:
    """Exclusive lock on a run directory held for one subcommand.

    The lock file is created with ``O_CREAT | O_EXCL`` and carries a random
    token. An expired or unreadable lock, or one left by this process, is
    moved aside and taken over; ``release`` only removes a lock whose token
    is still ours.
    """

    def __init__(self, run_dir: Path, command: str, ttl: int = LOCK_TTL):
        self.path = Path(run_dir) / LOCK_NAME
        self.command = command
        self.ttl = ttl
        self.token: Optional[str] = None

    def _read(self, path: Optional[Path] = None) -> Optional[Dict[str, Any]]:
        try:
            with open(path or self.path, encoding="utf-8") as f:
                data = json.load(f)
            return data if isinstance(data, dict) else {}
        except FileNotFoundError:
            return None
        except (json.JSONDecodeError, OSError, UnicodeDecodeError):
            return {}

    def _live(self, holder: Dict[str, Any]) -> bool:
        try:
            return datetime.fromisoformat(holder["expires"]) > datetime.now()
        except (KeyError, TypeError, ValueError):
            return False

    def _create(self) -> bool:
        try:
            fd = os.open(str(self.path), os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            return False
        token = uuid.uuid4().hex
        record = {
            "pid": os.getpid(),
            "token": token,
            "command": self.command,
            "expires": (datetime.now() + timedelta(seconds=self.ttl)).isoformat(),
        }
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(record, f)
        self.token = token
        return True

    def _take_over(self, stale: Dict[str, Any]) -> None:
        """Move a stale lock aside; puts it back if another process replaced it meanwhile."""
        aside = self.path.with_name(f"{LOCK_NAME}.{uuid.uuid4().hex}.stale")
        try:
            os.rename(self.path, aside)
        except FileNotFoundError:
            return
        moved = self._read(aside) or {}
        if moved.get("token") != stale.get("token") or moved.get("expires") != stale.get("expires"):
            try:
                os.link(aside, self.path)
            except OSError:
                pass
        try:
            os.unlink(aside)
        except OSError:
            pass

    def acquire(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        for _ in range(LOCK_ATTEMPTS):
            if self._create():
                return
            holder = self._read()
            if holder is None:
                continue
            if self._live(holder) and holder.get("pid") != os.getpid():
                raise DataError(
                    f"run directory is locked by '{holder.get('command')}' (pid {holder.get('pid')})",
                    hint=f"Wait for it to finish or delete {self.path} if that process is gone.",
                )
            logger.warning(f"taking over stale lock {self.path} (pid {holder.get('pid')})")
            self._take_over(holder)
        raise DataError(f"could not acquire {self.path} after {LOCK_ATTEMPTS} attempts",
                        hint="Another process keeps replacing the lock; retry later.")

    def release(self) -> None:
        if self.token is None:
            return
        holder = self._read()
        if holder and holder.get("token") == self.token:
            try:
                self.path.unlink()
            except FileNotFoundError:
                pass
        elif holder is not None:
            logger.warning(f"{self.path} is now held by pid {holder.get('pid')}; leaving it in place")
        self.token = None

    def __enter__(self) -> "RunLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


# ============================================================================
# REGISTRY
# ============================================================================

@dataclass
class RunInfo:
    """One run directory as seen by the registry."""
    run_id: str
    path: str
    name: str
    seed: int
    status: str = "created"
    last_command: Optional[str] = None
    artifacts: List[str] = field(default_factory=list)
    updated_at: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunInfo":
        return cls(**data)


class RunRegistry:
    """Registry of runs, stored in <runs_dir>/index.json."""

    def __init__(self, runs_dir: Optional[str] = None):
        self.runs_dir = Path(runs_dir or os.path.join(os.getcwd(), "runs"))
        self.index_file = self.runs_dir / INDEX_NAME

    def _load(self) -> Dict[str, dict]:
        if not self.index_file.exists():
            return {}
        try:
            with open(self.index_file, "r", encoding="utf-8") as f:
                return json.load(f)
        except (json.JSONDecodeError, IOError):
            return {}

    def _save(self, runs: Dict[str, dict]) -> None:
        write_json(self.index_file, runs)

    def record(self, info: RunInfo, command: str, status: str, artifacts: Optional[List[str]] = None) -> RunInfo:
        runs = self._load()
        known = runs.get(info.run_id)
        if known:
            info.artifacts = sorted(set(known.get("artifacts", [])) | set(info.artifacts))
        info.last_command = command
        info.status = status
        if artifacts:
            info.artifacts = sorted(set(info.artifacts) | set(artifacts))
        info.updated_at = time.time()
        runs[info.run_id] = info.to_dict()
        self._save(runs)
        return info

    def get(self, run_id: str) -> Optional[RunInfo]:
        runs = self._load()
        return RunInfo.from_dict(runs[run_id]) if run_id in runs else None

    def all(self) -> List[RunInfo]:
        return sorted((RunInfo.from_dict(r) for r in self._load().values()), key=lambda r: r.updated_at,
                      reverse=True)

    def remove(self, run_id: str) -> bool:
        runs = self._load()
        if run_id in runs:
            del runs[run_id]
            self._save(runs)
            return True
        return False


_registries: Dict[str, RunRegistry] = {}


def get_run_registry(runs_dir: Optional[str] = None) -> RunRegistry:
    """Get the registry for ``runs_dir`` (one instance per directory)."""
    key = str(Path(runs_dir or os.path.join(os.getcwd(), "runs")).resolve())
    if key not in _registries:
        _registries[key] = RunRegistry(key)
    return _registries[key]
