"""
Run directory bookkeeping: PID lock, run manifest and artifact list.
"""

import enum
import errno
import logging
import os
from datetime import datetime, timezone
from pathlib import Path

from . import config
from .errors import IoError, ProgSegError, RunExists
from .fileio import read_json, write_json_atomic

logger = logging.getLogger(__name__)


class RunStatus(str, enum.Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


# --- Internal Helper Functions ---

def _read_pid_file(pid_file: Path):
    """Reads a PID from a lock file; None when missing or unreadable."""
    if not pid_file.is_file():
        return None
    try:
        pid_str = pid_file.read_text(encoding="utf-8").strip()
        pid = int(pid_str) if pid_str else 0
        return pid if pid > 0 else None
    except (ValueError, OSError) as e:
        logger.warning(f"Error reading lock file {pid_file}: {e}")
        return None


def _check_pid_running(pid) -> bool:
    """Checks if a process with the given PID exists using signal 0."""
    if pid is None or pid <= 0:
        return False
    try:
        os.kill(pid, 0)
        return True
    except OSError as err:
        return err.errno == errno.EPERM


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def read_run_manifest(run_dir):
    """Returns the run manifest dict, or None when the directory holds no run."""
    path = Path(run_dir) / config.RUN_MANIFEST_NAME
    if not path.is_file():
        return None
    try:
        manifest = read_json(path)
    except (IoError, ValueError) as e:
        logger.warning(f"Ignoring unreadable run manifest {path}: {e}")
        return None
    manifest.setdefault("status", RunStatus.FAILED.value)
    manifest.setdefault("artifacts", [])
    return manifest


def find_runs(roots) -> list:
    """Completed run directories under `roots` (each root may itself be a run), sorted by path."""
    found = set()
    for root in roots:
        root = Path(root)
        if not root.is_dir():
            continue
        candidates = [root] + [p.parent for p in root.rglob(config.RUN_MANIFEST_NAME)]
        for run_dir in candidates:
            manifest = read_run_manifest(run_dir)
            if manifest and manifest["status"] == RunStatus.COMPLETED.value:
                found.add(run_dir.resolve())
    return sorted(found)


class RunTracker:
    """
    Owns one run directory for the duration of a pipeline run.

    A completed run is never overwritten unless `force` is set. A lock held by a live
    process raises RunExists; a lock left by a dead process is removed with a warning.
    """

    def __init__(self, run_dir, config_hash: str = "", force: bool = False):
        self.run_dir = Path(run_dir)
        self.config_hash = config_hash
        self.force = force
        self.lock_path = self.run_dir / config.RUN_LOCK_NAME
        self.manifest_path = self.run_dir / config.RUN_MANIFEST_NAME
        self.manifest = {}

    # --- Lifecycle ---

    def start(self):
        if not config.ensure_dir(self.run_dir):
            raise IoError(f"Cannot create run directory {self.run_dir}", path=self.run_dir)
        pid = _read_pid_file(self.lock_path)
        if pid is not None and pid != os.getpid():
            if _check_pid_running(pid):
                raise RunExists(f"Run directory {self.run_dir} is locked by running process {pid}", pid=pid)
            logger.warning(f"Removing stale lock of dead process {pid} in {self.run_dir}")
            self.lock_path.unlink(missing_ok=True)

        previous = read_run_manifest(self.run_dir)
        if previous and previous["status"] == RunStatus.COMPLETED.value:
            if not self.force:
                raise RunExists(f"{self.run_dir} already holds a completed run (use --force to overwrite)",
                                run_dir=self.run_dir)
            logger.warning(f"Overwriting completed run in {self.run_dir}")
        error_path = self.run_dir / config.RUN_ERROR_NAME
        if error_path.exists():
            error_path.unlink()

        self.lock_path.write_text(f"{os.getpid()}\n", encoding="utf-8")
        self.manifest = {
            "status": RunStatus.RUNNING.value,
            "config_hash": self.config_hash,
            "started_at": _now(),
            "finished_at": None,
            "artifacts": [],
        }
        self._save()
        logger.info(f"Run started in {self.run_dir}")
        return self

    def record(self, kind: str, path) -> Path:
        """Adds an emitted artifact (path kept relative to the run directory)."""
        path = Path(path)
        try:
            rel = str(path.resolve().relative_to(self.run_dir.resolve()))
        except ValueError:
            rel = str(path)
        entry = {"kind": kind, "path": rel}
        if entry not in self.manifest["artifacts"]:
            self.manifest["artifacts"].append(entry)
            self._save()
        logger.debug(f"Recorded {kind} artifact {rel}")
        return path

    def complete(self, **extra):
        self.manifest.update(extra)
        self.manifest["status"] = RunStatus.COMPLETED.value
        self.manifest["finished_at"] = _now()
        self._save()
        self._release()
        logger.info(f"Run completed in {self.run_dir} ({len(self.manifest['artifacts'])} artifacts)")

    def fail(self, record: dict):
        self.manifest["status"] = RunStatus.FAILED.value
        self.manifest["finished_at"] = _now()
        self.manifest["error"] = record
        try:
            write_json_atomic(self.run_dir / config.RUN_ERROR_NAME, record)
            self._save()
        finally:
            self._release()
        logger.error(f"Run failed in {self.run_dir}: {record.get('message')}")

    def __enter__(self):
        return self.start()

    def __exit__(self, exc_type, exc, tb):
        if exc is None:
            if self.manifest.get("status") == RunStatus.RUNNING.value:
                self.complete()
            return False
        if isinstance(exc, ProgSegError):
            record = exc.to_record()
        else:
            record = {"error": type(exc).__name__, "message": str(exc),
                      "exit_code": config.EXIT_TRAINING_ERROR, "details": {}}
        self.fail(record)
        return False

    # --- Internals ---

    def _save(self):
        write_json_atomic(self.manifest_path, self.manifest)

    def _release(self):
        try:
            self.lock_path.unlink(missing_ok=True)
        except OSError as e:
            logger.warning(f"Could not remove lock {self.lock_path}: {e}")
