import json
import logging
import os
import shutil
import tempfile
from pathlib import Path

from . import config
from .errors import IoError

logger = logging.getLogger(__name__)


def _atomic_write(path: Path, mode: str, write_fn, **open_kwargs):
    """Writes through a temp file in the target directory, then os.replace()."""
    path = Path(path)
    temp_path_str = None
    try:
        if not config.ensure_dir(path.parent):
            raise IoError(f"Cannot create directory {path.parent}", path=path)
        with tempfile.NamedTemporaryFile(mode, dir=path.parent, delete=False, prefix=f"{path.name}.",
                                         **open_kwargs) as temp_f:
            temp_path_str = temp_f.name
            write_fn(temp_f)
            temp_f.flush()
            os.fsync(temp_f.fileno())
        if path.exists():
            shutil.copystat(path, temp_path_str)
        os.replace(temp_path_str, path)
        temp_path_str = None
    except OSError as e:
        raise IoError(f"Cannot write {path}: {e}", path=path) from e
    finally:
        if temp_path_str and os.path.exists(temp_path_str):
            try:
                os.unlink(temp_path_str)
            except OSError:
                pass
    return path


def write_bytes_atomic(path, chunks):
    def _write(f):
        for chunk in chunks:
            f.write(chunk)

    return _atomic_write(path, "wb", _write)


def write_text_atomic(path, text: str):
    return _atomic_write(path, "w", lambda f: f.write(text), encoding="utf-8")


def write_json_atomic(path, payload, lines: bool = False):
    """JSON (sorted keys) or JSON lines, written atomically."""

    def _write(f):
        if lines:
            for entry in payload:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        else:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

    return _atomic_write(path, "w", _write, encoding="utf-8")


def read_json(path):
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise IoError(f"Cannot read {path}: {e}", path=path) from e
