"""Run artifacts: JSON-lines loss log and the atomic run manifest."""
from datetime import datetime
from typing import Any, Dict, Iterable, Optional
from pathlib import Path
from pydantic import BaseModel
import numpy as np
import tempfile
import hashlib
import logging
import json
import os

from core import PathLike
from models import LossReport, RunManifest

logger = logging.getLogger(__name__)


class JSONEncoder(json.JSONEncoder):
    def default(self, obj):
        if isinstance(obj, datetime):
            return obj.isoformat()
        if isinstance(obj, Path):
            return str(obj)
        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")
        return json.JSONEncoder.default(self, obj)


def dumps(obj: Any, **kwargs) -> str:
    return json.dumps(obj, cls=JSONEncoder, **kwargs)


def write_json_atomic(obj: Any, path: PathLike) -> None:
    """Write to a temp file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(dumps(obj, indent=2))
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}")
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


class RunLog:
    """Append-only JSON-lines log, one LossReport per line"""

    def __init__(self, path: Optional[PathLike]):
        self.path = Path(path) if path is not None else None
        self._file = None

    def __enter__(self) -> "RunLog":
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "w")
        return self

    def __exit__(self, *exc) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def write(self, report: LossReport) -> None:
        if self._file is None:
            return
        self._file.write(dumps(report.model_dump(mode="json")) + "\n")
        self._file.flush()


def read_log(path: PathLike) -> Iterable[LossReport]:
    with open(path, "r") as f:
        for line in f:
            if line.strip():
                yield LossReport.model_validate_json(line)


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_inputs(paths: Dict[str, Optional[PathLike]]) -> Dict[str, str]:
    """sha256 per named input file; directories hash every file beneath them in sorted order"""
    hashes = {}
    for name, path in paths.items():
        if path is None:
            continue
        path = Path(path)
        if path.is_file():
            hashes[name] = file_sha256(path)
        elif path.is_dir():
            digest = hashlib.sha256()
            for child in sorted(p for p in path.rglob("*") if p.is_file()):
                digest.update(child.relative_to(path).as_posix().encode())
                digest.update(file_sha256(child).encode())
            hashes[name] = digest.hexdigest()
    return hashes


def write_manifest(manifest: RunManifest, path: PathLike) -> None:
    write_json_atomic(manifest.model_dump(mode="json"), path)
    logger.info(f"Wrote run manifest {path}")
