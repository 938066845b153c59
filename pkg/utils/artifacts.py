"""
Artifact helpers: atomic file writes and the per-run manifest.

Every subcommand writes a RunManifest next to its outputs so a run can be
replayed from the manifest alone.
"""

import hashlib
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field

from config import TOOL_VERSION

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: PathLike, data: Any) -> Path:
    return atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def config_digest(config: Dict[str, Any]) -> str:
    """Stable hash of a resolved config; equal hashes mean identical experiment settings."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode("utf-8")).hexdigest()


class RunManifest(BaseModel):
    subcommand: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: int
    deterministic: bool = False
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    tool_version: str = TOOL_VERSION
    started_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    duration_seconds: Optional[float] = None
    exit_code: Optional[int] = None
    config_hash: Optional[str] = None

    def write(self, directory: PathLike) -> Path:
        path = Path(directory) / MANIFEST_NAME
        atomic_write_text(path, self.model_dump_json(indent=2) + "\n")
        logger.info(f"📝 Run manifest written to {path}")
        return path

    @classmethod
    def read(cls, path: PathLike) -> "RunManifest":
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
