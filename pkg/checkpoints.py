"""
Versioned checkpoints: a binary blob of named tensors plus a plain-text
manifest next to it.

    model.bin            numpy .npz archive; "__meta__" holds JSON metadata
    model.bin.manifest   one line per tensor: name <TAB> shape <TAB> sha256

Loading re-hashes every tensor against the manifest, so a truncated or edited
blob is rejected instead of silently producing different predictions.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np

from errors import DataError
from numeric import Tensor
from utils.artifacts import atomic_write_bytes, atomic_write_text

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
META_KEY = "__meta__"
MANIFEST_SUFFIX = ".manifest"


@dataclass
class Checkpoint:
    kind: str  # "prise" or "contrast"
    params: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    history: List[Dict[str, Any]] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_FORMAT_VERSION

    @classmethod
    def from_tensors(cls, kind: str, params: Mapping[str, Tensor], **kwargs) -> "Checkpoint":
        return cls(kind=kind, params={name: np.array(t.data) for name, t in params.items()}, **kwargs)

    def tensors(self, requires_grad: bool = True) -> Dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=requires_grad, name=name) for name, arr in self.params.items()}

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        return {name: arr for name, arr in self.params.items() if name.startswith(prefix)}


def tensor_digest(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode("ascii"))
    h.update(str(arr.shape).encode("ascii"))
    h.update(arr.tobytes())
    return h.hexdigest()


def manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    meta = {
        "format_version": checkpoint.format_version,
        "kind": checkpoint.kind,
        "config": checkpoint.config,
        "epoch": checkpoint.epoch,
        "history": checkpoint.history,
        "extra": checkpoint.extra,
    }
    arrays = {name: np.asarray(arr) for name, arr in sorted(checkpoint.params.items())}
    if META_KEY in arrays:
        raise DataError(f"parameter name {META_KEY!r} is reserved")
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    atomic_write_bytes(path, buffer.getvalue())

    lines = [
        f"{name}\t{'x'.join(str(d) for d in arr.shape) or 'scalar'}\t{tensor_digest(arr)}"
        for name, arr in sorted(checkpoint.params.items())
    ]
    atomic_write_text(manifest_path(path), "\n".join(lines) + "\n")
    logger.info(f"💾 Saved {checkpoint.kind} checkpoint ({len(arrays) - 1} tensors, epoch {checkpoint.epoch}) to {path}")
    return path


def _read_manifest(path: Path) -> Dict[str, str]:
    mpath = manifest_path(path)
    if not mpath.is_file():
        raise DataError(f"checkpoint manifest not found: {mpath}")
    digests = {}
    for line_no, line in enumerate(mpath.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"malformed manifest line in {mpath.name}", line=line_no)
        digests[parts[0]] = parts[2]
    return digests


def load_checkpoint(path: Union[str, Path], expected_kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint path not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: np.array(archive[name]) for name in archive.files}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from exc
    if META_KEY not in arrays:
        raise DataError(f"checkpoint {path} has no metadata")
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8"))

    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {version} (supported: {CHECKPOINT_FORMAT_VERSION})")
    if expected_kind is not None and meta.get("kind") != expected_kind:
        raise DataError(f"expected a {expected_kind} checkpoint, {path.name} is {meta.get('kind')!r}")

    digests = _read_manifest(path)
    if set(digests) != set(arrays):
        missing = sorted(set(digests) ^ set(arrays))
        raise DataError(f"checkpoint and manifest disagree on tensors: {missing}")
    for name, arr in arrays.items():
        if tensor_digest(arr) != digests[name]:
            raise DataError(f"checksum mismatch for tensor {name!r} in {path.name}")

    logger.info(f"✅ Loaded {meta['kind']} checkpoint from {path} (epoch {meta.get('epoch')})")
    return Checkpoint(
        kind=meta["kind"],
        params=arrays,
        config=meta.get("config", {}),
        epoch=int(meta.get("epoch", 0)),
        history=list(meta.get("history", [])),
        extra=dict(meta.get("extra", {})),
        format_version=version,
    )
