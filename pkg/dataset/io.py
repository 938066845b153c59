"""
Dataset files: line-delimited JSON, one image per line, preceded by a header
line carrying the format version, F, C and S.

    {"format": "prise-dataset", "version": 1, "feature_dim": 32, ...}
    {"image_id": "synth-00000", "n_persons": 3, ...}
    ...

Floats are written with Python's shortest round-trip repr, so a
save -> load cycle reproduces every value bit for bit.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from pydantic import BaseModel, ValidationError, field_validator

from dataset.records import ImageRecord, ensure_valid, label_histogram, persons_histogram
from errors import DataError
from utils.artifacts import atomic_write_text

logger = logging.getLogger(__name__)

FORMAT_NAME = "prise-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
UNLABELED_SPLIT = "unlabeled"


class DatasetHeader(BaseModel):
    format: str = FORMAT_NAME
    version: int = FORMAT_VERSION
    feature_dim: int
    n_classes: int
    n_scene_types: int
    class_names: List[str] = []
    # Optional fine -> coarse class mapping, one coarse id per fine class
    coarse_map: Optional[List[int]] = None

    @field_validator("version")
    @classmethod
    def _supported_version(cls, v: int) -> int:
        if v != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format version {v} (supported: {FORMAT_VERSION})")
        return v

    @field_validator("format")
    @classmethod
    def _format_name(cls, v: str) -> str:
        if v != FORMAT_NAME:
            raise ValueError(f"not a {FORMAT_NAME} file (format={v!r})")
        return v

    def resolved_class_names(self) -> List[str]:
        if len(self.class_names) == self.n_classes:
            return list(self.class_names)
        return [f"relation_{c}" for c in range(self.n_classes)]


@dataclass
class Dataset:
    header: DatasetHeader
    records: List[ImageRecord] = field(default_factory=list)
    source: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_classes(self) -> int:
        return self.header.n_classes

    @property
    def feature_dim(self) -> int:
        return self.header.feature_dim

    def labeled_pair_count(self) -> int:
        return sum(len(r.pair_labels) for r in self.records)

    def class_histogram(self):
        return label_histogram(self.records, self.n_classes)

    def subset(self, records: Sequence[ImageRecord]) -> "Dataset":
        return Dataset(header=self.header, records=list(records), source=self.source)


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    lines = [json.dumps(dataset.header.model_dump(), sort_keys=True)]
    lines.extend(json.dumps(r.to_dict(), sort_keys=True) for r in dataset.records)
    return atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Parse and validate a dataset file; every record is checked against the header."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset path not found: {path}")

    header: Optional[DatasetHeader] = None
    records: List[ImageRecord] = []
    seen_ids = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                data = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataError(f"parse error in {path.name}: {exc.msg}", line=line_no) from exc
            if header is None:
                try:
                    header = DatasetHeader.model_validate(data)
                except ValidationError as exc:
                    raise DataError(f"invalid header in {path.name}: {exc.errors()[0]['msg']}", line=line_no) from exc
                continue
            try:
                record = ImageRecord.from_dict(data)
            except DataError as exc:
                raise DataError(exc.detail, record_id=exc.record_id, field=exc.field, line=line_no) from exc
            ensure_valid(record, feature_dim=header.feature_dim, n_classes=header.n_classes, line=line_no)
            if record.image_id in seen_ids:
                raise DataError("duplicate image_id", record_id=record.image_id, field="image_id", line=line_no)
            seen_ids.add(record.image_id)
            records.append(record)

    if header is None:
        raise DataError(f"empty dataset file: {path}", line=1)

    dataset = Dataset(header=header, records=records, source=str(path))
    logger.info(
        f"✅ Loaded {len(records)} images from {path.name}: "
        f"classes={dataset.class_histogram().tolist()} persons={persons_histogram(records)}"
    )
    return dataset


def split_path(directory: Union[str, Path], split: str) -> Path:
    return Path(directory) / f"{split}.jsonl"


def load_split(directory: Union[str, Path], split: str) -> Dataset:
    return load_dataset(split_path(directory, split))


def load_splits(directory: Union[str, Path], splits: Sequence[str] = SPLITS) -> Dict[str, Dataset]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    return {name: load_split(directory, name) for name in splits}


def load_all_images(directory: Union[str, Path]) -> Dataset:
    """Every split in a dataset directory (unlabeled included), in file order."""
    directory = Path(directory)
    if directory.is_file():
        return load_dataset(directory)
    if not directory.is_dir():
        raise DataError(f"dataset path not found: {directory}")
    merged: Optional[Dataset] = None
    for name in (*SPLITS, UNLABELED_SPLIT):
        path = split_path(directory, name)
        if not path.is_file():
            continue
        part = load_dataset(path)
        if merged is None:
            merged = Dataset(header=part.header, records=list(part.records), source=str(directory))
        else:
            merged.records.extend(part.records)
    if merged is None:
        raise DataError(f"no dataset files found in {directory}")
    return merged
