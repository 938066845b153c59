"""
ImageRecord: one image's precomputed features, boxes, pseudo scene labels and
pair labels. This is the unit of dataset I/O; nothing downstream sees pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError

Pair = Tuple[int, int]

TOP_K_SCENES = 5


def all_pairs(n_persons: int) -> List[Pair]:
    """Unordered pairs (i, j), i < j, in lexicographic order."""
    return [(i, j) for i in range(n_persons) for j in range(i + 1, n_persons)]


def canonical_pair(i: int, j: int) -> Pair:
    return (i, j) if i < j else (j, i)


@dataclass
class ImageRecord:
    image_id: str
    n_persons: int
    boxes: np.ndarray  # (N, 4), provenance only
    person_features: np.ndarray  # (N, F)
    union_features: Dict[Pair, np.ndarray]  # one F-vector per unordered pair
    background_feature: np.ndarray  # (F,)
    raw_scene_input: np.ndarray  # (F,)
    pseudo_top5: Optional[List[int]] = None
    pair_labels: Dict[Pair, int] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return int(self.background_feature.shape[0])

    def pairs(self) -> List[Pair]:
        return all_pairs(self.n_persons)

    def union_feature(self, i: int, j: int) -> np.ndarray:
        return self.union_features[canonical_pair(i, j)]

    def label(self, i: int, j: int) -> Optional[int]:
        return self.pair_labels.get(canonical_pair(i, j))

    @property
    def is_labeled(self) -> bool:
        return bool(self.pair_labels)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "n_persons": self.n_persons,
            "boxes": np.asarray(self.boxes).tolist(),
            "person_features": np.asarray(self.person_features).tolist(),
            "union_features": [
                {"pair": [i, j], "x": np.asarray(vec).tolist()}
                for (i, j), vec in sorted(self.union_features.items())
            ],
            "background_feature": np.asarray(self.background_feature).tolist(),
            "raw_scene_input": np.asarray(self.raw_scene_input).tolist(),
            "pseudo_top5": list(self.pseudo_top5) if self.pseudo_top5 is not None else None,
            "pair_labels": [[i, j, int(c)] for (i, j), c in sorted(self.pair_labels.items())],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ImageRecord":
        image_id = data.get("image_id")
        try:
            n = int(data["n_persons"])
            features = np.asarray(data["person_features"], dtype=np.float64)
            if features.size == 0:
                features = features.reshape(0, len(data["background_feature"]))
            boxes = np.asarray(data.get("boxes") or [], dtype=np.float64).reshape(-1, 4)
            unions = {}
            for entry in data.get("union_features", []):
                i, j = (int(v) for v in entry["pair"])
                unions[(i, j)] = np.asarray(entry["x"], dtype=np.float64)
            labels = {(int(i), int(j)): int(c) for i, j, c in data.get("pair_labels", [])}
            top5 = data.get("pseudo_top5")
            return cls(
                image_id=str(image_id),
                n_persons=n,
                boxes=boxes,
                person_features=features,
                union_features=unions,
                background_feature=np.asarray(data["background_feature"], dtype=np.float64),
                raw_scene_input=np.asarray(data["raw_scene_input"], dtype=np.float64),
                pseudo_top5=[int(c) for c in top5] if top5 is not None else None,
                pair_labels=labels,
            )
        except KeyError as exc:
            raise DataError("missing required field", record_id=image_id, field=str(exc.args[0])) from exc
        except (TypeError, ValueError) as exc:
            raise DataError(f"malformed record: {exc}", record_id=image_id) from exc


@dataclass
class RecordViolation:
    field: str
    message: str

    def __str__(self) -> str:
        return f"{self.field}: {self.message}"


def _vector_problem(vec: Any, dim: int) -> Optional[str]:
    arr = np.asarray(vec)
    if arr.shape != (dim,):
        return f"expected shape ({dim},), got {arr.shape}"
    if not np.all(np.isfinite(arr)):
        return "contains non-finite values"
    return None


def validate_record(
    record: ImageRecord,
    feature_dim: Optional[int] = None,
    n_classes: Optional[int] = None,
) -> Optional[RecordViolation]:
    """Check every ImageRecord invariant; return the first violation or None."""
    if not record.image_id:
        return RecordViolation("image_id", "must be a non-empty string")
    n = record.n_persons
    if not isinstance(n, (int, np.integer)) or n < 0:
        return RecordViolation("n_persons", f"must be a non-negative integer, got {n!r}")

    dim = feature_dim if feature_dim is not None else int(np.asarray(record.background_feature).shape[0])
    problem = _vector_problem(record.background_feature, dim)
    if problem:
        return RecordViolation("background_feature", problem)
    problem = _vector_problem(record.raw_scene_input, dim)
    if problem:
        return RecordViolation("raw_scene_input", problem)

    feats = np.asarray(record.person_features)
    if feats.shape != (n, dim):
        return RecordViolation("person_features", f"expected shape ({n}, {dim}), got {feats.shape}")
    if not np.all(np.isfinite(feats)):
        return RecordViolation("person_features", "contains non-finite values")
    if np.asarray(record.boxes).shape != (n, 4):
        return RecordViolation("boxes", f"expected shape ({n}, 4), got {np.asarray(record.boxes).shape}")

    expected = all_pairs(n)
    for i, j in expected:
        if (i, j) not in record.union_features:
            return RecordViolation(f"union_features[{i},{j}]", "missing union feature for pair")
        problem = _vector_problem(record.union_features[(i, j)], dim)
        if problem:
            return RecordViolation(f"union_features[{i},{j}]", problem)
    if len(record.union_features) != len(expected):
        extra = sorted(set(record.union_features) - set(expected))
        return RecordViolation(f"union_features[{extra[0][0]},{extra[0][1]}]", "not a valid pair (need i < j < n_persons)")

    if record.pseudo_top5 is not None:
        top5 = list(record.pseudo_top5)
        if len(top5) != TOP_K_SCENES:
            return RecordViolation("pseudo_top5", f"expected {TOP_K_SCENES} entries, got {len(top5)}")
        seen = set()
        for k, cls in enumerate(top5):
            if cls < 0:
                return RecordViolation(f"pseudo_top5[{k}]", f"negative scene class {cls}")
            if cls in seen:
                return RecordViolation(f"pseudo_top5[{k}]", f"duplicate scene class {cls}")
            seen.add(cls)

    valid_pairs = set(expected)
    for (i, j), cls in sorted(record.pair_labels.items()):
        if (i, j) not in valid_pairs:
            return RecordViolation(f"pair_labels[{i},{j}]", "not a valid pair (need i < j < n_persons)")
        if cls < 0 or (n_classes is not None and cls >= n_classes):
            return RecordViolation(f"pair_labels[{i},{j}]", f"class {cls} outside 0..{(n_classes or 0) - 1}")
    return None


def ensure_valid(record: ImageRecord, feature_dim: Optional[int] = None, n_classes: Optional[int] = None, line: Optional[int] = None) -> None:
    violation = validate_record(record, feature_dim=feature_dim, n_classes=n_classes)
    if violation is not None:
        raise DataError(violation.message, record_id=record.image_id, field=violation.field, line=line)


def records_equal(a: ImageRecord, b: ImageRecord) -> bool:
    """Exact (bitwise) equality of two records."""
    if (a.image_id, a.n_persons, a.pseudo_top5, a.pair_labels) != (b.image_id, b.n_persons, b.pseudo_top5, b.pair_labels):
        return False
    arrays = ["boxes", "person_features", "background_feature", "raw_scene_input"]
    if not all(np.array_equal(getattr(a, name), getattr(b, name)) for name in arrays):
        return False
    if set(a.union_features) != set(b.union_features):
        return False
    return all(np.array_equal(a.union_features[p], b.union_features[p]) for p in a.union_features)


def label_histogram(records: Sequence[ImageRecord], n_classes: int) -> np.ndarray:
    counts = np.zeros(n_classes, dtype=np.int64)
    for record in records:
        for cls in record.pair_labels.values():
            counts[cls] += 1
    return counts


def persons_histogram(records: Sequence[ImageRecord]) -> Dict[int, int]:
    hist: Dict[int, int] = {}
    for record in records:
        hist[record.n_persons] = hist.get(record.n_persons, 0) + 1
    return dict(sorted(hist.items()))


