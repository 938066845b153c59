"""
Relation head: per-pair feature fusion, MLP classifier and joint prediction.

For every unordered pair (i, j) of an image the fused input is

    interactive | foreground | background | scene

the RGCN edge feature, the union-box feature, then the two image-level
vectors repeated onto every pair row. A stream can be removed
(its block dropped, shrinking the MLP input) or zeroed (block kept, filled
with zeros) for ablations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoints import Checkpoint
from dataset.records import ImageRecord, Pair, canonical_pair
from errors import DataError, DimensionError, UsageError
from numeric import (
    Tensor,
    add,
    clamp,
    concat,
    default_dtype,
    log,
    matmul,
    mul,
    reduce_sum,
    relu,
    repeat_rows,
    select,
    softmax,
    sub,
    transpose,
    zeros,
)
from rgcn import GraphState, RgcnParams, encode_record
from scene_contrast import ENCODER_BIAS_KEY, ENCODER_WEIGHT_KEY, extract_scene_feature
from utils.artifacts import atomic_write_text
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

HEAD_HIDDEN_WEIGHT = "head.hidden.weight"
HEAD_HIDDEN_BIAS = "head.hidden.bias"
HEAD_OUTPUT_WEIGHT = "head.output.weight"
HEAD_OUTPUT_BIAS = "head.output.bias"
PROB_CLAMP = 1e-12


class Stream(str, Enum):
    INTERACTIVE = "interactive"
    FOREGROUND = "foreground"
    BACKGROUND = "background"
    SCENE = "scene"


# Concatenation order of the fused pair vector
STREAM_ORDER: Tuple[Stream, ...] = (Stream.INTERACTIVE, Stream.FOREGROUND, Stream.BACKGROUND, Stream.SCENE)

MASK_MODES = ("remove", "zero")


def normalize_streams(streams: Sequence[Union[str, Stream]]) -> Tuple[Stream, ...]:
    try:
        chosen = {Stream(s) for s in streams}
    except ValueError as exc:
        raise UsageError(f"unknown stream in {list(streams)}; expected {[s.value for s in STREAM_ORDER]}") from exc
    if not chosen:
        raise UsageError("at least one stream must be enabled")
    return tuple(s for s in STREAM_ORDER if s in chosen)


def input_dim(feature_dim: int, streams: Sequence[Stream], mask_mode: str = "remove") -> int:
    if mask_mode not in MASK_MODES:
        raise UsageError(f"unknown mask mode {mask_mode!r}")
    return feature_dim * (len(STREAM_ORDER) if mask_mode == "zero" else len(streams))


@dataclass
class PairFeature:
    pair: Pair
    fused: np.ndarray


@dataclass
class PairFeatures:
    """All pair rows of one image; `matrix` is (E, D) and stays on the tape."""

    pairs: List[Pair]
    matrix: Tensor
    blocks: Tuple[Stream, ...]
    feature_dim: int

    def as_list(self) -> List[PairFeature]:
        return [PairFeature(pair=p, fused=self.matrix.data[k]) for k, p in enumerate(self.pairs)]

    def block(self, stream: Stream) -> np.ndarray:
        k = self.blocks.index(stream)
        F = self.feature_dim
        return self.matrix.data[:, k * F:(k + 1) * F]


def assemble_pair_features(
    state: GraphState,
    record: ImageRecord,
    scene_feature: Tensor,
    streams: Sequence[Stream] = STREAM_ORDER,
    mask_mode: str = "remove",
) -> PairFeatures:
    streams = normalize_streams(streams)
    F = record.feature_dim
    dtype = state.fused.dtype if state.fused is not None else default_dtype()
    blocks = STREAM_ORDER if mask_mode == "zero" else streams
    pairs = list(state.pairs)
    if not pairs:
        return PairFeatures(pairs=[], matrix=zeros((0, input_dim(F, streams, mask_mode)), dtype=dtype), blocks=blocks, feature_dim=F)

    unions = []
    for i, j in pairs:
        if (i, j) not in record.union_features:
            raise DataError("missing union feature for pair", record_id=record.image_id, field=f"union_features[{i},{j}]")
        unions.append(np.asarray(record.union_features[(i, j)]))

    E = len(pairs)
    parts: List[Tensor] = []
    for stream in blocks:
        if stream not in streams:
            parts.append(zeros((E, F), dtype=dtype))
        elif stream is Stream.INTERACTIVE:
            parts.append(state.fused)
        elif stream is Stream.FOREGROUND:
            parts.append(Tensor(np.stack(unions), dtype=dtype))
        elif stream is Stream.BACKGROUND:
            parts.append(repeat_rows(Tensor(np.asarray(record.background_feature), dtype=dtype), E))
        else:
            parts.append(repeat_rows(scene_feature, E))
    return PairFeatures(pairs=pairs, matrix=concat(parts, axis=1), blocks=blocks, feature_dim=F)


def init_head_params(in_dim: int, hidden: int, n_classes: int, seed: int) -> Dict[str, Tensor]:
    """Glorot-uniform hidden layer; the output layer starts at zero (uniform predictions)."""
    rng = make_rng(seed, "head", "init")
    bound = np.sqrt(6.0 / (in_dim + hidden))
    return {
        HEAD_HIDDEN_WEIGHT: Tensor(rng.uniform(-bound, bound, size=(hidden, in_dim)), requires_grad=True, name=HEAD_HIDDEN_WEIGHT),
        HEAD_HIDDEN_BIAS: Tensor(np.zeros(hidden), requires_grad=True, name=HEAD_HIDDEN_BIAS),
        HEAD_OUTPUT_WEIGHT: Tensor(np.zeros((n_classes, hidden)), requires_grad=True, name=HEAD_OUTPUT_WEIGHT),
        HEAD_OUTPUT_BIAS: Tensor(np.zeros(n_classes), requires_grad=True, name=HEAD_OUTPUT_BIAS),
    }


def _affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim == 1:
        return add(matmul(weight, x), bias)
    return add(matmul(x, transpose(weight)), repeat_rows(bias, x.shape[0]))


def mlp_forward(features: Union[Tensor, PairFeature], params: Mapping[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """logits, softmax(logits) for one fused vector (D,) or a stack (E, D)."""
    x = Tensor(features.fused) if isinstance(features, PairFeature) else features
    expected = params[HEAD_HIDDEN_WEIGHT].shape[1]
    if x.shape[-1] != expected:
        raise DimensionError(f"MLP expects input dim {expected}, got {x.shape[-1]}")
    hidden = relu(_affine(x, params[HEAD_HIDDEN_WEIGHT], params[HEAD_HIDDEN_BIAS]))
    logits = _affine(hidden, params[HEAD_OUTPUT_WEIGHT], params[HEAD_OUTPUT_BIAS])
    return logits, softmax(logits)


@dataclass
class LabelStats:
    unlabeled_excluded: int = 0


def classification_loss(
    probabilities: Tensor,
    labels: Sequence[Optional[int]],
    class_weights: Optional[Sequence[float]] = None,
    strict: bool = True,
    stats: Optional[LabelStats] = None,
) -> Tensor:
    """
    Class-weighted mean negative log-likelihood over labeled rows:
    sum_k w[y_k] * -log p_k[y_k] / sum_k w[y_k]. Unlabeled rows (None) are an
    error in strict mode and are skipped and counted otherwise.
    """
    n_rows, n_classes = probabilities.shape
    if len(labels) != n_rows:
        raise DimensionError(f"{len(labels)} labels for {n_rows} predictions")
    rows, targets = [], []
    for k, y in enumerate(labels):
        if y is None:
            if strict:
                raise DataError(f"unlabeled pair at row {k} in strict mode")
            continue
        if not 0 <= y < n_classes:
            raise DataError(f"label {y} outside 0..{n_classes - 1}")
        rows.append(k)
        targets.append(int(y))
    skipped = n_rows - len(rows)
    if skipped:
        logger.warning(f"⚠️ Excluded {skipped} unlabeled pairs from the loss")
        if stats is not None:
            stats.unlabeled_excluded += skipped
    if not rows:
        raise DataError("no labeled pairs to compute a loss over")

    weights = np.ones(n_classes) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (n_classes,) or np.any(weights < 0):
        raise DataError(f"class weights must be {n_classes} non-negative values")
    w = weights[targets]
    if w.sum() <= 0:
        raise DataError("class weights of the labeled pairs sum to zero")

    picked = clamp(select(probabilities, rows, targets), PROB_CLAMP, 1.0)
    nll = sub(Tensor(0.0, dtype=probabilities.dtype), log(picked))
    weighted = mul(nll, Tensor(w / w.sum(), dtype=probabilities.dtype))
    return reduce_sum(weighted)


# ---------------------------------------------------------------------------
# Whole model
# ---------------------------------------------------------------------------


@dataclass
class PriseModel:
    """Flat named parameter store plus the layout needed to interpret it."""

    params: Dict[str, Tensor]
    n_classes: int
    feature_dim: int
    streams: Tuple[Stream, ...] = STREAM_ORDER
    mask_mode: str = "remove"
    use_scene_encoder: bool = True

    @property
    def rgcn(self) -> RgcnParams:
        return RgcnParams.from_named(self.params)

    @property
    def head(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("head.")}

    @property
    def scene_encoder(self) -> Optional[Dict[str, Tensor]]:
        if not self.use_scene_encoder:
            return None
        return {k: self.params[k] for k in (ENCODER_WEIGHT_KEY, ENCODER_BIAS_KEY)}

    def with_params(self, params: Dict[str, Tensor]) -> "PriseModel":
        return PriseModel(
            params=params,
            n_classes=self.n_classes,
            feature_dim=self.feature_dim,
            streams=self.streams,
            mask_mode=self.mask_mode,
            use_scene_encoder=self.use_scene_encoder,
        )

    def layout(self) -> Dict[str, Any]:
        return {
            "n_classes": self.n_classes,
            "feature_dim": self.feature_dim,
            "streams": [s.value for s in self.streams],
            "mask_mode": self.mask_mode,
            "use_scene_encoder": self.use_scene_encoder,
            "concat_order": [s.value for s in STREAM_ORDER],
        }

    def to_checkpoint(self, config: Dict[str, Any], epoch: int, history: List[Dict[str, Any]]) -> Checkpoint:
        return Checkpoint.from_tensors("prise", self.params, config=config, epoch=epoch, history=history, extra=self.layout())

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "PriseModel":
        if checkpoint.kind != "prise":
            raise DataError(f"expected a prise checkpoint, got {checkpoint.kind!r}")
        layout = checkpoint.extra
        if layout.get("concat_order") != [s.value for s in STREAM_ORDER]:
            raise DataError(f"checkpoint concatenation order {layout.get('concat_order')} is not supported")
        return cls(
            params=checkpoint.tensors(requires_grad=False),
            n_classes=int(layout["n_classes"]),
            feature_dim=int(layout["feature_dim"]),
            streams=normalize_streams(layout["streams"]),
            mask_mode=layout["mask_mode"],
            use_scene_encoder=bool(layout["use_scene_encoder"]),
        )


def forward_image(record: ImageRecord, model: PriseModel) -> Tuple[PairFeatures, Tensor, Tensor]:
    """Graph encoding, scene extraction, assembly and MLP for one image."""
    state = encode_record(record, model.rgcn)
    scene = extract_scene_feature(record, model.scene_encoder)
    features = assemble_pair_features(state, record, scene, model.streams, model.mask_mode)
    if not features.pairs:
        empty = zeros((0, model.n_classes))
        return features, empty, empty
    logits, probs = mlp_forward(features.matrix, model.head)
    return features, logits, probs


@dataclass
class RelationPrediction:
    image_id: str
    pairs: List[Pair]
    probabilities: np.ndarray  # (E, C)

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=1) if self.pairs else np.zeros(0, dtype=np.int64)

    def probability(self, i: int, j: int) -> np.ndarray:
        return self.probabilities[self.pairs.index(canonical_pair(i, j))]

    def to_lines(self) -> List[str]:
        lines = []
        for k, (i, j) in enumerate(self.pairs):
            probs = " ".join(repr(float(p)) for p in self.probabilities[k])
            lines.append(f"{self.image_id} {i} {j} {probs} {int(self.argmax[k])}")
        return lines


def predict_image(record: ImageRecord, model: PriseModel) -> RelationPrediction:
    features, _, probs = forward_image(record, model)
    if not features.pairs:
        logger.warning(f"⚠️ Image {record.image_id} has a single person; empty prediction")
    return RelationPrediction(image_id=record.image_id, pairs=list(features.pairs), probabilities=np.array(probs.data))


def write_predictions(predictions: Sequence[RelationPrediction], path: Union[str, Path]) -> Path:
    lines = [line for prediction in predictions for line in prediction.to_lines()]
    return atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
