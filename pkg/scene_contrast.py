"""
Discriminative scene representation learned by contrast.

Images whose top-5 pseudo scene labels share more than K classes are
"similar", the rest "dissimilar". A bilinear scorer s = sigmoid(xᵀ W y) is
trained with binary cross-entropy on (anchor, similar, dissimilar) triplets,
jointly with a small scene encoder relu(W_enc x + b) applied to each image's
raw scene input. After training, the encoder output is the scene feature
consumed by the relation head.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator

import metrics
from checkpoints import Checkpoint, save_checkpoint
from dataset.records import TOP_K_SCENES, ImageRecord
from errors import DataError, NumericError
from numeric import (
    AdamState,
    GradTape,
    Tensor,
    adam_step,
    add,
    backward,
    clamp,
    log,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    repeat_rows,
    sigmoid,
    sub,
    transpose,
)
from utils.artifacts import atomic_write_text
from utils.seeding import as_rng, make_rng

logger = logging.getLogger(__name__)

SCORER_KEY = "scene.W"
ENCODER_WEIGHT_KEY = "scene.encoder.weight"
ENCODER_BIAS_KEY = "scene.encoder.bias"
SCORE_CLAMP = 1e-12
CONTRAST_CHECKPOINT_NAME = "contrast.bin"


class ContrastConfig(BaseModel):
    overlap_k: int = 2
    # True: similar iff overlap > K; False: overlap >= K
    overlap_strict: bool = True
    pool_cap: int = 50
    lr: float = 1e-5
    batch_size: int = 32
    epochs: int = 20
    heldout_fraction: float = 0.2
    seed: int = 7

    @field_validator("overlap_k")
    @classmethod
    def _k_range(cls, v: int) -> int:
        if not 0 <= v <= TOP_K_SCENES:
            raise ValueError(f"overlap_k must be in 0..{TOP_K_SCENES}")
        return v

    @field_validator("pool_cap", "batch_size", "epochs")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("lr")
    @classmethod
    def _lr_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("lr must be > 0")
        return v

    @field_validator("heldout_fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("heldout_fraction must be in [0, 1)")
        return v


# ---------------------------------------------------------------------------
# Pools
# ---------------------------------------------------------------------------


@dataclass
class ContrastPools:
    similar: Dict[str, List[str]]
    dissimilar: Dict[str, List[str]]
    overlap_k: int = 2
    strict: bool = True
    cap: int = 50

    @property
    def image_ids(self) -> List[str]:
        return list(self.similar)

    def is_similar(self, top5_a: Sequence[int], top5_b: Sequence[int]) -> bool:
        return overlap_is_similar(len(set(top5_a) & set(top5_b)), self.overlap_k, self.strict)


def overlap_is_similar(overlap: int, k: int, strict: bool = True) -> bool:
    return overlap > k if strict else overlap >= k


def _cap_pool(candidates: List[str], cap: int, rng: np.random.Generator) -> List[str]:
    if len(candidates) <= cap:
        return candidates
    keep = np.sort(rng.choice(len(candidates), size=cap, replace=False))
    return [candidates[k] for k in keep]


def build_pools(
    labels: Union[Mapping[str, Optional[Sequence[int]]], Iterable[ImageRecord]],
    overlap_k: int = 2,
    cap: int = 50,
    seed: int = 7,
    strict: bool = True,
) -> ContrastPools:
    """
    Similar/dissimilar pools for every image. `labels` maps image id to its
    top-5 pseudo scene classes (records are accepted too). Pools keep input
    order; oversized pools are cut to `cap` by a seeded uniform draw.
    """
    if not isinstance(labels, Mapping):
        labels = {r.image_id: r.pseudo_top5 for r in labels}
    ids = list(labels)
    for image_id in ids:
        top5 = labels[image_id]
        if top5 is None or len(top5) != TOP_K_SCENES:
            raise DataError("missing or incomplete pseudo scene labels", record_id=image_id, field="pseudo_top5")

    classes = sorted({c for image_id in ids for c in labels[image_id]})
    column = {c: k for k, c in enumerate(classes)}
    hot = np.zeros((len(ids), len(classes)), dtype=np.int64)
    for row, image_id in enumerate(ids):
        hot[row, [column[c] for c in labels[image_id]]] = 1
    overlap = hot @ hot.T

    similar: Dict[str, List[str]] = {}
    dissimilar: Dict[str, List[str]] = {}
    for row, image_id in enumerate(ids):
        sim_mask = overlap[row] > overlap_k if strict else overlap[row] >= overlap_k
        sim_mask[row] = False
        dis_mask = ~sim_mask
        dis_mask[row] = False
        similar[image_id] = _cap_pool([ids[k] for k in np.flatnonzero(sim_mask)], cap, make_rng(seed, "pools", image_id, "sim"))
        dissimilar[image_id] = _cap_pool([ids[k] for k in np.flatnonzero(dis_mask)], cap, make_rng(seed, "pools", image_id, "dis"))

    empty = sum(1 for i in ids if not similar[i] or not dissimilar[i])
    logger.info(
        f"✅ Built pools for {len(ids)} images (K={overlap_k}, {'>' if strict else '>='}, cap={cap}); "
        f"{empty} images have an empty pool"
    )
    return ContrastPools(similar=similar, dissimilar=dissimilar, overlap_k=overlap_k, strict=strict, cap=cap)


def write_pools(pools: ContrastPools, path: Union[str, Path]) -> Path:
    lines = [f"# overlap_k={pools.overlap_k} strict={str(pools.strict).lower()} cap={pools.cap}"]
    for image_id in pools.image_ids:
        lines.append(
            f"{image_id}\tsim:{','.join(pools.similar[image_id])}\tdis:{','.join(pools.dissimilar[image_id])}"
        )
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_pools(path: Union[str, Path]) -> ContrastPools:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"pools file not found: {path}")
    settings_line: Dict[str, str] = {}
    similar: Dict[str, List[str]] = {}
    dissimilar: Dict[str, List[str]] = {}
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            settings_line.update(part.split("=", 1) for part in line[1:].split() if "=" in part)
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[1].startswith("sim:") or not parts[2].startswith("dis:"):
            raise DataError(f"malformed pools line in {path.name}", line=line_no)
        image_id = parts[0]
        similar[image_id] = [x for x in parts[1][4:].split(",") if x]
        dissimilar[image_id] = [x for x in parts[2][4:].split(",") if x]
    return ContrastPools(
        similar=similar,
        dissimilar=dissimilar,
        overlap_k=int(settings_line.get("overlap_k", 2)),
        strict=settings_line.get("strict", "true") == "true",
        cap=int(settings_line.get("cap", 50)),
    )


Triplet = Tuple[str, str, str]


def sample_triplet(
    pools: ContrastPools,
    anchor: str,
    seed: Union[int, np.random.Generator],
    allowed: Optional[set] = None,
) -> Optional[Triplet]:
    """
    (anchor, positive, negative) drawn uniformly from the anchor's pools.
    Returns None, with a skip record in the log, when either pool is empty.
    """
    rng = as_rng(seed, "triplet", anchor)
    sim = pools.similar.get(anchor, [])
    dis = pools.dissimilar.get(anchor, [])
    if allowed is not None:
        sim = [x for x in sim if x in allowed]
        dis = [x for x in dis if x in allowed]
    if not sim or not dis:
        logger.warning(f"⚠️ Skipping anchor {anchor}: similar={len(sim)} dissimilar={len(dis)}")
        return None
    return anchor, sim[int(rng.integers(len(sim)))], dis[int(rng.integers(len(dis)))]


# ---------------------------------------------------------------------------
# Scorer, encoder, loss
# ---------------------------------------------------------------------------


def init_contrast_params(feature_dim: int) -> Dict[str, Tensor]:
    """Zero scorer and identity encoder."""
    return {
        SCORER_KEY: Tensor(np.zeros((feature_dim, feature_dim)), requires_grad=True, name=SCORER_KEY),
        ENCODER_WEIGHT_KEY: Tensor(np.eye(feature_dim), requires_grad=True, name=ENCODER_WEIGHT_KEY),
        ENCODER_BIAS_KEY: Tensor(np.zeros(feature_dim), requires_grad=True, name=ENCODER_BIAS_KEY),
    }


def bilinear_score(x: Tensor, y: Tensor, W: Tensor) -> Tensor:
    return sigmoid(matmul(matmul(x, W), y))


def bilinear_logits(X: Tensor, Y: Tensor, W: Tensor) -> Tensor:
    """Row-wise x_kᵀ W y_k for two (B, F) stacks."""
    return reduce_sum(mul(matmul(X, W), Y), axis=1)


def bilinear_scores(X: Tensor, Y: Tensor, W: Tensor) -> Tensor:
    return sigmoid(bilinear_logits(X, Y, W))


def encode_rows(X: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    weight, bias = params[ENCODER_WEIGHT_KEY], params[ENCODER_BIAS_KEY]
    return relu(add(matmul(X, transpose(weight)), repeat_rows(bias, X.shape[0])))


def extract_scene_feature(record: ImageRecord, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """
    Scene feature for one record; with no encoder params the raw input is
    passed through. The encoder is relu(W x + b), so an identity-initialised
    encoder reproduces the raw input only where it is non-negative (pooled
    activations always are); negative entries come out as zero.
    """
    if record.raw_scene_input is None:
        raise DataError("missing scene input", record_id=record.image_id, field="raw_scene_input")
    raw = np.asarray(record.raw_scene_input)
    if params is None:
        return Tensor(raw)
    weight, bias = params[ENCODER_WEIGHT_KEY], params[ENCODER_BIAS_KEY]
    return relu(add(matmul(weight, Tensor(raw, dtype=weight.dtype)), bias))


@dataclass
class NumericWarnings:
    clamped: int = 0


def contrastive_loss(s_pos: Tensor, s_neg: Tensor, warnings: Optional[NumericWarnings] = None) -> Tensor:
    """mean over triplets of -log s_pos - log(1 - s_neg), scores clamped to [1e-12, 1 - 1e-12]."""
    low, high = SCORE_CLAMP, 1.0 - SCORE_CLAMP
    n_clamped = int(np.sum((s_pos.data < low) | (s_pos.data > high)) + np.sum((s_neg.data < low) | (s_neg.data > high)))
    if n_clamped:
        logger.warning(f"⚠️ Clamped {n_clamped} contrastive scores before log")
        if warnings is not None:
            warnings.clamped += n_clamped
    pos_term = log(clamp(s_pos, low, high))
    neg_term = log(sub(Tensor(1.0, dtype=s_neg.dtype), clamp(s_neg, low, high)))
    return reduce_mean(sub(Tensor(0.0, dtype=s_pos.dtype), add(pos_term, neg_term)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class ContrastResult:
    params: Dict[str, Tensor]
    history: List[Dict[str, float]] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    heldout_ids: List[str] = field(default_factory=list)
    numeric_warnings: int = 0


def _raw_matrix(records: Mapping[str, ImageRecord], ids: Sequence[str]) -> Tensor:
    return Tensor(np.stack([np.asarray(records[i].raw_scene_input) for i in ids]))


def _triplet_logits(
    triplets: Sequence[Triplet], records: Mapping[str, ImageRecord], params: Mapping[str, Tensor]
) -> Tuple[Tensor, Tensor]:
    anchors = encode_rows(_raw_matrix(records, [t[0] for t in triplets]), params)
    positives = encode_rows(_raw_matrix(records, [t[1] for t in triplets]), params)
    negatives = encode_rows(_raw_matrix(records, [t[2] for t in triplets]), params)
    W = params[SCORER_KEY]
    return bilinear_logits(anchors, positives, W), bilinear_logits(anchors, negatives, W)


def _triplet_scores(
    triplets: Sequence[Triplet], records: Mapping[str, ImageRecord], params: Mapping[str, Tensor]
) -> Tuple[Tensor, Tensor]:
    z_pos, z_neg = _triplet_logits(triplets, records, params)
    return sigmoid(z_pos), sigmoid(z_neg)


def evaluate_triplets(
    triplets: Sequence[Triplet], records: Mapping[str, ImageRecord], params: Mapping[str, Tensor]
) -> Dict[str, float]:
    """
    Held-out accuracy (s > 0.5 on positives, < 0.5 on negatives) and AUC.
    Both are computed on logits, which rank like the sigmoid scores but do
    not tie once the sigmoid saturates.
    """
    if not triplets:
        return {"accuracy": float("nan"), "auc": float("nan")}
    z_pos, z_neg = _triplet_logits(triplets, records, params)
    logits = np.concatenate([z_pos.data, z_neg.data])
    truth = np.concatenate([np.ones(len(triplets), bool), np.zeros(len(triplets), bool)])
    return {
        "accuracy": float(np.mean((logits > 0.0) == truth)),
        "auc": metrics.auc(logits, truth),
    }


def _batches(items: Sequence, size: int) -> List[Sequence]:
    return [items[k:k + size] for k in range(0, len(items), size)]


def train_contrast(
    records: Sequence[ImageRecord],
    pools: ContrastPools,
    config: ContrastConfig,
    params: Optional[Dict[str, Tensor]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> ContrastResult:
    """
    Adam over seeded epochs of freshly sampled triplets. Held-out anchors
    (a seeded 20% of images by default) get one fixed triplet each, scored
    after every epoch. A checkpoint is written after every finite epoch.
    """
    by_id = {r.image_id: r for r in records}
    missing = [i for i in pools.image_ids if i not in by_id]
    if missing:
        raise DataError("pools reference images not in the dataset", record_id=missing[0])
    if not by_id:
        raise DataError("no images for contrastive training")
    feature_dim = next(iter(by_id.values())).feature_dim
    params = dict(params) if params is not None else init_contrast_params(feature_dim)

    ids = [i for i in pools.image_ids]
    order = make_rng(config.seed, "contrast", "split").permutation(len(ids))
    n_heldout = int(round(config.heldout_fraction * len(ids)))
    heldout_ids = sorted(ids[k] for k in order[:n_heldout])
    train_ids = [ids[k] for k in sorted(order[n_heldout:])]
    train_set = set(train_ids)

    heldout_rng = make_rng(config.seed, "contrast", "heldout")
    heldout = [t for t in (sample_triplet(pools, a, heldout_rng) for a in heldout_ids) if t is not None]

    state = AdamState(lr=config.lr)
    result = ContrastResult(params=params, heldout_ids=heldout_ids)
    counter = NumericWarnings()
    ckpt_path = Path(out_dir) / CONTRAST_CHECKPOINT_NAME if out_dir is not None else None

    for epoch in range(1, config.epochs + 1):
        rng = make_rng(config.seed, "contrast", "epoch", epoch)
        anchors = [train_ids[k] for k in rng.permutation(len(train_ids))]
        triplets = [t for t in (sample_triplet(pools, a, rng, allowed=train_set) for a in anchors) if t is not None]
        skipped = len(anchors) - len(triplets)
        if not triplets:
            raise DataError("no usable training triplets: every anchor has an empty pool")

        losses = []
        for batch in _batches(triplets, config.batch_size):
            with GradTape() as tape:
                s_pos, s_neg = _triplet_scores(batch, by_id, params)
                loss = contrastive_loss(s_pos, s_neg, counter)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    "non-finite contrastive loss; last good checkpoint kept",
                    {"epoch": epoch, "checkpoint": str(ckpt_path) if ckpt_path else None},
                )
            grads = backward(loss, tape).for_params(params)
            params, state = adam_step(params, grads, state)
            losses.append(value * len(batch))

        epoch_loss = float(np.sum(losses) / len(triplets))
        scores = evaluate_triplets(heldout, by_id, params)
        record = {
            "epoch": epoch,
            "loss": epoch_loss,
            "heldout_accuracy": scores["accuracy"],
            "heldout_auc": scores["auc"],
            "skipped_anchors": skipped,
        }
        result.history.append(record)
        logger.info(
            f"📈 contrast epoch {epoch}/{config.epochs} loss={epoch_loss:.6f} "
            f"heldout_acc={scores['accuracy']:.4f} heldout_auc={scores['auc']:.4f} skipped={skipped}"
        )
        if ckpt_path is not None:
            save_checkpoint(
                Checkpoint.from_tensors(
                    "contrast", params, config=config.model_dump(), epoch=epoch, history=result.history
                ),
                ckpt_path,
            )
            result.checkpoint_path = ckpt_path

    result.params = params
    result.numeric_warnings = counter.clamped
    return result


CONTRAST_REPORT_TSV = "contrast_report.tsv"


def write_contrast_report(result: ContrastResult, out_dir: Union[str, Path]) -> Path:
    lines = ["# prise contrast report", f"heldout_images\t{len(result.heldout_ids)}"]
    for row in result.history:
        for key in ("loss", "heldout_accuracy", "heldout_auc", "skipped_anchors"):
            lines.append(f"epoch.{row['epoch']}.{key}\t{row[key]!r}")
    lines.append(f"numeric_warnings\t{result.numeric_warnings}")
    return atomic_write_text(Path(out_dir) / CONTRAST_REPORT_TSV, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Scene similarity
# ---------------------------------------------------------------------------


def scene_features(records: Iterable[ImageRecord], params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    return {r.image_id: np.array(extract_scene_feature(r, params).data) for r in records}


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(a @ b) / denom if denom > 0 else 0.0


def rank_by_scene_similarity(
    query_id: str, features: Mapping[str, np.ndarray], top: Optional[int] = None
) -> List[Tuple[str, float]]:
    """Other images ordered by cosine similarity to the query, ties in input order."""
    if query_id not in features:
        raise DataError("query image not found", record_id=query_id)
    query = features[query_id]
    others = [(i, cosine_similarity(query, f)) for i, f in features.items() if i != query_id]
    order = np.argsort([-score for _, score in others], kind="stable")
    ranked = [others[k] for k in order]
    return ranked[:top] if top is not None else ranked


def scene_similarity_gap(features: Mapping[str, np.ndarray], scene_of: Mapping[str, int]) -> Tuple[float, float]:
    """Mean cosine similarity of same-scene pairs and of different-scene pairs."""
    ids = [i for i in features if i in scene_of]
    same, different = [], []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            sim = cosine_similarity(features[ids[a]], features[ids[b]])
            (same if scene_of[ids[a]] == scene_of[ids[b]] else different).append(sim)
    if not same or not different:
        raise DataError("need both same-scene and different-scene pairs")
    return float(np.mean(same)), float(np.mean(different))
