"""
End-to-end PRISE training, evaluation reports and the ablation harness.

Batches group whole images: an image's pairs are predicted jointly from one
graph forward pass, so they always land in the same batch.
"""
from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator

import metrics
from checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from dataset.io import Dataset
from dataset.records import ImageRecord
from errors import DataError, NumericError
from numeric import AdamState, GradTape, Tensor, adam_step, backward, concat
from relation_head import (
    STREAM_ORDER,
    LabelStats,
    PriseModel,
    RelationPrediction,
    Stream,
    classification_loss,
    forward_image,
    init_head_params,
    input_dim,
    normalize_streams,
    predict_image,
)
from rgcn import init_rgcn_params
from scene_contrast import ENCODER_BIAS_KEY, ENCODER_WEIGHT_KEY, init_contrast_params
from utils.artifacts import atomic_write_text, write_json
from utils.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

PRISE_CHECKPOINT_NAME = "prise.bin"
REPORT_TSV = "report.tsv"
REPORT_JSON = "report.json"
TRAIN_REPORT_TSV = "train_report.tsv"
ABLATION_TSV = "ablation.tsv"
ABLATION_JSON = "ablation.json"


class TrainConfig(BaseModel):
    lr: float = 5e-5
    epochs: int = 20
    batch_size: int = 32
    rgcn_depth: int = 2
    hidden: int = 256
    seed: int = 7
    streams: List[Stream] = list(STREAM_ORDER)
    mask_mode: Literal["remove", "zero"] = "remove"
    scene_encoder_mode: Literal["contrast_finetuned", "raw_pretrained_analogue"] = "contrast_finetuned"
    finetune_scene_encoder: bool = False
    class_weights: Optional[List[float]] = None
    strict_labels: bool = True
    repeats: int = 5
    workers: int = 1

    @field_validator("lr")
    @classmethod
    def _lr_non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("lr must be >= 0")
        return v

    @field_validator("epochs", "batch_size", "hidden", "repeats", "workers")
    @classmethod
    def _at_least_one(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("rgcn_depth")
    @classmethod
    def _depth(cls, v: int) -> int:
        if v < 0:
            raise ValueError("rgcn_depth must be >= 0")
        return v

    @field_validator("streams")
    @classmethod
    def _streams(cls, v: List[Stream]) -> List[Stream]:
        if not v:
            raise ValueError("at least one stream must be enabled")
        return list(normalize_streams(v))


@dataclass
class TrainResult:
    model: PriseModel
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    checkpoint_path: Optional[Path] = None
    unlabeled_excluded: int = 0

    @property
    def best_val_accuracy(self) -> Optional[float]:
        if not self.history or self.history[self.best_epoch - 1]["val_accuracy"] is None:
            return None
        return self.history[self.best_epoch - 1]["val_accuracy"]


def build_model(
    config: TrainConfig,
    n_classes: int,
    feature_dim: int,
    scene_params: Optional[Mapping[str, Any]] = None,
) -> PriseModel:
    """Freshly initialised RGCN and head plus (optionally) a scene encoder."""
    streams = normalize_streams(config.streams)
    params: Dict[str, Tensor] = {}
    params.update(init_rgcn_params(feature_dim, config.rgcn_depth, config.seed).named())
    params.update(init_head_params(input_dim(feature_dim, streams, config.mask_mode), config.hidden, n_classes, config.seed))

    use_encoder = config.scene_encoder_mode == "contrast_finetuned"
    if use_encoder:
        if scene_params is None:
            logger.warning("⚠️ No contrast checkpoint supplied; scene encoder starts at identity")
            encoder = init_contrast_params(feature_dim)
            scene_params = {k: encoder[k] for k in (ENCODER_WEIGHT_KEY, ENCODER_BIAS_KEY)}
        for key in (ENCODER_WEIGHT_KEY, ENCODER_BIAS_KEY):
            if key not in scene_params:
                raise DataError(f"scene encoder parameters lack {key!r}")
            value = scene_params[key]
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            params[key] = Tensor(data, requires_grad=config.finetune_scene_encoder, name=key)

    return PriseModel(
        params=params,
        n_classes=n_classes,
        feature_dim=feature_dim,
        streams=streams,
        mask_mode=config.mask_mode,
        use_scene_encoder=use_encoder,
    )


def trainable_names(model: PriseModel, config: TrainConfig) -> List[str]:
    names = [k for k in model.params if k.startswith(("rgcn.", "head."))]
    if model.use_scene_encoder and config.finetune_scene_encoder:
        names += [ENCODER_WEIGHT_KEY, ENCODER_BIAS_KEY]
    return names


def _image_batches(records: Sequence[ImageRecord], batch_size: int, rng: np.random.Generator) -> List[List[ImageRecord]]:
    order = rng.permutation(len(records))
    shuffled = [records[k] for k in order]
    return [shuffled[k:k + batch_size] for k in range(0, len(shuffled), batch_size)]


def _batch_loss(batch: Sequence[ImageRecord], model: PriseModel, config: TrainConfig, stats: LabelStats) -> Optional[Tensor]:
    probs, labels = [], []
    for record in batch:
        features, _, p = forward_image(record, model)
        if not features.pairs:
            continue
        probs.append(p)
        labels.extend(record.label(i, j) for i, j in features.pairs)
    if not probs:
        return None
    if not config.strict_labels and all(y is None for y in labels):
        stats.unlabeled_excluded += len(labels)
        return None
    stacked = probs[0] if len(probs) == 1 else concat(probs, axis=0)
    return classification_loss(stacked, labels, config.class_weights, strict=config.strict_labels, stats=stats)


def train_prise(
    train_set: Dataset,
    val_set: Optional[Dataset],
    config: TrainConfig,
    scene_params: Optional[Mapping[str, Any]] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Seeded mini-batch Adam on the classification loss. Validation accuracy
    after every epoch picks the best model (ties go to the earliest epoch);
    the best model is what the result and checkpoint carry.
    """
    if len(train_set) == 0:
        raise DataError("training set is empty")
    if val_set is not None and val_set.n_classes != train_set.n_classes:
        raise DataError(f"train has {train_set.n_classes} classes, val has {val_set.n_classes}")
    if config.lr == 0:
        logger.warning("⚠️ lr=0: parameters will not change")

    model = build_model(config, train_set.n_classes, train_set.feature_dim, scene_params)
    names = trainable_names(model, config)
    state = AdamState(lr=config.lr)
    stats = LabelStats()
    ckpt_path = Path(out_dir) / PRISE_CHECKPOINT_NAME if out_dir is not None else None

    result = TrainResult(model=model)
    best_score: Optional[float] = None

    for epoch in range(1, config.epochs + 1):
        rng = make_rng(config.seed, "train", "epoch", epoch)
        total, count = 0.0, 0
        for b, batch in enumerate(_image_batches(train_set.records, config.batch_size, rng)):
            with GradTape() as tape:
                loss = _batch_loss(batch, model, config, stats)
            if loss is None:
                continue
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError("non-finite training loss", {"epoch": epoch, "batch": b, "loss": value})
            grads = backward(loss, tape).for_params({k: model.params[k] for k in names})
            updated, state = adam_step({k: model.params[k] for k in names}, grads, state)
            model = model.with_params({**model.params, **updated})
            total += value
            count += 1

        epoch_loss = total / count if count else float("nan")
        val = evaluate_model(model, val_set) if val_set is not None and len(val_set) else None
        record = {
            "epoch": epoch,
            "loss": epoch_loss,
            "val_accuracy": val["accuracy"] if val else None,
            "val_map": val["map"] if val else None,
        }
        result.history.append(record)
        logger.info(
            f"📈 epoch {epoch}/{config.epochs} loss={epoch_loss:.6f} "
            + (f"val_acc={val['accuracy']:.4f} val_mAP={val['map']:.4f}" if val else "no validation set")
        )

        # without a validation set the latest epoch wins
        score = val["accuracy"] if val else None
        improved = score is None or best_score is None or score > best_score
        if improved:
            best_score = score
            result.best_epoch = epoch
            result.model = model
            if ckpt_path is not None:
                save_checkpoint(result.model.to_checkpoint(config.model_dump(mode="json"), epoch, result.history), ckpt_path)

    if ckpt_path is not None:
        save_checkpoint(result.model.to_checkpoint(config.model_dump(mode="json"), result.best_epoch, result.history), ckpt_path)
        result.checkpoint_path = ckpt_path
    result.unlabeled_excluded = stats.unlabeled_excluded
    logger.info(f"✅ Training finished; best epoch {result.best_epoch} (val_acc={result.best_val_accuracy})")
    return result


def write_train_report(result: TrainResult, out_dir: Union[str, Path]) -> Path:
    """name<TAB>value lines; contains nothing run-dependent beyond the metrics."""
    lines = ["# prise train report", f"# {metrics.TIE_RULES}", f"best_epoch\t{result.best_epoch}"]
    lines.append(f"best_val_accuracy\t{result.best_val_accuracy!r}")
    for row in result.history:
        for key in ("loss", "val_accuracy", "val_map"):
            lines.append(f"epoch.{row['epoch']}.{key}\t{row[key]!r}")
    lines.append(f"unlabeled_excluded\t{result.unlabeled_excluded}")
    return atomic_write_text(Path(out_dir) / TRAIN_REPORT_TSV, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


async def _predict_async(records: Sequence[ImageRecord], model: PriseModel, workers: int) -> List[RelationPrediction]:
    semaphore = asyncio.Semaphore(workers)

    async def one(record: ImageRecord) -> RelationPrediction:
        async with semaphore:
            return await asyncio.to_thread(predict_image, record, model)

    return list(await asyncio.gather(*(one(r) for r in records)))


def predict_dataset(records: Sequence[ImageRecord], model: PriseModel, workers: int = 1) -> List[RelationPrediction]:
    """Predictions in input order; workers > 1 spreads images over threads."""
    if workers <= 1:
        return [predict_image(r, model) for r in records]
    return asyncio.run(_predict_async(records, model, workers))


def labeled_scores(predictions: Sequence[RelationPrediction], records: Sequence[ImageRecord]) -> Tuple[np.ndarray, np.ndarray]:
    by_id = {r.image_id: r for r in records}
    scored: List[metrics.ScoredPrediction] = []
    for prediction in predictions:
        record = by_id[prediction.image_id]
        for k, (i, j) in enumerate(prediction.pairs):
            y = record.label(i, j)
            if y is not None:
                scored.append(metrics.ScoredPrediction(true_class=y, scores=prediction.probabilities[k]))
    return metrics.stack_predictions(scored)


def evaluate_model(model: PriseModel, dataset: Dataset, workers: int = 1) -> Dict[str, Any]:
    predictions = predict_dataset(dataset.records, model, workers)
    scores, labels = labeled_scores(predictions, dataset.records)
    if labels.size == 0:
        raise DataError("evaluation set has no labeled pairs")
    return {
        "accuracy": metrics.accuracy(scores, labels),
        "map": metrics.mean_average_precision(scores, labels),
        "scores": scores,
        "labels": labels,
        "predictions": predictions,
    }


def build_report(
    model: PriseModel,
    test_set: Dataset,
    train_set: Optional[Dataset] = None,
    workers: int = 1,
) -> Dict[str, Any]:
    if model.n_classes != test_set.n_classes:
        raise DataError(f"checkpoint predicts {model.n_classes} classes, dataset has {test_set.n_classes}")
    if model.feature_dim != test_set.feature_dim:
        raise DataError(f"checkpoint expects F={model.feature_dim}, dataset has F={test_set.feature_dim}")

    started = time.perf_counter()
    predictions = predict_dataset(test_set.records, model, workers)
    elapsed = time.perf_counter() - started
    scores, labels = labeled_scores(predictions, test_set.records)
    if labels.size == 0:
        raise DataError("evaluation set has no labeled pairs")

    names = test_set.header.resolved_class_names()
    recalls = metrics.per_class_recall(scores, labels)
    aps = metrics.per_class_average_precision(scores, labels)
    weighted_recall = metrics.check_recall_identity(scores, labels)
    train_accuracy = None
    if train_set is not None:
        train_labels = [y for r in train_set.records for _, y in sorted(r.pair_labels.items())]
        if train_labels:
            train_accuracy = evaluate_model(model, train_set, workers)["accuracy"]
            logger.info(f"📊 Accuracy on the training split: {train_accuracy:.4f}")
    else:
        train_labels = labels
    majority, baseline_accuracy = metrics.majority_baseline(np.asarray(train_labels), labels, test_set.n_classes)

    report: Dict[str, Any] = {
        "n_images": len(test_set),
        "n_pairs": int(labels.size),
        "accuracy": metrics.accuracy(scores, labels),
        "map": metrics.mean_average_precision(scores, labels),
        "weighted_recall": weighted_recall,
        "per_class_recall": dict(zip(names, recalls)),
        "per_class_ap": dict(zip(names, aps)),
        "confusion_matrix": metrics.confusion_matrix(scores, labels).tolist(),
        "majority_class": names[majority],
        "majority_baseline_accuracy": baseline_accuracy,
        "inference_ms_per_image": 1000.0 * elapsed / max(len(test_set), 1),
        "tie_rules": metrics.TIE_RULES,
    }
    if train_accuracy is not None:
        report["train_accuracy"] = train_accuracy
    coarse_map = test_set.header.coarse_map
    if coarse_map:
        coarse_scores, coarse_labels = metrics.coarsen_predictions(scores, labels, coarse_map)
        report["coarse_accuracy"] = metrics.accuracy(coarse_scores, coarse_labels)
        report["coarse_map"] = metrics.mean_average_precision(coarse_scores, coarse_labels)
        report["coarse_per_class_recall"] = metrics.per_class_recall(coarse_scores, coarse_labels)
    return report


def report_lines(report: Mapping[str, Any]) -> List[str]:
    lines = ["# prise evaluation report", f"# {report['tie_rules']}"]
    for key, value in report.items():
        if key == "tie_rules":
            continue
        if isinstance(value, dict):
            for name, v in value.items():
                lines.append(f"{key}.{name}\t{'undefined' if v is None else repr(v)}")
        elif key == "confusion_matrix":
            for t, row in enumerate(value):
                lines.append(f"confusion.{t}\t{' '.join(str(c) for c in row)}")
        elif isinstance(value, list):
            for k, v in enumerate(value):
                lines.append(f"{key}.{k}\t{'undefined' if v is None else repr(v)}")
        else:
            lines.append(f"{key}\t{value!r}" if isinstance(value, float) else f"{key}\t{value}")
    return lines


def evaluate_checkpoint(
    checkpoint: Union[str, Path, Checkpoint],
    test_set: Dataset,
    out_dir: Optional[Union[str, Path]] = None,
    train_set: Optional[Dataset] = None,
    workers: int = 1,
) -> Dict[str, Any]:
    """Metric report for a saved model; writes report.tsv and report.json when out_dir is given."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint, expected_kind="prise")
    model = PriseModel.from_checkpoint(checkpoint)
    report = build_report(model, test_set, train_set, workers)
    logger.info(
        f"✅ Evaluated on {report['n_pairs']} pairs: acc={report['accuracy']:.4f} mAP={report['map']:.4f} "
        f"(majority baseline {report['majority_baseline_accuracy']:.4f})"
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / REPORT_TSV, "\n".join(report_lines(report)) + "\n")
        write_json(out_dir / REPORT_JSON, report)
    return report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_VARIANTS: Tuple[Tuple[str, Dict[str, Any]], ...] = (
    ("PRISE", {}),
    ("w/o Int.", {"drop": Stream.INTERACTIVE}),
    ("w/o Scene", {"drop": Stream.SCENE}),
    ("w/o Fore.", {"drop": Stream.FOREGROUND}),
    ("w/o Back.", {"drop": Stream.BACKGROUND}),
    ("PRISE|Pretrained", {"scene_encoder_mode": "raw_pretrained_analogue"}),
)


@dataclass
class AblationRow:
    variant: str
    accuracies: List[float]
    maps: List[float]

    @staticmethod
    def _std(values: Sequence[float]) -> float:
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def accuracy_std(self) -> float:
        return self._std(self.accuracies)

    @property
    def map_mean(self) -> float:
        return float(np.mean(self.maps))

    @property
    def map_std(self) -> float:
        return self._std(self.maps)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variant": self.variant,
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "map_mean": self.map_mean,
            "map_std": self.map_std,
            "accuracies": self.accuracies,
            "maps": self.maps,
        }


def variant_config(base: TrainConfig, overrides: Mapping[str, Any], repeat: int) -> TrainConfig:
    update: Dict[str, Any] = {"seed": derive_seed(base.seed, "ablation", repeat)}
    if "drop" in overrides:
        update["streams"] = [s for s in normalize_streams(base.streams) if s is not overrides["drop"]]
    if "scene_encoder_mode" in overrides:
        update["scene_encoder_mode"] = overrides["scene_encoder_mode"]
    return TrainConfig.model_validate({**base.model_dump(), **update})


async def _ablation_async(
    train_set: Dataset,
    val_set: Dataset,
    base: TrainConfig,
    scene_params: Optional[Mapping[str, Any]],
    workers: int,
) -> List[AblationRow]:
    semaphore = asyncio.Semaphore(workers)

    def run_one(config: TrainConfig) -> Tuple[float, float]:
        result = train_prise(train_set, val_set, config, scene_params=scene_params)
        evaluation = evaluate_model(result.model, val_set)
        return evaluation["accuracy"], evaluation["map"]

    async def guarded(config: TrainConfig) -> Tuple[float, float]:
        async with semaphore:
            return await asyncio.to_thread(run_one, config)

    jobs = [
        (name, variant_config(base, overrides, r))
        for name, overrides in ABLATION_VARIANTS
        for r in range(base.repeats)
    ]
    outcomes = await asyncio.gather(*(guarded(config) for _, config in jobs))

    rows = {name: AblationRow(variant=name, accuracies=[], maps=[]) for name, _ in ABLATION_VARIANTS}
    for (name, _), (acc, mean_ap) in zip(jobs, outcomes):
        rows[name].accuracies.append(acc)
        rows[name].maps.append(mean_ap)
    return [rows[name] for name, _ in ABLATION_VARIANTS]


def ablation_run(
    train_set: Dataset,
    val_set: Dataset,
    base_config: TrainConfig,
    scene_params: Optional[Mapping[str, Any]] = None,
    workers: int = 1,
) -> List[AblationRow]:
    """
    Full PRISE, the four stream-removal variants and the raw-scene-encoder
    variant, each trained `repeats` times with sub-seeds shared across
    variants. Rows come back in a fixed order regardless of scheduling.
    """
    if len(val_set) == 0:
        raise DataError("ablation needs a non-empty validation set")
    logger.info(f"🔬 Ablation: {len(ABLATION_VARIANTS)} variants x {base_config.repeats} repeats, workers={workers}")
    rows = asyncio.run(_ablation_async(train_set, val_set, base_config, scene_params, max(1, workers)))
    for row in rows:
        logger.info(
            f"🔬 {row.variant:<18} mAP {row.map_mean:.4f} ± {row.map_std:.4f}  "
            f"acc {row.accuracy_mean:.4f} ± {row.accuracy_std:.4f}"
        )
    return rows


def write_ablation(rows: Sequence[AblationRow], out_dir: Union[str, Path]) -> List[Path]:
    lines = ["variant\tmap_mean\tmap_std\taccuracy_mean\taccuracy_std\truns"]
    for row in rows:
        lines.append(
            f"{row.variant}\t{row.map_mean!r}\t{row.map_std!r}\t{row.accuracy_mean!r}\t{row.accuracy_std!r}\t{len(row.maps)}"
        )
    out_dir = Path(out_dir)
    return [
        atomic_write_text(out_dir / ABLATION_TSV, "\n".join(lines) + "\n"),
        write_json(out_dir / ABLATION_JSON, [row.to_dict() for row in rows]),
    ]
