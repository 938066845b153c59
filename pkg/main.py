#!/usr/bin/env python3
"""
prise command line: synthetic data, contrastive scene pretraining, relation
training, evaluation, ablations and batch inference.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
Every run writes run_manifest.json into its output directory. Passing that
manifest back through --config replays the run with the recorded settings.

BLAS thread caps are applied once, at import, when --deterministic is on the
process command line or PRISE_DETERMINISTIC is set. Calling main() directly
with "--deterministic" in argv forces one worker but leaves BLAS threading as
the process already has it; set PRISE_DETERMINISTIC before importing instead.
"""

import os
import sys

# Must happen before numpy is imported anywhere so BLAS picks it up.
if "--deterministic" in sys.argv or os.getenv("PRISE_DETERMINISTIC", "0").lower() in ("1", "true", "yes", "y"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")
os.environ.setdefault("HAYSTACK_TELEMETRY_ENABLED", "False")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, field  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Callable, Dict, List, Optional, Sequence, Type  # noqa: E402

from dotenv import load_dotenv  # noqa: E402
from pydantic import BaseModel, ValidationError  # noqa: E402

from checkpoints import load_checkpoint  # noqa: E402
from config import settings  # noqa: E402
from dataset.io import Dataset, load_all_images, load_split, split_path  # noqa: E402
from dataset.synth import SynthConfig, generate_synthetic, write_synthetic  # noqa: E402
from errors import DataError, NumericError, PriseError, UsageError  # noqa: E402
from numeric import use_precision  # noqa: E402
from relation_head import PriseModel, Stream, write_predictions  # noqa: E402
from scene_contrast import (  # noqa: E402
    ContrastConfig,
    build_pools,
    read_pools,
    train_contrast,
    write_contrast_report,
    write_pools,
)
from trainer import (  # noqa: E402
    TrainConfig,
    ablation_run,
    evaluate_checkpoint,
    train_prise,
    write_ablation,
    write_train_report,
)
from utils.artifacts import RunManifest, config_digest  # noqa: E402

load_dotenv()

logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO))
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

POOLS_FILE = "pools.tsv"
PREDICTIONS_FILE = "predictions.txt"

# Flags that steer the run itself rather than an experiment config.
RUN_KEYS = {"command", "config", "deterministic", "workers", "precision", "out", "data", "ckpt", "contrast_ckpt", "pools", "split"}


class PriseArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; data errors own that code here."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default(model: Type[BaseModel], name: str) -> Any:
    value = model.model_fields[name].default
    if isinstance(value, list):
        return ",".join(v.value if isinstance(v, Stream) else str(v) for v in value)
    return value


def _csv(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _csv_floats(text: str) -> List[float]:
    try:
        return [float(part) for part in _csv(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file of config values; flags win over it, it wins over defaults")
    sub.add_argument("--seed", type=int, help=f"master seed (default: {settings.seed})")
    sub.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    sub.add_argument("--workers", type=int, help=f"parallel workers (default: {settings.workers})")
    sub.add_argument("--precision", choices=["float64", "float32"], help=f"(default: {settings.precision})")
    sub.add_argument("--out", help=f"output directory (default: {settings.artifact_dir}/<subcommand>)")


def _add_pool_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--pool-overlap-k", dest="overlap_k", type=int,
                     help=f"similar when top-5 overlap exceeds K (default: {_default(ContrastConfig, 'overlap_k')})")
    sub.add_argument("--pool-overlap-strict", dest="overlap_strict", action=argparse.BooleanOptionalAction,
                     help="strict '>' K comparison; --no-pool-overlap-strict uses '>='")
    sub.add_argument("--pool-cap", dest="pool_cap", type=int,
                     help=f"max pool size per image (default: {_default(ContrastConfig, 'pool_cap')})")


def _add_train_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--data", required=True, help="dataset directory with train.jsonl and val.jsonl")
    sub.add_argument("--epochs", type=int, help=f"(default: {_default(TrainConfig, 'epochs')})")
    sub.add_argument("--lr", type=float, help=f"Adam learning rate (default: {_default(TrainConfig, 'lr')})")
    sub.add_argument("--batch", dest="batch_size", type=int, help=f"images per batch (default: {_default(TrainConfig, 'batch_size')})")
    sub.add_argument("--rgcn-depth", dest="rgcn_depth", type=int, help=f"RGCN layers T (default: {_default(TrainConfig, 'rgcn_depth')})")
    sub.add_argument("--hidden", type=int, help=f"MLP hidden width (default: {_default(TrainConfig, 'hidden')})")
    sub.add_argument("--streams", type=_csv, help=f"enabled streams (default: {_default(TrainConfig, 'streams')})")
    sub.add_argument("--mask-mode", dest="mask_mode", choices=["remove", "zero"],
                     help=f"how disabled streams are masked (default: {_default(TrainConfig, 'mask_mode')})")
    sub.add_argument("--scene-encoder", dest="scene_encoder_mode", choices=["contrast_finetuned", "raw_pretrained_analogue"],
                     help=f"(default: {_default(TrainConfig, 'scene_encoder_mode')})")
    sub.add_argument("--contrast-ckpt", dest="contrast_ckpt", help="contrast.bin from train-contrast")
    sub.add_argument("--finetune-scene-encoder", dest="finetune_scene_encoder", action="store_true",
                     help="also update the scene encoder (frozen by default)")
    sub.add_argument("--class-weights", dest="class_weights", type=_csv_floats, help="per-class loss weights, e.g. 1,2,1")
    sub.add_argument("--lenient-labels", dest="strict_labels", action="store_false",
                     help="skip unlabeled pairs instead of failing")


def build_parser() -> PriseArgumentParser:
    parser = PriseArgumentParser(prog="prise", description="Social relation recognition with scene context")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=PriseArgumentParser)

    gen = subparsers.add_parser("gen-synthetic", help="write a seeded synthetic dataset", argument_default=argparse.SUPPRESS)
    _add_common(gen)
    gen.add_argument("--images", dest="n_images", type=int, help=f"(default: {_default(SynthConfig, 'n_images')})")
    gen.add_argument("--f", dest="feature_dim", type=int, help=f"feature width F (default: {_default(SynthConfig, 'feature_dim')})")
    gen.add_argument("--classes", dest="n_classes", type=int, help=f"relation classes C (default: {_default(SynthConfig, 'n_classes')})")
    gen.add_argument("--scenes", dest="n_scene_types", type=int, help=f"latent scene types S (default: {_default(SynthConfig, 'n_scene_types')})")
    gen.add_argument("--unlabeled", dest="n_unlabeled", type=int, help=f"unlabeled images (default: {_default(SynthConfig, 'n_unlabeled')})")
    gen.add_argument("--noise", type=float, help=f"(default: {_default(SynthConfig, 'noise')})")
    gen.add_argument("--min-persons", dest="min_persons", type=int, help=f"(default: {_default(SynthConfig, 'min_persons')})")
    gen.add_argument("--max-persons", dest="max_persons", type=int, help=f"(default: {_default(SynthConfig, 'max_persons')})")
    gen.add_argument("--settings", dest="n_settings", type=int,
                     help=f"latent settings driving the background (default: {_default(SynthConfig, 'n_settings')})")
    gen.add_argument("--flip-rate", dest="flip_rate", type=float,
                     help=f"share of pairs shifted by one class, marked in the union feature (default: {_default(SynthConfig, 'flip_rate')})")

    pools = subparsers.add_parser("build-pools", help="similar/dissimilar pools from pseudo scene labels", argument_default=argparse.SUPPRESS)
    _add_common(pools)
    pools.add_argument("--data", required=True, help="dataset directory or .jsonl file")
    _add_pool_flags(pools)

    contrast = subparsers.add_parser("train-contrast", help="contrastive scene pretraining", argument_default=argparse.SUPPRESS)
    _add_common(contrast)
    contrast.add_argument("--data", required=True, help="dataset directory or .jsonl file")
    contrast.add_argument("--pools", help="pools.tsv from build-pools; built on the fly when omitted")
    contrast.add_argument("--epochs", type=int, help=f"(default: {_default(ContrastConfig, 'epochs')})")
    contrast.add_argument("--lr", type=float, help=f"(default: {_default(ContrastConfig, 'lr')})")
    contrast.add_argument("--batch", dest="batch_size", type=int, help=f"triplets per batch (default: {_default(ContrastConfig, 'batch_size')})")
    contrast.add_argument("--heldout-fraction", dest="heldout_fraction", type=float,
                          help=f"(default: {_default(ContrastConfig, 'heldout_fraction')})")
    _add_pool_flags(contrast)

    train = subparsers.add_parser("train", help="train the RGCN and relation head", argument_default=argparse.SUPPRESS)
    _add_common(train)
    _add_train_flags(train)

    ablate = subparsers.add_parser("ablate", help="stream-removal and scene-encoder ablations", argument_default=argparse.SUPPRESS)
    _add_common(ablate)
    _add_train_flags(ablate)
    ablate.add_argument("--repeats", type=int, help=f"runs per variant (default: {_default(TrainConfig, 'repeats')})")

    evaluate = subparsers.add_parser("eval", help="metric report for a checkpoint", argument_default=argparse.SUPPRESS)
    _add_common(evaluate)
    evaluate.add_argument("--ckpt", required=True, help="prise.bin from train")
    evaluate.add_argument("--data", help="dataset directory or .jsonl file (default: data)")
    evaluate.add_argument("--split", help="split to evaluate when --data is a directory (default: test)")

    infer = subparsers.add_parser("infer", help="per-pair class probabilities", argument_default=argparse.SUPPRESS)
    _add_common(infer)
    infer.add_argument("--ckpt", required=True, help="prise.bin from train")
    infer.add_argument("--data", required=True, help="dataset directory or .jsonl file")

    return parser


@dataclass
class RunContext:
    args: argparse.Namespace
    out_dir: Path
    workers: int
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)


def _config_file_values(path: Optional[str], command: str) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    if "subcommand" in payload and isinstance(payload.get("config"), dict):
        # A run manifest: replay the resolved config it recorded.
        manifest = RunManifest.model_validate(payload)
        if manifest.subcommand != command:
            raise UsageError(f"manifest {path} records a {manifest.subcommand!r} run, not {command!r}")
        logger.info(f"🔁 Replaying {command} config from manifest {path}")
        return dict(manifest.config)
    # A file may carry one section per subcommand or a single flat object.
    section = payload.get(command, payload)
    return section if isinstance(section, dict) else {}


def resolve_config(model: Type[BaseModel], ctx: RunContext) -> BaseModel:
    """flags > config file > environment > model defaults."""
    fields = model.model_fields
    values: Dict[str, Any] = {"seed": settings.seed} if "seed" in fields else {}
    if "workers" in fields:
        values["workers"] = ctx.workers
    config_path = getattr(ctx.args, "config", None) or settings.config_file
    values.update({k: v for k, v in _config_file_values(config_path, ctx.args.command).items() if k in fields})
    values.update({k: v for k, v in vars(ctx.args).items() if k in fields and k not in RUN_KEYS})
    if "workers" in fields:
        values["workers"] = ctx.workers
    resolved = model.model_validate(values)
    ctx.config = resolved.model_dump(mode="json")
    if config_path:
        ctx.inputs.append(str(config_path))
    return resolved


def _load_dataset(ctx: RunContext, path: str) -> Dataset:
    ctx.inputs.append(path)
    return load_all_images(path)


def _scene_params(ctx: RunContext, config: TrainConfig) -> Optional[Dict[str, Any]]:
    path = getattr(ctx.args, "contrast_ckpt", None)
    if path is None:
        if Stream.SCENE in config.streams and config.scene_encoder_mode == "contrast_finetuned":
            logger.warning("⚠️ --contrast-ckpt not given; the scene stream uses an untrained encoder")
        return None
    ctx.inputs.append(path)
    return load_checkpoint(path, expected_kind="contrast").params


def _train_splits(ctx: RunContext) -> Dict[str, Optional[Dataset]]:
    data = Path(ctx.args.data)
    ctx.inputs.append(str(data))
    if not data.is_dir():
        raise DataError(f"dataset directory not found: {data}")
    train_set = load_split(data, "train")
    val_set = load_split(data, "val") if split_path(data, "val").is_file() else None
    return {"train": train_set, "val": val_set}


def cmd_gen_synthetic(ctx: RunContext) -> None:
    config = resolve_config(SynthConfig, ctx)
    synthetic = generate_synthetic(config)
    ctx.outputs.extend(str(p) for p in write_synthetic(synthetic, ctx.out_dir))


def cmd_build_pools(ctx: RunContext) -> None:
    config = resolve_config(ContrastConfig, ctx)
    dataset = _load_dataset(ctx, ctx.args.data)
    pools = build_pools(dataset.records, config.overlap_k, config.pool_cap, config.seed, config.overlap_strict)
    ctx.outputs.append(str(write_pools(pools, ctx.out_dir / POOLS_FILE)))


def cmd_train_contrast(ctx: RunContext) -> None:
    config = resolve_config(ContrastConfig, ctx)
    dataset = _load_dataset(ctx, ctx.args.data)
    pools_path = getattr(ctx.args, "pools", None)
    if pools_path:
        ctx.inputs.append(pools_path)
        pools = read_pools(pools_path)
    else:
        pools = build_pools(dataset.records, config.overlap_k, config.pool_cap, config.seed, config.overlap_strict)
        ctx.outputs.append(str(write_pools(pools, ctx.out_dir / POOLS_FILE)))
    result = train_contrast(dataset.records, pools, config, out_dir=ctx.out_dir)
    if result.checkpoint_path is not None:
        ctx.outputs.append(str(result.checkpoint_path))
    ctx.outputs.append(str(write_contrast_report(result, ctx.out_dir)))


def cmd_train(ctx: RunContext) -> None:
    config = resolve_config(TrainConfig, ctx)
    splits = _train_splits(ctx)
    scene_params = _scene_params(ctx, config)
    result = train_prise(splits["train"], splits["val"], config, scene_params=scene_params, out_dir=ctx.out_dir)
    if result.checkpoint_path is not None:
        ctx.outputs.append(str(result.checkpoint_path))
    ctx.outputs.append(str(write_train_report(result, ctx.out_dir)))


def cmd_ablate(ctx: RunContext) -> None:
    config = resolve_config(TrainConfig, ctx)
    splits = _train_splits(ctx)
    if splits["val"] is None:
        raise DataError(f"ablation needs {split_path(ctx.args.data, 'val')}")
    rows = ablation_run(splits["train"], splits["val"], config, _scene_params(ctx, config), workers=ctx.workers)
    ctx.outputs.extend(str(p) for p in write_ablation(rows, ctx.out_dir))


def cmd_eval(ctx: RunContext) -> None:
    ctx.inputs.append(ctx.args.ckpt)
    checkpoint = load_checkpoint(ctx.args.ckpt, expected_kind="prise")
    data = Path(getattr(ctx.args, "data", "data"))
    ctx.inputs.append(str(data))
    train_set = None
    if data.is_dir():
        test_set = load_split(data, getattr(ctx.args, "split", "test"))
        if split_path(data, "train").is_file():
            train_set = load_split(data, "train")
    else:
        test_set = load_all_images(data)
    ctx.config = {"checkpoint_config": checkpoint.config, "split": getattr(ctx.args, "split", "test")}
    evaluate_checkpoint(checkpoint, test_set, out_dir=ctx.out_dir, train_set=train_set, workers=ctx.workers)
    ctx.outputs.extend(str(ctx.out_dir / name) for name in ("report.tsv", "report.json"))


def cmd_infer(ctx: RunContext) -> None:
    from components import build_relation_pipeline, run_relation_pipeline

    ctx.inputs.append(ctx.args.ckpt)
    model = PriseModel.from_checkpoint(load_checkpoint(ctx.args.ckpt, expected_kind="prise"))
    dataset = _load_dataset(ctx, ctx.args.data)
    ctx.config = {"streams": [s.value for s in model.streams], "mask_mode": model.mask_mode}
    predictions = run_relation_pipeline(build_relation_pipeline(model), dataset.records)
    ctx.outputs.append(str(write_predictions(predictions, ctx.out_dir / PREDICTIONS_FILE)))


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "gen-synthetic": cmd_gen_synthetic,
    "build-pools": cmd_build_pools,
    "train-contrast": cmd_train_contrast,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def _root_cause(error: BaseException) -> BaseException:
    """Haystack wraps component failures; surface the PriseError underneath."""
    current: Optional[BaseException] = error
    while current is not None:
        if isinstance(current, PriseError):
            return current
        current = current.__cause__ or current.__context__
    return error


def _exit_code(error: BaseException) -> int:
    if isinstance(error, (UsageError, ValidationError)):
        return EXIT_USAGE
    if isinstance(error, DataError):
        return EXIT_DATA
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    deterministic = bool(getattr(args, "deterministic", False) or settings.deterministic)
    workers = 1 if deterministic else max(1, getattr(args, "workers", settings.effective_workers()))
    out_dir = Path(getattr(args, "out", None) or Path(settings.artifact_dir) / args.command)
    ctx = RunContext(args=args, out_dir=out_dir, workers=workers)

    started = time.perf_counter()
    code = EXIT_OK
    logger.info(f"🚀 prise {args.command} (deterministic={deterministic}, workers={workers}) -> {out_dir}")
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        use_precision(getattr(args, "precision", settings.precision))
        COMMANDS[args.command](ctx)
    except Exception as e:
        cause = _root_cause(e)
        if not isinstance(cause, (PriseError, ValidationError)):
            logger.exception(f"❌ Unexpected failure in {args.command}")
            raise
        code = _exit_code(cause)
        logger.error(f"❌ {args.command} failed: {cause}")
        print(f"prise {args.command}: error: {cause}", file=sys.stderr)

    manifest = RunManifest(
        subcommand=args.command,
        config=ctx.config,
        config_hash=config_digest(ctx.config) if ctx.config else None,
        seed=ctx.config.get("seed", getattr(args, "seed", settings.seed)),
        deterministic=deterministic,
        inputs=ctx.inputs,
        outputs=ctx.outputs,
        duration_seconds=time.perf_counter() - started,
        exit_code=code,
    )
    try:
        manifest.write(out_dir)
    except OSError as e:
        logger.warning(f"⚠️ Could not write run manifest to {out_dir}: {e}")
    if code == EXIT_OK:
        logger.info(f"✅ prise {args.command} finished in {manifest.duration_seconds:.2f}s")
    return code


if __name__ == "__main__":
    sys.exit(main())
