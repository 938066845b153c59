"""
End-to-end relation training on synthetic data, evaluation reports and the
ablation harness.
"""

import json
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from checkpoints import load_checkpoint  # noqa: E402
from dataset.synth import SynthConfig, generate_synthetic  # noqa: E402
from errors import DataError  # noqa: E402
from numeric import GradTape, Tensor, backward, use_precision  # noqa: E402
from relation_head import HEAD_OUTPUT_WEIGHT, Stream, classification_loss, forward_image, predict_image  # noqa: E402
from rgcn import encode_record  # noqa: E402
from scene_contrast import ENCODER_BIAS_KEY, ENCODER_WEIGHT_KEY  # noqa: E402
from trainer import (  # noqa: E402
    ABLATION_VARIANTS,
    PRISE_CHECKPOINT_NAME,
    REPORT_JSON,
    REPORT_TSV,
    TrainConfig,
    ablation_run,
    build_model,
    evaluate_checkpoint,
    evaluate_model,
    predict_dataset,
    train_prise,
    trainable_names,
    variant_config,
    write_ablation,
    write_train_report,
)


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SynthConfig())


@pytest.fixture(scope="module")
def trained(synthetic, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("train")
    result = train_prise(synthetic.dataset("train"), synthetic.dataset("val"), TrainConfig(), out_dir=out_dir)
    return result, out_dir


def test_default_synthetic_run_reaches_target_accuracy(synthetic, trained):
    result, _ = trained
    evaluation = evaluate_model(result.model, synthetic.dataset("test"))
    assert evaluation["accuracy"] >= 0.90


def test_history_and_best_epoch(trained):
    result, out_dir = trained
    assert [row["epoch"] for row in result.history] == list(range(1, 21))
    best = max(row["val_accuracy"] for row in result.history)
    first_best = next(row["epoch"] for row in result.history if row["val_accuracy"] == best)
    assert result.best_epoch == first_best
    assert result.best_val_accuracy == best
    assert result.history[-1]["loss"] < result.history[0]["loss"]

    checkpoint = load_checkpoint(out_dir / PRISE_CHECKPOINT_NAME, expected_kind="prise")
    assert checkpoint.epoch == result.best_epoch
    assert len(checkpoint.history) == 20

    report = write_train_report(result, out_dir).read_text()
    assert f"best_epoch\t{result.best_epoch}" in report
    assert "epoch.20.val_map" in report


def test_evaluate_checkpoint_writes_reports(synthetic, trained, tmp_path):
    _, out_dir = trained
    report = evaluate_checkpoint(
        out_dir / PRISE_CHECKPOINT_NAME, synthetic.dataset("test"), out_dir=tmp_path, train_set=synthetic.dataset("train")
    )
    assert (tmp_path / REPORT_TSV).is_file()
    stored = json.loads((tmp_path / REPORT_JSON).read_text())
    assert stored["accuracy"] == report["accuracy"]
    assert report["n_pairs"] == synthetic.dataset("test").labeled_pair_count()
    assert report["weighted_recall"] == pytest.approx(report["accuracy"], abs=1e-12)
    assert 0.0 <= report["majority_baseline_accuracy"] <= 1.0
    assert sum(sum(row) for row in report["confusion_matrix"]) == report["n_pairs"]
    assert (tmp_path / REPORT_TSV).read_text().startswith("# prise evaluation report\n")
    assert 0.0 <= stored["train_accuracy"] <= 1.0


def test_evaluation_ignores_image_order(synthetic, trained):
    _, out_dir = trained
    test_set = synthetic.dataset("test")
    shuffled = test_set.subset([test_set.records[k] for k in np.random.default_rng(0).permutation(len(test_set))])
    a = evaluate_checkpoint(out_dir / PRISE_CHECKPOINT_NAME, test_set)
    b = evaluate_checkpoint(out_dir / PRISE_CHECKPOINT_NAME, shuffled)
    assert a["accuracy"] == b["accuracy"]
    assert a["map"] == pytest.approx(b["map"], abs=1e-12)
    assert a["confusion_matrix"] == b["confusion_matrix"]
    assert "train_accuracy" not in a


def test_class_count_mismatch_is_a_data_error(trained):
    _, out_dir = trained
    other = generate_synthetic(SynthConfig(n_images=10, n_classes=4, seed=1))
    with pytest.raises(DataError):
        evaluate_checkpoint(out_dir / PRISE_CHECKPOINT_NAME, other.dataset("test"))


def test_threaded_prediction_matches_serial(synthetic, trained):
    result, _ = trained
    records = synthetic.dataset("test").records
    serial = predict_dataset(records, result.model)
    threaded = predict_dataset(records, result.model, workers=2)
    assert [p.image_id for p in threaded] == [p.image_id for p in serial]
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.probabilities, b.probabilities)


def _small(seed=3, **overrides):
    values = {"n_images": 40, "seed": seed}
    values.update(overrides)
    return generate_synthetic(SynthConfig(**values))


def test_training_is_deterministic():
    synthetic = _small()
    config = TrainConfig(epochs=2, hidden=8, batch_size=8, lr=1e-3, seed=5)
    first = train_prise(synthetic.dataset("train"), synthetic.dataset("val"), config)
    second = train_prise(synthetic.dataset("train"), synthetic.dataset("val"), config)
    assert first.history == second.history
    for name, tensor in first.model.params.items():
        assert np.array_equal(tensor.data, second.model.params[name].data)


def test_zero_learning_rate_leaves_parameters_unchanged():
    synthetic = _small()
    config = TrainConfig(epochs=2, hidden=8, batch_size=8, lr=0.0)
    result = train_prise(synthetic.dataset("train"), None, config)
    initial = build_model(config, synthetic.header.n_classes, synthetic.header.feature_dim)
    for name, tensor in initial.params.items():
        assert np.array_equal(result.model.params[name].data, tensor.data)


def test_empty_training_set_is_a_data_error():
    synthetic = _small()
    with pytest.raises(DataError):
        train_prise(synthetic.dataset("train").subset([]), None, TrainConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(streams=[])
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_frozen_encoder_is_not_updated():
    synthetic = _small()
    config = TrainConfig(epochs=1, hidden=8, batch_size=8, lr=1e-2)
    result = train_prise(synthetic.dataset("train"), None, config)
    encoder = result.model.scene_encoder
    assert all(np.array_equal(t.data, np.eye(32)) for k, t in encoder.items() if k.endswith("weight"))

    tuned = train_prise(synthetic.dataset("train"), None, config.model_copy(update={"finetune_scene_encoder": True}))
    assert any(not np.array_equal(t.data, np.eye(32)) for k, t in tuned.model.scene_encoder.items() if k.endswith("weight"))


def test_variant_configs_drop_one_stream():
    base = TrainConfig(repeats=2)
    for name, overrides in ABLATION_VARIANTS:
        config = variant_config(base, overrides, repeat=1)
        if "drop" in overrides:
            assert overrides["drop"] not in config.streams
            assert len(config.streams) == 3
        else:
            assert config.streams == list(Stream)
    assert variant_config(base, {}, 0).seed != variant_config(base, {}, 1).seed


def test_ablation_directionality(tmp_path):
    # Every stream carries something only it knows: the setting lives in the
    # background, class shifts in the union feature, roles in the persons.
    synthetic = generate_synthetic(
        SynthConfig(
            n_images=300,
            n_settings=2,
            flip_rate=0.2,
            offset_scale=0.0,
            union_noise_factor=10.0,
            relation_purity=1.0,
            train_fraction=0.6,
            val_fraction=0.4,
            seed=11,
        )
    )
    base = TrainConfig(lr=1e-3, epochs=20, batch_size=16, hidden=64, repeats=5)
    rows = ablation_run(synthetic.dataset("train"), synthetic.dataset("val"), base, workers=2)
    assert [row.variant for row in rows] == [name for name, _ in ABLATION_VARIANTS]
    assert all(len(row.accuracies) == 5 for row in rows)

    by_name = {row.variant: row.accuracy_mean for row in rows}
    full = by_name.pop("PRISE")
    assert all(full >= score for score in by_name.values()), (full, by_name)
    worst = by_name.pop("w/o Int.")
    assert all(worst < score for score in by_name.values()), (worst, by_name)

    tsv, js = write_ablation(rows, tmp_path)
    assert len(tsv.read_text().splitlines()) == 1 + len(ABLATION_VARIANTS)
    assert [entry["variant"] for entry in json.loads(js.read_text())] == [row.variant for row in rows]


def test_wide_features_forward_and_backward():
    synthetic = generate_synthetic(SynthConfig(n_images=1, feature_dim=2048, min_persons=5, max_persons=5, seed=2))
    record = synthetic.all_records()[0]
    config = TrainConfig(hidden=8, rgcn_depth=2)
    model = build_model(config, synthetic.header.n_classes, 2048)
    params = dict(model.params)
    # non-zero output layer so gradients reach the graph weights
    params[HEAD_OUTPUT_WEIGHT] = Tensor(np.random.default_rng(3).normal(size=(synthetic.header.n_classes, 8)), requires_grad=True)
    model = model.with_params(params)
    names = trainable_names(model, config)

    started = time.perf_counter()
    with GradTape() as tape:
        features, _, probs = forward_image(record, model)
        loss = classification_loss(probs, [record.label(i, j) for i, j in features.pairs])
    grads = backward(loss, tape).for_params({k: model.params[k] for k in names})
    elapsed = time.perf_counter() - started

    assert elapsed < 30.0
    assert probs.shape == (10, synthetic.header.n_classes)
    assert features.matrix.shape == (10, 4 * 2048)
    assert np.isfinite(loss.item())
    for name in names:
        assert grads[name].shape == model.params[name].shape
        assert np.all(np.isfinite(grads[name]))
    assert any(np.any(grads[name] != 0) for name in names if name.startswith("rgcn."))


@pytest.mark.parametrize("mask_mode", ["remove", "zero"])
def test_masked_stream_parameters_never_move(mask_mode):
    synthetic = _small()
    config = TrainConfig(
        epochs=2, hidden=8, batch_size=8, lr=1e-2, mask_mode=mask_mode,
        streams=["foreground", "background", "scene"], finetune_scene_encoder=True,
    )
    result = train_prise(synthetic.dataset("train"), None, config)
    initial = build_model(config, synthetic.header.n_classes, synthetic.header.feature_dim)
    for name, tensor in initial.params.items():
        if name.startswith("rgcn."):
            assert np.array_equal(result.model.params[name].data, tensor.data), name
    assert any(
        not np.array_equal(result.model.params[name].data, tensor.data)
        for name, tensor in initial.params.items()
        if name.startswith("head.")
    )

    no_scene = config.model_copy(update={"streams": ["interactive", "foreground", "background"]})
    result = train_prise(synthetic.dataset("train"), None, no_scene)
    initial = build_model(no_scene, synthetic.header.n_classes, synthetic.header.feature_dim)
    for name in (ENCODER_WEIGHT_KEY, ENCODER_BIAS_KEY):
        assert name in trainable_names(result.model, no_scene)
        assert np.array_equal(result.model.params[name].data, initial.params[name].data), name


def test_float32_precision_carries_through_training():
    synthetic = _small()
    use_precision("float32")
    try:
        result = train_prise(synthetic.dataset("train"), None, TrainConfig(epochs=1, hidden=8, batch_size=8, lr=1e-3))
        assert all(t.dtype == np.float32 for t in result.model.params.values())
        record = next(r for r in synthetic.dataset("train").records if r.n_persons > 1)
        state = encode_record(record, result.model.rgcn)
        assert state.fused.dtype == np.float32
        assert predict_image(record, result.model).probabilities.dtype == np.float32
    finally:
        use_precision("float64")
    fresh = build_model(TrainConfig(hidden=8), synthetic.header.n_classes, synthetic.header.feature_dim)
    assert all(t.dtype == np.float64 for t in fresh.params.values())
