"""
Contrastive scene learning: pools, triplet sampling, the bilinear scorer,
the loss, and end-to-end training on synthetic scenes.
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from checkpoints import load_checkpoint  # noqa: E402
from dataset.records import ImageRecord  # noqa: E402
from dataset.synth import SynthConfig, generate_synthetic  # noqa: E402
from errors import DataError  # noqa: E402
from numeric import Tensor, check_gradients  # noqa: E402
from scene_contrast import (  # noqa: E402
    CONTRAST_CHECKPOINT_NAME,
    ENCODER_BIAS_KEY,
    ENCODER_WEIGHT_KEY,
    SCORER_KEY,
    ContrastConfig,
    NumericWarnings,
    bilinear_score,
    bilinear_scores,
    build_pools,
    contrastive_loss,
    encode_rows,
    extract_scene_feature,
    init_contrast_params,
    rank_by_scene_similarity,
    read_pools,
    sample_triplet,
    scene_features,
    scene_similarity_gap,
    train_contrast,
    write_contrast_report,
    write_pools,
)


def _labels(**entries):
    return dict(entries)


def test_identical_top5_is_similar_for_any_k_below_five():
    for k in range(5):
        pools = build_pools({"a": [1, 2, 3, 4, 5], "b": [5, 4, 3, 2, 1], "c": [10, 11, 12, 13, 14]}, overlap_k=k)
        assert pools.similar["a"] == ["b"]
        assert pools.dissimilar["a"] == ["c"]


def test_disjoint_top5_is_dissimilar_for_any_k():
    for k in range(6):
        pools = build_pools({"a": [1, 2, 3, 4, 5], "b": [6, 7, 8, 9, 10]}, overlap_k=k)
        assert pools.similar["a"] == []
        assert pools.dissimilar["a"] == ["b"]


def test_overlap_threshold_strict_and_inclusive():
    labels = {"a": [1, 2, 3, 4, 5], "b": [1, 2, 9, 10, 11]}  # overlap 2
    assert build_pools(labels, overlap_k=2).similar["a"] == []
    assert build_pools(labels, overlap_k=2, strict=False).similar["a"] == ["b"]


def test_pool_cap_is_honored():
    labels = {f"same-{k:03d}": [0, 1, 2, 3, 4] for k in range(200)}
    labels.update({f"other-{k}": [5, 6, 7, 8, 9] for k in range(10)})
    pools = build_pools(labels, overlap_k=2, cap=50, seed=1)
    for k in range(200):
        image_id = f"same-{k:03d}"
        assert len(pools.similar[image_id]) == 50
        assert image_id not in pools.similar[image_id]
        assert len(pools.dissimilar[image_id]) == 10
    assert pools.similar == build_pools(labels, overlap_k=2, cap=50, seed=1).similar


def test_missing_labels_name_the_image():
    with pytest.raises(DataError) as exc:
        build_pools({"a": [1, 2, 3, 4, 5], "b": None})
    assert exc.value.record_id == "b"


def test_pools_file_round_trip(tmp_path):
    labels = {"a": [1, 2, 3, 4, 5], "b": [1, 2, 3, 9, 8], "c": [20, 21, 22, 23, 24]}
    pools = build_pools(labels, overlap_k=2, cap=7, strict=False)
    path = write_pools(pools, tmp_path / "pools.tsv")
    loaded = read_pools(path)
    assert loaded.similar == pools.similar
    assert loaded.dissimilar == pools.dissimilar
    assert (loaded.overlap_k, loaded.strict, loaded.cap) == (2, False, 7)


def test_malformed_pools_file_reports_line(tmp_path):
    path = tmp_path / "pools.tsv"
    path.write_text("# overlap_k=2 strict=true cap=50\na\tsim:b\n")
    with pytest.raises(DataError) as exc:
        read_pools(path)
    assert exc.value.line == 2


def test_forced_and_seeded_triplets():
    pools = build_pools({"a": [1, 2, 3, 4, 5], "b": [1, 2, 3, 4, 6], "c": [7, 8, 9, 10, 11]})
    assert sample_triplet(pools, "a", 0) == ("a", "b", "c")
    assert sample_triplet(pools, "c", 3) is None
    assert sample_triplet(pools, "a", 42) == sample_triplet(pools, "a", 42)


def test_triplet_draws_are_uniform():
    """Chi-square goodness of fit over 5 candidates; 18.47 is the 0.999 quantile at 4 dof."""
    labels = {"anchor": [0, 1, 2, 3, 4]}
    labels.update({f"s{k}": [0, 1, 2, 3, 10 + k] for k in range(5)})
    labels.update({f"d{k}": [20 + k, 30, 31, 32, 33] for k in range(5)})
    pools = build_pools(labels, overlap_k=2)
    assert len(pools.similar["anchor"]) == 5
    draws = 2500
    counts = {}
    for seed in range(draws):
        _, positive, _ = sample_triplet(pools, "anchor", seed)
        counts[positive] = counts.get(positive, 0) + 1
    expected = draws / 5
    chi2 = sum((counts.get(f"s{k}", 0) - expected) ** 2 / expected for k in range(5))
    assert chi2 < 18.47


def test_bilinear_score_analytic_values():
    x = Tensor([1.0, 0.0, 0.0])
    assert bilinear_score(x, x, Tensor(np.zeros((3, 3)))).item() == 0.5
    assert math.isclose(bilinear_score(x, x, Tensor(np.eye(3))).item(), 1.0 / (1.0 + math.exp(-1.0)), abs_tol=1e-15)
    rows = bilinear_scores(Tensor(np.eye(3)), Tensor(np.eye(3)), Tensor(np.eye(3)))
    assert np.allclose(rows.data, 1.0 / (1.0 + math.exp(-1.0)))


def test_contrastive_loss_values():
    half = Tensor([0.5])
    assert math.isclose(contrastive_loss(half, half).item(), 2 * math.log(2.0), abs_tol=1e-12)

    warnings = NumericWarnings()
    perfect = contrastive_loss(Tensor([1.0]), Tensor([0.0]), warnings)
    assert perfect.item() < 1e-10
    assert warnings.clamped == 2

    pair = contrastive_loss(Tensor([0.9, 0.6]), Tensor([0.2, 0.3]))
    expected = ((-math.log(0.9) - math.log(0.8)) + (-math.log(0.6) - math.log(0.7))) / 2
    assert math.isclose(pair.item(), expected, abs_tol=1e-12)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    F = 3
    anchors, positives, negatives = (np.abs(rng.normal(size=(4, F))) + 0.5 for _ in range(3))

    def loss(p):
        a = encode_rows(Tensor(anchors), p)
        s_pos = bilinear_scores(a, encode_rows(Tensor(positives), p), p[SCORER_KEY])
        s_neg = bilinear_scores(a, encode_rows(Tensor(negatives), p), p[SCORER_KEY])
        return contrastive_loss(s_pos, s_neg)

    values = {
        SCORER_KEY: 0.1 * rng.normal(size=(F, F)),
        ENCODER_WEIGHT_KEY: np.eye(F) + 0.05 * rng.normal(size=(F, F)),
        ENCODER_BIAS_KEY: np.full(F, 0.5),
    }
    report = check_gradients(loss, values)
    assert report.passed(1e-4), report.errors


def test_identity_encoder_passes_non_negative_input_through():
    record = ImageRecord(
        image_id="x",
        n_persons=0,
        boxes=np.zeros((0, 4)),
        person_features=np.zeros((0, 3)),
        union_features={},
        background_feature=np.zeros(3),
        raw_scene_input=np.array([0.5, 2.0, 0.0]),
    )
    params = init_contrast_params(3)
    assert np.array_equal(extract_scene_feature(record, params).data, record.raw_scene_input)
    assert np.array_equal(extract_scene_feature(record, params).data, extract_scene_feature(record, params).data)
    assert np.array_equal(extract_scene_feature(record, None).data, record.raw_scene_input)

    record.raw_scene_input = np.array([0.5, -2.0, 1.0])
    assert np.array_equal(extract_scene_feature(record, params).data, [0.5, 0.0, 1.0])
    assert np.array_equal(extract_scene_feature(record, None).data, record.raw_scene_input)


def test_contrast_config_rejects_bad_values():
    with pytest.raises(ValueError):
        ContrastConfig(overlap_k=6)
    with pytest.raises(ValueError):
        ContrastConfig(lr=0.0)


def _synthetic(n_images=500, seed=7):
    synthetic = generate_synthetic(SynthConfig(n_images=n_images, seed=seed))
    return synthetic, synthetic.all_records()


def test_training_reaches_high_heldout_auc(tmp_path):
    synthetic, records = _synthetic()
    config = ContrastConfig(lr=1e-3, epochs=20, seed=7)
    pools = build_pools(records, config.overlap_k, config.pool_cap, config.seed)
    result = train_contrast(records, pools, config, out_dir=tmp_path)

    assert len(result.history) == 20
    assert max(row["heldout_auc"] for row in result.history) >= 0.95
    assert result.history[-1]["loss"] < result.history[0]["loss"]

    checkpoint = load_checkpoint(tmp_path / CONTRAST_CHECKPOINT_NAME, expected_kind="contrast")
    assert checkpoint.epoch == 20
    assert np.array_equal(checkpoint.params[SCORER_KEY], result.params[SCORER_KEY].data)

    report = write_contrast_report(result, tmp_path)
    assert "epoch.20.heldout_auc" in report.read_text()

    features = scene_features(records, result.params)
    same, different = scene_similarity_gap(features, synthetic.truth.scene_of)
    assert same > different

    query = records[0].image_id
    top = rank_by_scene_similarity(query, features, top=10)
    hits = sum(synthetic.truth.scene_of[i] == synthetic.truth.scene_of[query] for i, _ in top)
    assert hits >= 8


def test_training_is_deterministic():
    _, records = _synthetic(n_images=60, seed=3)
    config = ContrastConfig(lr=1e-3, epochs=3, batch_size=8, seed=3)
    pools = build_pools(records, config.overlap_k, config.pool_cap, config.seed)
    first = train_contrast(records, pools, config)
    second = train_contrast(records, pools, config)
    assert first.history == second.history
    assert np.array_equal(first.params[SCORER_KEY].data, second.params[SCORER_KEY].data)


def test_pools_must_cover_dataset_images():
    _, records = _synthetic(n_images=10, seed=1)
    pools = build_pools({"ghost": [0, 1, 2, 3, 4], records[0].image_id: records[0].pseudo_top5})
    with pytest.raises(DataError):
        train_contrast(records, pools, ContrastConfig(epochs=1))
