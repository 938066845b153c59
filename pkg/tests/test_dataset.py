"""
Dataset files, record validation and the synthetic generator's planted structure.
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from dataset.io import (  # noqa: E402
    Dataset,
    load_all_images,
    load_dataset,
    load_splits,
    save_dataset,
    split_path,
)
from dataset.records import ImageRecord, all_pairs, records_equal, validate_record  # noqa: E402
from dataset.synth import SynthConfig, generate_synthetic, write_synthetic  # noqa: E402
from errors import DataError  # noqa: E402


def _small(**overrides):
    values = {"n_images": 10, "seed": 3}
    values.update(overrides)
    return generate_synthetic(SynthConfig(**values))


def test_generation_is_bit_identical_per_seed(tmp_path):
    write_synthetic(_small(), tmp_path / "a")
    write_synthetic(_small(), tmp_path / "b")
    for split in ("train", "val", "test"):
        assert split_path(tmp_path / "a", split).read_bytes() == split_path(tmp_path / "b", split).read_bytes()


def test_different_seeds_differ():
    a = _small().all_records()
    b = _small(seed=4).all_records()
    assert not all(records_equal(x, y) for x, y in zip(a, b))


def test_round_trip_reproduces_records(tmp_path):
    synthetic = _small(n_unlabeled=3)
    write_synthetic(synthetic, tmp_path)
    for split, records in synthetic.splits.items():
        loaded = load_dataset(split_path(tmp_path, split))
        assert loaded.header == synthetic.header
        assert len(loaded.records) == len(records)
        assert all(records_equal(x, y) for x, y in zip(loaded.records, records))


def test_split_sizes_and_unlabeled_images():
    synthetic = generate_synthetic(SynthConfig(n_images=500, n_unlabeled=20))
    sizes = {name: len(records) for name, records in synthetic.splits.items()}
    assert sizes == {"train": 400, "val": 50, "test": 50, "unlabeled": 20}
    assert all(not r.is_labeled for r in synthetic.splits["unlabeled"])
    assert all(len(r.pair_labels) == len(r.pairs()) for r in synthetic.splits["train"])


def test_every_generated_record_is_valid():
    synthetic = generate_synthetic(SynthConfig(n_images=60, min_persons=1, max_persons=6, seed=12))
    for record in synthetic.all_records():
        assert validate_record(record, feature_dim=32, n_classes=3) is None


def test_truncated_file_reports_the_line(tmp_path):
    write_synthetic(_small(), tmp_path)
    path = split_path(tmp_path, "train")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1] + [lines[-1][: len(lines[-1]) // 2]]) + "\n")
    with pytest.raises(DataError) as exc:
        load_dataset(path)
    assert exc.value.line == len(lines)


def test_bad_header_and_duplicates_are_data_errors(tmp_path):
    synthetic = _small()
    path = tmp_path / "train.jsonl"
    save_dataset(synthetic.dataset("train"), path)
    lines = path.read_text().splitlines()

    path.write_text(lines[0].replace('"version": 1', '"version": 9') + "\n" + "\n".join(lines[1:]) + "\n")
    with pytest.raises(DataError) as exc:
        load_dataset(path)
    assert exc.value.line == 1

    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(DataError) as exc:
        load_dataset(path)
    assert exc.value.field == "image_id"


def test_missing_paths_are_data_errors(tmp_path):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nope.jsonl")
    with pytest.raises(DataError):
        load_splits(tmp_path / "nowhere")
    with pytest.raises(DataError):
        load_all_images(tmp_path)


def test_load_all_images_merges_splits(tmp_path):
    synthetic = _small(n_unlabeled=2)
    write_synthetic(synthetic, tmp_path)
    merged = load_all_images(tmp_path)
    assert len(merged) == 12
    assert {r.image_id for r in merged.records} == {r.image_id for r in synthetic.all_records()}


def _record(n=3, F=4):
    rng = np.random.default_rng(0)
    return ImageRecord(
        image_id="hand",
        n_persons=n,
        boxes=np.zeros((n, 4)),
        person_features=rng.normal(size=(n, F)),
        union_features={p: rng.normal(size=F) for p in all_pairs(n)},
        background_feature=rng.normal(size=F),
        raw_scene_input=rng.random(F),
        pseudo_top5=[4, 1, 7, 0, 2],
        pair_labels={(0, 1): 1},
    )


def test_validate_record_cases():
    assert validate_record(_record(), feature_dim=4, n_classes=3) is None

    missing = _record()
    del missing.union_features[(0, 2)]
    violation = validate_record(missing, feature_dim=4)
    assert violation.field == "union_features[0,2]"

    duplicate = _record()
    duplicate.pseudo_top5 = [4, 1, 7, 1, 2]
    assert validate_record(duplicate).field == "pseudo_top5[3]"

    short = _record()
    short.pseudo_top5 = [1, 2, 3]
    assert validate_record(short).field == "pseudo_top5"

    bad_label = _record()
    bad_label.pair_labels = {(0, 1): 3}
    assert validate_record(bad_label, n_classes=3).field == "pair_labels[0,1]"

    wrong_dim = _record()
    assert validate_record(wrong_dim, feature_dim=5).field == "background_feature"


def test_noise_free_features_sit_on_planted_centroids():
    config = SynthConfig(n_images=20, noise=0.0, seed=5)
    synthetic = generate_synthetic(config)
    truth = synthetic.truth
    for record in synthetic.all_records():
        scene = truth.scene_of[record.image_id]
        roles = truth.roles_of[record.image_id]
        assert np.array_equal(record.person_features, truth.role_centroids[roles])
        assert np.array_equal(record.background_feature, truth.background_centroids[scene])
        assert np.array_equal(record.raw_scene_input, truth.scene_centroids[scene])
        for (i, j), label in record.pair_labels.items():
            expected = 0.5 * (record.person_features[i] + record.person_features[j]) + truth.class_offsets[label]
            assert np.allclose(record.union_features[(i, j)], expected, rtol=0, atol=1e-12)


def test_class_histogram_matches_planted_distribution():
    """Cluster-robust standard errors: pairs within one image share a scene."""
    config = SynthConfig(n_images=800, seed=21)
    synthetic = generate_synthetic(config)
    records = synthetic.all_records()
    expected = synthetic.truth.class_distribution(config)
    n_pairs = np.array([len(r.pair_labels) for r in records], dtype=float)
    total = n_pairs.sum()
    for c in range(config.n_classes):
        counts = np.array([sum(1 for v in r.pair_labels.values() if v == c) for r in records], dtype=float)
        observed = counts.sum() / total
        se = np.sqrt(np.sum((counts - observed * n_pairs) ** 2)) / total
        assert abs(observed - expected[c]) <= 4 * se + 1e-3, (c, observed, expected[c], se)


def _mutual_information(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    mi = 0.0
    for x in np.unique(a):
        for y in np.unique(b):
            joint = np.mean((a == x) & (b == y))
            if joint > 0:
                mi += joint * np.log(joint / (np.mean(a == x) * np.mean(b == y)))
    return mi


def test_top1_pseudo_label_carries_scene_signal():
    """Permutation test on mutual information, p < 0.01."""
    synthetic = generate_synthetic(SynthConfig(n_images=300, seed=8))
    records = synthetic.all_records()
    top1 = [r.pseudo_top5[0] for r in records]
    scenes = [synthetic.truth.scene_of[r.image_id] for r in records]
    actual = _mutual_information(top1, scenes)
    rng = np.random.default_rng(0)
    n_shuffles = 300
    at_least = sum(_mutual_information(top1, rng.permutation(scenes)) >= actual for _ in range(n_shuffles))
    p_value = (at_least + 1) / (n_shuffles + 1)
    assert p_value < 0.01


def test_dataset_subset_keeps_header():
    synthetic = _small()
    dataset = synthetic.dataset("train")
    sub = dataset.subset(dataset.records[:2])
    assert isinstance(sub, Dataset)
    assert sub.header == dataset.header
    assert len(sub) == 2


def test_config_invariants_are_enforced():
    with pytest.raises(ValueError):
        SynthConfig(n_classes=1)
    with pytest.raises(ValueError):
        SynthConfig(min_persons=4, max_persons=2)


def test_settings_and_flips_follow_their_planted_markers():
    config = SynthConfig(n_images=30, noise=0.0, n_settings=2, flip_rate=0.5, relation_purity=1.0, seed=12)
    synthetic = generate_synthetic(config)
    truth = synthetic.truth
    flips = 0
    for record in synthetic.all_records():
        scene = truth.scene_of[record.image_id]
        setting = truth.setting_of[record.image_id]
        roles = truth.roles_of[record.image_id]
        assert np.array_equal(record.background_feature, truth.setting_centroids[setting])
        for (i, j), label in record.pair_labels.items():
            shifted = (i, j) in truth.flipped_of[record.image_id]
            flips += shifted
            dominant = truth.dominant_class(roles[i], roles[j], scene, setting)
            assert label == (dominant + shifted) % config.n_classes
            expected = 0.5 * (record.person_features[i] + record.person_features[j]) + truth.class_offsets[dominant]
            if shifted:
                expected = expected + truth.flip_marker
            assert np.allclose(record.union_features[(i, j)], expected, rtol=0, atol=1e-12)
    assert flips > 0


def test_default_generator_ignores_the_extra_knobs():
    base = generate_synthetic(SynthConfig(n_images=10, seed=4))
    tuned = generate_synthetic(SynthConfig(n_images=10, seed=4, flip_scale=5.0))
    for a, b in zip(base.all_records(), tuned.all_records()):
        assert np.array_equal(a.background_feature, b.background_feature)
        for pair, union in a.union_features.items():
            assert np.array_equal(union, b.union_features[pair])
    assert all(not flipped for flipped in base.truth.flipped_of.values())
