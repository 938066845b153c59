"""
Pair feature assembly, the MLP classifier and the weighted classification loss.
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from dataset.records import ImageRecord, all_pairs, canonical_pair  # noqa: E402
from errors import DataError, DimensionError, UsageError  # noqa: E402
from numeric import Tensor, check_gradients  # noqa: E402
from relation_head import (  # noqa: E402
    HEAD_HIDDEN_BIAS,
    HEAD_HIDDEN_WEIGHT,
    HEAD_OUTPUT_BIAS,
    HEAD_OUTPUT_WEIGHT,
    LabelStats,
    PriseModel,
    Stream,
    assemble_pair_features,
    classification_loss,
    init_head_params,
    input_dim,
    mlp_forward,
    normalize_streams,
    predict_image,
)
from rgcn import encode_record, init_rgcn_params  # noqa: E402
from scene_contrast import extract_scene_feature, init_contrast_params  # noqa: E402


def _record(n, F, seed=0, image_id="img"):
    rng = np.random.default_rng(seed)
    return ImageRecord(
        image_id=image_id,
        n_persons=n,
        boxes=np.zeros((n, 4)),
        person_features=rng.normal(size=(n, F)),
        union_features={p: rng.normal(size=F) for p in all_pairs(n)},
        background_feature=rng.normal(size=F),
        raw_scene_input=np.abs(rng.normal(size=F)),
        pseudo_top5=[0, 1, 2, 3, 4],
    )


def _model(F, C=3, seed=0, hidden=8, streams=None, mask_mode="remove"):
    streams = normalize_streams(streams or list(Stream))
    params = dict(init_rgcn_params(F, 2, seed).named())
    params.update(init_head_params(input_dim(F, streams, mask_mode), hidden, C, seed))
    encoder = init_contrast_params(F)
    params.update({k: v for k, v in encoder.items() if k.startswith("scene.encoder")})
    # non-zero output layer so predictions depend on the input
    rng = np.random.default_rng(seed + 1)
    params[HEAD_OUTPUT_WEIGHT] = Tensor(rng.normal(size=(C, hidden)), requires_grad=True)
    return PriseModel(params=params, n_classes=C, feature_dim=F, streams=streams, mask_mode=mask_mode)


def _assemble(record, F, streams=None, mask_mode="remove"):
    state = encode_record(record, init_rgcn_params(F, 2, seed=0))
    scene = extract_scene_feature(record, None)
    return assemble_pair_features(state, record, scene, normalize_streams(streams or list(Stream)), mask_mode)


def test_fused_dimension_is_four_f():
    assert input_dim(4, list(Stream)) == 16
    features = _assemble(_record(3, 4), 4)
    assert features.matrix.shape == (3, 16)
    assert len(features.as_list()) == 3


def test_image_level_blocks_are_shared_by_every_pair():
    record = _record(3, 4, seed=1)
    features = _assemble(record, 4)
    background = features.block(Stream.BACKGROUND)
    scene = features.block(Stream.SCENE)
    for row in range(3):
        assert np.array_equal(background[row], record.background_feature)
        assert np.array_equal(scene[row], record.raw_scene_input)
    foreground = features.block(Stream.FOREGROUND)
    for row, pair in enumerate(features.pairs):
        assert np.array_equal(foreground[row], record.union_features[pair])


def test_concatenation_order_is_fixed():
    features = _assemble(_record(2, 3), 3)
    assert features.blocks == (Stream.INTERACTIVE, Stream.FOREGROUND, Stream.BACKGROUND, Stream.SCENE)


def test_single_person_gives_no_pair_features():
    features = _assemble(_record(1, 4), 4)
    assert features.pairs == []
    assert features.matrix.shape == (0, 16)


def test_missing_union_feature_names_the_pair():
    record = _record(3, 4)
    del record.union_features[(0, 2)]
    with pytest.raises(DataError) as exc:
        _assemble(record, 4)
    assert exc.value.field == "union_features[0,2]"


def test_masked_streams_remove_or_zero_their_block():
    record = _record(3, 4)
    removed = _assemble(record, 4, streams=["interactive", "foreground", "background"], mask_mode="remove")
    assert removed.matrix.shape == (3, 12)
    assert Stream.SCENE not in removed.blocks

    zeroed = _assemble(record, 4, streams=["interactive", "foreground", "background"], mask_mode="zero")
    assert zeroed.matrix.shape == (3, 16)
    assert np.array_equal(zeroed.block(Stream.SCENE), np.zeros((3, 4)))


def test_unknown_stream_or_mask_mode_is_a_usage_error():
    with pytest.raises(UsageError):
        normalize_streams(["interactive", "weather"])
    with pytest.raises(UsageError):
        input_dim(4, list(Stream), mask_mode="drop")


def test_zero_output_layer_gives_uniform_probabilities():
    params = init_head_params(6, 5, 3, seed=0)
    _, probs = mlp_forward(Tensor(np.random.default_rng(0).normal(size=(4, 6))), params)
    assert np.allclose(probs.data, 1.0 / 3.0, atol=1e-15)


def test_mlp_hand_two_class_example():
    params = {
        HEAD_HIDDEN_WEIGHT: Tensor(np.eye(2)),
        HEAD_HIDDEN_BIAS: Tensor(np.zeros(2)),
        HEAD_OUTPUT_WEIGHT: Tensor(np.eye(2)),
        HEAD_OUTPUT_BIAS: Tensor(np.zeros(2)),
    }
    logits, probs = mlp_forward(Tensor([1.0, -1.0]), params)
    assert np.array_equal(logits.data, [1.0, 0.0])
    e = math.e
    assert np.allclose(probs.data, [e / (e + 1.0), 1.0 / (e + 1.0)], atol=1e-15)


def test_logit_shift_leaves_probabilities_unchanged():
    params = init_head_params(3, 4, 3, seed=2)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3)))
    _, base = mlp_forward(x, params)
    shifted = dict(params)
    shifted[HEAD_OUTPUT_BIAS] = Tensor(np.full(3, 7.5))
    _, probs = mlp_forward(x, shifted)
    assert np.allclose(base.data, probs.data, atol=1e-15)


def test_mlp_rejects_wrong_input_width():
    with pytest.raises(DimensionError):
        mlp_forward(Tensor(np.zeros((2, 5))), init_head_params(6, 4, 3, seed=0))


def test_uniform_predictions_loss_is_log_c():
    probs = Tensor(np.full((4, 6), 1.0 / 6.0))
    loss = classification_loss(probs, [0, 3, 5, 1])
    assert np.isclose(loss.item(), math.log(6.0), atol=1e-12)


def test_perfect_predictions_loss_is_zero():
    probs = Tensor(np.eye(3))
    assert classification_loss(probs, [0, 1, 2]).item() == 0.0


def test_weighted_loss_hand_example():
    probs = Tensor([[0.8, 0.2], [0.4, 0.6]])
    loss = classification_loss(probs, [0, 1], class_weights=[1.0, 2.0])
    expected = (1.0 * -math.log(0.8) + 2.0 * -math.log(0.6)) / 3.0
    assert np.isclose(loss.item(), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_head_and_weighted_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    rows, in_dim, hidden, C = (int(v) for v in rng.integers([1, 2, 2, 2], [6, 6, 5, 5]))
    inputs = {name: p.data for name, p in init_head_params(in_dim, hidden, C, seed=seed).items()}
    inputs[HEAD_OUTPUT_WEIGHT] = rng.normal(size=(C, hidden))
    inputs[HEAD_OUTPUT_BIAS] = rng.normal(size=C)
    inputs[HEAD_HIDDEN_BIAS] = rng.normal(scale=0.1, size=hidden)
    inputs["x"] = rng.normal(size=(rows, in_dim))
    labels = [int(y) for y in rng.integers(0, C, size=rows)]
    weights = rng.uniform(0.5, 2.0, size=C)

    def loss(p):
        _, probs = mlp_forward(p["x"], {k: v for k, v in p.items() if k != "x"})
        return classification_loss(probs, labels, class_weights=weights)

    report = check_gradients(loss, inputs)
    assert report.passed(1e-4), report.errors


def test_unlabeled_pairs_strict_and_lenient():
    probs = Tensor(np.full((3, 2), 0.5))
    with pytest.raises(DataError):
        classification_loss(probs, [0, None, 1])
    stats = LabelStats()
    loss = classification_loss(probs, [0, None, 1], strict=False, stats=stats)
    assert stats.unlabeled_excluded == 1
    assert np.isclose(loss.item(), math.log(2.0), atol=1e-12)


def test_predict_image_two_persons_gives_one_pair():
    prediction = predict_image(_record(2, 4), _model(4))
    assert prediction.pairs == [(0, 1)]
    assert prediction.probabilities.shape == (1, 3)
    assert np.isclose(prediction.probabilities.sum(), 1.0)


def test_predict_image_single_person_is_empty():
    prediction = predict_image(_record(1, 4), _model(4))
    assert prediction.pairs == []
    assert prediction.to_lines() == []


def _relabel(record, perm):
    inverse = np.argsort(perm)
    return ImageRecord(
        image_id=record.image_id,
        n_persons=record.n_persons,
        boxes=record.boxes[inverse],
        person_features=record.person_features[inverse],
        union_features={canonical_pair(perm[i], perm[j]): v for (i, j), v in record.union_features.items()},
        background_feature=record.background_feature,
        raw_scene_input=record.raw_scene_input,
        pseudo_top5=record.pseudo_top5,
    )


def test_pair_predictions_do_not_depend_on_person_order():
    model = _model(4, seed=3)
    record = _record(4, 4, seed=3)
    perm = [2, 0, 3, 1]
    original = predict_image(record, model)
    relabeled = predict_image(_relabel(record, perm), model)
    for i, j in all_pairs(4):
        assert np.allclose(relabeled.probability(perm[i], perm[j]), original.probability(i, j), rtol=0, atol=1e-12)


def test_prediction_lines_format():
    prediction = predict_image(_record(3, 4, image_id="photo-1"), _model(4))
    lines = prediction.to_lines()
    assert len(lines) == 3
    fields = lines[0].split()
    assert fields[:3] == ["photo-1", "0", "1"]
    assert len(fields) == 3 + 3 + 1
    assert int(fields[-1]) == int(np.argmax([float(v) for v in fields[3:6]]))
