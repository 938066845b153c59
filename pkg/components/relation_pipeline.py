"""Haystack components for batch relation inference"""
import logging
from typing import Any, Dict, List

import numpy as np
from haystack import Pipeline, component

from dataset.records import ImageRecord
from numeric import Tensor
from relation_head import (
    PairFeatures,
    PriseModel,
    RelationPrediction,
    assemble_pair_features,
    mlp_forward,
)
from rgcn import GraphState, encode_record
from scene_contrast import extract_scene_feature

logger = logging.getLogger(__name__)


@component
class GraphEncoder:
    """Runs the RGCN over each image's person graph."""

    def __init__(self, model: PriseModel):
        self.model = model

    @component.output_types(records=List[ImageRecord], states=List[GraphState])
    def run(self, records: List[ImageRecord]) -> Dict[str, Any]:
        rgcn = self.model.rgcn
        states = [encode_record(record, rgcn) for record in records]
        logger.info(f"🔍 GraphEncoder: encoded {len(states)} images")
        return {"records": records, "states": states}


@component
class SceneExtractor:
    """Scene feature per image, from the contrast-trained encoder or the raw input."""

    def __init__(self, model: PriseModel):
        self.model = model

    @component.output_types(scene_features=List[Tensor])
    def run(self, records: List[ImageRecord]) -> Dict[str, Any]:
        encoder = self.model.scene_encoder
        return {"scene_features": [extract_scene_feature(record, encoder) for record in records]}


@component
class PairAssembler:
    def __init__(self, model: PriseModel):
        self.model = model

    @component.output_types(image_ids=List[str], features=List[PairFeatures])
    def run(
        self,
        records: List[ImageRecord],
        states: List[GraphState],
        scene_features: List[Tensor],
    ) -> Dict[str, Any]:
        features = [
            assemble_pair_features(state, record, scene, self.model.streams, self.model.mask_mode)
            for record, state, scene in zip(records, states, scene_features)
        ]
        return {"image_ids": [r.image_id for r in records], "features": features}


@component
class RelationClassifier:
    """MLP over every pair row; images with a single person yield an empty prediction."""

    def __init__(self, model: PriseModel):
        self.model = model

    @component.output_types(predictions=List[RelationPrediction])
    def run(self, image_ids: List[str], features: List[PairFeatures]) -> Dict[str, Any]:
        predictions = []
        head = self.model.head
        for image_id, pair_features in zip(image_ids, features):
            if not pair_features.pairs:
                logger.warning(f"⚠️ RelationClassifier: image {image_id} has no person pairs")
                predictions.append(RelationPrediction(image_id=image_id, pairs=[], probabilities=np.zeros((0, self.model.n_classes))))
                continue
            _, probs = mlp_forward(pair_features.matrix, head)
            predictions.append(
                RelationPrediction(image_id=image_id, pairs=list(pair_features.pairs), probabilities=probs.data.copy())
            )
        logger.info(f"✅ RelationClassifier: predicted {sum(len(p.pairs) for p in predictions)} pairs")
        return {"predictions": predictions}


def build_relation_pipeline(model: PriseModel) -> Pipeline:
    """
    graph_encoder -> scene_extractor -> pair_assembler -> relation_classifier.
    Produces exactly what `predict_image` produces for each record.
    """
    pipeline = Pipeline()
    pipeline.add_component("graph_encoder", GraphEncoder(model))
    pipeline.add_component("scene_extractor", SceneExtractor(model))
    pipeline.add_component("pair_assembler", PairAssembler(model))
    pipeline.add_component("relation_classifier", RelationClassifier(model))

    pipeline.connect("graph_encoder.records", "scene_extractor.records")
    pipeline.connect("graph_encoder.records", "pair_assembler.records")
    pipeline.connect("graph_encoder.states", "pair_assembler.states")
    pipeline.connect("scene_extractor.scene_features", "pair_assembler.scene_features")
    pipeline.connect("pair_assembler.image_ids", "relation_classifier.image_ids")
    pipeline.connect("pair_assembler.features", "relation_classifier.features")
    logger.info("✅ Created relation inference pipeline")
    return pipeline


def run_relation_pipeline(pipeline: Pipeline, records: List[ImageRecord]) -> List[RelationPrediction]:
    result = pipeline.run({"graph_encoder": {"records": list(records)}})
    return result["relation_classifier"]["predictions"]
