"""Custom Haystack components for relation inference"""
from .relation_pipeline import (
    GraphEncoder,
    PairAssembler,
    RelationClassifier,
    SceneExtractor,
    build_relation_pipeline,
    run_relation_pipeline,
)

__all__ = [
    "GraphEncoder",
    "PairAssembler",
    "RelationClassifier",
    "SceneExtractor",
    "build_relation_pipeline",
    "run_relation_pipeline",
]
