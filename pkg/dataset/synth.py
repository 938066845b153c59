"""
Seeded synthetic datasets with planted structure.

Each image gets a latent scene type s. Every person carries a latent role g;
person features are role-conditioned Gaussian draws. A pair's relation class
is decided by the roles of its two persons, except that pairs of same-role
persons (similar-looking interactions) take a scene-specific class: without
scene context those pairs are ambiguous. The union feature x_ij is the mean
of the two person features plus a class offset plus heavy noise, so the pair
interaction carries most of the signal and the scene disambiguates the rest.

The scene type also drives the background feature, the raw scene input
(non-negative, like pooled CNN activations) and the pseudo top-5 scene
labels, which come from noisy ranked scores over a larger set of pseudo
scene classes.

Two opt-in knobs give every stream something only it carries. With
n_settings > 1 each image also gets a latent setting z that alone drives the
background and shifts the class of same-role pairs by z. With flip_rate > 0 a
pair's class is shifted by one with that probability, and only its union
feature carries the marker of the shift. Both default to off, leaving the
random stream of the base generator untouched.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, model_validator

from dataset.io import UNLABELED_SPLIT, Dataset, DatasetHeader, save_dataset, split_path
from dataset.records import TOP_K_SCENES, ImageRecord, all_pairs, ensure_valid
from utils.seeding import make_rng

logger = logging.getLogger(__name__)


class SynthConfig(BaseModel):
    n_images: int = 500
    feature_dim: int = 32
    n_classes: int = 3
    n_scene_types: int = 4
    n_pseudo_classes: int = 20
    n_roles: int = 3
    min_persons: int = 2
    max_persons: int = 5
    noise: float = 0.3
    union_noise_factor: float = 4.0
    offset_scale: float = 0.25
    scene_scale: float = 3.0
    pseudo_label_noise: float = 1.0
    relation_purity: float = 0.95
    n_settings: int = 1
    flip_rate: float = 0.0
    flip_scale: float = 2.0
    n_unlabeled: int = 0
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    coarse_map: Optional[List[int]] = None
    seed: int = 7

    @model_validator(mode="after")
    def _check_invariants(self) -> "SynthConfig":
        if self.n_classes < 2:
            raise ValueError("n_classes (C) must be >= 2")
        if self.n_scene_types < 2:
            raise ValueError("n_scene_types (S) must be >= 2")
        if self.feature_dim < 4:
            raise ValueError("feature_dim (F) must be >= 4")
        if self.n_pseudo_classes < TOP_K_SCENES:
            raise ValueError(f"n_pseudo_classes must be >= {TOP_K_SCENES}")
        if self.n_roles < 1:
            raise ValueError("n_roles must be >= 1")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not 1 <= self.min_persons <= self.max_persons:
            raise ValueError("need 1 <= min_persons <= max_persons")
        if self.noise < 0 or self.union_noise_factor < 0 or self.pseudo_label_noise < 0 or self.scene_scale <= 0:
            raise ValueError("noise levels must be non-negative and scene_scale positive")
        if not 0.0 < self.relation_purity <= 1.0:
            raise ValueError("relation_purity must be in (0, 1]")
        if self.n_settings < 1:
            raise ValueError("n_settings must be >= 1")
        if not 0.0 <= self.flip_rate < 1.0 or self.flip_scale < 0:
            raise ValueError("flip_rate must be in [0, 1) and flip_scale non-negative")
        if self.n_unlabeled < 0:
            raise ValueError("n_unlabeled must be >= 0")
        if not (0 < self.train_fraction and 0 <= self.val_fraction and self.train_fraction + self.val_fraction <= 1.0):
            raise ValueError("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1")
        if self.coarse_map is not None:
            if len(self.coarse_map) != self.n_classes or min(self.coarse_map) < 0:
                raise ValueError("coarse_map needs one non-negative coarse id per class")
        return self


@dataclass
class PlantedTruth:
    """Generator parameters and latent assignments, for use as test oracles."""

    role_centroids: np.ndarray  # (G, F)
    class_offsets: np.ndarray  # (C, F)
    scene_centroids: np.ndarray  # (S, F), drive raw_scene_input
    background_centroids: np.ndarray  # (S, F)
    scene_profiles: np.ndarray  # (S, n_pseudo) affinity of each scene type to pseudo classes
    role_pair_class: Dict[Tuple[int, int], int]  # cross-role pairs a < b
    scene_class: List[int]  # class of same-role pairs, per scene type
    n_classes: int
    setting_centroids: np.ndarray  # (Z, F), drive the background when Z > 1
    flip_marker: np.ndarray  # (F,), added to the union feature of shifted pairs
    scene_of: Dict[str, int] = field(default_factory=dict)
    setting_of: Dict[str, int] = field(default_factory=dict)
    roles_of: Dict[str, List[int]] = field(default_factory=dict)
    dominant_of: Dict[str, Dict[Tuple[int, int], int]] = field(default_factory=dict)
    flipped_of: Dict[str, List[Tuple[int, int]]] = field(default_factory=dict)

    def dominant_class(self, role_a: int, role_b: int, scene: int, setting: int = 0) -> int:
        if role_a == role_b:
            return (self.scene_class[scene] + setting) % self.n_classes
        return self.role_pair_class[(min(role_a, role_b), max(role_a, role_b))]

    def class_distribution(self, config: SynthConfig) -> np.ndarray:
        """Marginal probability of each relation class for one labeled pair."""
        C, G, S, Z = config.n_classes, config.n_roles, config.n_scene_types, config.n_settings
        probs = np.zeros(C)
        other = (1.0 - config.relation_purity) / (C - 1)
        weight = 1.0 / (S * Z * G * G)
        for s in range(S):
            for z in range(Z):
                for a in range(G):
                    for b in range(G):
                        dom = self.dominant_class(a, b, s, z)
                        probs += weight * other
                        probs[dom] += weight * (config.relation_purity - other)
        # a shifted pair moves its mass from class c to c + 1
        return (1.0 - config.flip_rate) * probs + config.flip_rate * np.roll(probs, 1)


@dataclass
class SyntheticDataset:
    header: DatasetHeader
    splits: Dict[str, List[ImageRecord]]
    truth: PlantedTruth

    def dataset(self, split: str) -> Dataset:
        return Dataset(header=self.header, records=list(self.splits.get(split, [])))

    def all_records(self) -> List[ImageRecord]:
        return [r for records in self.splits.values() for r in records]


def _plant_parameters(config: SynthConfig) -> PlantedTruth:
    rng = make_rng(config.seed, "synth", "params")
    F, C, S, G = config.feature_dim, config.n_classes, config.n_scene_types, config.n_roles

    role_centroids = rng.normal(0.0, 1.0, size=(G, F))
    class_offsets = config.offset_scale * rng.normal(0.0, 1.0, size=(C, F))
    scene_centroids = config.scene_scale * np.abs(rng.normal(0.0, 1.0, size=(S, F)))
    background_centroids = config.scene_scale * rng.normal(0.0, 1.0, size=(S, F))

    # Each scene type favours a core of 5 pseudo classes; cores are disjoint
    # whenever there are enough pseudo classes to go round.
    profiles = np.zeros((S, config.n_pseudo_classes))
    shuffled = rng.permutation(config.n_pseudo_classes)
    for s in range(S):
        if TOP_K_SCENES * S <= config.n_pseudo_classes:
            core = shuffled[TOP_K_SCENES * s:TOP_K_SCENES * (s + 1)]
        else:
            core = rng.choice(config.n_pseudo_classes, size=TOP_K_SCENES, replace=False)
        profiles[s, core] = 3.0

    # Cross-role pairs cycle through the classes in a seeded order so every
    # class is reachable whenever there are enough role pairs.
    cross = [(a, b) for a in range(G) for b in range(a + 1, G)]
    order = rng.permutation(len(cross)) if cross else np.array([], dtype=np.int64)
    class_cycle = rng.permutation(C)
    role_pair_class = {cross[k]: int(class_cycle[rank % C]) for rank, k in enumerate(order)}
    scene_perm = rng.permutation(C)
    scene_class = [int(scene_perm[s % C]) for s in range(S)]

    extra = make_rng(config.seed, "synth", "settings")
    setting_centroids = config.scene_scale * extra.normal(0.0, 1.0, size=(config.n_settings, F))
    flip_marker = config.flip_scale * extra.normal(0.0, 1.0, size=F)

    return PlantedTruth(
        role_centroids=role_centroids,
        class_offsets=class_offsets,
        scene_centroids=scene_centroids,
        background_centroids=background_centroids,
        scene_profiles=profiles,
        role_pair_class=role_pair_class,
        scene_class=scene_class,
        n_classes=C,
        setting_centroids=setting_centroids,
        flip_marker=flip_marker,
    )


def _draw_label(rng: np.random.Generator, dominant: int, config: SynthConfig) -> int:
    if config.relation_purity >= 1.0 or rng.random() < config.relation_purity:
        return dominant
    others = [c for c in range(config.n_classes) if c != dominant]
    return int(others[rng.integers(len(others))])


def _make_image(
    image_id: str,
    rng: np.random.Generator,
    truth: PlantedTruth,
    config: SynthConfig,
    labeled: bool,
) -> ImageRecord:
    F = config.feature_dim
    noise = config.noise
    scene = int(rng.integers(config.n_scene_types))
    n = int(rng.integers(config.min_persons, config.max_persons + 1))
    roles = [int(g) for g in rng.integers(config.n_roles, size=n)]
    setting = int(rng.integers(config.n_settings)) if config.n_settings > 1 else 0

    persons = truth.role_centroids[roles] + noise * rng.normal(size=(n, F))

    corners = rng.uniform(0.0, 0.7, size=(n, 2))
    sizes = rng.uniform(0.1, 0.3, size=(n, 2))
    boxes = np.concatenate([corners, corners + sizes], axis=1)

    unions: Dict[Tuple[int, int], np.ndarray] = {}
    labels: Dict[Tuple[int, int], int] = {}
    dominants: Dict[Tuple[int, int], int] = {}
    flipped: List[Tuple[int, int]] = []
    for i, j in all_pairs(n):
        dominant = truth.dominant_class(roles[i], roles[j], scene, setting)
        cls = _draw_label(rng, dominant, config)
        union = 0.5 * (persons[i] + persons[j]) + truth.class_offsets[cls]
        if config.flip_rate > 0 and rng.random() < config.flip_rate:
            cls = (cls + 1) % config.n_classes
            union = union + truth.flip_marker
            flipped.append((i, j))
        unions[(i, j)] = union + noise * config.union_noise_factor * rng.normal(size=F)
        dominants[(i, j)] = dominant
        if labeled:
            labels[(i, j)] = cls

    centre = truth.setting_centroids[setting] if config.n_settings > 1 else truth.background_centroids[scene]
    background = centre + 2.0 * noise * rng.normal(size=F)
    raw_scene = np.maximum(truth.scene_centroids[scene] + noise * rng.normal(size=F), 0.0)

    scores = truth.scene_profiles[scene] + config.pseudo_label_noise * rng.normal(size=config.n_pseudo_classes)
    top5 = [int(c) for c in np.argsort(-scores, kind="stable")[:TOP_K_SCENES]]

    truth.scene_of[image_id] = scene
    truth.setting_of[image_id] = setting
    truth.roles_of[image_id] = roles
    truth.dominant_of[image_id] = dominants
    truth.flipped_of[image_id] = flipped
    return ImageRecord(
        image_id=image_id,
        n_persons=n,
        boxes=boxes,
        person_features=persons,
        union_features=unions,
        background_feature=background,
        raw_scene_input=raw_scene,
        pseudo_top5=top5,
        pair_labels=labels,
    )


def generate_synthetic(config: SynthConfig) -> SyntheticDataset:
    """Pure function of the config: same seed, same records, bit for bit."""
    truth = _plant_parameters(config)
    header = DatasetHeader(
        feature_dim=config.feature_dim,
        n_classes=config.n_classes,
        n_scene_types=config.n_scene_types,
        class_names=[f"relation_{c}" for c in range(config.n_classes)],
        coarse_map=config.coarse_map,
    )

    rng = make_rng(config.seed, "synth", "images")
    labeled = [_make_image(f"synth-{k:05d}", rng, truth, config, labeled=True) for k in range(config.n_images)]
    unlabeled_rng = make_rng(config.seed, "synth", "unlabeled")
    unlabeled = [
        _make_image(f"synth-u{k:05d}", unlabeled_rng, truth, config, labeled=False)
        for k in range(config.n_unlabeled)
    ]

    order = make_rng(config.seed, "synth", "split").permutation(config.n_images)
    n_train = int(round(config.train_fraction * config.n_images))
    n_val = int(round(config.val_fraction * config.n_images))
    n_val = min(n_val, config.n_images - n_train)
    splits = {
        "train": [labeled[k] for k in sorted(order[:n_train])],
        "val": [labeled[k] for k in sorted(order[n_train:n_train + n_val])],
        "test": [labeled[k] for k in sorted(order[n_train + n_val:])],
    }
    if unlabeled:
        splits[UNLABELED_SPLIT] = unlabeled

    for records in splits.values():
        for record in records:
            ensure_valid(record, feature_dim=config.feature_dim, n_classes=config.n_classes)

    logger.info(
        f"🧪 Generated {config.n_images} labeled + {config.n_unlabeled} unlabeled images "
        f"(F={config.feature_dim}, C={config.n_classes}, S={config.n_scene_types}, seed={config.seed})"
    )
    return SyntheticDataset(header=header, splits=splits, truth=truth)


def write_synthetic(synthetic: SyntheticDataset, directory: Union[str, Path]) -> List[Path]:
    """One `<split>.jsonl` file per split."""
    written = []
    for split, records in synthetic.splits.items():
        written.append(save_dataset(Dataset(header=synthetic.header, records=records), split_path(directory, split)))
    return written
