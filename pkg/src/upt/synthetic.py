"""Synthetic HOI data whose interactions are recoverable from features and layout.

Each human interacts with at most one object. Action identity lives in
per-(action, role) Gaussian feature clusters and in an action-specific
spatial layout of the object relative to the human. Object features are
scaled by a per-image intensity, so how strongly an object signals an
interaction is only meaningful relative to the other objects in the same
image. Optional decoys (a second object of the right class, with weaker
feature evidence and a looser layout) are the hard negatives.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .boxes import center_to_corners, corners_to_center
from .detections import (
    CategoryTable,
    Detection,
    GroundTruthPair,
    ValidityTable,
    read_category_table,
    read_detections,
    read_ground_truth,
    read_validity_table,
    write_detections,
    write_ground_truth,
    write_json,
)

HUMAN = 0


@dataclass
class SyntheticSpec:
    num_images: int = 600
    num_actions: int = 3
    num_object_classes: int = 3
    feature_dim: int = 16
    min_humans: int = 1
    max_humans: int = 3
    max_background: int = 2
    positive_rate: float = 0.7
    decoy_rate: float = 0.5
    decoy_strength: float = 0.5
    intensity_min: float = 0.5
    intensity_max: float = 2.0
    feature_noise: float = 0.3
    cluster_scale: float = 1.0
    layout_noise: float = 0.05
    decoy_layout_noise: float = 0.3
    box_jitter: float = 0.02
    score_min: float = 0.85
    score_max: float = 1.0
    spurious_rate: float = 0.3
    class_means: Optional[List[List[float]]] = None

    def validate(self) -> None:
        if self.num_images < 1:
            raise ValueError("num_images must be positive")
        if self.num_actions < 1:
            raise ValueError("num_actions must be at least 1")
        if self.num_object_classes < 1:
            raise ValueError("num_object_classes must be at least 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 1 <= self.min_humans <= self.max_humans:
            raise ValueError("need 1 <= min_humans <= max_humans")
        for name in ("positive_rate", "decoy_rate", "spurious_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.score_min <= self.score_max <= 1.0:
            raise ValueError("need 0 < score_min <= score_max <= 1")
        if self.class_means is not None:
            shape = np.shape(self.class_means)
            expected = (2 * (self.num_actions + 1) + self.num_object_classes, self.feature_dim)
            if shape != expected:
                raise ValueError(f"class_means must have shape {expected}, got {shape}")


@dataclass
class Sample:
    image_id: str
    detections: List[Detection]
    ground_truth: List[GroundTruthPair]


@dataclass
class Dataset:
    samples: List[Sample]
    categories: CategoryTable
    validity: ValidityTable
    spec: Optional[SyntheticSpec] = None

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, n_first: int) -> Tuple["Dataset", "Dataset"]:
        a = Dataset(self.samples[:n_first], self.categories, self.validity, self.spec)
        b = Dataset(self.samples[n_first:], self.categories, self.validity, self.spec)
        return a, b

    @property
    def ground_truth(self) -> List[GroundTruthPair]:
        return [g for s in self.samples for g in s.ground_truth]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_detections(out / "detections.jsonl", [(s.image_id, s.detections) for s in self.samples])
        write_ground_truth(out / "ground_truth.jsonl", self.ground_truth)
        write_json(out / "categories.json", self.categories.to_json())
        write_json(out / "validity.json", self.validity.to_json())
        if self.spec is not None:
            write_json(out / "spec.json", asdict(self.spec))

    @classmethod
    def load(cls, data_dir, feature_dim: Optional[int] = None) -> "Dataset":
        d = Path(data_dir)
        images = read_detections(d / "detections.jsonl", feature_dim)
        gts = read_ground_truth(d / "ground_truth.jsonl") if (d / "ground_truth.jsonl").exists() else []
        by_image = {}
        for g in gts:
            by_image.setdefault(g.image_id, []).append(g)
        samples = [Sample(i, dets, by_image.get(i, [])) for i, dets in images]
        return cls(samples, read_category_table(d / "categories.json"), read_validity_table(d / "validity.json"))


def make_tables(spec: SyntheticSpec) -> Tuple[CategoryTable, ValidityTable]:
    """Class 0 is the person class; class c >= 1 admits actions (c-1) and c modulo A."""
    a = spec.num_actions
    names = {HUMAN: "person"}
    human = {HUMAN: True}
    valid = {HUMAN: frozenset()}
    for c in range(1, spec.num_object_classes + 1):
        names[c] = f"object{c}"
        human[c] = False
        valid[c] = frozenset({(c - 1) % a, c % a})
    actions = {k: f"action{k}" for k in range(a)}
    last = spec.num_object_classes
    rare = frozenset({(last, min(valid[last]))})
    return CategoryTable(names, human, actions, rare), ValidityTable(a, valid)


def _action_layouts(num_actions: int) -> np.ndarray:
    """Per action: object center offset (in human widths / heights) and size
    relative to the human box."""
    base = np.array(
        [
            [0.0, 0.45, 0.8, 0.4],
            [0.6, 0.0, 0.5, 0.3],
            [-1.6, -0.1, 0.9, 0.6],
        ]
    )
    if num_actions <= len(base):
        return base[:num_actions]
    extra = []
    for k in range(len(base), num_actions):
        angle = 2.0 * np.pi * k / num_actions
        extra.append([1.2 * np.cos(angle), 0.8 * np.sin(angle), 0.6, 0.5])
    return np.vstack([base, np.array(extra)])


def _clip_box(box: np.ndarray, min_side: float = 0.02) -> np.ndarray:
    c = np.clip(center_to_corners(box), 0.0, 1.0)
    c[2] = max(c[2], c[0] + min_side)
    c[3] = max(c[3], c[1] + min_side)
    if c[2] > 1.0:
        c[0], c[2] = 1.0 - min_side, 1.0
    if c[3] > 1.0:
        c[1], c[3] = 1.0 - min_side, 1.0
    return corners_to_center(c)


def gen_synthetic(spec: SyntheticSpec, seed: int = 0) -> Dataset:
    """Draw ``spec.num_images`` images of detections with ground truth."""
    spec.validate()
    rng = np.random.default_rng(seed)
    categories, validity = make_tables(spec)
    a_n, m = spec.num_actions, spec.feature_dim
    if spec.class_means is not None:
        means = np.asarray(spec.class_means, dtype=np.float64)
    else:
        means = spec.cluster_scale * rng.normal(size=(2 * (a_n + 1) + spec.num_object_classes, m))
    # rows: [action k, human role] k <= A (A = none), then object role, then class embeddings
    human_mean = means[: a_n + 1]
    object_mean = means[a_n + 1 : 2 * (a_n + 1)]
    class_emb = means[2 * (a_n + 1) :]
    layouts = _action_layouts(a_n)
    object_classes = list(range(1, spec.num_object_classes + 1))
    pairs_for_action = {
        a: [c for c in object_classes if a in validity.valid[c]] for a in range(a_n)
    }
    usable_actions = [a for a in range(a_n) if pairs_for_action[a]]

    def noise():
        return spec.feature_noise * rng.normal(size=m)

    def score():
        return float(rng.uniform(spec.score_min, spec.score_max))

    def jitter(box):
        return _clip_box(box + spec.box_jitter * rng.normal(size=4) * np.array([box[2], box[3], box[2], box[3]]))

    samples = []
    width = len(str(spec.num_images - 1))
    for k in range(spec.num_images):
        image_id = f"syn-{k:0{width}d}"
        g = rng.uniform(spec.intensity_min, spec.intensity_max)
        dets: List[Detection] = []
        gts: List[GroundTruthPair] = []
        for _ in range(rng.integers(spec.min_humans, spec.max_humans + 1)):
            hw, hh = rng.uniform(0.08, 0.16), rng.uniform(0.18, 0.3)
            hbox = _clip_box(np.array([rng.uniform(0.2, 0.8), rng.uniform(0.25, 0.75), hw, hh]))
            if usable_actions and rng.random() < spec.positive_rate:
                a = int(rng.choice(usable_actions))
                c = int(rng.choice(pairs_for_action[a]))
                lay = layouts[a]

                def place(noise_scale):
                    off = lay[:2] + noise_scale * rng.normal(size=2)
                    return _clip_box(
                        np.array(
                            [
                                hbox[0] + off[0] * hbox[2],
                                hbox[1] + off[1] * hbox[3],
                                lay[2] * hbox[2] * rng.uniform(0.9, 1.1),
                                lay[3] * hbox[3] * rng.uniform(0.9, 1.1),
                            ]
                        )
                    )

                obox = place(spec.layout_noise)
                dets.append(Detection(jitter(hbox), score(), HUMAN, human_mean[a] + noise()))
                dets.append(Detection(jitter(obox), score(), c, class_emb[c - 1] + g * object_mean[a] + noise()))
                gts.append(GroundTruthPair(image_id, hbox, obox, c, a))
                if rng.random() < spec.decoy_rate:
                    dbox = place(spec.decoy_layout_noise)
                    feat = class_emb[c - 1] + spec.decoy_strength * g * object_mean[a] + noise()
                    dets.append(Detection(jitter(dbox), score(), c, feat))
            else:
                dets.append(Detection(jitter(hbox), score(), HUMAN, human_mean[a_n] + noise()))
        for _ in range(rng.integers(0, spec.max_background + 1)):
            c = int(rng.choice(object_classes))
            box = _clip_box(np.array([rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2)]))
            dets.append(Detection(box, score(), c, class_emb[c - 1] + object_mean[a_n] + noise()))
        if rng.random() < spec.spurious_rate:
            c = int(rng.integers(0, spec.num_object_classes + 1))
            box = _clip_box(np.array([rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.2), rng.uniform(0.05, 0.2)]))
            feat = (human_mean[a_n] if c == HUMAN else class_emb[c - 1] + object_mean[a_n]) + noise()
            dets.append(Detection(box, float(rng.uniform(0.05, 0.35)), c, feat))
        order = rng.permutation(len(dets))
        samples.append(Sample(image_id, [dets[i] for i in order], gts))
    return Dataset(samples, categories, validity, spec)
