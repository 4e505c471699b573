"""HOI detection mAP under the Default and Known Objects settings.

An interaction class is an (object class, action) combination. A prediction
matches a ground-truth pair of the same image and class when the smaller of
the human-box and object-box IoUs exceeds ``iou_min``; ground truth is
consumed greedily in descending score order.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou
from .detections import CategoryTable, GroundTruthPair, HoiPrediction, ValidityTable

InteractionClass = Tuple[int, int]


def interaction_key(cls: InteractionClass) -> str:
    return f"{cls[0]}:{cls[1]}"


def rank_order(predictions: Sequence[HoiPrediction]) -> List[int]:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(predictions)), key=lambda k: -predictions[k].score)


def match(
    predictions: Sequence[HoiPrediction],
    ground_truth: Sequence[GroundTruthPair],
    iou_min: float = 0.5,
) -> np.ndarray:
    """True-positive flags aligned with ``predictions``.

    Predictions are visited by descending score. Each one takes the unused
    ground-truth pair (same image and interaction class) with the highest
    min-IoU above ``iou_min``; without such a pair it is a false positive.
    """
    by_key: Dict[tuple, List[int]] = defaultdict(list)
    for g, gt in enumerate(ground_truth):
        by_key[(gt.image_id, gt.object_class, gt.action_id)].append(g)
    used = np.zeros(len(ground_truth), dtype=bool)
    flags = np.zeros(len(predictions), dtype=bool)
    for k in rank_order(predictions):
        p = predictions[k]
        cands = by_key.get((p.image_id, p.object_class, p.action_id), [])
        best, best_ov = -1, iou_min
        for g in cands:
            if used[g]:
                continue
            gt = ground_truth[g]
            ov = min(iou(p.human_box, gt.human_box), iou(p.object_box, gt.object_box))
            if ov > best_ov:
                best, best_ov = g, ov
        if best >= 0:
            used[best] = True
            flags[k] = True
    return flags


def average_precision(flags: Sequence[bool], num_gt: int) -> Optional[float]:
    """Area under the all-points interpolated precision-recall curve.

    ``flags`` must be in descending score order. Returns ``None`` when
    ``num_gt`` is 0: the class has no ground truth and is left out of means.
    """
    if num_gt <= 0:
        return None
    tp = np.asarray(flags, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def known_objects_filter(
    predictions: Sequence[HoiPrediction], ground_truth: Sequence[GroundTruthPair]
) -> List[HoiPrediction]:
    """Drop predictions whose object class is absent from the image's ground truth."""
    present: Dict[str, set] = defaultdict(set)
    for gt in ground_truth:
        present[gt.image_id].add(gt.object_class)
    return [p for p in predictions if p.object_class in present.get(p.image_id, ())]


def action_mask(predictions: Sequence[HoiPrediction], validity: ValidityTable) -> List[HoiPrediction]:
    """Remove predictions whose action is invalid for their object class
    (equivalently, zero their score and prune them from the ranking)."""
    return [p for p in predictions if p.action_id in validity.actions_for(p.object_class)]


@dataclass
class EvalReport:
    setting: str
    per_class: Dict[str, Optional[float]]
    num_gt: Dict[str, int]
    full: float
    rare: Optional[float]
    non_rare: Optional[float]

    def to_json(self) -> dict:
        return {
            "setting": self.setting,
            "mAP_full": self.full,
            "mAP_rare": self.rare,
            "mAP_non_rare": self.non_rare,
            "num_classes_evaluated": sum(v is not None for v in self.per_class.values()),
            "per_class_ap": self.per_class,
            "per_class_num_gt": self.num_gt,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def evaluate(
    predictions: Sequence[HoiPrediction],
    ground_truth: Sequence[GroundTruthPair],
    validity: ValidityTable,
    categories: Optional[CategoryTable] = None,
    setting: str = "default",
    iou_min: float = 0.5,
) -> EvalReport:
    """Per-interaction-class AP and the Full / Rare / Non-rare means."""
    if setting not in ("default", "known_objects"):
        raise ValueError(f"unknown setting {setting!r}")
    preds = action_mask(predictions, validity)
    if setting == "known_objects":
        preds = known_objects_filter(preds, ground_truth)

    classes = sorted((o, a) for o, acts in validity.valid.items() for a in acts)
    pred_groups: Dict[InteractionClass, List[HoiPrediction]] = defaultdict(list)
    for p in preds:
        pred_groups[(p.object_class, p.action_id)].append(p)
    gt_groups: Dict[InteractionClass, List[GroundTruthPair]] = defaultdict(list)
    for g in ground_truth:
        gt_groups[(g.object_class, g.action_id)].append(g)

    per_class: Dict[str, Optional[float]] = {}
    num_gt: Dict[str, int] = {}
    for cls in classes:
        group = pred_groups.get(cls, [])
        gts = gt_groups.get(cls, [])
        flags = match(group, gts, iou_min)
        order = rank_order(group)
        key = interaction_key(cls)
        per_class[key] = average_precision(flags[order], len(gts))
        num_gt[key] = len(gts)

    rare = categories.rare if categories is not None else frozenset()
    evaluated = {c: per_class[interaction_key(c)] for c in classes if per_class[interaction_key(c)] is not None}
    full = _mean(list(evaluated.values()))
    rare_vals = [v for c, v in evaluated.items() if c in rare]
    non_rare_vals = [v for c, v in evaluated.items() if c not in rare]
    return EvalReport(
        setting,
        per_class,
        num_gt,
        full if full is not None else 0.0,
        _mean(rare_vals),
        _mean(non_rare_vals),
    )
