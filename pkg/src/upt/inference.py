"""Turning detections into scored human-object-action predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .detections import (
    CategoryTable,
    Detection,
    HoiPrediction,
    PairIndex,
    TokenSet,
    ValidityTable,
    filter_and_sample,
    nms,
)
from .head import AttentionEdit, HeadOutput, InteractionHead
from .losses import compose_scores


@dataclass
class PreprocessConfig:
    nms_iou: float = 0.5
    score_min: float = 0.2
    min_keep: int = 3
    max_keep: int = 15
    backfill: bool = True


def preprocess(dets: Sequence[Detection], categories: CategoryTable, cfg: PreprocessConfig) -> TokenSet:
    kept = nms(dets, cfg.nms_iou)
    return filter_and_sample(
        kept, categories.human_ids, cfg.score_min, cfg.min_keep, cfg.max_keep, cfg.backfill
    )


def score_pairs(
    head: InteractionHead,
    tokens: TokenSet,
    validity: ValidityTable,
    lam: float,
    edits: Sequence[AttentionEdit] = (),
) -> Tuple[np.ndarray, HeadOutput]:
    """(K, num_actions) final scores, zeroed for invalid action-object slots."""
    out = head(tokens, edits)
    if not out.pairs:
        return np.zeros((0, head.cfg.num_actions)), out
    ii = np.array([p.i for p in out.pairs])
    jj = np.array([p.j for p in out.pairs])
    s = tokens.scores
    scores = compose_scores(s[ii], s[jj], out.logits.data, lam)
    scores = scores * validity.mask(tokens.class_ids[jj])
    return scores, out


def predictions_from_scores(
    image_id: str, tokens: TokenSet, pairs: Sequence[PairIndex], scores: np.ndarray
) -> List[HoiPrediction]:
    preds = []
    for k, (i, j) in enumerate(pairs):
        for a in np.flatnonzero(scores[k] > 0.0):
            preds.append(
                HoiPrediction(
                    image_id,
                    tokens.detections[i].box,
                    tokens.detections[j].box,
                    tokens.detections[j].class_id,
                    int(a),
                    float(scores[k, a]),
                )
            )
    return preds


def predict_image(
    head: InteractionHead,
    image_id: str,
    dets: Sequence[Detection],
    categories: CategoryTable,
    validity: ValidityTable,
    lam: float = 2.8,
    pre: Optional[PreprocessConfig] = None,
) -> List[HoiPrediction]:
    tokens = preprocess(dets, categories, pre or PreprocessConfig())
    if len(tokens) == 0:
        return []
    scores, out = score_pairs(head, tokens, validity, lam)
    return predictions_from_scores(image_id, tokens, out.pairs, scores)
