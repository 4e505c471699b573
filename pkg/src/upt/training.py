"""Training loop for the interaction head."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .boxes import iou
from .detections import GroundTruthPair, PairIndex, TokenSet, enumerate_pairs
from .evaluation import EvalReport, evaluate
from .head import InteractionHead
from .inference import PreprocessConfig, predictions_from_scores, preprocess, score_pairs
from .losses import LOG_EPS, focal_loss, recover_logit
from .nn import AdamW
from .synthetic import Dataset

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 20
    lr_drop_epoch: int = 10
    lr_drop_factor: float = 10.0
    batch_size: int = 16
    lambda_train: float = 1.0
    lambda_infer: float = 2.8
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    weight_decay: float = 1e-4
    label_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.lambda_infer < 1.0:
            raise ValueError("lambda_infer must be at least 1")
        if self.focal_gamma < 0.0:
            raise ValueError("focal_gamma must be non-negative")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule; ``epoch`` counts from 0."""
    return cfg.lr / cfg.lr_drop_factor if epoch >= cfg.lr_drop_epoch else cfg.lr


def assign_labels(
    tokens: TokenSet,
    pairs: Sequence[PairIndex],
    ground_truth: Sequence[GroundTruthPair],
    num_actions: int,
    iou_min: float = 0.5,
) -> np.ndarray:
    """(K, num_actions) 0/1 targets: a pair is positive for an action when a
    ground-truth pair with that action and the pair's object class overlaps
    both of its boxes with IoU above ``iou_min``."""
    targets = np.zeros((len(pairs), num_actions))
    for k, (i, j) in enumerate(pairs):
        hi, oj = tokens.detections[i], tokens.detections[j]
        for g in ground_truth:
            if g.object_class != oj.class_id:
                continue
            if min(iou(hi.box, g.human_box), iou(oj.box, g.object_box)) > iou_min:
                targets[k, g.action_id] = 1.0
    return targets


@dataclass
class TrainItem:
    image_id: str
    tokens: TokenSet
    pairs: List[PairIndex]
    targets: np.ndarray
    mask: np.ndarray
    prior: np.ndarray


def prepare(
    dataset: Dataset, head: InteractionHead, pre: PreprocessConfig, cfg: TrainConfig
) -> List[TrainItem]:
    items = []
    for s in dataset.samples:
        tokens = preprocess(s.detections, dataset.categories, pre)
        if len(tokens) == 0:
            continue
        pairs = enumerate_pairs(tokens)
        if not pairs:
            continue
        ii = np.array([p.i for p in pairs])
        jj = np.array([p.j for p in pairs])
        targets = assign_labels(tokens, pairs, s.ground_truth, head.cfg.num_actions, cfg.label_iou)
        mask = dataset.validity.mask(tokens.class_ids[jj])
        prior = (tokens.scores[ii] * tokens.scores[jj]) ** cfg.lambda_train
        items.append(TrainItem(s.image_id, tokens, pairs, targets * mask, mask, prior[:, None]))
    return items


def item_loss(head: InteractionHead, item: TrainItem, cfg: TrainConfig):
    out = head(item.tokens)
    logits = recover_logit(item.prior, out.logits, LOG_EPS)
    return focal_loss(logits, item.targets, cfg.focal_alpha, cfg.focal_gamma, item.mask, reduction="sum")


def predict_dataset(
    head: InteractionHead, dataset: Dataset, lam: float, pre: Optional[PreprocessConfig] = None
):
    pre = pre or PreprocessConfig()
    preds = []
    for s in dataset.samples:
        tokens = preprocess(s.detections, dataset.categories, pre)
        if len(tokens) == 0:
            continue
        scores, out = score_pairs(head, tokens, dataset.validity, lam)
        preds.extend(predictions_from_scores(s.image_id, tokens, out.pairs, scores))
    return preds


def toy_map(head: InteractionHead, dataset: Dataset, lam: float, pre: Optional[PreprocessConfig] = None) -> EvalReport:
    preds = predict_dataset(head, dataset, lam, pre)
    return evaluate(preds, dataset.ground_truth, dataset.validity, dataset.categories)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    toy_map: float

    def to_json(self) -> dict:
        return asdict(self)


def train(
    dataset: Dataset,
    head: InteractionHead,
    cfg: TrainConfig,
    eval_set: Optional[Dataset] = None,
    pre: Optional[PreprocessConfig] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> List[EpochMetrics]:
    """Fit ``head`` in place with AdamW and the step learning-rate schedule.

    Each epoch reports the mean batch loss and the toy mAP (Default
    setting, inference exponent) on ``eval_set``, or on the training set
    when none is given. Runs are deterministic for a fixed seed.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    pre = pre or PreprocessConfig()
    items = prepare(dataset, head, pre, cfg)
    if not items:
        raise ValueError("no training image yields a human-object pair")
    rng = np.random.default_rng(cfg.seed)
    params = head.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history: List[EpochMetrics] = []
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(cfg, epoch)
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[k] for k in order[start : start + cfg.batch_size]]
            norm = max(float(sum(it.targets.sum() for it in batch)), 1.0)
            opt.zero_grad()
            batch_loss = 0.0
            for it in batch:
                loss = item_loss(head, it, cfg) * (1.0 / norm)
                if not math.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"non-finite loss {loss.item()} at epoch {epoch}, image {it.image_id}, lr {opt.lr}"
                    )
                loss.backward()
                batch_loss += loss.item()
            opt.step()
            losses.append(batch_loss)
        report = toy_map(head, eval_set if eval_set is not None else dataset, cfg.lambda_infer, pre)
        metrics = EpochMetrics(epoch, opt.lr, float(np.mean(losses)), report.full)
        logger.info("epoch %d lr %.1e loss %.6f toy mAP %.4f", epoch, opt.lr, metrics.loss, metrics.toy_map)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return history


def write_metrics(path, history: Sequence[EpochMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h in history:
            fh.write(json.dumps(h.to_json()) + "\n")
