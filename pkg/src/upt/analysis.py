"""Diagnostics: score changes between model variants, attention interventions
and attention-map export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detections import TokenSet
from .head import AttentionEdit, InteractionHead
from .inference import PreprocessConfig, preprocess, score_pairs
from .synthetic import Dataset
from .training import assign_labels

BUCKETS = ("positive", "easy_negative", "hard_negative")


class PairSetMismatch(ValueError):
    """Two models were scored on different pair sets."""


@dataclass
class ScoredSet:
    """Final scores of every valid (pair, action) slot over a dataset."""

    keys: List[Tuple[str, int, int, int]]
    scores: np.ndarray
    labels: np.ndarray


def collect_scores(
    head: InteractionHead, dataset: Dataset, lam: float, pre: Optional[PreprocessConfig] = None, label_iou: float = 0.5
) -> ScoredSet:
    pre = pre or PreprocessConfig()
    keys, scores, labels = [], [], []
    for s in dataset.samples:
        tokens = preprocess(s.detections, dataset.categories, pre)
        if len(tokens) == 0:
            continue
        sc, out = score_pairs(head, tokens, dataset.validity, lam)
        if not out.pairs:
            continue
        jj = np.array([p.j for p in out.pairs])
        mask = dataset.validity.mask(tokens.class_ids[jj])
        targets = assign_labels(tokens, out.pairs, s.ground_truth, head.cfg.num_actions, label_iou)
        for k, a in zip(*np.nonzero(mask)):
            i, j = out.pairs[k]
            keys.append((s.image_id, int(i), int(j), int(a)))
            scores.append(sc[k, a])
            labels.append(targets[k, a])
    return ScoredSet(keys, np.array(scores), np.array(labels, dtype=bool))


@dataclass
class DeltaTable:
    counts: Dict[str, int]
    mean: Dict[str, float]
    median: Dict[str, float]
    reference: np.ndarray
    delta: np.ndarray
    bucket: np.ndarray
    keys: List[Tuple[str, int, int, int]]

    def write(self, table_path, scatter_path=None) -> None:
        with open(table_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["bucket", "count", "mean_delta", "median_delta"])
            for b in BUCKETS:
                w.writerow([b, self.counts[b], repr(self.mean[b]), repr(self.median[b])])
        if scatter_path is not None:
            with open(scatter_path, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, delimiter="\t", lineterminator="\n")
                w.writerow(["image_id", "human", "object", "action", "bucket", "reference_score", "delta"])
                for key, b, r, d in zip(self.keys, self.bucket, self.reference, self.delta):
                    w.writerow([*key, BUCKETS[b], repr(float(r)), repr(float(d))])


def score_deltas(
    model_a: InteractionHead,
    model_b: InteractionHead,
    dataset: Dataset,
    lam: float = 2.8,
    easy_threshold: float = 0.05,
    pre: Optional[PreprocessConfig] = None,
) -> DeltaTable:
    """Per-slot ``score_b - score_a`` bucketed into positives, easy negatives
    (reference score below ``easy_threshold``) and hard negatives."""
    a = collect_scores(model_a, dataset, lam, pre)
    b = collect_scores(model_b, dataset, lam, pre)
    if a.keys != b.keys:
        raise PairSetMismatch("models were scored on different (pair, action) sets")
    delta = b.scores - a.scores
    bucket = np.where(a.labels, 0, np.where(a.scores < easy_threshold, 1, 2))
    counts, means, medians = {}, {}, {}
    for k, name in enumerate(BUCKETS):
        sel = delta[bucket == k]
        counts[name] = int(sel.size)
        means[name] = float(sel.mean()) if sel.size else float("nan")
        medians[name] = float(np.median(sel)) if sel.size else float("nan")
    return DeltaTable(counts, means, medians, a.scores, delta, bucket, a.keys)


def mutual_attention_edits(head: InteractionHead, i: int, j: int) -> List[AttentionEdit]:
    """Cut attention between unary tokens i and j, both directions, in every
    cooperative layer."""
    edits = []
    for k in range(head.cfg.n_coop):
        edits.append(AttentionEdit(f"coop:{k}", i, j, "neg_inf"))
        edits.append(AttentionEdit(f"coop:{k}", j, i, "neg_inf"))
    return edits


def intervene_attention(
    head: InteractionHead,
    tokens: TokenSet,
    edits: Sequence[AttentionEdit],
    validity,
    lam: float = 2.8,
):
    """Scores without and with ``edits``; both (K, num_actions)."""
    baseline, _ = score_pairs(head, tokens, validity, lam)
    edited, out = score_pairs(head, tokens, validity, lam, edits)
    return baseline, edited, out


@dataclass
class InterventionRecord:
    image_id: str
    i: int
    j: int
    action: int
    baseline: float
    edited: float

    @property
    def delta(self) -> float:
        return self.edited - self.baseline


def intervention_sweep(
    head: InteractionHead,
    dataset: Dataset,
    lam: float = 2.8,
    pre: Optional[PreprocessConfig] = None,
    label_iou: float = 0.5,
) -> List[InterventionRecord]:
    """Cut mutual unary attention for every ground-truth-interactive (pair,
    action) slot of ``dataset``, one pair at a time, and record its score
    before and after."""
    pre = pre or PreprocessConfig()
    records = []
    for s in dataset.samples:
        tokens = preprocess(s.detections, dataset.categories, pre)
        if len(tokens) == 0:
            continue
        baseline, out = score_pairs(head, tokens, dataset.validity, lam)
        if not out.pairs:
            continue
        targets = assign_labels(tokens, out.pairs, s.ground_truth, head.cfg.num_actions, label_iou)
        for k in np.flatnonzero(targets.sum(axis=1) > 0):
            i, j = out.pairs[k]
            edited, _ = score_pairs(head, tokens, dataset.validity, lam, mutual_attention_edits(head, i, j))
            for a in np.flatnonzero(targets[k]):
                records.append(
                    InterventionRecord(s.image_id, int(i), int(j), int(a), float(baseline[k, a]), float(edited[k, a]))
                )
    return records


def attention_document(head: InteractionHead, tokens: TokenSet, image_id: str) -> dict:
    out = head(tokens)
    doc = {
        "image_id": image_id,
        "num_tokens": len(tokens),
        "tokens": [
            {"index": k, "class_id": d.class_id, "score": d.score, "box": [float(v) for v in d.box]}
            for k, d in enumerate(tokens.detections)
        ],
        "pairs": [[int(p.i), int(p.j)] for p in out.pairs],
        "unary": [],
        "pairwise": [],
    }
    for kind in ("unary", "pairwise"):
        for layer, w in enumerate(out.attn[kind]):
            for h in range(w.shape[0]):
                doc[kind].append({"layer": layer, "head": h, "weights": w[h].tolist()})
    return doc


def export_attention(head: InteractionHead, tokens: TokenSet, path, image_id: str = "") -> dict:
    """Write per-layer, per-head unary (n, n) and pairwise (K, K) attention
    matrices as JSON."""
    doc = attention_document(head, tokens, image_id)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return doc


def read_attention(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    for kind in ("unary", "pairwise"):
        for entry in doc[kind]:
            entry["weights"] = np.array(entry["weights"], dtype=np.float64)
    return doc
