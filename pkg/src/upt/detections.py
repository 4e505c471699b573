"""First-stage detection files, filtering and human-object pair enumeration.

Detection file: UTF-8, one JSON object per line::

    {"image_id": "img-0001",
     "detections": [{"box": [cx, cy, w, h], "score": 0.93, "class_id": 0,
                     "feature": [...m floats...]}, ...]}

A record may carry ``"box_format": "xyxy"`` to supply corner boxes instead;
they are converted to center-size on ingestion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .boxes import corners_to_center, iou

PathLike = Union[str, Path]


class SchemaError(ValueError):
    """A record in an input file violates its schema."""

    def __init__(self, path, line: int, field_name: str, message: str):
        self.path = str(path)
        self.line = line
        self.field = field_name
        super().__init__(f"{self.path}:{line}: field '{field_name}': {message}")


@dataclass
class Detection:
    box: np.ndarray
    score: float
    class_id: int
    feature: np.ndarray

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        self.feature = np.asarray(self.feature, dtype=np.float64)
        self.score = float(self.score)
        self.class_id = int(self.class_id)


class PairIndex(NamedTuple):
    i: int
    j: int


@dataclass
class CategoryTable:
    """Object categories, which of them are human, the action vocabulary and
    the rare interaction list used for the Rare / Non-rare split."""

    names: Dict[int, str]
    human: Dict[int, bool]
    action_names: Dict[int, str] = field(default_factory=dict)
    rare: frozenset = frozenset()

    def is_human(self, class_id: int) -> bool:
        try:
            return self.human[class_id]
        except KeyError:
            raise KeyError(f"class_id {class_id} is not in the category table") from None

    @property
    def human_ids(self) -> frozenset:
        return frozenset(c for c, h in self.human.items() if h)

    def to_json(self) -> dict:
        return {
            "classes": [
                {"id": c, "name": self.names[c], "is_human": self.human[c]} for c in sorted(self.names)
            ],
            "actions": [{"id": a, "name": self.action_names[a]} for a in sorted(self.action_names)],
            "rare_interactions": [list(x) for x in sorted(self.rare)],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CategoryTable":
        names = {int(c["id"]): str(c["name"]) for c in obj["classes"]}
        human = {int(c["id"]): bool(c.get("is_human", False)) for c in obj["classes"]}
        actions = {int(a["id"]): str(a["name"]) for a in obj.get("actions", [])}
        rare = frozenset((int(o), int(a)) for o, a in obj.get("rare_interactions", []))
        return cls(names, human, actions, rare)


@dataclass
class ValidityTable:
    """Valid action ids per object class."""

    num_actions: int
    valid: Dict[int, frozenset]

    def actions_for(self, class_id: int) -> frozenset:
        try:
            return self.valid[class_id]
        except KeyError:
            raise KeyError(f"object class {class_id} is not in the action-validity table") from None

    def mask(self, class_ids: Sequence[int]) -> np.ndarray:
        """(len(class_ids), num_actions) 0/1 matrix of valid slots."""
        out = np.zeros((len(class_ids), self.num_actions))
        for r, c in enumerate(class_ids):
            out[r, sorted(self.actions_for(int(c)))] = 1.0
        return out

    def to_json(self) -> dict:
        return {
            "num_actions": self.num_actions,
            "valid": {str(c): sorted(a) for c, a in sorted(self.valid.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ValidityTable":
        n = int(obj["num_actions"])
        valid = {int(c): frozenset(int(a) for a in acts) for c, acts in obj["valid"].items()}
        for c, acts in valid.items():
            bad = [a for a in acts if not 0 <= a < n]
            if bad:
                raise ValueError(f"class {c}: action ids {bad} outside [0, {n})")
        return cls(n, valid)


@dataclass
class TokenSet:
    """Detections that survive filtering, humans first, each group by
    descending score."""

    detections: List[Detection]
    human_indices: List[int]
    object_indices: List[int]

    def __len__(self) -> int:
        return len(self.detections)

    @property
    def boxes(self) -> np.ndarray:
        return np.stack([d.box for d in self.detections]) if self.detections else np.zeros((0, 4))

    @property
    def features(self) -> np.ndarray:
        return np.stack([d.feature for d in self.detections])

    @property
    def scores(self) -> np.ndarray:
        return np.array([d.score for d in self.detections])

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([d.class_id for d in self.detections], dtype=np.int64)

    @property
    def is_human(self) -> np.ndarray:
        mask = np.zeros(len(self.detections), dtype=bool)
        mask[self.human_indices] = True
        return mask


# filtering ----------------------------------------------------------------


def _by_score(dets: Sequence[Detection]) -> List[Detection]:
    return sorted(dets, key=lambda d: -d.score)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> List[Detection]:
    """Greedy per-class suppression; survivors are returned by descending score."""
    kept: List[Detection] = []
    for d in _by_score(dets):
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def _sample_group(dets: List[Detection], score_min: float, min_keep: int, max_keep: int, backfill: bool):
    ranked = _by_score(dets)
    above = [d for d in ranked if d.score >= score_min][:max_keep]
    if backfill and len(above) < min_keep:
        below = [d for d in ranked if d.score < score_min]
        above += below[: min_keep - len(above)]
    return above


def filter_and_sample(
    dets: Sequence[Detection],
    human_ids: Iterable[int],
    score_min: float = 0.2,
    min_keep: int = 3,
    max_keep: int = 15,
    backfill: bool = True,
) -> TokenSet:
    """Threshold and cap humans and non-humans independently.

    Each group keeps its detections scoring at least ``score_min``, up to
    ``max_keep`` by descending score. A group left with fewer than
    ``min_keep`` is topped up with its best below-threshold detections.
    """
    human_ids = frozenset(human_ids)
    humans = [d for d in dets if d.class_id in human_ids]
    objects = [d for d in dets if d.class_id not in human_ids]
    kept_h = _sample_group(humans, score_min, min_keep, max_keep, backfill)
    kept_o = _sample_group(objects, score_min, min_keep, max_keep, backfill)
    nh = len(kept_h)
    return TokenSet(kept_h + kept_o, list(range(nh)), list(range(nh, nh + len(kept_o))))


def enumerate_pairs(tokens: TokenSet) -> List[PairIndex]:
    """Ordered pairs (i, j), i != j, whose first token is human."""
    n = len(tokens)
    return [PairIndex(i, j) for i in tokens.human_indices for j in range(n) if j != i]


# file I/O -------------------------------------------------------------------


def _require(rec: dict, key: str, path, line: int):
    if key not in rec:
        raise SchemaError(path, line, key, "missing")
    return rec[key]


def _float_list(value, path, line: int, name: str, length: Optional[int] = None) -> List[float]:
    if not isinstance(value, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise SchemaError(path, line, name, "expected an array of numbers")
    if length is not None and len(value) != length:
        raise SchemaError(path, line, name, f"expected {length} values, got {len(value)}")
    if not all(math.isfinite(v) for v in value):
        raise SchemaError(path, line, name, "non-finite value")
    return [float(v) for v in value]


def _parse_box(value, path, line: int, name: str, fmt: str = "cxcywh") -> np.ndarray:
    box = np.array(_float_list(value, path, line, name, 4))
    if fmt == "xyxy":
        box = corners_to_center(box)
    elif fmt != "cxcywh":
        raise SchemaError(path, line, "box_format", f"unknown format {fmt!r}")
    if np.any(box < 0.0) or np.any(box > 1.0):
        raise SchemaError(path, line, name, f"components must lie in [0, 1], got {box.tolist()}")
    if box[2] <= 0.0 or box[3] <= 0.0:
        raise SchemaError(path, line, name, "width and height must be positive")
    return box


def _iter_json_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(path, line_no, "<record>", f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise SchemaError(path, line_no, "<record>", "expected a JSON object")
            yield line_no, rec


def read_detections(
    path: PathLike, feature_dim: Optional[int] = None
) -> List[Tuple[str, List[Detection]]]:
    """Parse a detection file into ``(image_id, detections)`` per line."""
    images = []
    for line_no, rec in _iter_json_lines(path):
        image_id = _require(rec, "image_id", path, line_no)
        if not isinstance(image_id, str):
            raise SchemaError(path, line_no, "image_id", "expected a string")
        fmt = rec.get("box_format", "cxcywh")
        raw_dets = _require(rec, "detections", path, line_no)
        if not isinstance(raw_dets, list):
            raise SchemaError(path, line_no, "detections", "expected an array")
        dets = []
        for k, d in enumerate(raw_dets):
            prefix = f"detections[{k}]"
            if not isinstance(d, dict):
                raise SchemaError(path, line_no, prefix, "expected an object")
            for key in ("box", "score", "class_id", "feature"):
                if key not in d:
                    raise SchemaError(path, line_no, f"{prefix}.{key}", "missing")
            box = _parse_box(d["box"], path, line_no, f"{prefix}.box", fmt)
            score = d["score"]
            if not isinstance(score, (int, float)) or isinstance(score, bool) or not 0.0 <= score <= 1.0:
                raise SchemaError(path, line_no, f"{prefix}.score", "expected a number in [0, 1]")
            cls = d["class_id"]
            if not isinstance(cls, int) or isinstance(cls, bool) or cls < 0:
                raise SchemaError(path, line_no, f"{prefix}.class_id", "expected a non-negative integer")
            feat = _float_list(d["feature"], path, line_no, f"{prefix}.feature", feature_dim)
            dets.append(Detection(box, float(score), cls, np.array(feat)))
        images.append((image_id, dets))
    return images


def _floats(a) -> List[float]:
    return [float(v) for v in np.asarray(a).ravel()]


def write_detections(path: PathLike, images: Iterable[Tuple[str, Sequence[Detection]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, dets in images:
            rec = {
                "image_id": image_id,
                "detections": [
                    {
                        "box": _floats(d.box),
                        "score": float(d.score),
                        "class_id": int(d.class_id),
                        "feature": _floats(d.feature),
                    }
                    for d in dets
                ],
            }
            fh.write(json.dumps(rec) + "\n")


@dataclass
class HoiPrediction:
    """One scored (human, object, action) triplet as written to prediction files."""

    image_id: str
    human_box: np.ndarray
    object_box: np.ndarray
    object_class: int
    action_id: int
    score: float

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "human_box": _floats(self.human_box),
            "object_box": _floats(self.object_box),
            "object_class": int(self.object_class),
            "action_id": int(self.action_id),
            "score": float(self.score),
        }


@dataclass
class GroundTruthPair:
    image_id: str
    human_box: np.ndarray
    object_box: np.ndarray
    object_class: int
    action_id: int

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "human_box": _floats(self.human_box),
            "object_box": _floats(self.object_box),
            "object_class": int(self.object_class),
            "action_id": int(self.action_id),
        }


def _write_records(path: PathLike, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def write_predictions(path: PathLike, predictions: Iterable[HoiPrediction]) -> None:
    _write_records(path, predictions)


def write_ground_truth(path: PathLike, pairs: Iterable[GroundTruthPair]) -> None:
    _write_records(path, pairs)


def _read_pair_common(rec, path, line_no):
    image_id = _require(rec, "image_id", path, line_no)
    if not isinstance(image_id, str):
        raise SchemaError(path, line_no, "image_id", "expected a string")
    hb = _parse_box(_require(rec, "human_box", path, line_no), path, line_no, "human_box")
    ob = _parse_box(_require(rec, "object_box", path, line_no), path, line_no, "object_box")
    out = [image_id, hb, ob]
    for key in ("object_class", "action_id"):
        v = _require(rec, key, path, line_no)
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise SchemaError(path, line_no, key, "expected a non-negative integer")
        out.append(v)
    return out


def read_predictions(path: PathLike) -> List[HoiPrediction]:
    preds = []
    for line_no, rec in _iter_json_lines(path):
        common = _read_pair_common(rec, path, line_no)
        score = _require(rec, "score", path, line_no)
        if not isinstance(score, (int, float)) or isinstance(score, bool) or not math.isfinite(score):
            raise SchemaError(path, line_no, "score", "expected a finite number")
        preds.append(HoiPrediction(*common, float(score)))
    return preds


def read_ground_truth(path: PathLike) -> List[GroundTruthPair]:
    return [GroundTruthPair(*_read_pair_common(rec, path, n)) for n, rec in _iter_json_lines(path)]


def read_category_table(path: PathLike) -> CategoryTable:
    with open(path, "r", encoding="utf-8") as fh:
        return CategoryTable.from_json(json.load(fh))


def read_validity_table(path: PathLike) -> ValidityTable:
    with open(path, "r", encoding="utf-8") as fh:
        return ValidityTable.from_json(json.load(fh))


def write_json(path: PathLike, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
