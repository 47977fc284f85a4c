"""
Detection metrics: IoU, per-class Average Precision with greedy one-to-one
matching, and mAP.

AP is the area under the precision/recall curve after making precision
monotone non-increasing (all-points interpolation).
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    from .dataset_tools import Manifest
except ImportError:
    from dataset_tools import Manifest

DEFAULT_IOU = 0.5
SWEEP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class Detection:
    image_id: int
    category: str
    bbox: list[float]
    score: float

    def validate(self) -> None:
        if len(self.bbox) != 4 or self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"detection on image {self.image_id} has invalid box {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection on image {self.image_id} has score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Detection":
        det = cls(
            image_id=int(data["image_id"]),
            category=str(data["category"]),
            bbox=[float(v) for v in data["bbox"]],
            score=float(data["score"]),
        )
        det.validate()
        return det


def load_detections(path: str | Path) -> list[Detection]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError(f"{path}: predictions file must hold a JSON list of detections")
    return [Detection.from_dict(item) for item in data]


def save_detections(detections: Sequence[Detection], path: str | Path) -> None:
    text = json.dumps([d.to_dict() for d in detections], indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two [x, y, w, h] boxes."""
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return inter / union


def match_detections(
    dets: Sequence[Detection],
    gts: dict[int, list[Sequence[float]]],
    iou_threshold: float = DEFAULT_IOU,
) -> list[bool]:
    """
    Greedy matching for one class. Returns TP flags in descending score order.

    Detections are visited by descending score (stable, so ties keep input
    order). Each claims the unmatched ground truth of its image with the
    highest IoU if that IoU reaches the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = {image_id: [False] * len(boxes) for image_id, boxes in gts.items()}
    flags = []
    for i in order:
        det = dets[i]
        boxes = gts.get(det.image_id, [])
        best, best_iou = -1, iou_threshold
        for g, box in enumerate(boxes):
            if taken[det.image_id][g]:
                continue
            overlap = iou(det.bbox, box)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            taken[det.image_id][best] = True
        flags.append(best >= 0)
    return flags


def ap_from_flags(flags: Sequence[bool], num_gt: int) -> float:
    """All-points interpolated AP from TP flags sorted by descending score."""
    if num_gt <= 0:
        raise ValueError("AP is undefined without ground truths")
    if not flags:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=np.float64))
    recall = tp / num_gt
    precision = tp / (tp + fp)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    dets: Sequence[Detection],
    gts: dict[int, list[Sequence[float]]],
    iou_threshold: float = DEFAULT_IOU,
) -> float | None:
    """
    AP for one class. ``gts`` maps image_id to that class's boxes.

    Returns None when the class has no ground truth at all.
    """
    num_gt = sum(len(boxes) for boxes in gts.values())
    if num_gt == 0:
        return None
    return ap_from_flags(match_detections(dets, gts, iou_threshold), num_gt)


def mean_ap(per_class_ap: dict[str, float | None]) -> float:
    defined = [ap for ap in per_class_ap.values() if ap is not None]
    if not defined:
        raise ValueError("mAP is undefined: no class has ground truths")
    return float(np.mean(defined))


@dataclass
class EvaluationReport:
    per_class_ap: dict[str, float | None]
    mAP: float
    counts: dict[str, dict[str, int]]
    iou_threshold: float
    undefined: list[str]
    sweep_mAP: float | None = None

    def to_dict(self) -> dict:
        out = {
            "per_class_AP": self.per_class_ap,
            "mAP": self.mAP,
            "counts": self.counts,
            "iou_threshold": self.iou_threshold,
            "undefined_classes": self.undefined,
        }
        if self.sweep_mAP is not None:
            out["mAP_50_95"] = self.sweep_mAP
        return out


def _group(manifest: Manifest, detections: Sequence[Detection], split: str | None):
    images = manifest.images if split is None else [img for img in manifest.images if img.split == split]
    ids = {img.id for img in images}
    gts: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for ann in manifest.annotations:
        if ann.image_id in ids:
            gts[ann.category][ann.image_id].append(ann.bbox)
    dets: dict[str, list[Detection]] = defaultdict(list)
    for det in detections:
        if det.image_id in ids:
            dets[det.category].append(det)
    return gts, dets


def evaluate(
    manifest: Manifest,
    detections: Sequence[Detection],
    split: str | None = None,
    iou_threshold: float = DEFAULT_IOU,
    sweep: bool = False,
) -> EvaluationReport:
    """
    Per-class AP and mAP of ``detections`` against the manifest's boxes.

    Only images of ``split`` (all images when None) take part. Classes with
    no ground truth are reported as undefined and left out of the mean.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold must be in (0, 1], got {iou_threshold}")
    gts, dets = _group(manifest, detections, split)
    categories = list(manifest.categories) + sorted(set(dets) - set(manifest.categories))

    def per_class(threshold: float) -> dict[str, float | None]:
        return {c: average_precision(dets.get(c, []), gts.get(c, {}), threshold) for c in categories}

    aps = per_class(iou_threshold)
    counts = {
        c: {
            "ground_truths": sum(len(v) for v in gts.get(c, {}).values()),
            "detections": len(dets.get(c, [])),
        }
        for c in categories
    }
    report = EvaluationReport(
        per_class_ap=aps,
        mAP=mean_ap(aps),
        counts=counts,
        iou_threshold=iou_threshold,
        undefined=[c for c, ap in aps.items() if ap is None],
    )
    if sweep:
        report.sweep_mAP = float(np.mean([mean_ap(per_class(float(t))) for t in SWEEP_THRESHOLDS]))
    return report


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression over [N, 4] xywh boxes; returns kept indices."""
    if len(boxes) == 0:
        return []
    x1, y1 = boxes[:, 0], boxes[:, 1]
    x2, y2 = x1 + boxes[:, 2], y1 + boxes[:, 3]
    areas = boxes[:, 2] * boxes[:, 3]
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        overlap = inter / np.maximum(areas[i] + areas[rest] - inter, 1e-12)
        order = rest[overlap <= iou_threshold]
    return keep
