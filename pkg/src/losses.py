"""
Training objectives: Scale-Invariant Refurbishment loss on depth, a toy
detection loss, and their weighted sum.

SIRLoss blends the pseudo depth label with the current prediction,
    label = alpha * y* + (1 - alpha) * y,
and scores the log-ratio d = log(y) - log(label) with the scale-invariant form
    L = mean(d^2) - mean(d)^2.
The blended label is a constant for the gradient.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.typing import NDArray

try:
    from .tensor_core import GradCase, Tensor, register_gradcase, sigmoid
except ImportError:
    from tensor_core import GradCase, Tensor, register_gradcase, sigmoid

DEPTH_LOSSES = ("sir", "mse", "smooth_l1")

# An object whose longer side is below ASSIGN_FACTOR * stride goes to that level
ASSIGN_FACTOR = 4


@dataclass
class RefurbishConfig:
    alpha: float = 0.7
    loss_weight: float = 0.2

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.loss_weight < 0:
            raise ValueError(f"loss_weight must be >= 0, got {self.loss_weight}")

    @classmethod
    def from_dict(cls, data: dict) -> "RefurbishConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown refurbish config keys: {', '.join(sorted(unknown))}")
        config = cls(**{k: float(v) for k, v in data.items()})
        config.validate()
        return config

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Depth losses
# ---------------------------------------------------------------------------

def _check_depth_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape}, label {target.shape}")
    if pred.size == 0:
        raise ValueError("depth loss needs at least one pixel")
    for name, x in (("prediction", pred), ("label", target)):
        if not np.all(x > 0):
            idx = tuple(int(v) for v in np.argwhere(~(x > 0))[0])
            raise ValueError(f"nonpositive {name} depth {x[idx]} at {idx}")


def refurbished_label(pred: Tensor, pseudo: Tensor, alpha: float) -> Tensor:
    return alpha * pseudo + (1.0 - alpha) * pred


def scale_invariant_loss(pred: Tensor, label: Tensor) -> tuple[float, Tensor]:
    """Scale-invariant log loss against a fixed label; returns (loss, d loss / d pred)."""
    _check_depth_pair(pred, label)
    d = np.log(pred) - np.log(label)
    n = d.size
    mean_d = np.mean(d)
    loss = float(np.mean(d * d) - mean_d * mean_d)
    grad = (2.0 / n) * (d - mean_d) / pred
    return max(loss, 0.0), grad


def sir_loss(pred: Tensor, pseudo: Tensor, alpha: float = 0.7) -> tuple[float, Tensor]:
    """
    Scale-Invariant Refurbishment loss.

    Args:
        pred: predicted depths y (strictly positive)
        pseudo: pseudo-label depths y* (strictly positive, same shape)
        alpha: confidence in the pseudo label

    Returns:
        (loss, gradient w.r.t. pred with the refurbished label held fixed)
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    _check_depth_pair(pred, pseudo)
    return scale_invariant_loss(pred, refurbished_label(pred, pseudo, alpha))


def mse_log_loss(pred: Tensor, pseudo: Tensor) -> tuple[float, Tensor]:
    _check_depth_pair(pred, pseudo)
    d = np.log(pred) - np.log(pseudo)
    return float(np.mean(d * d)), (2.0 / d.size) * d / pred


def smooth_l1_log_loss(pred: Tensor, pseudo: Tensor, beta: float = 1.0) -> tuple[float, Tensor]:
    _check_depth_pair(pred, pseudo)
    d = np.log(pred) - np.log(pseudo)
    small = np.abs(d) < beta
    per_pixel = np.where(small, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    slope = np.where(small, d / beta, np.sign(d))
    return float(np.mean(per_pixel)), slope / (d.size * pred)


def depth_loss(kind: str, pred: Tensor, pseudo: Tensor, alpha: float = 0.7) -> tuple[float, Tensor]:
    if kind == "sir":
        return sir_loss(pred, pseudo, alpha)
    if kind == "mse":
        return mse_log_loss(pred, pseudo)
    if kind == "smooth_l1":
        return smooth_l1_log_loss(pred, pseudo)
    raise ValueError(f"unknown depth loss {kind!r} (expected one of {', '.join(DEPTH_LOSSES)})")


def depth_loss_pyramid(
    preds: dict[int, Tensor], targets: dict[int, Tensor], kind: str = "sir", alpha: float = 0.7
) -> tuple[float, dict[int, Tensor]]:
    """Equal-weight mean of the per-level depth loss; gradients are scaled to match."""
    if set(preds) != set(targets):
        raise ValueError(f"level mismatch: predictions {sorted(preds)}, targets {sorted(targets)}")
    if not preds:
        raise ValueError("depth loss needs at least one pyramid level")
    scale = 1.0 / len(preds)
    total = 0.0
    grads = {}
    for n in sorted(preds):
        value, grad = depth_loss(kind, preds[n], targets[n], alpha)
        total += value
        grads[n] = grad * scale
    return total * scale, grads


# ---------------------------------------------------------------------------
# Detection loss
# ---------------------------------------------------------------------------

@dataclass
class DetectionTargets:
    cls: dict[int, Tensor]                    # [num_classes, H, W], 0/1
    box: dict[int, Tensor]                    # [4, H, W] (tx, ty, tw, th)
    positive: dict[int, NDArray[np.bool_]]    # [H, W]

    @property
    def num_positive(self) -> int:
        return int(sum(mask.sum() for mask in self.positive.values()))


def assign_level(bbox, levels) -> int:
    """Finest level whose stride * ASSIGN_FACTOR exceeds the longer box side."""
    longest = max(bbox[2], bbox[3])
    levels = sorted(levels)
    for n in levels[:-1]:
        if longest < ASSIGN_FACTOR * 2 ** n:
            return n
    return levels[-1]


def encode_targets(
    objects: list[tuple[list[float], int]],
    level_shapes: dict[int, tuple[int, int]],
    num_classes: int,
) -> DetectionTargets:
    """
    Center-cell assignment of [x, y, w, h] boxes to pyramid cells.

    Each object claims the cell containing its center on its assigned level.
    When two objects land on the same cell, the first one keeps it.
    """
    cls = {n: np.zeros((num_classes, h, w)) for n, (h, w) in level_shapes.items()}
    box = {n: np.zeros((4, h, w)) for n, (h, w) in level_shapes.items()}
    positive = {n: np.zeros((h, w), dtype=bool) for n, (h, w) in level_shapes.items()}
    for bbox, label in objects:
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            raise ValueError(f"box {bbox} has nonpositive size")
        if not 0 <= label < num_classes:
            raise ValueError(f"class index {label} outside [0, {num_classes})")
        n = assign_level(bbox, level_shapes)
        stride = 2 ** n
        rows, cols = level_shapes[n]
        cx, cy = x + w / 2.0, y + h / 2.0
        j = min(max(int(cx // stride), 0), cols - 1)
        i = min(max(int(cy // stride), 0), rows - 1)
        if positive[n][i, j]:
            continue
        positive[n][i, j] = True
        cls[n][label, i, j] = 1.0
        box[n][:, i, j] = (
            cx / stride - (j + 0.5),
            cy / stride - (i + 0.5),
            math.log(w / stride),
            math.log(h / stride),
        )
    return DetectionTargets(cls=cls, box=box, positive=positive)


def decode_box(offsets, level: int, row: int, col: int) -> list[float]:
    """Inverse of the target encoding: cell offsets back to [x, y, w, h]."""
    stride = 2 ** level
    tx, ty, tw, th = (float(v) for v in offsets)
    cx = (col + 0.5 + tx) * stride
    cy = (row + 0.5 + ty) * stride
    w = math.exp(min(tw, 20.0)) * stride
    h = math.exp(min(th, 20.0)) * stride
    return [cx - w / 2.0, cy - h / 2.0, w, h]


@dataclass
class DetectionLoss:
    value: float
    cls_term: float
    box_term: float
    grad_cls: dict[int, Tensor]
    grad_box: dict[int, Tensor]


def detection_loss(
    class_logits: dict[int, Tensor], box_preds: dict[int, Tensor], targets: DetectionTargets
) -> DetectionLoss:
    """
    Mean sigmoid BCE over every (level, class, cell) plus L1 on the box
    offsets of positive cells, averaged over the number of positives.
    """
    if set(class_logits) != set(targets.cls) or set(box_preds) != set(targets.box):
        raise ValueError("prediction levels do not match the target layout")
    count = sum(x.size for x in class_logits.values())
    num_pos = targets.num_positive
    cls_term = 0.0
    box_term = 0.0
    grad_cls, grad_box = {}, {}
    for n in sorted(class_logits):
        logits, target = class_logits[n], targets.cls[n]
        if logits.shape != target.shape:
            raise ValueError(f"level {n}: logits {logits.shape}, targets {target.shape}")
        cls_term += float(np.sum(np.logaddexp(0.0, logits) - logits * target))
        grad_cls[n] = (sigmoid(logits) - target) / count

        pred, box_target = box_preds[n], targets.box[n]
        if pred.shape != box_target.shape:
            raise ValueError(f"level {n}: box predictions {pred.shape}, targets {box_target.shape}")
        if num_pos:
            mask = targets.positive[n][None]
            diff = (pred - box_target) * mask
            box_term += float(np.sum(np.abs(diff)))
            grad_box[n] = np.sign(diff) / num_pos
        else:
            grad_box[n] = np.zeros_like(pred)
    cls_term /= count
    if num_pos:
        box_term /= num_pos
    return DetectionLoss(
        value=cls_term + box_term,
        cls_term=cls_term,
        box_term=box_term,
        grad_cls=grad_cls,
        grad_box=grad_box,
    )


def total_loss(det: float, dep: float, loss_weight: float) -> float:
    if not (math.isfinite(det) and math.isfinite(dep)):
        raise ValueError(f"loss terms must be finite, got detection {det}, depth {dep}")
    if loss_weight < 0:
        raise ValueError(f"loss_weight must be >= 0, got {loss_weight}")
    return det + loss_weight * dep


# ---------------------------------------------------------------------------
# Gradient cases
# ---------------------------------------------------------------------------

def _sir_case() -> GradCase:
    def build(rng, size=6, alpha=0.7):
        pred = np.exp(rng.normal(0.0, 0.5, size))
        pseudo = np.exp(rng.normal(0.0, 0.5, size))
        return {"pred": pred, "label": refurbished_label(pred, pseudo, alpha)}

    def loss(t):
        return scale_invariant_loss(t["pred"], t["label"])[0]

    def grads(t):
        return {"pred": scale_invariant_loss(t["pred"], t["label"])[1]}

    return GradCase(build, loss, grads)


def _detection_case() -> GradCase:
    def build(rng, num_classes=3, size=8):
        shapes = {2: (size // 4, size // 4), 3: (size // 8, size // 8)}
        objects = [([1.0, 1.0, 6.0, 5.0], 0), ([0.0, 0.0, 17.0, 12.0], 2)]
        targets = encode_targets(objects, shapes, num_classes)
        t = {}
        for n, (h, w) in shapes.items():
            t[f"logits.{n}"] = rng.standard_normal((num_classes, h, w))
            t[f"box.{n}"] = rng.standard_normal((4, h, w))
            t[f"cls_target.{n}"] = targets.cls[n]
            t[f"box_target.{n}"] = targets.box[n]
            t[f"positive.{n}"] = targets.positive[n].astype(np.float64)
        return t

    def split(t):
        levels = sorted(int(k.split(".")[1]) for k in t if k.startswith("logits."))
        targets = DetectionTargets(
            cls={n: t[f"cls_target.{n}"] for n in levels},
            box={n: t[f"box_target.{n}"] for n in levels},
            positive={n: t[f"positive.{n}"] > 0.5 for n in levels},
        )
        return (
            {n: t[f"logits.{n}"] for n in levels},
            {n: t[f"box.{n}"] for n in levels},
            targets,
        )

    def loss(t):
        return detection_loss(*split(t)).value

    def grads(t):
        result = detection_loss(*split(t))
        out = {f"logits.{n}": g for n, g in result.grad_cls.items()}
        out.update({f"box.{n}": g for n, g in result.grad_box.items()})
        return out

    return GradCase(build, loss, grads)


register_gradcase("sir_loss", _sir_case())
register_gradcase("detection_loss", _detection_case())
