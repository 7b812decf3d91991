"""Tracking task loss: classification + L1 + generalised-IoU terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import HeadOutput
from .errors import DataError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class TaskLoss:
    total: Tensor
    cls: Tensor
    l1: Tensor
    giou: Tensor

    def breakdown(self) -> dict[str, float]:
        return {"total": self.total.item(), "cls": self.cls.item(),
                "l1": self.l1.item(), "giou": self.giou.item()}


def normalise_box(box, search_size: int) -> np.ndarray:
    """Pixel (x, y, w, h) -> normalised (cx, cy, w, h); rejects zero-area boxes."""
    x, y, w, h = (float(v) for v in box)
    if not (w > 0 and h > 0):
        raise DataError(f"degenerate ground-truth box {tuple(box)}")
    s = float(search_size)
    return np.array([(x + w / 2) / s, (y + h / 2) / s, w / s, h / s])


def gaussian_target(centre: np.ndarray, grid: int, sigma: float = 1.0) -> np.ndarray:
    """Normalised Gaussian over grid cells around a normalised (cx, cy); 1 x grid^2."""
    gx, gy = centre[0] * grid, centre[1] * grid
    idx = np.arange(grid) + 0.5
    xx, yy = np.meshgrid(idx, idx)
    g = np.exp(-((xx - gx) ** 2 + (yy - gy) ** 2) / (2 * sigma ** 2))
    return (g / g.sum()).reshape(1, grid * grid)


def _corners(box: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx, cy, w, h = box[0], box[1], box[2], box[3]
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def giou(pred: Tensor, target: Tensor) -> Tensor:
    """Generalised IoU of two (cx, cy, w, h) boxes, differentiable in both."""
    px1, py1, px2, py2 = _corners(pred)
    tx1, ty1, tx2, ty2 = _corners(target)
    iw = T.relu(T.minimum(px2, tx2) - T.maximum(px1, tx1))
    ih = T.relu(T.minimum(py2, ty2) - T.maximum(py1, ty1))
    inter = iw * ih
    union = pred[2] * pred[3] + target[2] * target[3] - inter
    iou = inter / union
    cw = T.maximum(px2, tx2) - T.minimum(px1, tx1)
    ch = T.maximum(py2, ty2) - T.minimum(py1, ty1)
    hull = cw * ch
    return iou - (hull - union) / hull


def task_loss(out: HeadOutput, gt_box, weights: LossWeights = LossWeights(),
              sigma: float = 1.0) -> TaskLoss:
    """Weighted tracking loss of a head output against a pixel ground-truth box.

    The classification term is the cross-entropy of the score map against a
    Gaussian target around the ground-truth centre, less the target's own
    entropy (i.e. KL(target || prediction)).  The overlap term is
    ``1 - GIoU`` in [0, 2].  All terms are non-negative.
    """
    gt = normalise_box(gt_box, out.search_size)
    target_map = gaussian_target(gt, out.grid, sigma)
    # cross-entropy minus the target's entropy: same gradient, zero at a perfect map
    entropy = -float(np.sum(target_map * np.log(np.maximum(target_map, T.KL_EPS))))
    cls = T.cross_entropy_rows(out.score_logits, target_map) - entropy
    gt_t = Tensor._wrap(gt)
    l1 = T.mean(T.tabs(out.box - gt_t))
    overlap = 1.0 - giou(out.box, gt_t)
    total = weights.cls * cls + weights.l1 * l1 + weights.giou * overlap
    return TaskLoss(total, cls, l1, overlap)
